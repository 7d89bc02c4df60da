#!/usr/bin/env python3
"""Independent oracle computations; prints golden constants to freeze in tests.

Everything here is computed from first principles (complex arithmetic,
term-by-term sums, reference optimizer update), not via the Rust code paths
it validates. "Random" inputs are formula-generated so tests can rebuild
the exact same inputs.
"""
import math
import numpy as np

np.set_printoptions(precision=17)


def header(s):
    print(f"\n==== {s} ====")


# --- 3-bus Ybus: lines (0,1),(1,2) with r=0.01, x=0.1, no charging, tap 1 ----
header("3-bus Ybus (r=0.01, x=0.1 on (0,1),(1,2))")
ys = 1.0 / complex(0.01, 0.1)
Y = np.zeros((3, 3), dtype=complex)
for (f, t) in [(0, 1), (1, 2)]:
    Y[f, f] += ys
    Y[t, t] += ys
    Y[f, t] -= ys
    Y[t, f] -= ys
for i in range(3):
    for k in range(3):
        if Y[i, k] != 0:
            print(f"Y[{i}][{k}] = {Y[i,k].real!r} + {Y[i,k].imag!r}j")

# --- 3-bus polar injections at a fixed state --------------------------------
header("3-bus injections, v=(1.0,0.98,0.97), th=(0,-0.02,-0.05)")
G, B = Y.real, Y.imag
v = np.array([1.0, 0.98, 0.97])
th = np.array([0.0, -0.02, -0.05])


def injections(G, B, v, th):
    n = len(v)
    p = np.zeros(n)
    q = np.zeros(n)
    for i in range(n):
        for k in range(n):
            dth = th[i] - th[k]
            p[i] += v[i] * v[k] * (G[i, k] * math.cos(dth) + B[i, k] * math.sin(dth))
            q[i] += v[i] * v[k] * (G[i, k] * math.sin(dth) - B[i, k] * math.cos(dth))
    return p, q


p, q = injections(G, B, v, th)
print("p =", repr(p))
print("q =", repr(q))

# --- mismatch after perturbing theta_1 by +0.01 (bus0 slack, bus1/2 PQ) -----
header("3-bus mismatch after th[1] += 0.01 (spec frozen at the state above)")
p_spec, q_spec = p.copy(), q.copy()
th2 = th.copy()
th2[1] += 0.01
p2, q2 = injections(G, B, v, th2)
# ordering: P at PQ (1,2), then Q at PQ (1,2); slack bus 0 excluded
mis = np.array([p2[1] - p_spec[1], p2[2] - p_spec[2], q2[1] - q_spec[1], q2[2] - q_spec[2]])
print("mismatch =", repr(mis))

# --- dense layer forward: fixed 3x4 tanh layer ------------------------------
header("dense forward 3x4 tanh")
W = np.array([[math.sin(1.3 * (4 * i + j) + 0.7) * 0.5 for j in range(4)] for i in range(3)])
bvec = np.array([0.1, -0.2, 0.3])
x = np.array([0.4, -0.3, 0.25, -0.1])
out = np.tanh(W @ x + bvec)
print("W row-major:", repr(W.ravel()))
print("out =", repr(out))

# --- adam reference trace ---------------------------------------------------
header("adam 10 steps, lr=1e-3, betas=(0.9,0.999), eps=1e-8")
params = np.array([1.0, -2.0])
grads = np.array([0.1, -0.3])
m = np.zeros(2)
vv = np.zeros(2)
for t in range(1, 11):
    m = 0.9 * m + 0.1 * grads
    vv = 0.999 * vv + 0.001 * grads ** 2
    mh = m / (1 - 0.9 ** t)
    vh = vv / (1 - 0.999 ** t)
    params = params - 1e-3 * mh / (np.sqrt(vh) + 1e-8)
print("params after 10 =", repr(params))

# --- metrics on a formula-generated 100x10 instance -------------------------
header("metrics 100x10: pred[i,j]=sin(0.1*(10i+j)), tgt=pred+0.05*cos(0.07*(10i+j))")
idx = np.arange(1000).reshape(100, 10).astype(float)
pred = np.sin(0.1 * idx)
tgt = pred + 0.05 * np.cos(0.07 * idx)
err = pred - tgt
rmse = math.sqrt(np.mean(err ** 2))
mae = np.mean(np.abs(err))
nz = tgt != 0.0
mape = np.abs(err[nz] / tgt[nz]) * 100.0
print("rmse =", repr(rmse))
print("mae =", repr(mae))
print("n_excluded =", int((~nz).sum()))
s = np.sort(mape)
for qq in [0.5, 0.9]:
    # quantile by nearest-rank on the sorted sample: ceil(q*n)-th value
    k = max(1, math.ceil(qq * len(s)))
    print(f"mape q{qq} (nearest-rank) =", repr(s[k - 1]))

# --- BNN forward golden -----------------------------------------------------
header("BNN forward, N=4, formula params")
N = 4
mu = np.array([1.0 + 0.02 * math.sin(i + 0.3) for i in range(N)])
om = np.array([0.05 * math.cos(2.0 * i - 0.1) for i in range(N)])
WG = np.array([[math.sin(0.9 * (N * i + k) + 0.2) for k in range(N)] for i in range(N)])
WB = np.array([[math.cos(1.1 * (N * i + k) - 0.4) for k in range(N)] for i in range(N)])
bp = np.array([0.01 * i for i in range(N)])
bq = np.array([-0.02 * i for i in range(N)])
O1 = np.outer(mu, mu) + np.outer(om, om)
O2 = np.outer(om, mu) - np.outer(mu, om)
S1 = O1 * WG + O2 * WB
S2 = O2 * WG - O1 * WB
yp = S1.sum(axis=1) + bp
yq = S2.sum(axis=1) + bq
print("yp =", repr(yp))
print("yq =", repr(yq))

# --- IEEE57 adjacency off-diagonal count (branch-list scan) -----------------
header("IEEE57 adjacency off-diagonal nonzeros")
import os, sys
sys.path.insert(0, os.path.dirname(__file__))
from ieee_data import BRANCH57
pairs = set()
for (f, t, *_r) in BRANCH57:
    pairs.add((min(f, t), max(f, t)))
print("distinct connected pairs =", len(pairs), "-> off-diag nonzeros =", 2 * len(pairs))

# --- scale_to_capacity arithmetic (IEEE57, uniform multiplier 1.0) ----------
header("IEEE57 demand target: 0.9 * total Pmax")
from ieee_data import GEN57
total_pmax = sum(g[1] for g in GEN57) / 100.0
print("total Pmax p.u. =", repr(total_pmax), " 0.9x =", repr(0.9 * total_pmax))
