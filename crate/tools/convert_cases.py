#!/usr/bin/env python3
"""Convert the bundled MATPOWER-style IEEE tables into the toolkit case format.

Column mapping (MATPOWER -> case format):
  bus:    Pd, Qd, Gs, Bs are divided by baseMVA (MW/MVAr -> p.u.);
          Va converted from degrees to radians; Vset for PV/slack buses
          comes from the generator table's Vg.
  branch: r, x, b are already p.u.; ratio 0 means no transformer (tap 1.0);
          angle converted from degrees to radians.
  gen:    Pmax divided by baseMVA.

Also runs an independent Newton-Raphson check on each emitted case so a
transcription error cannot slip through unsolved.
"""
import math
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))
from ieee_data import BASE_MVA, BUS57, GEN57, BRANCH57, BUS118, GEN118, BRANCH118


def fmt(v):
    # 9 significant digits, plain or scientific as needed
    return f"{v:.9g}"


def build_ybus(n, branches, shunts):
    y = np.zeros((n, n), dtype=complex)
    for (f, t, r, x, b, tap, shift) in branches:
        ys = 1.0 / complex(r, x)
        bc = 1j * b / 2.0
        tapc = (tap if tap != 0.0 else 1.0) * np.exp(1j * shift)
        y[f, f] += (ys + bc) / (tapc * np.conj(tapc))
        y[t, t] += ys + bc
        y[f, t] += -ys / np.conj(tapc)
        y[t, f] += -ys / tapc
    for i, (gs, bs) in enumerate(shunts):
        y[i, i] += complex(gs, bs)
    return y


def newton_solve(y, bus_type, p_spec, q_spec, v_set, th_set, tol=1e-8, max_iter=30):
    n = y.shape[0]
    g, b = y.real, y.imag
    pq = [i for i in range(n) if bus_type[i] == 1]
    pv = [i for i in range(n) if bus_type[i] == 2]
    sl = [i for i in range(n) if bus_type[i] == 3]
    assert len(sl) == 1
    v = np.array([v_set[i] if bus_type[i] != 1 else 1.0 for i in range(n)])
    th = np.array([th_set[sl[0]]] * n)

    def injections(v, th):
        vv = v[:, None] * v[None, :]
        dth = th[:, None] - th[None, :]
        p = np.sum(vv * (g * np.cos(dth) + b * np.sin(dth)), axis=1)
        q = np.sum(vv * (g * np.sin(dth) - b * np.cos(dth)), axis=1)
        return p, q

    pvpq = pv + pq
    for it in range(max_iter):
        p, q = injections(v, th)
        mis = np.concatenate([
            np.array([p[i] - p_spec[i] for i in pvpq]),
            np.array([q[i] - q_spec[i] for i in pq]),
        ])
        if np.max(np.abs(mis)) < tol:
            return v, th, it, np.max(np.abs(mis))
        # numerical Jacobian via analytic formulas
        m = len(pvpq) + len(pq)
        jac = np.zeros((m, m))
        for a, i in enumerate(pvpq):
            for c, k in enumerate(pvpq):
                if i == k:
                    jac[a, c] = -q[i] - b[i, i] * v[i] ** 2
                else:
                    jac[a, c] = v[i] * v[k] * (
                        g[i, k] * math.sin(th[i] - th[k]) - b[i, k] * math.cos(th[i] - th[k]))
            for c, k in enumerate(pq):
                cc = len(pvpq) + c
                if i == k:
                    jac[a, cc] = p[i] / v[i] + g[i, i] * v[i]
                else:
                    jac[a, cc] = v[i] * (
                        g[i, k] * math.cos(th[i] - th[k]) + b[i, k] * math.sin(th[i] - th[k]))
        for aa, i in enumerate(pq):
            a = len(pvpq) + aa
            for c, k in enumerate(pvpq):
                if i == k:
                    jac[a, c] = p[i] - g[i, i] * v[i] ** 2
                else:
                    jac[a, c] = -v[i] * v[k] * (
                        g[i, k] * math.cos(th[i] - th[k]) + b[i, k] * math.sin(th[i] - th[k]))
            for c, k in enumerate(pq):
                cc = len(pvpq) + c
                if i == k:
                    jac[a, cc] = q[i] / v[i] - b[i, i] * v[i]
                else:
                    jac[a, cc] = v[i] * (
                        g[i, k] * math.sin(th[i] - th[k]) - b[i, k] * math.cos(th[i] - th[k]))
        dx = np.linalg.solve(jac, -mis)
        for c, k in enumerate(pvpq):
            th[k] += dx[c]
        for c, k in enumerate(pq):
            v[k] += dx[len(pvpq) + c]
    raise RuntimeError(f"no convergence, |mis|={np.max(np.abs(mis)):.3e}")


def convert(name, bus, gen, branch):
    n = len(bus)
    gen_by_bus = {}
    for (gb, pmax, vg) in gen:
        if gb in gen_by_bus:
            gen_by_bus[gb] = (gen_by_bus[gb][0] + pmax, gen_by_bus[gb][1])
        else:
            gen_by_bus[gb] = (pmax, vg)

    lines = [f"# IEEE {n}-bus test system, converted to p.u. on {fmt(BASE_MVA)} MVA base",
             f"BASE_MVA {fmt(BASE_MVA)}", "", "BUS"]
    bus_type = {}
    for (i, typ, pd, qd, gs, bs, va) in bus:
        bus_type[i] = typ
        vset = gen_by_bus[i][1] if typ != 1 else 1.0
        lines.append("  ".join([
            str(i), str(typ), fmt(pd / BASE_MVA), fmt(qd / BASE_MVA),
            fmt(gs / BASE_MVA), fmt(bs / BASE_MVA), fmt(vset),
            fmt(math.radians(va)),
        ]))
    lines.append("")
    lines.append("BRANCH")
    for (f, t, r, x, b, ratio, angle) in branch:
        lines.append("  ".join([
            str(f), str(t), fmt(r), fmt(x), fmt(b), fmt(ratio if ratio != 0.0 else 1.0),
            fmt(math.radians(angle)),
        ]))
    lines.append("")
    lines.append("GEN")
    for (gb, pmax, _vg) in gen:
        lines.append("  ".join([str(gb), fmt(pmax / BASE_MVA)]))
    lines.append("")
    text = "\n".join(lines)

    # sanity solve at base case: dispatch generation proportional to capacity
    idx = {bi: k for k, (bi, *_rest) in enumerate(bus)}
    branches = [(idx[f], idx[t], r, x, b, ratio, math.radians(a))
                for (f, t, r, x, b, ratio, a) in branch]
    shunts = [(gs / BASE_MVA, bs / BASE_MVA) for (_i, _t, _pd, _qd, gs, bs, _va) in bus]
    y = build_ybus(n, branches, shunts)
    types = [t for (_i, t, *_r) in bus]
    pd = np.array([b_[2] / BASE_MVA for b_ in bus])
    qd = np.array([b_[3] / BASE_MVA for b_ in bus])
    total_pd = pd.sum()
    pmax = np.zeros(n)
    vset = np.ones(n)
    for gb, (pm, vg) in gen_by_bus.items():
        pmax[idx[gb]] = pm / BASE_MVA
        vset[idx[gb]] = vg
    dispatch = pmax / pmax.sum() * total_pd
    p_spec = dispatch - pd
    q_spec = -qd
    th_set = np.zeros(n)
    for (i, typ, *_r, va) in [(b_[0], b_[1], b_[6]) for b_ in bus]:
        pass
    th_set_full = np.array([math.radians(b_[6]) for b_ in bus])
    v, th, iters, mis = newton_solve(y, types, p_spec, q_spec, vset, th_set_full)
    print(f"{name}: N={n} branches={len(branch)} gens={len(gen)} "
          f"total_Pd={total_pd:.4f} p.u.  NR iters={iters} |mis|={mis:.2e} "
          f"Vmin={v.min():.4f} Vmax={v.max():.4f}")
    return text


def main():
    out_dir = os.path.join(os.path.dirname(__file__), "..", "cases")
    os.makedirs(out_dir, exist_ok=True)
    for name, bus, gen, branch in [
        ("ieee57", BUS57, GEN57, BRANCH57),
        ("ieee118", BUS118, GEN118, BRANCH118),
    ]:
        text = convert(name, bus, gen, branch)
        with open(os.path.join(out_dir, f"{name}.case"), "w") as f:
            f.write(text)


if __name__ == "__main__":
    main()
