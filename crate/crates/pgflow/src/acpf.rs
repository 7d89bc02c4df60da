//! AC power-flow equations in polar and rectangular coordinates, the mismatch
//! system, and the Newton-Raphson solver used as the ground-truth oracle for
//! the learned solvers.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::case_model::{AdmittanceMatrix, BusSystem, BusType};
use crate::linalg::{self, fmt_sig9, LinalgError};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("no convergence after {iterations} iterations, |mismatch| = {mismatch_norm:.3e}")]
    NonConvergence { iterations: usize, mismatch_norm: f64 },
    #[error("singular Jacobian: {0}")]
    SingularJacobian(#[from] LinalgError),
}

/// Voltage magnitudes and angles.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarState {
    pub v: DVector<f64>,
    pub theta: DVector<f64>,
}

/// Real and imaginary voltage components: `mu_i = v_i cos(theta_i)`,
/// `omega_i = v_i sin(theta_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RectState {
    pub mu: DVector<f64>,
    pub omega: DVector<f64>,
}

impl RectState {
    pub fn from_polar(s: &PolarState) -> Self {
        RectState {
            mu: s.v.zip_map(&s.theta, |v, t| v * t.cos()),
            omega: s.v.zip_map(&s.theta, |v, t| v * t.sin()),
        }
    }
}

impl PolarState {
    pub fn from_rect(s: &RectState) -> Self {
        PolarState {
            v: s.mu.zip_map(&s.omega, |m, w| (m * m + w * w).sqrt()),
            theta: s.mu.zip_map(&s.omega, |m, w| w.atan2(m)),
        }
    }
}

/// Real and reactive power injections at every bus.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVector {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

/// Per-bus knowns following bus type: (p, q) at PQ, (p, v) at PV,
/// (v, theta) at the slack bus.
#[derive(Debug, Clone)]
pub struct PFSpec {
    pub bus_types: Vec<BusType>,
    /// Specified real injection; meaningful at PQ and PV buses.
    pub p_spec: DVector<f64>,
    /// Specified reactive injection; meaningful at PQ buses.
    pub q_spec: DVector<f64>,
    /// Voltage setpoint; meaningful at PV and Slack buses.
    pub v_spec: DVector<f64>,
    /// Slack angle setpoint in radians.
    pub theta_slack: f64,
}

impl PFSpec {
    pub fn n(&self) -> usize {
        self.bus_types.len()
    }

    pub fn slack(&self) -> usize {
        self.bus_types
            .iter()
            .position(|&t| t == BusType::Slack)
            .expect("spec has a slack bus")
    }

    /// Buses with a real-power equation: PQ and PV, in bus order.
    pub fn p_equation_buses(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.bus_types[i] != BusType::Slack).collect()
    }

    /// Buses with a reactive-power equation: PQ, in bus order.
    pub fn q_equation_buses(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.bus_types[i] == BusType::Pq).collect()
    }

    pub fn n_unknowns(&self) -> usize {
        self.p_equation_buses().len() + self.q_equation_buses().len()
    }

    /// Builds a spec whose exact solution is `state`: injections are taken
    /// from evaluating the polar ACPF equations at `state`.
    pub fn from_state(bus_types: Vec<BusType>, state: &PolarState, y: &AdmittanceMatrix) -> Self {
        let inj = injections_polar(state, y);
        let slack = bus_types
            .iter()
            .position(|&t| t == BusType::Slack)
            .expect("state spec needs a slack bus");
        PFSpec {
            bus_types,
            p_spec: inj.p,
            q_spec: inj.q,
            v_spec: state.v.clone(),
            theta_slack: state.theta[slack],
        }
    }

    /// Base-case operating point of a parsed system: total generation equal
    /// to total demand, dispatched across generators proportional to their
    /// capacity share; the slack bus absorbs losses.
    pub fn base_case(sys: &BusSystem) -> Self {
        let n = sys.n_buses();
        let total_demand: f64 = sys.buses.iter().map(|b| b.p_demand).sum();
        let total_capacity: f64 = sys.gen_capacity.iter().sum();
        let mut p_spec = DVector::zeros(n);
        let mut q_spec = DVector::zeros(n);
        let mut v_spec = DVector::from_element(n, 1.0);
        for (i, b) in sys.buses.iter().enumerate() {
            let dispatch = sys.gen_capacity[i] / total_capacity * total_demand;
            p_spec[i] = dispatch - b.p_demand;
            q_spec[i] = -b.q_demand;
            if b.bus_type != BusType::Pq {
                v_spec[i] = b.v_set;
            }
        }
        let slack = sys.slack();
        PFSpec {
            bus_types: sys.buses.iter().map(|b| b.bus_type).collect(),
            p_spec,
            q_spec,
            v_spec,
            theta_slack: sys.buses[slack].theta_set,
        }
    }
}

/// Solver output; `rect` is the exact coordinate transform of `state` and
/// `final_mismatch_norm <= tol` is asserted on the return path.
#[derive(Debug, Clone)]
pub struct PFSolution {
    pub state: PolarState,
    pub rect: RectState,
    pub inj: InjectionVector,
    pub iterations: usize,
    pub final_mismatch_norm: f64,
}

impl PFSolution {
    /// One CSV row per bus: `bus, v, theta, mu, omega, p, q`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bus,v,theta,mu,omega,p,q\n");
        for i in 0..self.state.v.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                i + 1,
                fmt_sig9(self.state.v[i]),
                fmt_sig9(self.state.theta[i]),
                fmt_sig9(self.rect.mu[i]),
                fmt_sig9(self.rect.omega[i]),
                fmt_sig9(self.inj.p[i]),
                fmt_sig9(self.inj.q[i]),
            ));
        }
        out
    }
}

/// Polar-coordinate power injections:
///
/// ```text
/// p_i = sum_k v_i v_k (G_ik cos(theta_i - theta_k) + B_ik sin(theta_i - theta_k))
/// q_i = sum_k v_i v_k (G_ik sin(theta_i - theta_k) - B_ik cos(theta_i - theta_k))
/// ```
pub fn injections_polar(state: &PolarState, y: &AdmittanceMatrix) -> InjectionVector {
    let n = y.n();
    assert_eq!(state.v.len(), n, "state/admittance dimension mismatch");
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for &(i, k) in &y.pattern {
        let dth = state.theta[i] - state.theta[k];
        let (sin, cos) = dth.sin_cos();
        let vv = state.v[i] * state.v[k];
        p[i] += vv * (y.g[(i, k)] * cos + y.b[(i, k)] * sin);
        q[i] += vv * (y.g[(i, k)] * sin - y.b[(i, k)] * cos);
    }
    InjectionVector { p, q }
}

/// Rectangular-coordinate power injections (second-order polynomials in the
/// voltage components):
///
/// ```text
/// p_i = sum_k G_ik (mu_i mu_k + omega_i omega_k) + B_ik (omega_i mu_k - mu_i omega_k)
/// q_i = sum_k G_ik (omega_i mu_k - mu_i omega_k) - B_ik (mu_i mu_k + omega_i omega_k)
/// ```
pub fn injections_rect(state: &RectState, y: &AdmittanceMatrix) -> InjectionVector {
    let n = y.n();
    assert_eq!(state.mu.len(), n, "state/admittance dimension mismatch");
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for &(i, k) in &y.pattern {
        let sym = state.mu[i] * state.mu[k] + state.omega[i] * state.omega[k];
        let skew = state.omega[i] * state.mu[k] - state.mu[i] * state.omega[k];
        p[i] += y.g[(i, k)] * sym + y.b[(i, k)] * skew;
        q[i] += y.g[(i, k)] * skew - y.b[(i, k)] * sym;
    }
    InjectionVector { p, q }
}

/// Power mismatch vector: real-power residuals at PQ and PV buses in bus
/// order, then reactive residuals at PQ buses in bus order.
pub fn mismatch(state: &PolarState, spec: &PFSpec, y: &AdmittanceMatrix) -> DVector<f64> {
    let inj = injections_polar(state, y);
    let p_buses = spec.p_equation_buses();
    let q_buses = spec.q_equation_buses();
    let mut g = DVector::zeros(p_buses.len() + q_buses.len());
    for (row, &i) in p_buses.iter().enumerate() {
        g[row] = inj.p[i] - spec.p_spec[i];
    }
    for (row, &i) in q_buses.iter().enumerate() {
        g[p_buses.len() + row] = inj.q[i] - spec.q_spec[i];
    }
    g
}

/// Analytic Jacobian of [`mismatch`] with respect to the unknowns
/// `[theta at PQ+PV; v at PQ]`, both in bus order.
pub fn jacobian(state: &PolarState, spec: &PFSpec, y: &AdmittanceMatrix) -> DMatrix<f64> {
    let inj = injections_polar(state, y);
    let p_buses = spec.p_equation_buses();
    let q_buses = spec.q_equation_buses();
    let n_p = p_buses.len();
    let n_q = q_buses.len();
    let m = n_p + n_q;
    let mut jac = DMatrix::zeros(m, m);
    let (v, th) = (&state.v, &state.theta);
    let (g, b) = (&y.g, &y.b);

    let off_p_th = |i: usize, k: usize| {
        v[i] * v[k] * (g[(i, k)] * (th[i] - th[k]).sin() - b[(i, k)] * (th[i] - th[k]).cos())
    };
    let off_p_v = |i: usize, k: usize| {
        v[i] * (g[(i, k)] * (th[i] - th[k]).cos() + b[(i, k)] * (th[i] - th[k]).sin())
    };

    for (row, &i) in p_buses.iter().enumerate() {
        for (col, &k) in p_buses.iter().enumerate() {
            jac[(row, col)] = if i == k {
                -inj.q[i] - b[(i, i)] * v[i] * v[i]
            } else {
                off_p_th(i, k)
            };
        }
        for (col, &k) in q_buses.iter().enumerate() {
            jac[(row, n_p + col)] = if i == k {
                inj.p[i] / v[i] + g[(i, i)] * v[i]
            } else {
                off_p_v(i, k)
            };
        }
    }
    for (row, &i) in q_buses.iter().enumerate() {
        for (col, &k) in p_buses.iter().enumerate() {
            jac[(n_p + row, col)] = if i == k {
                inj.p[i] - g[(i, i)] * v[i] * v[i]
            } else {
                -v[i] * v[k]
                    * (g[(i, k)] * (th[i] - th[k]).cos() + b[(i, k)] * (th[i] - th[k]).sin())
            };
        }
        for (col, &k) in q_buses.iter().enumerate() {
            jac[(n_p + row, n_p + col)] = if i == k {
                inj.q[i] / v[i] - b[(i, i)] * v[i]
            } else {
                v[i] * (g[(i, k)] * (th[i] - th[k]).sin() - b[(i, k)] * (th[i] - th[k]).cos())
            };
        }
    }
    jac
}

/// Full Newton-Raphson solve from a flat start (`v = 1` or the setpoint,
/// `theta` = slack angle). Each iteration solves `J * dx = -g` by dense LU.
pub fn newton_solve(
    spec: &PFSpec,
    y: &AdmittanceMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<PFSolution, SolveError> {
    assert!(tol > 0.0, "tolerance must be positive");
    assert!(max_iter >= 1, "need at least one iteration");
    let n = spec.n();
    let mut state = PolarState {
        v: DVector::from_fn(n, |i, _| {
            if spec.bus_types[i] == BusType::Pq { 1.0 } else { spec.v_spec[i] }
        }),
        theta: DVector::from_element(n, spec.theta_slack),
    };
    let p_buses = spec.p_equation_buses();
    let q_buses = spec.q_equation_buses();

    let mut g = mismatch(&state, spec, y);
    let mut norm = linalg::norm_inf(&g);
    let mut iterations = 0;
    while norm > tol {
        if iterations >= max_iter {
            return Err(SolveError::NonConvergence { iterations, mismatch_norm: norm });
        }
        let jac = jacobian(&state, spec, y);
        let dx = linalg::lu_solve(&jac, &(-&g))?;
        for (col, &k) in p_buses.iter().enumerate() {
            state.theta[k] += dx[col];
        }
        for (col, &k) in q_buses.iter().enumerate() {
            state.v[k] += dx[p_buses.len() + col];
        }
        iterations += 1;
        g = mismatch(&state, spec, y);
        norm = linalg::norm_inf(&g);
        if !norm.is_finite() {
            return Err(SolveError::NonConvergence { iterations, mismatch_norm: norm });
        }
    }
    debug_assert!(norm <= tol);
    let rect = RectState::from_polar(&state);
    let inj = injections_polar(&state, y);
    Ok(PFSolution { state, rect, inj, iterations, final_mismatch_norm: norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_model::{build_admittance, parse_case};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn three_bus_system() -> (crate::case_model::BusSystem, AdmittanceMatrix) {
        let sys = parse_case(
            "BASE_MVA 100\nBUS\n1 3 0 0 0 0 1.0 0\n2 1 0.3 0.1 0 0 1.0 0\n3 1 0.2 0.05 0 0 1.0 0\n\
             BRANCH\n1 2 0.01 0.1 0 1.0 0\n2 3 0.01 0.1 0 1.0 0\nGEN\n1 5.0\n",
        )
        .unwrap();
        let y = build_admittance(&sys);
        (sys, y)
    }

    fn three_bus_state() -> PolarState {
        PolarState {
            v: DVector::from_vec(vec![1.0, 0.98, 0.97]),
            theta: DVector::from_vec(vec![0.0, -0.02, -0.05]),
        }
    }

    fn load_ieee(case: &str) -> (crate::case_model::BusSystem, AdmittanceMatrix) {
        let path = format!("{}/../../cases/{case}.case", env!("CARGO_MANIFEST_DIR"));
        let sys = parse_case(&std::fs::read_to_string(path).unwrap()).unwrap();
        let y = build_admittance(&sys);
        (sys, y)
    }

    fn random_state(n: usize, rng: &mut impl Rng) -> PolarState {
        PolarState {
            v: DVector::from_fn(n, |_, _| 0.9 + 0.2 * rng.random::<f64>()),
            theta: DVector::from_fn(n, |_, _| 0.4 * rng.random::<f64>() - 0.2),
        }
    }

    #[test]
    fn flat_state_injections_are_admittance_row_sums() {
        let (_, y) = three_bus_system();
        let n = y.n();
        let flat = PolarState { v: DVector::from_element(n, 1.0), theta: DVector::zeros(n) };
        let inj = injections_polar(&flat, &y);
        for i in 0..n {
            assert_relative_eq!(inj.p[i], y.g.row(i).sum(), epsilon = 1e-12);
            assert_relative_eq!(inj.q[i], -y.b.row(i).sum(), epsilon = 1e-12);
        }
        let rect = injections_rect(&RectState::from_polar(&flat), &y);
        assert_relative_eq!((inj.p - rect.p).amax(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((inj.q - rect.q).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_voltage_bus_injects_nothing() {
        let (_, y) = three_bus_system();
        let mut state = three_bus_state();
        state.v[1] = 0.0;
        let inj = injections_polar(&state, &y);
        assert_eq!(inj.p[1], 0.0);
        assert_eq!(inj.q[1], 0.0);
    }

    #[test]
    fn three_bus_injections_match_term_by_term_oracle() {
        // golden vectors from an independent script evaluating the polar
        // equations term by term
        let (_, y) = three_bus_system();
        let inj = injections_polar(&three_bus_state(), &y);
        let p_want = [0.21404250204100783, 0.07918220070814441, -0.29149454159080335];
        let q_want = [0.18055568446343706, -0.09968090622115255, -0.06357316665879509];
        for i in 0..3 {
            assert_relative_eq!(inj.p[i], p_want[i], epsilon = 1e-13);
            assert_relative_eq!(inj.q[i], q_want[i], epsilon = 1e-13);
        }
        let rect_inj = injections_rect(&RectState::from_polar(&three_bus_state()), &y);
        for i in 0..3 {
            assert_relative_eq!(rect_inj.p[i], p_want[i], epsilon = 1e-12);
            assert_relative_eq!(rect_inj.q[i], q_want[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn coordinate_equivalence_on_random_states() {
        let (_, y) = load_ieee("ieee57");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let s = random_state(57, &mut rng);
            let a = injections_polar(&s, &y);
            let b = injections_rect(&RectState::from_polar(&s), &y);
            assert!((a.p - b.p).amax() <= 1e-12);
            assert!((a.q - b.q).amax() <= 1e-12);
        }
    }

    #[test]
    fn mismatch_is_zero_at_defining_state() {
        let (sys, y) = three_bus_system();
        let state = three_bus_state();
        let spec = PFSpec::from_state(sys.buses.iter().map(|b| b.bus_type).collect(), &state, &y);
        let g = mismatch(&state, &spec, &y);
        assert!(linalg::norm_inf(&g) < 1e-14);
    }

    #[test]
    fn perturbed_mismatch_matches_script_oracle() {
        let (sys, y) = three_bus_system();
        let state = three_bus_state();
        let spec = PFSpec::from_state(sys.buses.iter().map(|b| b.bus_type).collect(), &state, &y);
        let mut perturbed = state.clone();
        perturbed.theta[1] += 0.01;
        let g = mismatch(&perturbed, &spec, &y);
        let want = [
            0.1912629698889381,
            -0.0937314308548105,
            -0.01726982884113326,
            0.01269954998409872,
        ];
        assert_eq!(g.len(), 4);
        for i in 0..4 {
            assert_relative_eq!(g[i], want[i], epsilon = 1e-13);
        }
    }

    fn fd_jacobian(state: &PolarState, spec: &PFSpec, y: &AdmittanceMatrix) -> DMatrix<f64> {
        let p_buses = spec.p_equation_buses();
        let q_buses = spec.q_equation_buses();
        let m = p_buses.len() + q_buses.len();
        let eps = 1e-6;
        let mut jac = DMatrix::zeros(m, m);
        for col in 0..m {
            let mut plus = state.clone();
            let mut minus = state.clone();
            if col < p_buses.len() {
                plus.theta[p_buses[col]] += eps;
                minus.theta[p_buses[col]] -= eps;
            } else {
                plus.v[q_buses[col - p_buses.len()]] += eps;
                minus.v[q_buses[col - p_buses.len()]] -= eps;
            }
            let diff = (mismatch(&plus, spec, y) - mismatch(&minus, spec, y)) / (2.0 * eps);
            jac.set_column(col, &diff);
        }
        jac
    }

    fn assert_jacobian_close(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) {
        let scale = fd.amax().max(1.0);
        for i in 0..analytic.nrows() {
            for k in 0..analytic.ncols() {
                let err = (analytic[(i, k)] - fd[(i, k)]).abs() / scale;
                assert!(
                    err <= 1e-5,
                    "J[{i},{k}]: analytic {} vs fd {}",
                    analytic[(i, k)],
                    fd[(i, k)]
                );
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_on_three_bus() {
        let (sys, y) = three_bus_system();
        let state = three_bus_state();
        let spec = PFSpec::from_state(sys.buses.iter().map(|b| b.bus_type).collect(), &state, &y);
        assert_jacobian_close(&jacobian(&state, &spec, &y), &fd_jacobian(&state, &spec, &y));
    }

    #[test]
    fn jacobian_matches_finite_differences_on_random_ieee57_states() {
        let (sys, y) = load_ieee("ieee57");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let state = random_state(57, &mut rng);
            let spec =
                PFSpec::from_state(sys.buses.iter().map(|b| b.bus_type).collect(), &state, &y);
            assert_jacobian_close(&jacobian(&state, &spec, &y), &fd_jacobian(&state, &spec, &y));
        }
    }

    #[test]
    fn two_bus_reactive_line_jacobian_entry() {
        // single-term expansion at flat start: dp_1/dtheta_1 = -b_11 = 10
        let sys = parse_case(
            "BASE_MVA 100\nBUS\n1 3 0 0 0 0 1.0 0\n2 1 0 0 0 0 1.0 0\n\
             BRANCH\n1 2 0 0.1 0 1.0 0\nGEN\n1 1.0\n",
        )
        .unwrap();
        let y = build_admittance(&sys);
        let flat = PolarState { v: DVector::from_element(2, 1.0), theta: DVector::zeros(2) };
        let spec = PFSpec::from_state(sys.buses.iter().map(|b| b.bus_type).collect(), &flat, &y);
        let jac = jacobian(&flat, &spec, &y);
        assert_relative_eq!(jac[(0, 0)], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn newton_round_trips_a_feasible_spec() {
        let (sys, y) = load_ieee("ieee57");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut state = random_state(57, &mut rng);
        // keep the synthetic defining state close to nominal
        state.v.apply(|v| *v = 1.0 + 0.05 * (*v - 1.0));
        state.theta.apply(|t| *t *= 0.2);
        let spec = PFSpec::from_state(sys.buses.iter().map(|b| b.bus_type).collect(), &state, &y);
        let sol = newton_solve(&spec, &y, 1e-8, 20).unwrap();
        let inj = injections_polar(&state, &y);
        assert!((sol.inj.p - inj.p).amax() <= 1e-8);
        assert!((sol.inj.q - inj.q).amax() <= 1e-8);
    }

    #[test]
    fn ieee57_base_case_converges_quickly() {
        let (sys, y) = load_ieee("ieee57");
        let spec = PFSpec::base_case(&sys);
        let sol = newton_solve(&spec, &y, 1e-8, 20).unwrap();
        assert!(sol.iterations <= 10, "took {} iterations", sol.iterations);
        assert!(sol.final_mismatch_norm <= 1e-8);
        assert!(sol.state.v.min() > 0.85 && sol.state.v.max() < 1.1);
    }

    #[test]
    fn infeasible_spec_reports_non_convergence() {
        let sys = parse_case(
            "BASE_MVA 100\nBUS\n1 3 0 0 0 0 1.0 0\n2 1 8 0 0 0 1.0 0\n\
             BRANCH\n1 2 0.01 0.1 0 1.0 0\nGEN\n1 1.0\n",
        )
        .unwrap();
        let y = build_admittance(&sys);
        let spec = PFSpec::base_case(&sys);
        match newton_solve(&spec, &y, 1e-8, 20) {
            Err(SolveError::NonConvergence { .. }) => {}
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn solution_csv_has_one_row_per_bus() {
        let (sys, y) = three_bus_system();
        let spec = PFSpec::from_state(
            sys.buses.iter().map(|b| b.bus_type).collect(),
            &three_bus_state(),
            &y,
        );
        let sol = newton_solve(&spec, &y, 1e-10, 20).unwrap();
        let csv = sol.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("bus,v,theta,mu,omega,p,q"));
    }
}
