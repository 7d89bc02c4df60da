//! Data pipeline: synthetic load profiles, operating-point schedules, sample
//! generation through the Newton solver, measurement noise, outlier
//! corruption, and the split regimes used by the experiments.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::acpf::{self, PFSpec, SolveError};
use crate::case_model::{AdmittanceMatrix, BusSystem, BusType};
use crate::linalg::fmt_exact;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("step {step} demand {demand:.4} exceeds generation capacity {capacity:.4}")]
    InfeasibleStep { step: usize, demand: f64, capacity: f64 },
    #[error("{failed} of {total} steps failed to converge (limit 5%)")]
    TooManyFailures { failed: usize, total: usize },
    #[error("{part} split is empty")]
    EmptySplit { part: &'static str },
    #[error("malformed dataset CSV: {0}")]
    Csv(String),
}

/// Fixed ordering of the solver input vector:
/// `[P_L at PQ; P_G at PV; Q_L at PQ; V_G at PV; V_R; theta_R]`,
/// each block in bus order. Length is `2|PQ| + 2|PV| + 2`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InputLayout {
    pub pq: Vec<usize>,
    pub pv: Vec<usize>,
    pub slack: usize,
    pub names: Vec<String>,
}

impl InputLayout {
    pub fn new(sys: &BusSystem) -> Self {
        let pq = sys.pq_buses();
        let pv = sys.pv_buses();
        let slack = sys.slack();
        let mut names = Vec::new();
        for &i in &pq {
            names.push(format!("x_PL_bus{}", sys.buses[i].external_id));
        }
        for &i in &pv {
            names.push(format!("x_PG_bus{}", sys.buses[i].external_id));
        }
        for &i in &pq {
            names.push(format!("x_QL_bus{}", sys.buses[i].external_id));
        }
        for &i in &pv {
            names.push(format!("x_VG_bus{}", sys.buses[i].external_id));
        }
        names.push("x_VR".to_string());
        names.push("x_ThetaR".to_string());
        InputLayout { pq, pv, slack, names }
    }

    pub fn dim(&self) -> usize {
        2 * self.pq.len() + 2 * self.pv.len() + 2
    }

    /// Indices of the `P_L` block; its sum is the range-split driver.
    pub fn p_load_range(&self) -> std::ops::Range<usize> {
        0..self.pq.len()
    }
}

/// One operating point in the measurement series.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PFSample {
    pub input: DVector<f64>,
    /// `[mu; omega]`, length 2N, p.u.
    pub v_target: DVector<f64>,
    /// `[p; q]`, length 2N, p.u.
    pub s_target: DVector<f64>,
    pub timestamp: usize,
}

/// Per-feature affine transform `z = (u - mean) / std`; constant features get
/// unit scale so the transform stays invertible.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Affine {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl Affine {
    /// Fits on a `(features, samples)` matrix.
    pub fn fit(cols: &DMatrix<f64>) -> Self {
        let n = cols.ncols().max(1) as f64;
        let mean = DVector::from_fn(cols.nrows(), |i, _| cols.row(i).sum() / n);
        let std = DVector::from_fn(cols.nrows(), |i, _| {
            let m = mean[i];
            let var = cols.row(i).iter().map(|u| (u - m) * (u - m)).sum::<f64>() / n;
            let s = var.sqrt();
            if s < 1e-12 { 1.0 } else { s }
        });
        Affine { mean, std }
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| (u[i] - self.mean[i]) / self.std[i])
    }

    pub fn invert(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| z[i] * self.std[i] + self.mean[i])
    }
}

/// Normalization statistics fitted on the training split only.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormRecord {
    pub input: Affine,
    pub voltage: Affine,
    pub injection: Affine,
}

impl NormRecord {
    pub fn fit(train: &Dataset) -> Self {
        NormRecord {
            input: Affine::fit(&train.input_matrix()),
            voltage: Affine::fit(&train.v_target_matrix()),
            injection: Affine::fit(&train.s_target_matrix()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Dataset {
    pub samples: Vec<PFSample>,
    pub noise_applied: bool,
    pub normalization: Option<NormRecord>,
    pub layout: InputLayout,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn stack(&self, f: impl Fn(&PFSample) -> &DVector<f64>) -> DMatrix<f64> {
        let rows = if self.samples.is_empty() { 0 } else { f(&self.samples[0]).len() };
        let mut m = DMatrix::zeros(rows, self.samples.len());
        for (k, s) in self.samples.iter().enumerate() {
            m.set_column(k, f(s));
        }
        m
    }

    /// `(input_dim, n_samples)` matrix of solver inputs.
    pub fn input_matrix(&self) -> DMatrix<f64> {
        self.stack(|s| &s.input)
    }

    /// `(2N, n_samples)` matrix of voltage targets.
    pub fn v_target_matrix(&self) -> DMatrix<f64> {
        self.stack(|s| &s.v_target)
    }

    /// `(2N, n_samples)` matrix of injection targets.
    pub fn s_target_matrix(&self) -> DMatrix<f64> {
        self.stack(|s| &s.s_target)
    }

    fn sub(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            noise_applied: self.noise_applied,
            normalization: self.normalization.clone(),
            layout: self.layout.clone(),
        }
    }

    /// CSV with one sample per row and full round-trip precision.
    pub fn to_csv(&self) -> String {
        let n2 = self.samples.first().map_or(0, |s| s.v_target.len());
        let n = n2 / 2;
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.layout.names.iter().cloned());
        for prefix in ["mu", "omega"] {
            header.extend((1..=n).map(|i| format!("{prefix}_bus{i}")));
        }
        for prefix in ["p", "q"] {
            header.extend((1..=n).map(|i| format!("{prefix}_bus{i}")));
        }
        let mut out = header.join(",");
        out.push('\n');
        for s in &self.samples {
            let mut row = vec![s.timestamp.to_string()];
            row.extend(s.input.iter().map(|&v| fmt_exact(v)));
            row.extend(s.v_target.iter().map(|&v| fmt_exact(v)));
            row.extend(s.s_target.iter().map(|&v| fmt_exact(v)));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses [`Dataset::to_csv`] output; the layout is supplied by the
    /// caller because the CSV stores only feature names.
    pub fn from_csv(text: &str, layout: InputLayout) -> Result<Dataset, DataError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| DataError::Csv("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let d = layout.dim();
        let n2 = cols.len().saturating_sub(1 + d).checked_div(2).unwrap_or(0);
        if cols.len() != 1 + d + 2 * n2 || n2 == 0 || n2 % 2 != 0 {
            return Err(DataError::Csv(format!("unexpected column count {}", cols.len())));
        }
        let mut samples = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != cols.len() {
                return Err(DataError::Csv(format!("row {}: wrong field count", ln + 2)));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| DataError::Csv(format!("bad number '{s}'")))
            };
            let timestamp = vals[0]
                .parse::<usize>()
                .map_err(|_| DataError::Csv(format!("bad timestamp '{}'", vals[0])))?;
            let input =
                DVector::from_vec(vals[1..1 + d].iter().map(|s| parse(s)).collect::<Result<_, _>>()?);
            let v_target = DVector::from_vec(
                vals[1 + d..1 + d + n2].iter().map(|s| parse(s)).collect::<Result<_, _>>()?,
            );
            let s_target = DVector::from_vec(
                vals[1 + d + n2..].iter().map(|s| parse(s)).collect::<Result<_, _>>()?,
            );
            samples.push(PFSample { input, v_target, s_target, timestamp });
        }
        Ok(Dataset { samples, noise_applied: false, normalization: None, layout })
    }
}

/// Buses carrying load, in bus order; these get a profile column each.
pub fn load_buses(sys: &BusSystem) -> Vec<usize> {
    (0..sys.n_buses())
        .filter(|&i| sys.buses[i].p_demand != 0.0 || sys.buses[i].q_demand != 0.0)
        .collect()
}

/// Synthetic load multipliers: daily sinusoid, weekly modulation, and
/// lognormal jitter, clamped to `[0.05, 1.6]`. Shape `(n_steps, n_loads)`,
/// one hour per step. Deterministic in the seed.
pub fn gen_load_profiles(n_steps: usize, n_loads: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 1.0).unwrap();
    let sigma = 0.05;
    // Loads co-move: one shared daily/weekly phase for the whole system with
    // a small per-load offset (staggered consumption peaks).
    let shared_daily = rng.random_range(0.0..std::f64::consts::TAU);
    let shared_weekly = rng.random_range(0.0..std::f64::consts::TAU);
    let offset = Normal::new(0.0, std::f64::consts::TAU * 1.5 / 24.0).unwrap();
    let mut m = DMatrix::zeros(n_steps, n_loads);
    for j in 0..n_loads {
        let phase_daily = shared_daily + offset.sample(&mut rng);
        let phase_weekly = shared_weekly + offset.sample(&mut rng);
        for t in 0..n_steps {
            let h = t as f64;
            let daily = 0.72 * (std::f64::consts::TAU * h / 24.0 + phase_daily).sin();
            let weekly = 0.10 * (std::f64::consts::TAU * h / 168.0 + phase_weekly).sin();
            let z: f64 = jitter.sample(&mut rng);
            let log_jitter = (sigma * z - 0.5 * sigma * sigma).exp();
            m[(t, j)] = ((0.85 + daily + weekly) * log_jitter).clamp(0.05, 1.6);
        }
    }
    m
}

/// Demands and generator dispatch for one time step, full-length bus vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleStep {
    pub p_demand: DVector<f64>,
    pub q_demand: DVector<f64>,
    pub dispatch: DVector<f64>,
}

/// Scales the profile-driven demands so the peak total real demand over the
/// horizon equals `target_fraction` of total generator capacity, then
/// dispatches generators proportional to their capacity share. Reactive
/// demand scales with real demand (constant power factor).
pub fn scale_to_capacity(
    sys: &BusSystem,
    profiles: &DMatrix<f64>,
    target_fraction: f64,
) -> Result<Vec<ScheduleStep>, DataError> {
    assert!(profiles.iter().all(|&v| v >= 0.0), "profiles must be nonnegative");
    let loads = load_buses(sys);
    assert_eq!(profiles.ncols(), loads.len(), "one profile column per load bus");
    let n = sys.n_buses();
    let n_steps = profiles.nrows();
    let capacity: f64 = sys.gen_capacity.iter().sum();

    let step_total = |t: usize| -> f64 {
        loads.iter().enumerate().map(|(j, &i)| sys.buses[i].p_demand * profiles[(t, j)]).sum()
    };
    let peak = (0..n_steps).map(step_total).fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { target_fraction * capacity / peak } else { 0.0 };

    let mut schedule = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let mut p_demand = DVector::zeros(n);
        let mut q_demand = DVector::zeros(n);
        for (j, &i) in loads.iter().enumerate() {
            p_demand[i] = sys.buses[i].p_demand * profiles[(t, j)] * scale;
            q_demand[i] = sys.buses[i].q_demand * profiles[(t, j)] * scale;
        }
        let total = p_demand.sum();
        if total > capacity * (1.0 + 1e-9) {
            return Err(DataError::InfeasibleStep { step: t, demand: total, capacity });
        }
        let dispatch =
            DVector::from_fn(n, |i, _| sys.gen_capacity[i] / capacity * total);
        schedule.push(ScheduleStep { p_demand, q_demand, dispatch });
    }
    Ok(schedule)
}

/// Power-flow spec for one schedule step.
pub fn step_spec(sys: &BusSystem, step: &ScheduleStep) -> PFSpec {
    let n = sys.n_buses();
    let slack = sys.slack();
    PFSpec {
        bus_types: sys.buses.iter().map(|b| b.bus_type).collect(),
        p_spec: DVector::from_fn(n, |i, _| step.dispatch[i] - step.p_demand[i]),
        q_spec: DVector::from_fn(n, |i, _| -step.q_demand[i]),
        v_spec: DVector::from_fn(n, |i, _| {
            if sys.buses[i].bus_type == BusType::Pq { 1.0 } else { sys.buses[i].v_set }
        }),
        theta_slack: sys.buses[slack].theta_set,
    }
}

fn step_input(sys: &BusSystem, layout: &InputLayout, step: &ScheduleStep) -> DVector<f64> {
    let mut x = Vec::with_capacity(layout.dim());
    x.extend(layout.pq.iter().map(|&i| step.p_demand[i]));
    // The specified quantity at a PV bus is the net real injection; PV buses
    // may carry load, so dispatch alone would not determine the solution.
    x.extend(layout.pv.iter().map(|&i| step.dispatch[i] - step.p_demand[i]));
    x.extend(layout.pq.iter().map(|&i| step.q_demand[i]));
    x.extend(layout.pv.iter().map(|&i| sys.buses[i].v_set));
    x.push(sys.buses[layout.slack].v_set);
    x.push(sys.buses[layout.slack].theta_set);
    DVector::from_vec(x)
}

/// Solves every scheduled step; converged steps become samples, failed steps
/// are dropped. Fails if more than 5% of steps do not converge.
pub fn build_samples(
    sys: &BusSystem,
    y: &AdmittanceMatrix,
    schedule: &[ScheduleStep],
    tol: f64,
) -> Result<Dataset, DataError> {
    let layout = InputLayout::new(sys);
    let results: Vec<Option<PFSample>> = schedule
        .par_iter()
        .enumerate()
        .map(|(t, step)| {
            let spec = step_spec(sys, step);
            match acpf::newton_solve(&spec, y, tol, 20) {
                Ok(sol) => {
                    let n = sys.n_buses();
                    let mut v_target = DVector::zeros(2 * n);
                    let mut s_target = DVector::zeros(2 * n);
                    v_target.rows_mut(0, n).copy_from(&sol.rect.mu);
                    v_target.rows_mut(n, n).copy_from(&sol.rect.omega);
                    s_target.rows_mut(0, n).copy_from(&sol.inj.p);
                    s_target.rows_mut(n, n).copy_from(&sol.inj.q);
                    Some(PFSample { input: step_input(sys, &layout, step), v_target, s_target, timestamp: t })
                }
                Err(SolveError::NonConvergence { .. } | SolveError::SingularJacobian(_)) => None,
            }
        })
        .collect();
    let total = schedule.len();
    let samples: Vec<PFSample> = results.into_iter().flatten().collect();
    let failed = total - samples.len();
    if total > 0 && failed * 20 > total {
        return Err(DataError::TooManyFailures { failed, total });
    }
    Ok(Dataset { samples, noise_applied: false, normalization: None, layout })
}

/// Multiplicative relative Gaussian noise `u -> u * (1 + eps)` on every
/// feature (inputs and targets). Exact zeros stay zero.
pub fn add_noise(ds: &Dataset, rel_std: f64, seed: u64) -> Dataset {
    assert!(rel_std >= 0.0, "relative std must be nonnegative");
    let mut out = ds.clone();
    if rel_std == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, rel_std).unwrap();
    for s in &mut out.samples {
        for vec in [&mut s.input, &mut s.v_target, &mut s.s_target] {
            for u in vec.iter_mut() {
                *u *= 1.0 + dist.sample(&mut rng);
            }
        }
    }
    out.noise_applied = true;
    out
}

/// Quantile with linear interpolation between closest ranks.
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

fn feature_iqrs(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| {
            let mut vals: Vec<f64> = m.row(i).iter().copied().collect();
            vals.sort_by(f64::total_cmp);
            quantile_linear(&vals, 0.75) - quantile_linear(&vals, 0.25)
        })
        .collect()
}

/// Corrupts `floor(fraction * n)` uniformly chosen samples with additive
/// Gaussian noise; each feature's noise std is 10x its own interquartile
/// range over this dataset. Constant features are untouched.
pub fn inject_outliers(ds: &Dataset, fraction: f64, seed: u64) -> Dataset {
    assert!((0.0..=0.10 + 1e-12).contains(&fraction), "fraction must be in [0, 0.10]");
    let n_corrupt = (fraction * ds.len() as f64).floor() as usize;
    let mut out = ds.clone();
    if n_corrupt == 0 {
        return out;
    }
    let input_iqr = feature_iqrs(&ds.input_matrix());
    let v_iqr = feature_iqrs(&ds.v_target_matrix());
    let s_iqr = feature_iqrs(&ds.s_target_matrix());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n_corrupt);
    let unit = Normal::new(0.0, 1.0).unwrap();
    for &k in &idx {
        let s = &mut out.samples[k];
        for (vec, iqr) in
            [(&mut s.input, &input_iqr), (&mut s.v_target, &v_iqr), (&mut s.s_target, &s_iqr)]
        {
            for (u, &r) in vec.iter_mut().zip(iqr) {
                let z: f64 = unit.sample(&mut rng);
                *u += 10.0 * r * z;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SplitSpec {
    /// Contiguous prefix/middle/suffix by time order.
    Sequential { train_frac: f64, val_frac: f64 },
    /// Samples binned into equal intervals of the normalized range-split
    /// driver (total scheduled real load, mapped to `[-1, 1]`).
    RangePortion {
        portion_count: usize,
        train_portions: Vec<usize>,
        val_portions: Vec<usize>,
    },
}

/// Portion index of every sample for a given portion count: the driver is
/// min-max normalized to `[-1, 1]` and the interval is cut evenly.
pub fn portion_assignment(ds: &Dataset, portion_count: usize) -> Vec<usize> {
    assert!(portion_count >= 1);
    let r = ds.layout.p_load_range();
    let drivers: Vec<f64> =
        ds.samples.iter().map(|s| s.input.rows(r.start, r.end - r.start).sum()).collect();
    let lo = drivers.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = drivers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    drivers
        .iter()
        .map(|&d| {
            let t = 2.0 * (d - lo) / span - 1.0;
            (((t + 1.0) / 2.0 * portion_count as f64) as usize).min(portion_count - 1)
        })
        .collect()
}

/// Splits into train/val/test per the regime. Fails if any part is empty.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let n = ds.len();
    let (train_idx, val_idx, test_idx): (Vec<usize>, Vec<usize>, Vec<usize>) = match spec {
        SplitSpec::Sequential { train_frac, val_frac } => {
            assert!(*train_frac >= 0.0 && *val_frac >= 0.0 && train_frac + val_frac <= 1.0);
            let nt = (train_frac * n as f64).floor() as usize;
            let nv = (val_frac * n as f64).floor() as usize;
            ((0..nt).collect(), (nt..nt + nv).collect(), (nt + nv..n).collect())
        }
        SplitSpec::RangePortion { portion_count, train_portions, val_portions } => {
            assert!(
                train_portions.iter().all(|p| !val_portions.contains(p)),
                "portion sets must be disjoint"
            );
            let assign = portion_assignment(ds, *portion_count);
            let mut train = Vec::new();
            let mut val = Vec::new();
            let mut test = Vec::new();
            for (i, p) in assign.iter().enumerate() {
                if train_portions.contains(p) {
                    train.push(i);
                } else if val_portions.contains(p) {
                    val.push(i);
                } else {
                    test.push(i);
                }
            }
            (train, val, test)
        }
    };
    for (name, idx) in [("train", &train_idx), ("val", &val_idx), ("test", &test_idx)] {
        if idx.is_empty() {
            return Err(DataError::EmptySplit { part: match name {
                "train" => "train",
                "val" => "val",
                _ => "test",
            } });
        }
    }
    Ok((ds.sub(&train_idx), ds.sub(&val_idx), ds.sub(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acpf::{injections_rect, RectState};
    use crate::case_model::{build_admittance, parse_case};
    use approx::assert_relative_eq;

    fn ieee57() -> (BusSystem, AdmittanceMatrix) {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/ieee57.case");
        let sys = parse_case(&std::fs::read_to_string(path).unwrap()).unwrap();
        let y = build_admittance(&sys);
        (sys, y)
    }

    fn small_dataset(n_steps: usize) -> (BusSystem, Dataset) {
        let (sys, y) = ieee57();
        let profiles = gen_load_profiles(n_steps, load_buses(&sys).len(), 17);
        let schedule = scale_to_capacity(&sys, &profiles, 0.9).unwrap();
        let ds = build_samples(&sys, &y, &schedule, 1e-8).unwrap();
        (sys, ds)
    }

    #[test]
    fn profiles_are_deterministic_in_seed() {
        assert_eq!(gen_load_profiles(48, 5, 3), gen_load_profiles(48, 5, 3));
        assert_ne!(gen_load_profiles(48, 5, 3), gen_load_profiles(48, 5, 4));
    }

    #[test]
    fn zero_steps_gives_empty_matrix() {
        assert_eq!(gen_load_profiles(0, 5, 1).nrows(), 0);
    }

    #[test]
    fn profile_statistics_stay_in_band() {
        let m = gen_load_profiles(2000, 40, 7);
        let mean = m.iter().sum::<f64>() / (m.nrows() * m.ncols()) as f64;
        assert!((0.6..=1.0).contains(&mean), "mean multiplier {mean}");
        assert!(m.iter().all(|&v| (0.0..=1.2).contains(&v)));
    }

    #[test]
    fn uniform_profile_peaks_at_target_fraction_of_capacity() {
        let (sys, _) = ieee57();
        let n_loads = load_buses(&sys).len();
        let profiles = DMatrix::from_element(4, n_loads, 1.0);
        let schedule = scale_to_capacity(&sys, &profiles, 0.9).unwrap();
        // 0.9 * total Pmax of the 57-bus case, frozen from an arithmetic script
        for step in &schedule {
            assert_relative_eq!(step.p_demand.sum(), 17.78292, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_profile_gives_zero_schedule() {
        let (sys, _) = ieee57();
        let profiles = DMatrix::zeros(3, load_buses(&sys).len());
        let schedule = scale_to_capacity(&sys, &profiles, 0.9).unwrap();
        assert!(schedule.iter().all(|s| s.p_demand.sum() == 0.0 && s.dispatch.sum() == 0.0));
    }

    #[test]
    fn identical_generators_share_dispatch_equally() {
        let sys = parse_case(
            "BASE_MVA 100\nBUS\n1 3 0 0 0 0 1.0 0\n2 2 0 0 0 0 1.0 0\n3 1 0.5 0.1 0 0 1.0 0\n\
             BRANCH\n1 3 0.01 0.1 0 1.0 0\n2 3 0.01 0.1 0 1.0 0\nGEN\n1 2.0\n2 2.0\n",
        )
        .unwrap();
        let profiles = DMatrix::from_element(2, 1, 1.0);
        let schedule = scale_to_capacity(&sys, &profiles, 0.9).unwrap();
        for step in &schedule {
            assert_relative_eq!(step.dispatch[0], step.dispatch[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn samples_satisfy_rectangular_identity() {
        let (sys, ds) = small_dataset(24);
        let y = build_admittance(&sys);
        let n = sys.n_buses();
        assert_eq!(ds.len(), 24, "all desk-scale steps converge");
        for s in &ds.samples {
            let rect = RectState {
                mu: s.v_target.rows(0, n).into_owned(),
                omega: s.v_target.rows(n, n).into_owned(),
            };
            let inj = injections_rect(&rect, &y);
            for i in 0..n {
                assert_relative_eq!(inj.p[i], s.s_target[i], epsilon = 1e-7);
                assert_relative_eq!(inj.q[i], s.s_target[n + i], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn input_layout_matches_bus_counts() {
        let (sys, ds) = small_dataset(2);
        let n_pq = sys.pq_buses().len();
        let n_pv = sys.pv_buses().len();
        assert_eq!(ds.layout.dim(), 2 * n_pq + 2 * n_pv + 2);
        assert_eq!(ds.samples[0].input.len(), ds.layout.dim());
        assert_eq!(ds.layout.names.len(), ds.layout.dim());
    }

    #[test]
    fn zero_noise_is_identity_and_noise_preserves_zeros() {
        let (_, ds) = small_dataset(10);
        assert_eq!(add_noise(&ds, 0.0, 5), ds);
        let noisy = add_noise(&ds, 0.01, 5);
        assert!(noisy.noise_applied);
        for (a, b) in ds.samples.iter().zip(&noisy.samples) {
            for (u, w) in a.input.iter().zip(b.input.iter()) {
                if *u == 0.0 {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }

    #[test]
    fn noise_magnitude_matches_relative_std() {
        let (_, ds) = small_dataset(60);
        let noisy = add_noise(&ds, 0.01, 9);
        let mut eps = Vec::new();
        for (a, b) in ds.samples.iter().zip(&noisy.samples) {
            for (u, w) in a.v_target.iter().zip(b.v_target.iter()) {
                if u.abs() > 1e-6 {
                    eps.push(w / u - 1.0);
                }
            }
        }
        let std = (eps.iter().map(|e| e * e).sum::<f64>() / eps.len() as f64).sqrt();
        assert!((std - 0.01).abs() / 0.01 < 0.05, "empirical std {std}");
    }

    #[test]
    fn outlier_injection_counts_and_constant_features() {
        let (_, ds) = small_dataset(50);
        assert_eq!(inject_outliers(&ds, 0.0, 3), ds);
        let corrupted = inject_outliers(&ds, 0.10, 3);
        let changed = ds
            .samples
            .iter()
            .zip(&corrupted.samples)
            .filter(|(a, b)| a.input != b.input)
            .count();
        assert_eq!(changed, 5);
        // the slack angle feature is constant, so IQR = 0 and it never moves
        let last = ds.layout.dim() - 1;
        for (a, b) in ds.samples.iter().zip(&corrupted.samples) {
            assert_eq!(a.input[last], b.input[last]);
        }
    }

    #[test]
    fn sequential_split_sizes() {
        let (_, ds) = small_dataset(100);
        let (tr, va, te) =
            split(&ds, &SplitSpec::Sequential { train_frac: 0.6, val_frac: 0.1 }).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (60, 10, 30));
        assert!(tr.samples.iter().all(|s| s.timestamp < 60));
        assert!(te.samples.iter().all(|s| s.timestamp >= 70));
    }

    #[test]
    fn empty_split_is_rejected() {
        let (_, ds) = small_dataset(10);
        let err = split(&ds, &SplitSpec::Sequential { train_frac: 1.0, val_frac: 0.0 });
        assert!(matches!(err, Err(DataError::EmptySplit { .. })));
    }

    #[test]
    fn range_portion_split_respects_driver_intervals() {
        let (_, ds) = small_dataset(200);
        let assign = portion_assignment(&ds, 20);
        let test_portion = 5usize;
        let spec = SplitSpec::RangePortion {
            portion_count: 20,
            train_portions: (0..20).filter(|&p| p != test_portion && p != 6).collect(),
            val_portions: vec![6],
        };
        let (tr, _, te) = split(&ds, &spec).unwrap();
        let te_stamps: Vec<usize> = te.samples.iter().map(|s| s.timestamp).collect();
        for (i, s) in ds.samples.iter().enumerate() {
            if te_stamps.contains(&s.timestamp) {
                assert_eq!(assign[i], test_portion);
            }
        }
        assert_eq!(tr.len() + te.len() + (ds.len() - tr.len() - te.len()), ds.len());
    }

    #[test]
    fn normalization_round_trips_and_handles_constants() {
        let (_, ds) = small_dataset(30);
        let norm = NormRecord::fit(&ds);
        for s in &ds.samples {
            let z = norm.input.apply(&s.input);
            let back = norm.input.invert(&z);
            assert_relative_eq!((&back - &s.input).amax(), 0.0, epsilon = 1e-12);
        }
        assert!(norm.input.std.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn csv_round_trips() {
        let (_, ds) = small_dataset(8);
        let csv = ds.to_csv();
        let parsed = Dataset::from_csv(&csv, ds.layout.clone()).unwrap();
        assert_eq!(parsed.samples, ds.samples);
        assert!(Dataset::from_csv("bad", ds.layout.clone()).is_err());
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(quantile_linear(&v, 0.25), 1.75);
        assert_relative_eq!(quantile_linear(&v, 0.75), 3.25);
        assert_relative_eq!(quantile_linear(&v, 1.0), 4.0);
    }
}
