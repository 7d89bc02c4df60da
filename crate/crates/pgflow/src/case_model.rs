//! Grid case files and the matrices derived from them: the bus admittance
//! matrix split into real part `G` and imaginary part `B`, and the binary
//! adjacency matrix used as a hard attention mask by the topology-pruned
//! decoder.
//!
//! Case format (UTF-8 text, `#` starts a comment line):
//!
//! ```text
//! BASE_MVA 100
//! BUS
//! id  type(1=PQ,2=PV,3=Slack)  Pd  Qd  Gs  Bs  Vset  ThetaSet
//! BRANCH
//! from  to  r  x  b  tap  shift
//! GEN
//! bus  Pmax
//! ```
//!
//! All quantities are per-unit on the system base; angles are in radians.
//! Conversion from MATPOWER-style MW/MVAr tables happens outside the parser
//! (see `tools/convert_cases.py` for the column mapping).

use nalgebra::{Complex, DMatrix};
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

use crate::linalg::fmt_sig9;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("invalid case: {0}")]
    Semantic(String),
}

fn syntax(line: usize, msg: impl Into<String>) -> CaseError {
    CaseError::Syntax { line, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusType {
    Pq,
    Pv,
    Slack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// External 1-based id as it appears in the case file.
    pub external_id: usize,
    pub bus_type: BusType,
    pub p_demand: f64,
    pub q_demand: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
    /// Voltage-magnitude setpoint (PV and Slack buses).
    pub v_set: f64,
    /// Angle setpoint in radians (Slack bus).
    pub theta_set: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Internal 0-based endpoint indices.
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    pub tap: f64,
    /// Phase shift in radians.
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusSystem {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub base_mva: f64,
    /// Per-bus real-power generation limit (p.u.), zero where no generator.
    pub gen_capacity: Vec<f64>,
}

impl BusSystem {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Internal index of the slack bus.
    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
            .expect("validated system has a slack bus")
    }

    pub fn pq_buses(&self) -> Vec<usize> {
        self.bus_indices(BusType::Pq)
    }

    pub fn pv_buses(&self) -> Vec<usize> {
        self.bus_indices(BusType::Pv)
    }

    fn bus_indices(&self, t: BusType) -> Vec<usize> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.bus_type == t)
            .map(|(i, _)| i)
            .collect()
    }

    fn validate(&self) -> Result<(), CaseError> {
        let n = self.n_buses();
        if n < 2 {
            return Err(CaseError::Semantic(format!("need at least 2 buses, got {n}")));
        }
        let slacks = self.buses.iter().filter(|b| b.bus_type == BusType::Slack).count();
        if slacks != 1 {
            return Err(CaseError::Semantic(format!(
                "expected exactly one slack bus, found {slacks}"
            )));
        }
        for b in &self.buses {
            if b.bus_type != BusType::Pq && b.v_set <= 0.0 {
                return Err(CaseError::Semantic(format!(
                    "bus {} has non-positive voltage setpoint {}",
                    b.external_id, b.v_set
                )));
            }
        }
        for (k, br) in self.branches.iter().enumerate() {
            if br.from_bus >= n || br.to_bus >= n {
                return Err(CaseError::Semantic(format!(
                    "branch {k} references a bus outside the system"
                )));
            }
            if br.from_bus == br.to_bus {
                return Err(CaseError::Semantic(format!(
                    "branch {k} connects bus {} to itself",
                    self.buses[br.from_bus].external_id
                )));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(CaseError::Semantic(format!("branch {k} has zero impedance")));
            }
        }
        Ok(())
    }
}

/// Complex nodal admittance split into real and imaginary parts, with the
/// structurally nonzero positions tracked explicitly so pattern checks and
/// topology masking stay exact.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Sorted structurally-nonzero positions.
    pub pattern: Vec<(usize, usize)>,
}

impl AdmittanceMatrix {
    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn in_pattern(&self, i: usize, k: usize) -> bool {
        self.pattern.binary_search(&(i, k)).is_ok()
    }
}

/// Binary adjacency with ones on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub a: DMatrix<f64>,
}

impl AdjacencyMatrix {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
}

#[derive(PartialEq)]
enum Section {
    None,
    Bus,
    Branch,
    Gen,
}

/// Parses the documented case format into a validated [`BusSystem`].
///
/// External bus ids are remapped to dense 0-based internal indices; the
/// external id is retained on each [`Bus`].
pub fn parse_case(text: &str) -> Result<BusSystem, CaseError> {
    let mut base_mva = None;
    let mut buses: Vec<Bus> = Vec::new();
    let mut raw_branches: Vec<(usize, usize, f64, f64, f64, f64, f64, usize)> = Vec::new();
    let mut raw_gens: Vec<(usize, f64, usize)> = Vec::new();
    let mut section = Section::None;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "BUS" => {
                section = Section::Bus;
                continue;
            }
            "BRANCH" => {
                section = Section::Branch;
                continue;
            }
            "GEN" => {
                section = Section::Gen;
                continue;
            }
            _ => {}
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "BASE_MVA" {
            let v = fields
                .get(1)
                .ok_or_else(|| syntax(lineno, "BASE_MVA needs a value"))?
                .parse::<f64>()
                .map_err(|e| syntax(lineno, format!("bad BASE_MVA value: {e}")))?;
            base_mva = Some(v);
            continue;
        }
        let num = |idx: usize| -> Result<f64, CaseError> {
            fields
                .get(idx)
                .ok_or_else(|| syntax(lineno, format!("missing column {}", idx + 1)))?
                .parse::<f64>()
                .map_err(|e| syntax(lineno, format!("bad number in column {}: {e}", idx + 1)))
        };
        let int = |idx: usize| -> Result<usize, CaseError> {
            fields
                .get(idx)
                .ok_or_else(|| syntax(lineno, format!("missing column {}", idx + 1)))?
                .parse::<usize>()
                .map_err(|e| syntax(lineno, format!("bad integer in column {}: {e}", idx + 1)))
        };
        match section {
            Section::None => {
                return Err(syntax(lineno, "data before any section header"));
            }
            Section::Bus => {
                if fields.len() != 8 {
                    return Err(syntax(lineno, format!("BUS rows have 8 columns, got {}", fields.len())));
                }
                let bus_type = match int(1)? {
                    1 => BusType::Pq,
                    2 => BusType::Pv,
                    3 => BusType::Slack,
                    other => return Err(syntax(lineno, format!("unknown bus type {other}"))),
                };
                buses.push(Bus {
                    external_id: int(0)?,
                    bus_type,
                    p_demand: num(2)?,
                    q_demand: num(3)?,
                    shunt_g: num(4)?,
                    shunt_b: num(5)?,
                    v_set: num(6)?,
                    theta_set: num(7)?,
                });
            }
            Section::Branch => {
                if fields.len() != 7 {
                    return Err(syntax(lineno, format!("BRANCH rows have 7 columns, got {}", fields.len())));
                }
                raw_branches.push((int(0)?, int(1)?, num(2)?, num(3)?, num(4)?, num(5)?, num(6)?, lineno));
            }
            Section::Gen => {
                if fields.len() != 2 {
                    return Err(syntax(lineno, format!("GEN rows have 2 columns, got {}", fields.len())));
                }
                raw_gens.push((int(0)?, num(1)?, lineno));
            }
        }
    }

    let base_mva = base_mva.ok_or_else(|| CaseError::Semantic("missing BASE_MVA line".into()))?;
    let mut id_map: HashMap<usize, usize> = HashMap::new();
    for (i, b) in buses.iter().enumerate() {
        if id_map.insert(b.external_id, i).is_some() {
            return Err(CaseError::Semantic(format!("duplicate bus id {}", b.external_id)));
        }
    }
    let lookup = |ext: usize, lineno: usize| -> Result<usize, CaseError> {
        id_map
            .get(&ext)
            .copied()
            .ok_or_else(|| syntax(lineno, format!("branch references unknown bus {ext}")))
    };
    let branches = raw_branches
        .into_iter()
        .map(|(f, t, r, x, b, tap, shift, lineno)| {
            Ok(Branch {
                from_bus: lookup(f, lineno)?,
                to_bus: lookup(t, lineno)?,
                r,
                x,
                b_charging: b,
                tap: if tap == 0.0 { 1.0 } else { tap },
                shift,
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;

    let mut gen_capacity = vec![0.0; buses.len()];
    for (ext, pmax, lineno) in raw_gens {
        let i = id_map
            .get(&ext)
            .copied()
            .ok_or_else(|| syntax(lineno, format!("generator references unknown bus {ext}")))?;
        gen_capacity[i] += pmax;
    }

    let sys = BusSystem { buses, branches, base_mva, gen_capacity };
    sys.validate()?;
    Ok(sys)
}

/// Writes a [`BusSystem`] back to the case format with stable 9-digit
/// formatting; re-parsing the output reproduces the system.
pub fn serialize_case(sys: &BusSystem) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "BASE_MVA {}", fmt_sig9(sys.base_mva));
    out.push_str("\nBUS\n");
    for b in &sys.buses {
        let t = match b.bus_type {
            BusType::Pq => 1,
            BusType::Pv => 2,
            BusType::Slack => 3,
        };
        let _ = writeln!(
            out,
            "{}  {}  {}  {}  {}  {}  {}  {}",
            b.external_id,
            t,
            fmt_sig9(b.p_demand),
            fmt_sig9(b.q_demand),
            fmt_sig9(b.shunt_g),
            fmt_sig9(b.shunt_b),
            fmt_sig9(b.v_set),
            fmt_sig9(b.theta_set)
        );
    }
    out.push_str("\nBRANCH\n");
    for br in &sys.branches {
        let _ = writeln!(
            out,
            "{}  {}  {}  {}  {}  {}  {}",
            sys.buses[br.from_bus].external_id,
            sys.buses[br.to_bus].external_id,
            fmt_sig9(br.r),
            fmt_sig9(br.x),
            fmt_sig9(br.b_charging),
            fmt_sig9(br.tap),
            fmt_sig9(br.shift)
        );
    }
    out.push_str("\nGEN\n");
    for (i, cap) in sys.gen_capacity.iter().enumerate() {
        if *cap > 0.0 {
            let _ = writeln!(out, "{}  {}", sys.buses[i].external_id, fmt_sig9(*cap));
        }
    }
    out
}

/// Builds the bus admittance matrix. For a branch (i,k) with series
/// admittance `y = 1/(r + jx)`, charging `jb_c`, and tap `t * e^{j shift}`:
///
/// ```text
/// Y_ii += (y + j b_c/2) / t^2       Y_ik -= y / (t e^{-j shift})
/// Y_kk +=  y + j b_c/2              Y_ki -= y / (t e^{ j shift})
/// ```
///
/// Bus shunt admittances add to the diagonal. Parallel branches sum.
pub fn build_admittance(sys: &BusSystem) -> AdmittanceMatrix {
    let n = sys.n_buses();
    let mut y = DMatrix::<Complex<f64>>::zeros(n, n);
    let mut pattern: Vec<(usize, usize)> = Vec::new();
    for br in &sys.branches {
        let ys = Complex::new(1.0, 0.0) / Complex::new(br.r, br.x);
        let half_charge = Complex::new(0.0, br.b_charging / 2.0);
        let tap = Complex::from_polar(br.tap, br.shift);
        let (i, k) = (br.from_bus, br.to_bus);
        y[(i, i)] += (ys + half_charge) / (tap * tap.conj());
        y[(k, k)] += ys + half_charge;
        y[(i, k)] -= ys / tap.conj();
        y[(k, i)] -= ys / tap;
        pattern.extend_from_slice(&[(i, i), (k, k), (i, k), (k, i)]);
    }
    for (i, b) in sys.buses.iter().enumerate() {
        if b.shunt_g != 0.0 || b.shunt_b != 0.0 {
            y[(i, i)] += Complex::new(b.shunt_g, b.shunt_b);
            pattern.push((i, i));
        }
    }
    pattern.sort_unstable();
    pattern.dedup();
    AdmittanceMatrix {
        g: y.map(|c| c.re),
        b: y.map(|c| c.im),
        pattern,
    }
}

/// Builds the adjacency matrix: `a_ik = 1` iff `i = k` or some branch
/// connects buses `i` and `k`.
pub fn adjacency(sys: &BusSystem) -> AdjacencyMatrix {
    let n = sys.n_buses();
    let mut a = DMatrix::<f64>::identity(n, n);
    for br in &sys.branches {
        a[(br.from_bus, br.to_bus)] = 1.0;
        a[(br.to_bus, br.from_bus)] = 1.0;
    }
    AdjacencyMatrix { a }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub const TWO_BUS: &str = "\
BASE_MVA 100
BUS
1  3  0    0  0  0  1.0  0
2  1  0.5  0.2  0  0  1.0  0
BRANCH
1  2  0.01  0.1  0  1.0  0
GEN
1  10.0
";

    fn three_bus() -> BusSystem {
        parse_case(
            "BASE_MVA 100\nBUS\n1 3 0 0 0 0 1.0 0\n2 1 0.3 0.1 0 0 1.0 0\n3 1 0.2 0.05 0 0 1.0 0\n\
             BRANCH\n1 2 0.01 0.1 0 1.0 0\n2 3 0.01 0.1 0 1.0 0\nGEN\n1 5.0\n",
        )
        .unwrap()
    }

    #[test]
    fn parses_minimal_two_bus_case() {
        let sys = parse_case(TWO_BUS).unwrap();
        assert_eq!(sys.n_buses(), 2);
        assert_eq!(sys.branches.len(), 1);
        assert_eq!(sys.buses[0].bus_type, BusType::Slack);
        assert_eq!(sys.gen_capacity, vec![10.0, 0.0]);
    }

    #[test]
    fn parses_ieee57() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../cases/ieee57.case"
        ))
        .unwrap();
        let sys = parse_case(&text).unwrap();
        assert_eq!(sys.n_buses(), 57);
        assert_eq!(sys.branches.len(), 80);
        assert_eq!(
            sys.buses.iter().filter(|b| b.bus_type == BusType::Slack).count(),
            1
        );
    }

    #[test]
    fn rejects_dangling_branch_endpoint() {
        let text = TWO_BUS.replace("1  2  0.01", "1  99  0.01");
        let err = parse_case(&text).unwrap_err();
        assert!(err.to_string().contains("unknown bus 99"));
    }

    #[test]
    fn rejects_two_slack_buses() {
        let text = TWO_BUS.replace("2  1  0.5", "2  3  0.5");
        let err = parse_case(&text).unwrap_err();
        assert!(err.to_string().contains("slack"));
    }

    #[test]
    fn rejects_zero_impedance_branch() {
        let text = TWO_BUS.replace("1  2  0.01  0.1", "1  2  0  0");
        assert!(parse_case(&text).is_err());
    }

    #[test]
    fn reports_syntax_error_line() {
        let text = TWO_BUS.replace("2  1  0.5  0.2  0  0  1.0  0", "2  1  0.5  oops  0  0  1.0  0");
        match parse_case(&text).unwrap_err() {
            CaseError::Syntax { line, .. } => assert_eq!(line, 4),
            other => panic!("expected syntax error, got {other}"),
        }
    }

    #[test]
    fn serialization_round_trips() {
        let sys = parse_case(TWO_BUS).unwrap();
        let text = serialize_case(&sys);
        let sys2 = parse_case(&text).unwrap();
        assert_eq!(sys, sys2);

        let text57 = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../cases/ieee57.case"
        ))
        .unwrap();
        let sys57 = parse_case(&text57).unwrap();
        assert_eq!(sys57, parse_case(&serialize_case(&sys57)).unwrap());
    }

    #[test]
    fn purely_reactive_line_admittance() {
        let text = TWO_BUS.replace("1  2  0.01  0.1", "1  2  0  0.1");
        let sys = parse_case(&text).unwrap();
        let y = build_admittance(&sys);
        for (i, k, want) in [(0, 0, -10.0), (0, 1, 10.0), (1, 0, 10.0), (1, 1, -10.0)] {
            assert_relative_eq!(y.b[(i, k)], want, epsilon = 1e-12);
            assert_relative_eq!(y.g[(i, k)], 0.0);
        }
    }

    #[test]
    fn shunt_only_bus_contributes_diagonal() {
        // keep one branch so the system stays valid; add a shunt at bus 1
        let text = TWO_BUS.replace("1  3  0    0  0  0", "1  3  0    0  0.5  0");
        let sys = parse_case(&text).unwrap();
        let y = build_admittance(&sys);
        let series_g = 0.01 / (0.01f64.powi(2) + 0.1f64.powi(2));
        assert_relative_eq!(y.g[(0, 0)], 0.5 + series_g, epsilon = 1e-12);
        assert_relative_eq!(y.g[(1, 1)], series_g, epsilon = 1e-12);
    }

    #[test]
    fn three_bus_admittance_matches_complex_arithmetic_oracle() {
        // golden values from an independent complex-arithmetic script:
        // y = 1/(0.01 + j0.1) = 0.99009900990099 - j9.900990099009901
        let y = build_admittance(&three_bus());
        let g1 = 0.99009900990099_f64;
        let b1 = -9.900990099009901_f64;
        assert_relative_eq!(y.g[(0, 0)], g1, epsilon = 1e-13);
        assert_relative_eq!(y.b[(0, 0)], b1, epsilon = 1e-13);
        assert_relative_eq!(y.g[(0, 1)], -g1, epsilon = 1e-13);
        assert_relative_eq!(y.b[(0, 1)], -b1, epsilon = 1e-13);
        assert_relative_eq!(y.g[(1, 1)], 2.0 * g1, epsilon = 1e-13);
        assert_relative_eq!(y.b[(1, 1)], 2.0 * b1, epsilon = 1e-13);
        assert_relative_eq!(y.g[(2, 1)], -g1, epsilon = 1e-13);
        assert_relative_eq!(y.b[(1, 2)], -b1, epsilon = 1e-13);
        assert_relative_eq!(y.g[(2, 2)], g1, epsilon = 1e-13);
        assert_eq!(y.g[(0, 2)], 0.0);
        assert!(!y.in_pattern(0, 2));
    }

    #[test]
    fn adjacency_two_bus_full() {
        let sys = parse_case(TWO_BUS).unwrap();
        let a = adjacency(&sys);
        assert_eq!(a.a, DMatrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn adjacency_path_graph_has_zero_far_corner() {
        let a = adjacency(&three_bus());
        assert_eq!(a.a[(0, 2)], 0.0);
        assert_eq!(a.a[(2, 0)], 0.0);
        assert_eq!(a.a[(0, 1)], 1.0);
        assert_eq!(a.a.diagonal().sum(), 3.0);
    }

    #[test]
    fn adjacency_ieee57_off_diagonal_count() {
        // branch-list scan oracle: 78 distinct connected pairs -> 156
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../cases/ieee57.case"
        ))
        .unwrap();
        let sys = parse_case(&text).unwrap();
        let a = adjacency(&sys);
        let off_diag: usize = (0..57)
            .flat_map(|i| (0..57).map(move |k| (i, k)))
            .filter(|&(i, k)| i != k && a.a[(i, k)] == 1.0)
            .count();
        assert_eq!(off_diag, 156);
    }

    #[test]
    fn hadamard_idempotence_against_adjacency() {
        // G o A = G and B o A = B for the parsed IEEE 57 system
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../cases/ieee57.case"
        ))
        .unwrap();
        let sys = parse_case(&text).unwrap();
        let y = build_admittance(&sys);
        let a = adjacency(&sys);
        let g_masked = y.g.component_mul(&a.a);
        let b_masked = y.b.component_mul(&a.a);
        assert_eq!(g_masked, y.g);
        assert_eq!(b_masked, y.b);
        // pattern(Y) is contained in pattern(A)
        for &(i, k) in &y.pattern {
            assert_eq!(a.a[(i, k)], 1.0);
        }
    }
}
