//! Small dense linear-algebra helpers shared by the solver and the baselines.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Pivot magnitudes below this are treated as singular.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("singular matrix: pivot {pivot:.3e} below threshold at column {col}")]
    Singular { col: usize, pivot: f64 },
    #[error("dimension mismatch: matrix is {rows}x{cols}, rhs has length {rhs}")]
    Shape { rows: usize, cols: usize, rhs: usize },
}

/// Solves `a * x = b` by LU factorization with partial pivoting.
pub fn lu_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(LinalgError::Shape { rows: a.nrows(), cols: a.ncols(), rhs: b.len() });
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = lu[(col, col)].abs();
        for r in col + 1..n {
            let v = lu[(r, col)].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val < PIVOT_TOL {
            return Err(LinalgError::Singular { col, pivot: pivot_val });
        }
        if pivot_row != col {
            lu.swap_rows(col, pivot_row);
            x.swap_rows(col, pivot_row);
            perm.swap(col, pivot_row);
        }
        let inv_pivot = 1.0 / lu[(col, col)];
        for r in col + 1..n {
            let factor = lu[(r, col)] * inv_pivot;
            lu[(r, col)] = factor;
            if factor != 0.0 {
                for c in col + 1..n {
                    lu[(r, c)] -= factor * lu[(col, c)];
                }
                x[r] -= factor * x[col];
            }
        }
    }

    // back substitution
    for col in (0..n).rev() {
        x[col] /= lu[(col, col)];
        let xc = x[col];
        for r in 0..col {
            x[r] -= lu[(r, col)] * xc;
        }
    }
    Ok(x)
}

/// Infinity norm of a vector.
pub fn norm_inf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Formats a value with 9 significant digits, stable across runs.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v:.9}")
        .trim_end_matches('0')
        .trim_end_matches('.')
        .to_string()
}

/// Formats with enough digits to round-trip exactly (used by data CSVs).
pub fn fmt_exact(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn solves_small_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = lu_solve(&a, &b).unwrap();
        let r = &a * &x - &b;
        assert!(norm_inf(&r) < 1e-12);
    }

    #[test]
    fn pivots_when_leading_entry_is_zero() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let b = DVector::from_vec(vec![5.0, 7.0]);
        let x = lu_solve(&a, &b).unwrap();
        assert_relative_eq!(x[0], 7.0);
        assert_relative_eq!(x[1], 5.0);
    }

    #[test]
    fn rejects_singular_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(lu_solve(&a, &b), Err(LinalgError::Singular { .. })));
    }

    #[test]
    fn sig9_formatting_is_stable() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.5), "1.5");
        assert_eq!(fmt_sig9(0.013), "0.013");
        assert_eq!(fmt_sig9(-9.900990099), "-9.900990099");
    }
}
