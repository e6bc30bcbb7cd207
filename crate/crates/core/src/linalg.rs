//! Small dense helpers for the d x d systems that show up per grid node or per path step.

use nalgebra::DMatrix;

/// Solves `a x = rhs` in place (row-major `a`, overwritten). Returns false if a pivot vanishes.
pub(crate) fn solve_in_place(a: &mut [f64], rhs: &mut [f64], d: usize) -> bool {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(rhs.len(), d);
    match d {
        1 => {
            if a[0] == 0.0 || !a[0].is_finite() {
                return false;
            }
            rhs[0] /= a[0];
            rhs[0].is_finite()
        }
        2 => {
            let det = a[0] * a[3] - a[1] * a[2];
            if det == 0.0 || !det.is_finite() {
                return false;
            }
            let x0 = (a[3] * rhs[0] - a[1] * rhs[1]) / det;
            let x1 = (a[0] * rhs[1] - a[2] * rhs[0]) / det;
            rhs[0] = x0;
            rhs[1] = x1;
            x0.is_finite() && x1.is_finite()
        }
        _ => {
            for col in 0..d {
                let pivot = (col..d)
                    .max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs()))
                    .unwrap();
                if a[pivot * d + col] == 0.0 || !a[pivot * d + col].is_finite() {
                    return false;
                }
                if pivot != col {
                    for k in 0..d {
                        a.swap(pivot * d + k, col * d + k);
                    }
                    rhs.swap(pivot, col);
                }
                let diag = a[col * d + col];
                for row in col + 1..d {
                    let factor = a[row * d + col] / diag;
                    if factor == 0.0 {
                        continue;
                    }
                    for k in col..d {
                        a[row * d + k] -= factor * a[col * d + k];
                    }
                    rhs[row] -= factor * rhs[col];
                }
            }
            for row in (0..d).rev() {
                let mut acc = rhs[row];
                for k in row + 1..d {
                    acc -= a[row * d + k] * rhs[k];
                }
                rhs[row] = acc / a[row * d + row];
            }
            rhs.iter().all(|v| v.is_finite())
        }
    }
}

/// 2-norm condition number via singular values; infinite for singular or non-finite input.
pub(crate) fn condition_number(a: &[f64], d: usize) -> f64 {
    if a.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let m = DMatrix::from_row_slice(d, d, a);
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub(crate) fn min_symmetric_eigenvalue(a: &[f64], d: usize) -> f64 {
    let m = DMatrix::from_row_slice(d, d, a);
    m.symmetric_eigenvalues().min()
}

/// `out = m m'` for row-major d x d `m`.
pub(crate) fn outer_self(m: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum();
        }
    }
}

/// Thomas algorithm for a tridiagonal system; `lower[0]` and `upper[n-1]` are ignored.
/// `scratch` must have length n. The solution overwrites `rhs`.
pub(crate) fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
    scratch: &mut [f64],
) {
    let n = diag.len();
    debug_assert!(n >= 1);
    let mut denom = diag[0];
    scratch[0] = upper[0] / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * scratch[i - 1];
        scratch[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_general_system() {
        let mut a = vec![2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0];
        let orig = a.clone();
        let mut b = vec![1.0, 2.0, 3.0];
        assert!(solve_in_place(&mut a, &mut b, 3));
        for i in 0..3 {
            let lhs: f64 = (0..3).map(|k| orig[i * 3 + k] * b[k]).sum();
            assert!((lhs - [1.0, 2.0, 3.0][i]).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_is_reported() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 1.0];
        assert!(!solve_in_place(&mut a, &mut b, 2));
        assert!(condition_number(&[1.0, 2.0, 2.0, 4.0], 2) > 1e12);
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let lower = [0.0, -1.0, -1.0, -1.0];
        let diag = [4.0, 4.0, 4.0, 4.0];
        let upper = [-1.0, -1.0, -1.0, 0.0];
        let mut rhs = [1.0, 2.0, 3.0, 4.0];
        let mut scratch = [0.0; 4];
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs, &mut scratch);
        let x = rhs;
        let back = [
            4.0 * x[0] - x[1],
            -x[0] + 4.0 * x[1] - x[2],
            -x[1] + 4.0 * x[2] - x[3],
            -x[2] + 4.0 * x[3],
        ];
        for (b, e) in back.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((b - e).abs() < 1e-13);
        }
    }
}
