//! Dense helpers for the tiny `D x D` systems that appear in root finding
//! and implicit differentiation (`D` is 1, 2 or 3).

use crate::{Matrix, Vector};

/// Solve `a * x = b` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot is exactly zero or the result is non-finite.
pub fn solve<const D: usize>(a: &Matrix<D>, b: &Vector<D>) -> Option<Vector<D>> {
    let mut m = *a;
    let mut x = *b;
    for col in 0..D {
        let mut piv = col;
        for row in col + 1..D {
            if m[(row, col)].abs() > m[(piv, col)].abs() {
                piv = row;
            }
        }
        if m[(piv, col)] == 0.0 {
            return None;
        }
        if piv != col {
            m.swap_rows(piv, col);
            x.swap_rows(piv, col);
        }
        let p = m[(col, col)];
        for row in col + 1..D {
            let f = m[(row, col)] / p;
            if f != 0.0 {
                for k in col..D {
                    m[(row, k)] -= f * m[(col, k)];
                }
                x[row] -= f * x[col];
            }
        }
    }
    for col in (0..D).rev() {
        let mut acc = x[col];
        for k in col + 1..D {
            acc -= m[(col, k)] * x[k];
        }
        x[col] = acc / m[(col, col)];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Matrix inverse via column-wise solves.
pub fn inverse<const D: usize>(a: &Matrix<D>) -> Option<Matrix<D>> {
    let mut inv = Matrix::<D>::zeros();
    for j in 0..D {
        let mut e = Vector::<D>::zeros();
        e[j] = 1.0;
        inv.set_column(j, &solve(a, &e)?);
    }
    Some(inv)
}

/// Determinant by elimination with partial pivoting.
pub fn determinant<const D: usize>(a: &Matrix<D>) -> f64 {
    let mut m = *a;
    let mut det = 1.0;
    for col in 0..D {
        let piv = (col..D)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap_or(col);
        if m[(piv, col)] == 0.0 {
            return 0.0;
        }
        if piv != col {
            m.swap_rows(piv, col);
            det = -det;
        }
        let p = m[(col, col)];
        det *= p;
        for row in col + 1..D {
            let f = m[(row, col)] / p;
            for k in col..D {
                m[(row, k)] -= f * m[(col, k)];
            }
        }
    }
    det
}

fn norm_one<const D: usize>(a: &Matrix<D>) -> f64 {
    (0..D)
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition number; infinite for singular matrices.
pub fn condition_number<const D: usize>(a: &Matrix<D>) -> f64 {
    match inverse(a) {
        Some(inv) => norm_one(a) * norm_one(&inv),
        None => f64::INFINITY,
    }
}

pub fn is_finite<const D: usize>(v: &Vector<D>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinant_matches_closed_forms() {
        let a = Matrix::<2>::new(1.0, 2.0, 3.0, 4.0);
        assert!((determinant(&a) + 2.0).abs() < 1e-14);
        let b = Matrix::<3>::new(0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 9.0);
        // 0(36-35) - 1(27-30) + 2(21-24)
        assert!((determinant(&b) + 3.0).abs() < 1e-13);
        assert_eq!(determinant(&Matrix::<2>::zeros()), 0.0);
    }

    #[test]
    fn solve_matches_known_system() {
        let a = Matrix::<3>::new(2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0);
        let x_true = Vector::<3>::new(1.0, -2.0, 0.5);
        let x = solve(&a, &(a * x_true)).unwrap();
        assert!((x - x_true).norm() < 1e-14);
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        let a = Matrix::<2>::new(0.0, 1.0, 1.0, 0.0);
        let x = solve(&a, &Vector::<2>::new(3.0, 4.0)).unwrap();
        assert_eq!(x, Vector::<2>::new(4.0, 3.0));
    }

    #[test]
    fn singular_is_none() {
        let a = Matrix::<2>::new(1.0, 2.0, 2.0, 4.0);
        assert!(solve(&a, &Vector::<2>::new(1.0, 1.0)).is_none());
        assert!(condition_number(&a).is_infinite());
        assert_eq!(condition_number(&Matrix::<2>::identity()), 1.0);
    }
}
