//! Small dense linear algebra over [`Scalar`].

use crate::matrix::Matrix;
use crate::num::Scalar;

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot falls below the scalar tolerance relative to
/// the largest entry of `a`.
pub fn solve_dense<T: Scalar>(mut a: Matrix<T>, mut b: Vec<T>) -> Option<Vec<T>> {
    let n = a.rows();
    assert!(a.is_square() && b.len() == n);
    let scale = a.as_slice().iter().fold(T::zero(), |m, v| m.max_of(v.abs()));
    for col in 0..n {
        let (piv, pmax) = (col..n)
            .map(|r| (r, a[(r, col)].abs()))
            .fold((col, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax.is_zero() || pmax.near_zero(scale) {
            return None;
        }
        if piv != col {
            for j in 0..n {
                let tmp = a[(col, j)];
                a[(col, j)] = a[(piv, j)];
                a[(piv, j)] = tmp;
            }
            b.swap(col, piv);
        }
        let d = a[(col, col)];
        for r in col + 1..n {
            let f = a[(r, col)] / d;
            if f.is_zero() {
                continue;
            }
            for j in col..n {
                let v = a[(col, j)];
                a[(r, j)] = a[(r, j)] - f * v;
            }
            let bc = b[col];
            b[r] = b[r] - f * bc;
        }
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s = s - a[(i, j)] * x[j];
        }
        x[i] = s / a[(i, i)];
    }
    Some(x)
}

/// Stationary distribution of a discrete-time chain with transition matrix `p`.
///
/// Rows that sum to zero are treated as absorbing. Returns `None` unless the
/// chain has exactly one recurrent class. Transient states get probability 0.
pub fn stationary_distribution<T: Scalar>(p: &Matrix<T>) -> Option<Vec<T>> {
    let n = p.rows();
    if n == 0 {
        return None;
    }
    let absorbing: Vec<bool> = (0..n).map(|j| p.row_sum(j).is_zero()).collect();
    let trans = |j: usize, i: usize| {
        if absorbing[j] {
            if i == j {
                T::one()
            } else {
                T::zero()
            }
        } else {
            p[(j, i)]
        }
    };
    let a = Matrix::from_fn(n, n, |i, j| {
        if i == 0 {
            T::one()
        } else {
            let d = if i == j { T::one() } else { T::zero() };
            d - trans(j, i)
        }
    });
    let mut b = vec![T::zero(); n];
    b[0] = T::one();
    let mut x = solve_dense(a, b)?;
    for v in &mut x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    Some(x)
}
