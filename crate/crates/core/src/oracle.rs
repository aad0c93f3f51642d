//! Independent reference computations used to cross-check the closed forms:
//! a one-dimensional search for the eigen-splitting value, finite
//! differences of the sensing objective and a dense symmetric eigensolver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{FactorMatrix, Svd};
use crate::scalar::Real;
use crate::sensing::{objective, SensingOperator};

/// `tr([A]_+) = (tr A + ||A||_*) / 2` for symmetric `A`, via singular values.
fn positive_trace<T: Real>(a: &DMatrix<T>) -> T {
    let nuclear = Svd::new(a).singular_values.sum();
    (a.trace() + nuclear) * T::lit(0.5)
}

/// Value of `min { tr V : tr U = 1, alpha M = U - V, U, V >= 0 }` by a search over `alpha`.
///
/// For fixed `alpha` the minimal `tr V` is `1 - alpha tr(M)`, feasible iff
/// `tr([alpha M]_+) <= 1`. The feasible set is an interval; its ends are found
/// by bracketing and bisection, and the objective is scanned over a
/// `grid`-point mesh of the interval.
pub fn eig_split_alpha_grid<T: Real>(m: &DMatrix<T>, grid: usize) -> Result<T> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    if m.norm() == T::zero() {
        return Err(Error::ZeroMatrix);
    }
    let tr = m.trace();
    let feasible = |alpha: T| positive_trace(&(m * alpha)) <= T::one();
    let limit = T::lit(1e12) / m.norm();
    // Feasible-interval end in direction `sign`, or `None` when unbounded.
    let end = |sign: T| -> Option<T> {
        let mut hi = T::one() / m.norm();
        while feasible(hi * sign) {
            hi *= T::lit(2.0);
            if hi > limit {
                return None;
            }
        }
        let mut lo = T::zero();
        for _ in 0..200 {
            let mid = (lo + hi) * T::lit(0.5);
            if mid <= lo || mid >= hi {
                break;
            }
            if feasible(mid * sign) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(lo * sign)
    };
    let (left, right) = (end(-T::one()), end(T::one()));
    let objective = |alpha: T| T::one() - alpha * tr;
    // A side is unbounded only for semidefinite M and the objective grows along
    // it, so any finite stand-in for that end leaves the minimum unchanged.
    let span = T::lit(10.0) / m.norm();
    let (lo, hi) = match (left, right) {
        (Some(l), Some(r)) => (l, r),
        (None, Some(r)) => (r - span, r),
        (Some(l), None) => (l, l + span),
        (None, None) => return Err(Error::ZeroMatrix),
    };
    let steps = grid.max(2);
    let mut best = T::lit(f64::INFINITY);
    for k in 0..=steps {
        let t = T::from_usize_lossy(k) / T::from_usize_lossy(steps);
        let v = objective(lo * (T::one() - t) + hi * t);
        if v < best {
            best = v;
        }
    }
    Ok(best)
}

/// Central-difference gradient of `f_A` with step `h`.
pub fn gradient_fd<T: Real>(op: &SensingOperator<T>, x: &FactorMatrix<T>, b: &DVector<T>, h: T) -> Result<DMatrix<T>> {
    let base = x.as_matrix();
    let mut g = DMatrix::zeros(x.n(), x.r());
    for j in 0..x.r() {
        for i in 0..x.n() {
            let mut plus = base.clone();
            plus[(i, j)] += h;
            let mut minus = base.clone();
            minus[(i, j)] -= h;
            let fp = objective(op, &FactorMatrix::new(plus)?, b)?;
            let fm = objective(op, &FactorMatrix::new(minus)?, b)?;
            g[(i, j)] = (fp - fm) / (h + h);
        }
    }
    Ok(g)
}

/// Second difference `D(h) = (f(X + hY) - 2 f(X) + f(X - hY)) / h^2`,
/// extrapolated as `(4 D(h) - D(2h)) / 3`. `f_A` is quartic along lines, so
/// `D(h) = q + c h^2` exactly and the extrapolation only carries rounding error.
pub fn hessian_qf_fd<T: Real>(
    op: &SensingOperator<T>,
    x: &FactorMatrix<T>,
    b: &DVector<T>,
    y: &DMatrix<T>,
    h: T,
) -> Result<T> {
    let base = x.as_matrix();
    let f0 = objective(op, x, b)?;
    let second = |step: T| -> Result<T> {
        let fp = objective(op, &FactorMatrix::new(base + y * step)?, b)?;
        let fm = objective(op, &FactorMatrix::new(base - y * step)?, b)?;
        Ok((fp - f0 - f0 + fm) / (step * step))
    };
    Ok((second(h)? * T::lit(4.0) - second(h + h)?) / T::lit(3.0))
}

/// Eigenvalues of a symmetric matrix in increasing order.
pub fn dense_eigenvalues<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    let mut ev: Vec<T> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thresholds::eig_split_value;

    #[test]
    fn alpha_grid_examples() {
        let m = DMatrix::from_diagonal(&DVector::<f64>::from_vec(vec![2.0, -1.0]));
        assert!((eig_split_alpha_grid(&m, 1000).unwrap() - 0.5).abs() < 1e-9);
        let psd = DMatrix::from_diagonal(&DVector::<f64>::from_vec(vec![2.0, 1.0]));
        assert!(eig_split_alpha_grid(&psd, 1000).unwrap().abs() < 1e-9);
        let nsd = -psd;
        assert!(eig_split_alpha_grid(&nsd, 1000).unwrap().abs() < 1e-9);
        let m = DMatrix::<f64>::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 2.0, -1.0, 0.5, 0.0, 0.5, 0.3]);
        assert!((eig_split_alpha_grid(&m, 1000).unwrap() - eig_split_value(&m).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn positive_trace_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::<f64>::from_vec(vec![3.0, -1.0, 0.5]));
        assert!((positive_trace(&m) - 3.5).abs() < 1e-14);
    }
}
