//! Closed-form threshold quantities.
//!
//! `delta_foc(X)` is the smallest RIP constant of any measurement operator that
//! makes `X` a critical point of `f_A`. It equals `cos(theta)` where `theta` is
//! the angle between `e = vec(XX^T - ZZ^T)` and `range(Jac(X))`, and
//!
//! ```text
//! sin(theta) = ||Z^T (I - X X^+) Z||_F / ||XX^T - ZZ^T||_F
//! ```
//!
//! Over the neighborhood `B_eps = { X : ||XX^T - ZZ^T||_F <= eps ||ZZ^T||_F }`
//! the threshold is bounded below by `sqrt([1 - C eps]_+)` with
//! `C = ||ZZ^T||_F / sigma_min(Z)^2`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    check_pair, clamp01, ensure_not_coincident, error_vector, jacobian_apply, jacobian_matrix,
    least_squares_split, range_basis, rank2_eigvals, relative_error, FactorMatrix, Tolerances,
};
use crate::scalar::Real;

/// Global no-spurious-minima floor: 1/2 for rank one, 1/5 otherwise.
pub fn delta_star<T: Real>(r: usize) -> T {
    if r <= 1 {
        T::lit(0.5)
    } else {
        T::lit(0.2)
    }
}

/// `true` when `XX^T` and `ZZ^T` agree to the coincidence tolerance.
pub fn is_coincident<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>, tol: &Tolerances<T>) -> Result<bool> {
    let e = error_vector(x, z)?;
    Ok(ensure_not_coincident(e.norm(), z, tol).is_err())
}

/// Norms of the two parts of `e` with `P = XX^+`: the part in `range(Jac)`,
/// `XX^T - PZZ^T - ZZ^TP + PZZ^TP`, and the remainder `-(I - P) ZZ^T (I - P)`,
/// whose norm is `||Z^T (I - P) Z||_F`. Neither is formed by cancellation
/// against `ZZ^T`, so both stay accurate when the other dominates.
fn projector_split<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>, tol: &Tolerances<T>) -> Result<(T, T)> {
    check_pair(x, z)?;
    let gap = (x.gram() - z.gram()).norm();
    ensure_not_coincident(gap, z, tol)?;
    let zm = z.as_matrix();
    let q = range_basis(x.as_matrix(), tol);
    let g = &q * (q.transpose() * zm);
    let complement = zm - &g;
    let residual = (zm.transpose() * complement).norm();
    let gz = &g * zm.transpose();
    let fitted = (x.gram() - &gz - gz.transpose() + &g * g.transpose()).norm();
    Ok((fitted, residual))
}

fn hypot_normalize<T: Real>(a: T, b: T) -> T {
    let h = (a * a + b * b).sqrt();
    clamp01(a / h)
}

/// Sine of the incidence angle, from the projector formula.
pub fn sin_theta<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<T> {
    sin_theta_with(x, z, &Tolerances::default())
}

pub fn sin_theta_with<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>, tol: &Tolerances<T>) -> Result<T> {
    let (fitted, residual) = projector_split(x, z, tol)?;
    Ok(hypot_normalize(residual, fitted))
}

/// `delta_foc(X) = cos(theta)`, or 1 when `XX^T = ZZ^T`.
pub fn delta_foc<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<T> {
    delta_foc_with(x, z, &Tolerances::default())
}

pub fn delta_foc_with<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>, tol: &Tolerances<T>) -> Result<T> {
    match projector_split(x, z, tol) {
        Ok((fitted, residual)) => Ok(hypot_normalize(fitted, residual)),
        Err(Error::Coincident { .. }) => Ok(T::one()),
        Err(err) => Err(err),
    }
}

/// `cos(theta) = ||Jac y*|| / ||e||` from an explicit least-squares solve.
///
/// Shares no code with [`delta_foc`] beyond the error vector; used as its oracle.
pub fn delta_foc_numeric<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<T> {
    delta_foc_numeric_with(x, z, &Tolerances::default())
}

pub fn delta_foc_numeric_with<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>, tol: &Tolerances<T>) -> Result<T> {
    let e = error_vector(x, z)?;
    let e_norm = e.norm();
    ensure_not_coincident(e_norm, z, tol)?;
    let jac = jacobian_matrix(x);
    let split = least_squares_split(&jac, &e, tol);
    Ok(clamp01(split.fitted.norm() / e_norm))
}

fn check_unit_interval<T: Real>(v: T) -> Result<()> {
    if !(v >= T::zero() && v <= T::one()) {
        return Err(Error::OutOfRange { value: v.to_f64_lossy() });
    }
    Ok(())
}

/// `eta = (1 - delta) / (1 + delta)`.
pub fn eta_from_delta<T: Real>(delta: T) -> Result<T> {
    check_unit_interval(delta)?;
    Ok((T::one() - delta) / (T::one() + delta))
}

/// `delta = (1 - eta) / (1 + eta)`; the map is an involution on `[0, 1]`.
pub fn delta_from_eta<T: Real>(eta: T) -> Result<T> {
    check_unit_interval(eta)?;
    Ok((T::one() - eta) / (T::one() + eta))
}

/// Positive and negative eigenvalue mass of a symmetric matrix.
pub fn eig_split_traces<T: Real>(m: &DMatrix<T>) -> Result<(T, T)> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = m.norm();
    if scale == T::zero() {
        return Err(Error::ZeroMatrix);
    }
    if (m - m.transpose()).norm() > T::lit(1e-12) * scale {
        return Err(Error::DimensionMismatch("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(m.clone());
    let (mut plus, mut minus) = (T::zero(), T::zero());
    for &l in eig.eigenvalues.iter() {
        if l > T::zero() {
            plus += l;
        } else {
            minus -= l;
        }
    }
    Ok((plus, minus))
}

/// Optimal value of `min { tr V : tr U = 1, alpha M = U - V, U, V >= 0 }`,
/// which is `min { tr(M-)/tr(M+), tr(M+)/tr(M-) }`. Semidefinite `M` gives 0.
pub fn eig_split_value<T: Real>(m: &DMatrix<T>) -> Result<T> {
    let (plus, minus) = eig_split_traces(m)?;
    if plus == T::zero() || minus == T::zero() {
        return Ok(T::zero());
    }
    let (a, b) = (minus / plus, plus / minus);
    Ok(if a < b { a } else { b })
}

/// Optimal dual value `eta(X) = (1 - cos theta) / (1 + cos theta)`.
///
/// `X = 0` makes the Jacobian vanish; `e` is then orthogonal to its (trivial)
/// range, `cos theta = 0` and the value is 1.
pub fn dual_eta<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<T> {
    let cos = delta_foc_numeric(x, z)?;
    eta_from_delta(cos)
}

/// Outcome of probing the dual objective at random directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualWitnessReport {
    pub eta: f64,
    /// Smallest `min(tr M(y)- / tr M(y)+, tr M(y)+ / tr M(y)-)` over the probes.
    pub best_probe: f64,
    pub probes: usize,
    /// Largest amount by which a probe undercut `eta` (0 when none did).
    pub max_undercut: f64,
}

impl DualWitnessReport {
    pub fn holds(&self, slack: f64) -> bool {
        self.max_undercut <= slack
    }
}

/// Evaluates the eigen-split dual objective at `probes` random `y` with
/// `M(y) = (Jac y) e^T + e (Jac y)^T`, using the rank-two spectrum. No probe
/// should beat [`dual_eta`].
pub fn dual_witness_check<T: Real>(
    x: &FactorMatrix<T>,
    z: &FactorMatrix<T>,
    probes: usize,
    seed: u64,
) -> Result<DualWitnessReport> {
    let eta = dual_eta(x, z)?;
    let e = error_vector(x, z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, r) = (x.n(), x.r());
    let mut best = f64::INFINITY;
    let mut used = 0;
    for _ in 0..probes {
        let y = DMatrix::from_fn(n, r, |_, _| T::lit(StandardNormal.sample(&mut rng)));
        let jy: DVector<T> = jacobian_apply(x, &y);
        let spec = match rank2_eigvals(&jy, &e) {
            Ok(s) => s,
            Err(Error::ZeroVector) => continue,
            Err(err) => return Err(err),
        };
        used += 1;
        let (plus, minus) = (spec.lambda_max, -spec.lambda_min);
        let value = if plus == T::zero() || minus == T::zero() {
            T::zero()
        } else {
            let (a, b) = (minus / plus, plus / minus);
            if a < b {
                a
            } else {
                b
            }
        };
        best = best.min(value.to_f64_lossy());
    }
    let eta = eta.to_f64_lossy();
    Ok(DualWitnessReport { eta, best_probe: best, probes: used, max_undercut: (eta - best).max(0.0) })
}

/// Conditioning constant `C = ||ZZ^T||_F / sigma_min(Z)^2` (infinite when `Z` is rank deficient).
pub fn conditioning<T: Real>(z: &FactorMatrix<T>) -> Result<T> {
    let zz = z.gram().norm();
    if zz == T::zero() {
        return Err(Error::ZeroMatrix);
    }
    let smin = z.sigma_min();
    let cutoff = Tolerances::<T>::default().rank_cutoff(z.n(), z.r(), z.singular_values()[0]);
    if smin <= cutoff {
        return Ok(T::lit(f64::INFINITY));
    }
    Ok(zz / (smin * smin))
}

/// Upper bound on `sin^2(theta)` over `B_eps`: `eps / (2/C - eps)`.
pub fn sin_theta_sq_bound<T: Real>(epsilon: T, z: &FactorMatrix<T>) -> Result<T> {
    if !(epsilon >= T::zero()) {
        return Err(Error::InvalidConfig(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let c = conditioning(z)?;
    let denominator = T::lit(2.0) / c - epsilon;
    if !(denominator > T::zero()) {
        return Err(Error::NonPositiveDenominator { denominator: denominator.to_f64_lossy() });
    }
    Ok(epsilon / denominator)
}

fn one_minus_c_eps<T: Real>(epsilon: T, c: T) -> T {
    if epsilon == T::zero() {
        T::one()
    } else {
        T::one() - c * epsilon
    }
}

/// `sqrt([1 - C eps]_+)`, a strict lower bound on `delta_foc` over `B_eps`.
pub fn neighborhood_delta_foc_bound<T: Real>(epsilon: T, z: &FactorMatrix<T>) -> Result<T> {
    let c = conditioning(z)?;
    let gap = one_minus_c_eps(epsilon, c);
    Ok(if gap > T::zero() { gap.sqrt() } else { T::zero() })
}

/// `max { sqrt([1 - C eps]_+), delta*(r) }`, a lower bound on the second-order threshold over `B_eps`.
pub fn soc_lower_bound<T: Real>(epsilon: T, z: &FactorMatrix<T>, r: usize) -> Result<T> {
    let nb = neighborhood_delta_foc_bound(epsilon, z)?;
    let floor = delta_star::<T>(r);
    Ok(if nb > floor { nb } else { floor })
}

/// Ceiling with a few ulps of slack so that exact products such as `2 * 8`
/// computed through rounded intermediates do not round up.
fn ceil_count(v: f64) -> u64 {
    (v * (1.0 - 1e-12)).ceil().max(1.0) as u64
}

/// Measurement count `ceil(min{1/[1 - C eps]_+, 25} * C0 * n * r)` guaranteeing no
/// spurious minima in `B_eps` for sub-Gaussian ensembles.
pub fn sample_complexity<T: Real>(epsilon: T, z: &FactorMatrix<T>, n: usize, r: usize, c0: f64) -> Result<u64> {
    if !(c0 > 0.0) {
        return Err(Error::InvalidConfig(format!("C0 must be positive, got {c0}")));
    }
    let c = conditioning(z)?.to_f64_lossy();
    let gap = one_minus_c_eps(epsilon.to_f64_lossy(), c);
    let factor = if gap > 0.0 { (1.0 / gap).min(25.0) } else { 25.0 };
    Ok(ceil_count(factor * c0 * (n * r) as f64))
}

/// Measurements `ceil(C0 n r / delta^2)` that give `delta`-RIP for sub-Gaussian ensembles.
pub fn samples_for_rip(delta: f64, n: usize, r: usize, c0: f64) -> Result<u64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::OutOfRange { value: delta });
    }
    Ok(ceil_count(c0 * (n * r) as f64 / (delta * delta)))
}

/// Every threshold quantity for one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub n: usize,
    pub r: usize,
    /// `XX^T = ZZ^T`; the threshold is then 1 by convention and `sin_theta` is 0.
    pub coincident: bool,
    pub sin_theta: f64,
    pub delta_foc: f64,
    pub eta: f64,
    pub conditioning: f64,
    /// The point's own relative error, used as `eps` below.
    pub epsilon: f64,
    pub neighborhood_bound: f64,
    pub soc_lower_bound: f64,
    pub c0: f64,
    pub sample_estimate: u64,
}

impl ThresholdReport {
    pub fn compute<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>, c0: f64) -> Result<Self> {
        Self::compute_with(x, z, c0, &Tolerances::default())
    }

    pub fn compute_with<T: Real>(
        x: &FactorMatrix<T>,
        z: &FactorMatrix<T>,
        c0: f64,
        tol: &Tolerances<T>,
    ) -> Result<Self> {
        check_pair(x, z)?;
        let coincident = is_coincident(x, z, tol)?;
        let sin = if coincident { T::zero() } else { sin_theta_with(x, z, tol)? };
        let delta = delta_foc_with(x, z, tol)?;
        let epsilon = relative_error(x, z)?;
        Ok(Self {
            n: x.n(),
            r: x.r(),
            coincident,
            sin_theta: sin.to_f64_lossy(),
            delta_foc: delta.to_f64_lossy(),
            eta: eta_from_delta(delta)?.to_f64_lossy(),
            conditioning: conditioning(z)?.to_f64_lossy(),
            epsilon: epsilon.to_f64_lossy(),
            neighborhood_bound: neighborhood_delta_foc_bound(epsilon, z)?.to_f64_lossy(),
            soc_lower_bound: soc_lower_bound(epsilon, z, z.r())?.to_f64_lossy(),
            c0,
            sample_estimate: sample_complexity(epsilon, z, x.n(), x.r(), c0)?,
        })
    }
}
