//! Extremal measurement operators.
//!
//! For a non-coincident point `X` the threshold `delta_foc(X) = cos(theta)` is
//! attained: there is an operator with RIP constant `cos(theta)` whose
//! objective has a critical point at `X`. It is built from the feasible point
//! `H = I - (1 - eta) v v^T` of
//!
//! ```text
//! max eta  s.t.  Jac^T H e = 0,  eta I <= H <= I
//! ```
//!
//! where `v` bisects the angle between `Jac y*` and the residual `w` of the
//! least-squares split `e = Jac y* + w`. With `u = Jac y*/|Jac y*|` and
//! `w' = w/|w|`, `e/|e| = cos(t) u + sin(t) w'` and `v = cos(t/2) u + sin(t/2) w'`
//! give `Jac^T H e = |e| Jac^T u (cos t - (1 - eta) cos^2(t/2))`, which vanishes
//! for `eta = (1 - cos t)/(1 + cos t)`. This matches the dual optimum, so the
//! certificate is optimal. The operator is the symmetric square root of
//! `(2/(1 + eta)) H`, whose spectrum is `{1 - cos t, 1 + cos t}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{clamp01, jacobian_transpose_apply, vectorize, CriticalPointGeometry, FactorMatrix};
use crate::scalar::Real;
use crate::seed::derive_seed;
use crate::sensing::{gradient, SensingOperator};

/// Norms recorded alongside a certificate for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub e_norm: f64,
    /// `|Jac y*|`.
    pub fitted_norm: f64,
    /// `|w| = min_y |e - Jac y|`.
    pub residual_norm: f64,
    /// `|Jac^T H e|`, zero up to rounding.
    pub feasibility: f64,
    pub jacobian_norm: f64,
}

/// `H = I - (1 - eta) v v^T`, stored as the pair `(eta, v)`.
#[derive(Debug, Clone)]
pub struct CertificateH<T: Real> {
    pub eta: T,
    pub v1: DVector<T>,
    pub cos_theta: T,
    pub norms: ResidualNorms,
}

impl<T: Real> CertificateH<T> {
    pub fn apply(&self, v: &DVector<T>) -> DVector<T> {
        let coef = (T::one() - self.eta) * self.v1.dot(v);
        v - &self.v1 * coef
    }

    pub fn dense(&self) -> DMatrix<T> {
        let dim = self.v1.len();
        DMatrix::identity(dim, dim) - &self.v1 * self.v1.transpose() * (T::one() - self.eta)
    }

    pub fn record(&self) -> CertificateRecord {
        let eta = self.eta.to_f64_lossy();
        CertificateRecord {
            eta,
            delta: (1.0 - eta) / (1.0 + eta),
            v1: self.v1.iter().map(|v| v.to_f64_lossy()).collect(),
            residual_norms: self.norms,
        }
    }
}

/// Serializable form of a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub eta: f64,
    pub delta: f64,
    /// Shrink direction, column-major vectorization of a symmetric `n x n` matrix.
    pub v1: Vec<f64>,
    pub residual_norms: ResidualNorms,
}

/// Builds the optimal primal certificate for `(X, Z)`.
///
/// Fails with [`Error::NoCertificate`] when `sin(theta) = 0`: `delta_foc = 1`
/// and no operator with `delta < 1` makes `X` critical.
pub fn optimal_certificate<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<CertificateH<T>> {
    let geom = CriticalPointGeometry::new(x, z)?;
    let e = &geom.e;
    let e_norm = geom.e_norm();
    let fitted = &geom.split.fitted;
    let residual = &geom.split.residual;
    let (fitted_norm, residual_norm) = (fitted.norm(), residual.norm());
    let tiny = T::machine_epsilon() * T::lit(64.0) * e_norm;
    if residual_norm <= tiny {
        return Err(Error::NoCertificate);
    }

    let (eta, v1, cos_theta) = if fitted_norm <= tiny {
        // e is orthogonal to range(Jac): H = I is feasible, eta = 1.
        (T::one(), e / e_norm, T::zero())
    } else {
        let u = fitted / fitted_norm;
        let w = residual / residual_norm;
        let half = residual_norm.atan2(fitted_norm) * T::lit(0.5);
        let mut v1 = u * half.cos() + w * half.sin();
        v1 /= v1.norm();
        // Largest eta for which Jac^T (I - (1 - eta) v v^T) e = 0, solved on the primal side.
        let jte = vectorize(&jacobian_transpose_apply(x, e)?);
        let jtv = vectorize(&jacobian_transpose_apply(x, &v1)?);
        let one_minus_eta = jte.dot(&jtv) / (v1.dot(e) * jtv.norm_squared());
        let eta = T::one() - one_minus_eta;
        (clamp01(eta), v1, geom.cos_theta)
    };

    let mut cert = CertificateH {
        eta,
        v1,
        cos_theta,
        norms: ResidualNorms {
            e_norm: e_norm.to_f64_lossy(),
            fitted_norm: fitted_norm.to_f64_lossy(),
            residual_norm: residual_norm.to_f64_lossy(),
            feasibility: 0.0,
            jacobian_norm: geom.jac.norm().to_f64_lossy(),
        },
    };
    let he = cert.apply(e);
    cert.norms.feasibility = (geom.jac.transpose() * he).norm().to_f64_lossy();
    debug_assert!(
        cert.norms.feasibility <= 1e-6 * (1.0 + cert.norms.jacobian_norm * cert.norms.e_norm),
        "certificate infeasible: {:?}",
        cert.norms
    );
    Ok(cert)
}

/// Operator with RIP constant `cos(theta)` that makes `X` a critical point.
#[derive(Debug, Clone)]
pub struct CertifiedOperator<T: Real> {
    pub operator: SensingOperator<T>,
    pub certificate: CertificateH<T>,
    pub achieved_delta: T,
    pub eta: T,
}

impl<T: Real> CertifiedOperator<T> {
    /// Extreme eigenvalues of the Gram matrix restricted to symmetric matrices.
    pub fn spectral_bounds(&self) -> (T, T) {
        symmetric_gram_bounds(&self.operator)
    }

    /// `max |lambda - 1|` over the restricted Gram spectrum.
    pub fn spectral_delta(&self) -> T {
        spectral_delta(&self.operator)
    }

    /// `||grad f_{A*}(X)||` for the instance measuring `ZZ^T`.
    pub fn gradient_norm(&self, x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<T> {
        let b = self.operator.measure(z)?;
        Ok(gradient(&self.operator, x, &b)?.norm())
    }
}

/// Factors `(2/(1 + eta)) H` by its symmetric square root and reshapes the
/// `n^2` rows into symmetric measurement matrices.
pub fn adversarial_operator<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<CertifiedOperator<T>> {
    let certificate = optimal_certificate(x, z)?;
    let eta = certificate.eta;
    let n = x.n();
    let dim = n * n;
    let scale = (T::lit(2.0) / (T::one() + eta)).sqrt();
    let shrink = T::one() - eta.sqrt();
    let v = &certificate.v1;
    let root = (DMatrix::identity(dim, dim) - v * v.transpose() * shrink) * scale;
    let operator = SensingOperator::from_matrix_form(n, &root)?;
    Ok(CertifiedOperator {
        operator,
        achieved_delta: (T::one() - eta) / (T::one() + eta),
        eta,
        certificate,
    })
}

/// Orthonormal basis (`n^2 x n(n+1)/2`) of vectorized symmetric matrices.
pub fn symmetric_basis<T: Real>(n: usize) -> DMatrix<T> {
    let mut basis = DMatrix::zeros(n * n, n * (n + 1) / 2);
    let h = T::lit(std::f64::consts::FRAC_1_SQRT_2);
    let mut col = 0;
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                basis[(i + j * n, col)] = T::one();
            } else {
                basis[(i + j * n, col)] = h;
                basis[(j + i * n, col)] = h;
            }
            col += 1;
        }
    }
    basis
}

/// Extreme eigenvalues of `B^T Amat^T Amat B` with `B` from [`symmetric_basis`].
pub fn symmetric_gram_bounds<T: Real>(op: &SensingOperator<T>) -> (T, T) {
    let ab = op.matrix_form() * symmetric_basis::<T>(op.n());
    let gram = ab.transpose() * &ab;
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let lo = eig.iter().copied().fold(T::lit(f64::INFINITY), |a, b| if b < a { b } else { a });
    let hi = eig.iter().copied().fold(T::lit(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
    (lo, hi)
}

/// Global RIP constant over symmetric matrices implied by the Gram spectrum;
/// an upper bound on the restricted constant.
pub fn spectral_delta<T: Real>(op: &SensingOperator<T>) -> T {
    let (lo, hi) = symmetric_gram_bounds(op);
    let (a, b) = (T::one() - lo, hi - T::one());
    if a > b {
        a
    } else {
        b
    }
}

/// `| ||A(M)||^2 / ||M||_F^2 - 1 |` for a single direction.
pub fn rip_probe<T: Real>(op: &SensingOperator<T>, m: &DMatrix<T>) -> Result<T> {
    let norm_sq = m.norm_squared();
    if norm_sq == T::zero() {
        return Err(Error::ZeroMatrix);
    }
    Ok((op.apply(m)?.norm_squared() / norm_sq - T::one()).abs())
}

/// Monte-Carlo estimate of the restricted isometry constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RipEstimate {
    /// Largest observed deviation. Never exceeds the true constant: it is a lower bound.
    pub delta_hat: f64,
    pub trials: usize,
    pub rank: usize,
    pub seed: u64,
}

/// Random symmetric unit-Frobenius matrix `G diag(d) G^T` of rank at most `k`.
pub fn random_low_rank_symmetric<T: Real>(n: usize, k: usize, seed: u64) -> DMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let g = DMatrix::from_fn(n, k, |_, _| T::lit(StandardNormal.sample(&mut rng)));
        let d = DVector::from_fn(k, |_, _| T::lit(StandardNormal.sample(&mut rng)));
        let m = &g * DMatrix::from_diagonal(&d) * g.transpose();
        let norm = m.norm();
        if norm > T::zero() {
            return m / norm;
        }
    }
}

/// Maximum of `| ||A(M)||^2 - 1 |` over `trials` random symmetric unit-Frobenius
/// `M` of rank at most `2r`. Trials use independent derived seeds.
pub fn rip_monte_carlo<T: Real>(op: &SensingOperator<T>, r: usize, trials: usize, seed: u64) -> Result<RipEstimate> {
    if trials == 0 || r == 0 {
        return Err(Error::InvalidConfig("rip_monte_carlo needs trials >= 1 and r >= 1".into()));
    }
    let n = op.n();
    let k = (2 * r).min(n);
    let delta_hat = (0..trials)
        .into_par_iter()
        .map(|t| {
            let m = random_low_rank_symmetric::<T>(n, k, derive_seed(seed, t as u64));
            rip_probe(op, &m).map(|v| v.to_f64_lossy())
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    Ok(RipEstimate { delta_hat, trials, rank: k, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{jacobian_matrix, unvectorize};
    use crate::thresholds::{delta_foc, dual_eta};
    use std::f64::consts::FRAC_1_SQRT_2;

    fn col(v: &[f64]) -> FactorMatrix<f64> {
        FactorMatrix::from_column(v).unwrap()
    }

    #[test]
    fn orthogonal_pair_certificate() {
        let (x, z) = (col(&[1.0, 0.0]), col(&[0.0, 1.0]));
        let cert = optimal_certificate(&x, &z).unwrap();
        let expected = (1.0 - FRAC_1_SQRT_2) / (1.0 + FRAC_1_SQRT_2);
        assert!((cert.eta - expected).abs() < 1e-12);
        assert!(cert.norms.feasibility <= 1e-10);
        assert!((cert.v1.norm() - 1.0).abs() < 1e-14);
        let eig = SymmetricEigen::new(cert.dense()).eigenvalues;
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((min - cert.eta).abs() < 1e-12 && (max - 1.0).abs() < 1e-12);
        // v1 is the vectorization of a symmetric matrix
        let v = unvectorize(&cert.v1, 2).unwrap();
        assert!((&v - v.transpose()).norm() < 1e-14);
    }

    #[test]
    fn zero_point_certificate_is_identity() {
        let z = col(&[0.6, 0.8]);
        let cert = optimal_certificate(&FactorMatrix::zeros(2, 1), &z).unwrap();
        assert_eq!(cert.eta, 1.0);
        assert!((cert.dense() - DMatrix::identity(4, 4)).norm() < 1e-15);
        let op = adversarial_operator(&FactorMatrix::zeros(2, 1), &z).unwrap();
        assert_eq!(op.achieved_delta, 0.0);
        assert!(op.spectral_delta() < 1e-14);
    }

    #[test]
    fn aligned_pair_has_no_certificate() {
        let (x, z) = (col(&[2.0, 0.0]), col(&[1.0, 0.0]));
        assert!(matches!(optimal_certificate(&x, &z), Err(Error::NoCertificate)));
        assert!(matches!(adversarial_operator(&x, &z), Err(Error::NoCertificate)));
        assert!(matches!(adversarial_operator(&z, &z), Err(Error::Coincident { .. })));
    }

    #[test]
    fn orthogonal_pair_operator() {
        let (x, z) = (col(&[1.0, 0.0]), col(&[0.0, 1.0]));
        let op = adversarial_operator(&x, &z).unwrap();
        assert!((op.achieved_delta - FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(op.gradient_norm(&x, &z).unwrap() <= 1e-8);
        let (lo, hi) = op.spectral_bounds();
        let eta = op.eta;
        assert!((lo - 2.0 * eta / (1.0 + eta)).abs() < 1e-12);
        assert!((hi - 2.0 / (1.0 + eta)).abs() < 1e-12);
        assert!((op.spectral_delta() - FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(op.operator.m(), 4);
    }

    #[test]
    fn operator_gram_matches_certificate_on_symmetric_subspace() {
        let x = FactorMatrix::from_row_slice(3, 2, &[0.4, 1.0, -0.2, 0.3, 0.9, -0.5]).unwrap();
        let z = FactorMatrix::from_row_slice(3, 2, &[1.1, 0.2, 0.1, -0.8, 0.3, 0.4]).unwrap();
        let op = adversarial_operator(&x, &z).unwrap();
        let basis = symmetric_basis::<f64>(3);
        let a = op.operator.matrix_form();
        let gram = basis.transpose() * a.transpose() * a * &basis;
        let target = basis.transpose() * op.certificate.dense() * &basis * (2.0 / (1.0 + op.eta));
        assert!((gram - target).norm() < 1e-12);
        let jac = jacobian_matrix(&x);
        let e = crate::linalg::error_vector(&x, &z).unwrap();
        assert!((jac.transpose() * op.certificate.apply(&e)).norm() < 1e-10);
    }

    #[test]
    fn primal_matches_dual_and_threshold() {
        let x = FactorMatrix::<f64>::from_row_slice(4, 2, &[0.4, 1.0, -0.2, 0.3, 0.9, -0.5, 0.1, 0.1]).unwrap();
        let z = FactorMatrix::<f64>::from_row_slice(4, 2, &[1.1, 0.2, 0.1, -0.8, 0.3, 0.4, -0.2, 0.6]).unwrap();
        let cert = optimal_certificate(&x, &z).unwrap();
        assert!((cert.eta - dual_eta(&x, &z).unwrap()).abs() < 1e-10);
        let op = adversarial_operator(&x, &z).unwrap();
        assert!((op.achieved_delta - delta_foc(&x, &z).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn rip_estimates_for_known_operators() {
        let id = SensingOperator::<f64>::identity(4);
        assert!(rip_monte_carlo(&id, 1, 200, 3).unwrap().delta_hat < 1e-14);
        let scaled = id.scaled(2f64.sqrt());
        let est = rip_monte_carlo(&scaled, 1, 200, 3).unwrap();
        assert!((est.delta_hat - 1.0).abs() < 1e-12);
        assert_eq!(est.rank, 2);
        assert_eq!(est, rip_monte_carlo(&scaled, 1, 200, 3).unwrap());
    }

    #[test]
    fn rip_probe_of_extremal_direction_reaches_achieved_delta() {
        let (x, z) = (col(&[1.0, 0.3, 0.0]), col(&[0.0, 1.0, 0.5]));
        let op = adversarial_operator(&x, &z).unwrap();
        let v = unvectorize(&op.certificate.v1, 3).unwrap();
        let probe = rip_probe(&op.operator, &v).unwrap();
        assert!((probe - op.achieved_delta).abs() < 1e-12);
        let est = rip_monte_carlo(&op.operator, 1, 2000, 11).unwrap();
        assert!(est.delta_hat <= op.achieved_delta + 1e-8);
    }

    #[test]
    fn record_serializes() {
        let cert = optimal_certificate(&col(&[1.0, 0.0]), &col(&[0.0, 1.0])).unwrap();
        let json = serde_json::to_string(&cert.record()).unwrap();
        let back: CertificateRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cert.record());
        assert!((back.delta - FRAC_1_SQRT_2).abs() < 1e-12);
    }
}
