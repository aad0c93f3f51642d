//! Restricted-isometry thresholds for spurious critical points of the
//! factored matrix-sensing objective `f_A(X) = ||A(XX^T - ZZ^T)||^2`.
//!
//! The central quantity is [`delta_foc`]: the smallest RIP constant of an
//! operator that turns a given `X` into a spurious critical point. It has the
//! closed form `cos(theta)`, where `theta` is the angle between the error
//! `vec(XX^T - ZZ^T)` and the range of the Jacobian at `X`.
//!
//! ```
//! use rip_threshold::{delta_foc, FactorMatrixF64};
//!
//! let z = FactorMatrixF64::from_column(&[1.0, 0.0]).unwrap();
//! let x = FactorMatrixF64::from_column(&[0.0, 1.0]).unwrap();
//! assert!((delta_foc(&x, &z).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
//! ```
//!
//! Everything numeric is generic over [`Real`] (`f32`/`f64`); the `*F64`
//! aliases fix the scalar for the common case.

// `!(a > b)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod error;
pub mod io;
pub mod landscape;
pub mod linalg;
pub mod oracle;
pub mod scalar;
pub mod seed;
pub mod sensing;
pub mod thresholds;
pub mod verify;

pub use adversarial::{
    adversarial_operator, optimal_certificate, rip_monte_carlo, spectral_delta, CertificateH, CertificateRecord,
    CertifiedOperator, ResidualNorms, RipEstimate,
};
pub use error::{Error, Result};
pub use landscape::{epsilon_sweep, rank1_grid, GridRow, Rank1Grid, SweepRow};
pub use linalg::{error_vector, jacobian_matrix, rank2_eigvals, FactorMatrix, Rank2Spectrum, Svd, Tolerances};
pub use scalar::Real;
pub use seed::derive_seed;
pub use sensing::{
    gaussian_ensemble, gradient, gradient_descent, objective, recovery_experiment, sample_b_eps, CellSummary,
    ExperimentConfig, ExperimentResult, GdOptions, GdOutcome, Placement, SensingOperator, TrialRecord,
};
pub use thresholds::{
    conditioning, delta_foc, delta_foc_numeric, delta_from_eta, delta_star, dual_eta, eig_split_value,
    eta_from_delta, neighborhood_delta_foc_bound, sample_complexity, samples_for_rip, sin_theta, sin_theta_sq_bound,
    soc_lower_bound, ThresholdReport,
};

pub type FactorMatrixF64 = FactorMatrix<f64>;
pub type SensingOperatorF64 = SensingOperator<f64>;
pub type CertificateHF64 = CertificateH<f64>;
pub type CertifiedOperatorF64 = CertifiedOperator<f64>;
pub type Rank1GridF64 = Rank1Grid<f64>;
pub type TolerancesF64 = Tolerances<f64>;
