//! Self-check suite: closed forms against independent oracles, the appendix
//! lemmas, the neighborhood bounds and derivative checks, on seeded random
//! instances. Each check reports its worst observed discrepancy.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{adversarial_operator, optimal_certificate, rip_monte_carlo};
use crate::error::{Error, Result};
use crate::landscape::{default_phi_axis, default_rho_axis, rank1_grid, rank1_grid_in_frame, sampled_infimum};
use crate::linalg::{jacobian_apply, jacobian_transpose_apply, rank2_eigvals, relative_error, FactorMatrix};
use crate::oracle::{dense_eigenvalues, eig_split_alpha_grid, gradient_fd, hessian_qf_fd};
use crate::seed::derive_seed;
use crate::sensing::{experiment_ground_truth, gaussian_ensemble, gradient, hessian_quadratic_form, sample_b_eps_with, Placement};
use crate::thresholds::{
    conditioning, delta_foc, delta_foc_numeric, delta_from_eta, dual_eta, dual_witness_check, eig_split_value,
    eta_from_delta, neighborhood_delta_foc_bound, sin_theta, sin_theta_sq_bound,
};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    /// Worst value of the checked quantity (a discrepancy, or a margin for strict bounds).
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// `worst <= tolerance`.
    fn at_most(name: &str, cases: usize, worst: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), cases, worst, tolerance, passed: worst <= tolerance, detail }
    }

    /// `worst > tolerance`.
    fn above(name: &str, cases: usize, worst: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), cases, worst, tolerance, passed: worst > tolerance, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} (cases {}, worst {:.3e}, tol {:.1e}){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance,
            if self.detail.is_empty() { String::new() } else { format!(": {}", self.detail) }
        )
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random pair with `n` in `2..=8`, `r` in `1..=min(3, n)`. When `deficient`
/// is set, `X` has rank below `r` (zero for `r = 1`).
pub fn random_pair(rng: &mut ChaCha8Rng, deficient: bool) -> (FactorMatrix<f64>, FactorMatrix<f64>) {
    let n = rng.random_range(2..=8);
    let r = rng.random_range(1..=n.min(3));
    let z = FactorMatrix::new(gaussian(rng, n, r)).expect("finite");
    let x = if deficient {
        let k = rng.random_range(0..r);
        gaussian(rng, n, k) * gaussian(rng, r, k).transpose()
    } else {
        gaussian(rng, n, r)
    };
    (FactorMatrix::new(x).expect("finite"), z)
}

/// Random full-rank pair with `r < n`. With `r = n` every full-rank `X` spans
/// `R^n`, the error lies in `range(Jac)` and no certificate exists.
pub fn random_certificate_pair(rng: &mut ChaCha8Rng) -> (FactorMatrix<f64>, FactorMatrix<f64>) {
    let n = rng.random_range(2..=8);
    let r = rng.random_range(1..=(n - 1).min(3));
    let z = FactorMatrix::new(gaussian(rng, n, r)).expect("finite");
    (FactorMatrix::new(gaussian(rng, n, r)).expect("finite"), z)
}

fn max_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

fn par_cases<F>(cases: usize, seed: u64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut ChaCha8Rng, usize) -> Result<f64> + Sync,
{
    (0..cases)
        .into_par_iter()
        .map(|i| f(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64)), i))
        .collect()
}

/// `|delta_foc - delta_foc_numeric|` on random pairs, the last `deficient` with rank-deficient `X`.
pub fn closed_form_vs_numeric(pairs: usize, deficient: usize, seed: u64, tol: f64) -> Result<Check> {
    let errs = par_cases(pairs, seed, |rng, i| {
        let (x, z) = random_pair(rng, i + deficient >= pairs);
        Ok((delta_foc(&x, &z)? - delta_foc_numeric(&x, &z)?).abs())
    })?;
    let detail = format!("{} rank-deficient", deficient.min(pairs));
    Ok(Check::at_most("closed form vs least squares", pairs, max_of(errs.into_iter()), tol, detail))
}

/// Primal certificate value against the dual, and random dual probes against the dual optimum.
pub fn strong_duality(pairs: usize, probes: usize, seed: u64, tol_eta: f64, tol_probe: f64) -> Result<[Check; 2]> {
    let res: Vec<(f64, f64)> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let (x, z) = random_certificate_pair(&mut rng);
            let primal = optimal_certificate(&x, &z)?.eta;
            let gap = (primal - dual_eta(&x, &z)?).abs();
            let report = dual_witness_check(&x, &z, probes, derive_seed(seed ^ 0x5eed, i as u64))?;
            Ok((gap, report.max_undercut))
        })
        .collect::<Result<_>>()?;
    Ok([
        Check::at_most("primal eta = dual eta", pairs, max_of(res.iter().map(|r| r.0)), tol_eta, String::new()),
        Check::at_most(
            "dual probes never beat the optimum",
            pairs * probes,
            max_of(res.iter().map(|r| r.1)),
            tol_probe,
            String::new(),
        ),
    ])
}

/// Rank-two spectrum against a dense eigensolver.
pub fn rank2_lemma(cases: usize, seed: u64, tol: f64) -> Result<Check> {
    let errs = par_cases(cases, seed, |rng, _| {
        let n = rng.random_range(2..=10);
        let a: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let b: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let spec = rank2_eigvals(&a, &b)?;
        let ev = dense_eigenvalues(&(&a * b.transpose() + &b * a.transpose()));
        let mut err = (ev[0] - spec.lambda_min).abs().max((ev[n - 1] - spec.lambda_max).abs());
        for v in &ev[1..n - 1] {
            err = err.max(v.abs());
        }
        Ok(err)
    })?;
    Ok(Check::at_most("rank-two eigenvalues vs dense solver", cases, max_of(errs.into_iter()), tol, String::new()))
}

/// Eigen-splitting closed form against the one-dimensional search.
pub fn eig_split_lemma(cases: usize, seed: u64, tol: f64) -> Result<Check> {
    let errs = par_cases(cases, seed, |rng, _| {
        let n = rng.random_range(1..=8);
        let g = gaussian(rng, n, n);
        let m = &g + g.transpose();
        Ok((eig_split_value(&m)? - eig_split_alpha_grid(&m, 2000)?).abs())
    })?;
    Ok(Check::at_most("eigen-splitting value vs alpha search", cases, max_of(errs.into_iter()), tol, String::new()))
}

/// Adversarial operators: stationarity of `X` and RIP constant equal to `cos(theta)`.
pub fn certificate_sharpness(pairs: usize, seed: u64, tol_grad: f64, tol_delta: f64) -> Result<[Check; 2]> {
    let res: Vec<(f64, f64)> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let (x, z) = random_certificate_pair(&mut rng);
            let op = adversarial_operator(&x, &z)?;
            let xn = x.frobenius_norm();
            let grad = op.gradient_norm(&x, &z)? / (1.0 + xn * xn * xn);
            Ok((grad, (op.spectral_delta() - delta_foc(&x, &z)?).abs()))
        })
        .collect::<Result<_>>()?;
    Ok([
        Check::at_most(
            "adversarial operator makes X critical",
            pairs,
            max_of(res.iter().map(|r| r.0)),
            tol_grad,
            "||grad|| / (1 + ||X||^3)".into(),
        ),
        Check::at_most("spectral delta = cos(theta)", pairs, max_of(res.iter().map(|r| r.1)), tol_delta, String::new()),
    ])
}

/// Outcome of the impossibility check for one Gaussian ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpossibilityStats {
    pub delta_hat: f64,
    pub points: usize,
    pub rejected: usize,
    /// Smallest `||grad f(X)|| / (||e|| ||X||_F)` over the accepted points.
    pub min_scaled_gradient: f64,
}

/// Gradient norms of `f_A` for a Gaussian ensemble at points where `cos(theta)`
/// exceeds the Monte-Carlo RIP estimate by `margin`.
pub fn impossibility(n: usize, r: usize, m: usize, points: usize, margin: f64, seed: u64) -> Result<ImpossibilityStats> {
    let op = gaussian_ensemble::<f64>(n, m, derive_seed(seed, 1))?;
    let delta_hat = rip_monte_carlo(&op, r, 4000, derive_seed(seed, 2))?.delta_hat;
    let z = experiment_ground_truth::<f64>(n, r, derive_seed(seed, 3))?;
    let b = op.measure(&z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let (mut accepted, mut rejected, mut worst) = (0, 0, f64::INFINITY);
    while accepted < points {
        if rejected > 1000 * points {
            return Err(Error::SamplerFailure { attempts: rejected });
        }
        let x = if rng.random_bool(0.5) {
            sample_b_eps_with(&z, rng.random_range(0.01..2.0), Placement::Mixed, &mut rng)?
        } else {
            let g = gaussian(&mut rng, n, r);
            let scale = z.frobenius_norm() * rng.random_range(0.2..2.0) / g.norm();
            FactorMatrix::new(g * scale)?
        };
        if delta_foc(&x, &z)? < delta_hat + margin {
            rejected += 1;
            continue;
        }
        let e_norm = (x.gram() - z.gram()).norm();
        let scaled = gradient(&op, &x, &b)?.norm() / (e_norm * x.frobenius_norm());
        worst = worst.min(scaled);
        accepted += 1;
    }
    Ok(ImpossibilityStats { delta_hat, points, rejected, min_scaled_gradient: worst })
}

/// Ground truths used by the neighborhood checks: a unit rank-one `z`, `I_2`,
/// and a seeded Gaussian `4 x 2` redrawn until `C <= 2`.
pub fn reference_ground_truths(seed: u64) -> Vec<(String, FactorMatrix<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random = loop {
        let z = FactorMatrix::new(gaussian(&mut rng, 4, 2)).expect("finite");
        if conditioning(&z).map(|c| c <= 2.0).unwrap_or(false) {
            break z;
        }
    };
    vec![
        ("rank-1 unit".into(), FactorMatrix::from_column(&[1.0, 0.0, 0.0]).expect("column")),
        ("I_2".into(), FactorMatrix::new(DMatrix::identity(2, 2)).expect("identity")),
        ("random 4x2".into(), random),
    ]
}

/// Largest `sin^2(theta) - eps / (2/C - eps)` over samples of `B_eps`; also the violation count at `slack`.
pub fn sin_theta_bound_excess(
    z: &FactorMatrix<f64>,
    eps: f64,
    samples: usize,
    seed: u64,
    slack: f64,
) -> Result<(f64, usize)> {
    let bound = sin_theta_sq_bound(eps, z)?;
    let chunks = samples.div_ceil(1024);
    let parts: Vec<(f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let (mut worst, mut violations) = (f64::NEG_INFINITY, 0);
            for _ in 0..1024.min(samples - c * 1024) {
                let x = sample_b_eps_with(z, eps, Placement::Mixed, &mut rng)?;
                debug_assert!(relative_error(&x, z)? <= eps);
                let s = sin_theta(&x, z)?;
                let excess = s * s - bound;
                worst = worst.max(excess);
                if excess > slack {
                    violations += 1;
                }
            }
            Ok((worst, violations))
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().fold((f64::NEG_INFINITY, 0), |a, b| (a.0.max(b.0), a.1 + b.1)))
}

const NEIGHBORHOOD_EPS: [f64; 3] = [0.1, 0.3, 0.5];

/// The `sin^2(theta)` bound over `B_eps` for the reference ground truths.
pub fn neighborhood_sin_bound(samples: usize, seed: u64) -> Result<Check> {
    let (mut worst, mut violations, mut cases) = (f64::NEG_INFINITY, 0, 0);
    for (k, (_, z)) in reference_ground_truths(seed).iter().enumerate() {
        for (j, &eps) in NEIGHBORHOOD_EPS.iter().enumerate() {
            let (w, v) = sin_theta_bound_excess(z, eps, samples, derive_seed(seed, (10 * k + j) as u64), 1e-12)?;
            worst = worst.max(w);
            violations += v;
            cases += samples;
        }
    }
    let mut check = Check::at_most("sin^2 bound over B_eps", cases, worst, 1e-12, format!("{violations} violations"));
    check.passed = violations == 0;
    Ok(check)
}

/// Smallest `min delta_foc(B_eps) - sqrt([1 - C eps]_+)` over the reference ground truths.
pub fn neighborhood_threshold_bound(samples: usize, seed: u64) -> Result<Check> {
    let mut margin = f64::INFINITY;
    let mut cases = 0;
    for (k, (_, z)) in reference_ground_truths(seed).iter().enumerate() {
        for (j, &eps) in NEIGHBORHOOD_EPS.iter().enumerate() {
            let inf = sampled_infimum(z, eps, samples, derive_seed(seed, (100 + 10 * k + j) as u64))?;
            margin = margin.min(inf - neighborhood_delta_foc_bound(eps, z)?);
            cases += samples;
        }
    }
    Ok(Check::above("delta_foc over B_eps exceeds sqrt(1 - C eps)", cases, margin, 0.0, "worst is the smallest margin".into()))
}

/// Analytic gradient and Hessian quadratic form against finite differences.
pub fn calculus(instances: usize, seed: u64, tol_grad: f64, tol_hess: f64) -> Result<[Check; 2]> {
    let res: Vec<(f64, f64)> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let n = rng.random_range(2..=6);
            let r = rng.random_range(1..=n.min(3));
            let m = rng.random_range(n..=3 * n * n);
            let op = gaussian_ensemble::<f64>(n, m, rng.random())?;
            let z = FactorMatrix::new(gaussian(&mut rng, n, r))?;
            let x = FactorMatrix::new(gaussian(&mut rng, n, r))?;
            let b = op.measure(&z)?;
            let scale = x.frobenius_norm().max(1.0);
            let g = gradient(&op, &x, &b)?;
            let g_fd = gradient_fd(&op, &x, &b, 1e-6 * scale)?;
            let grad_err = (&g - g_fd).norm() / g.norm();
            let mut y = gaussian(&mut rng, n, r);
            y *= x.frobenius_norm() / y.norm();
            let q = hessian_quadratic_form(&op, &x, &b, &y)?;
            let q_fd = hessian_qf_fd(&op, &x, &b, &y, 1e-2)?;
            Ok((grad_err, (q - q_fd).abs() / q.abs().max(f64::MIN_POSITIVE)))
        })
        .collect::<Result<_>>()?;
    Ok([
        Check::at_most("gradient vs central differences", instances, max_of(res.iter().map(|r| r.0)), tol_grad, "relative".into()),
        Check::at_most("Hessian form vs second differences", instances, max_of(res.iter().map(|r| r.1)), tol_hess, "relative".into()),
    ])
}

/// Worst deviation of `delta(eta(d)) = d` on a uniform grid of `[0, 1]`.
pub fn eta_delta_involution(points: usize) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for k in 0..=points {
        let d = k as f64 / points as f64;
        worst = worst.max((delta_from_eta(eta_from_delta(d)?)? - d).abs());
    }
    Ok(Check::at_most("eta/delta involution", points + 1, worst, 1e-14, String::new()))
}

/// Rank-one grid anchors and the frame invariance of the grid.
pub fn rank1_grid_checks(seed: u64) -> Result<[Check; 2]> {
    let phi = default_phi_axis::<f64>();
    let rho = default_rho_axis::<f64>();
    let unit = rank1_grid(&[1.0], &phi)?;
    let g = rank1_grid(&rho, &phi)?;
    let last = phi.len() - 1;
    let mut err = (unit.delta_foc_values[(0, last)] - std::f64::consts::FRAC_1_SQRT_2).abs();
    for i in 0..rho.len() {
        err = err.max((g.delta_foc_values[(i, 0)] - 1.0).abs());
    }
    let monotone = unit.delta_foc_values.row(0).iter().zip(unit.delta_foc_values.row(0).iter().skip(1)).all(|(a, b)| b <= a);
    let small = g.delta_foc_values[(0, last)];
    let mut anchors = Check::at_most("rank-one grid anchors", rho.len() + 1, err, 1e-10, format!("delta(0.05, 90deg) = {small:.4}"));
    anchors.passed &= monotone && small <= 0.06;
    let coarse_rho: Vec<f64> = rho.iter().step_by(10).copied().collect();
    let coarse_phi: Vec<f64> = phi.iter().step_by(10).copied().collect();
    let a = rank1_grid(&coarse_rho, &coarse_phi)?;
    let b = rank1_grid_in_frame(&coarse_rho, &coarse_phi, 6, seed)?;
    let diff = (a.delta_foc_values - b.delta_foc_values).amax().max((a.rel_error_values - b.rel_error_values).amax());
    Ok([anchors, Check::at_most("grid frame invariance", coarse_rho.len() * coarse_phi.len(), diff, 1e-10, String::new())])
}

/// `<Jac y, v> = <y, Jac^T v>` and `||Jac y|| <= 2 ||X||_F ||y||_F`.
pub fn jacobian_adjoint(cases: usize, seed: u64) -> Result<Check> {
    let errs = par_cases(cases, seed, |rng, _| {
        let (x, _) = random_pair(rng, false);
        let (n, r) = (x.n(), x.r());
        let y = gaussian(rng, n, r);
        let v = DVector::from_fn(n * n, |_, _| StandardNormal.sample(rng));
        let jy = jacobian_apply(&x, &y);
        let jtv = jacobian_transpose_apply(&x, &v)?;
        let lhs = jy.dot(&v);
        let rhs = y.dot(&jtv);
        let err = (lhs - rhs).abs() / (jy.norm() * v.norm());
        let over = (jy.norm() - 2.0 * x.as_matrix().norm() * y.norm()).max(0.0);
        Ok(err.max(over))
    })?;
    Ok(Check::at_most("Jacobian adjoint identity", cases, max_of(errs.into_iter()), 1e-12, String::new()))
}

/// Case counts for [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub pairs: usize,
    pub probes: usize,
    pub lemma_cases: usize,
    pub neighborhood_samples: usize,
    pub calculus_instances: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { seed: 0, pairs: 200, probes: 1000, lemma_cases: 300, neighborhood_samples: 5000, calculus_instances: 100 }
    }
}

/// Runs every check with the given case counts.
pub fn run_suite(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let s = |k: u64| derive_seed(cfg.seed, k);
    let mut out = vec![
        closed_form_vs_numeric(cfg.pairs, cfg.pairs / 5, s(1), 1e-8)?,
        rank2_lemma(cfg.lemma_cases, s(2), 1e-10)?,
        eig_split_lemma(cfg.lemma_cases, s(3), 1e-6)?,
        eta_delta_involution(1000)?,
        jacobian_adjoint(cfg.lemma_cases, s(4))?,
    ];
    out.extend(strong_duality(cfg.pairs / 4, cfg.probes, s(5), 1e-8, 1e-10)?);
    out.extend(certificate_sharpness(cfg.pairs / 4, s(6), 1e-8, 1e-10)?);
    out.push(neighborhood_sin_bound(cfg.neighborhood_samples, s(7))?);
    out.push(neighborhood_threshold_bound(cfg.neighborhood_samples, s(8))?);
    out.extend(calculus(cfg.calculus_instances, s(9), 1e-5, 1e-4)?);
    out.extend(rank1_grid_checks(s(10))?);
    Ok(out)
}
