//! Matrix-sensing instances: measurement ensembles, the objective
//! `f_A(X) = ||A(XX^T - ZZ^T)||^2` with its derivatives, gradient descent,
//! sampling of the neighborhood `B_eps`, and the recovery experiment.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{relative_error, vectorize, FactorMatrix};
use crate::scalar::Real;
use crate::seed::derive_seed;
use crate::thresholds::{conditioning, sample_complexity};

/// `m` symmetric `n x n` measurement matrices together with the `m x n^2`
/// matrix form whose rows are their vectorizations.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingOperator<T: Real> {
    n: usize,
    matrices: Vec<DMatrix<T>>,
    matrix_form: DMatrix<T>,
}

impl<T: Real> SensingOperator<T> {
    /// Validates that every matrix is `n x n` and symmetric to `1e-14` relative.
    pub fn new(matrices: Vec<DMatrix<T>>) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::InvalidConfig("operator needs at least one measurement".into()))?;
        let n = first.nrows();
        for (i, a) in matrices.iter().enumerate() {
            if a.nrows() != n || a.ncols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "measurement {i} is {}x{}, expected {n}x{n}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite);
            }
            let scale = if a.norm() > T::one() { a.norm() } else { T::one() };
            if (a - a.transpose()).norm() > T::lit(1e-14) * scale {
                return Err(Error::InvalidConfig(format!("measurement {i} is not symmetric")));
            }
        }
        let m = matrices.len();
        let mut matrix_form = DMatrix::zeros(m, n * n);
        for (i, a) in matrices.iter().enumerate() {
            matrix_form.row_mut(i).copy_from_slice(a.as_slice());
        }
        Ok(Self { n, matrices, matrix_form })
    }

    /// Builds from an `m x n^2` matrix form, symmetrizing each reshaped row.
    pub fn from_matrix_form(n: usize, rows: &DMatrix<T>) -> Result<Self> {
        if rows.ncols() != n * n {
            return Err(Error::DimensionMismatch(format!("matrix form has {} columns, expected {}", rows.ncols(), n * n)));
        }
        let half = T::lit(0.5);
        let matrices = (0..rows.nrows())
            .map(|i| {
                let a = DMatrix::from_iterator(n, n, rows.row(i).iter().copied());
                (&a + a.transpose()) * half
            })
            .collect();
        Self::new(matrices)
    }

    /// The `n^2` symmetrized standard basis matrices; an exact isometry on symmetric inputs.
    pub fn identity(n: usize) -> Self {
        let half = T::lit(0.5);
        let matrices = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx % n, idx / n);
                let mut a = DMatrix::zeros(n, n);
                a[(i, j)] += half;
                a[(j, i)] += half;
                a
            })
            .collect();
        Self::new(matrices).expect("basis matrices are symmetric")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrices(&self) -> &[DMatrix<T>] {
        &self.matrices
    }

    pub fn matrix_form(&self) -> &DMatrix<T> {
        &self.matrix_form
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            n: self.n,
            matrices: self.matrices.iter().map(|a| a * alpha).collect(),
            matrix_form: &self.matrix_form * alpha,
        }
    }

    fn check_square(&self, m: &DMatrix<T>) -> Result<()> {
        if m.nrows() != self.n || m.ncols() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "operator acts on {}x{} matrices, got {}x{}",
                self.n,
                self.n,
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(())
    }

    /// `A(M) = Amat vec(M)`.
    pub fn apply(&self, m: &DMatrix<T>) -> Result<DVector<T>> {
        self.check_square(m)?;
        Ok(&self.matrix_form * vectorize(m))
    }

    /// `A(M)` evaluated as the inner products `<A_i, M>` one by one.
    pub fn apply_entrywise(&self, m: &DMatrix<T>) -> Result<DVector<T>> {
        self.check_square(m)?;
        Ok(DVector::from_iterator(self.m(), self.matrices.iter().map(|a| a.dot(m))))
    }

    /// Adjoint `A^*(v) = sum_i v_i A_i`.
    pub fn adjoint(&self, v: &DVector<T>) -> Result<DMatrix<T>> {
        if v.len() != self.m() {
            return Err(Error::DimensionMismatch(format!("adjoint needs {} weights, got {}", self.m(), v.len())));
        }
        let flat = self.matrix_form.transpose() * v;
        Ok(DMatrix::from_column_slice(self.n, self.n, flat.as_slice()))
    }

    /// Measurements `b = A(ZZ^T)` of a ground truth.
    pub fn measure(&self, z: &FactorMatrix<T>) -> Result<DVector<T>> {
        self.apply(&z.gram())
    }
}

/// Gaussian ensemble normalised so that `E ||A(M)||^2 = ||M||_F^2` for symmetric `M`:
/// diagonal entries `N(0, 1/m)`, off-diagonal entries `N(0, 1/(2m))`.
///
/// Matrices are drawn one after another from a single stream, so the first `m`
/// matrices of a larger ensemble with the same seed agree up to the `1/sqrt(m)` scale.
pub fn gaussian_ensemble<T: Real>(n: usize, m: usize, seed: u64) -> Result<SensingOperator<T>> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidConfig(format!("ensemble needs n, m >= 1, got n={n}, m={m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (m as f64).sqrt();
    let off = std::f64::consts::FRAC_1_SQRT_2;
    let matrices = (0..m)
        .map(|_| {
            let mut a = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in 0..=j {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    let v = if i == j { g * scale } else { g * scale * off };
                    a[(i, j)] = T::lit(v);
                    a[(j, i)] = T::lit(v);
                }
            }
            a
        })
        .collect();
    SensingOperator::new(matrices)
}

fn check_instance<T: Real>(op: &SensingOperator<T>, x: &FactorMatrix<T>, b: &DVector<T>) -> Result<()> {
    if x.n() != op.n() {
        return Err(Error::DimensionMismatch(format!("X has {} rows, operator expects {}", x.n(), op.n())));
    }
    if b.len() != op.m() {
        return Err(Error::DimensionMismatch(format!("b has length {}, operator has {} measurements", b.len(), op.m())));
    }
    Ok(())
}

/// Residuals `<A_i, XX^T> - b_i`.
pub fn residuals<T: Real>(op: &SensingOperator<T>, x: &FactorMatrix<T>, b: &DVector<T>) -> Result<DVector<T>> {
    check_instance(op, x, b)?;
    Ok(op.apply(&x.gram())? - b)
}

/// `f_A(X) = sum_i (<A_i, XX^T> - b_i)^2`.
pub fn objective<T: Real>(op: &SensingOperator<T>, x: &FactorMatrix<T>, b: &DVector<T>) -> Result<T> {
    let r = residuals(op, x, b)?;
    Ok(r.dot(&r))
}

/// `grad f_A(X) = 4 sum_i r_i A_i X` for symmetric `A_i`.
pub fn gradient<T: Real>(op: &SensingOperator<T>, x: &FactorMatrix<T>, b: &DVector<T>) -> Result<DMatrix<T>> {
    let r = residuals(op, x, b)?;
    Ok(op.adjoint(&r)? * x.as_matrix() * T::lit(4.0))
}

fn check_direction<T: Real>(x: &FactorMatrix<T>, y: &DMatrix<T>) -> Result<()> {
    if y.shape() != x.as_matrix().shape() {
        return Err(Error::DimensionMismatch(format!("direction is {}x{}, X is {}x{}", y.nrows(), y.ncols(), x.n(), x.r())));
    }
    Ok(())
}

/// `<Y, hess f_A(X) Y> = 2 sum_i [<A_i, XY^T + YX^T>^2 + 2 r_i <A_i, YY^T>]`.
pub fn hessian_quadratic_form<T: Real>(
    op: &SensingOperator<T>,
    x: &FactorMatrix<T>,
    b: &DVector<T>,
    y: &DMatrix<T>,
) -> Result<T> {
    check_direction(x, y)?;
    let r = residuals(op, x, b)?;
    let xy = x.as_matrix() * y.transpose();
    let u = op.apply(&(&xy + xy.transpose()))?;
    let w = op.apply(&(y * y.transpose()))?;
    Ok(T::lit(2.0) * (u.dot(&u) + T::lit(2.0) * r.dot(&w)))
}

/// `hess f_A(X)[Y] = 4 [A^*(A(XY^T + YX^T)) X + A^*(r) Y]`.
pub fn hessian_vector_product<T: Real>(
    op: &SensingOperator<T>,
    x: &FactorMatrix<T>,
    b: &DVector<T>,
    y: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    check_direction(x, y)?;
    let r = residuals(op, x, b)?;
    let xy = x.as_matrix() * y.transpose();
    let u = op.apply(&(&xy + xy.transpose()))?;
    Ok((op.adjoint(&u)? * x.as_matrix() + op.adjoint(&r)? * y) * T::lit(4.0))
}

/// Options for [`gradient_descent`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdOptions {
    /// Stop once `||grad f|| <= tol (1 + ||X||_F^3)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    /// Power iterations used to estimate the curvature at `X0`.
    pub power_iterations: usize,
}

impl Default for GdOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 5000, armijo: 1e-4, power_iterations: 30 }
    }
}

/// Result of a gradient-descent run.
#[derive(Debug, Clone)]
pub struct GdOutcome<T: Real> {
    pub x: FactorMatrix<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with `f(X0)`.
    pub objective_history: Vec<f64>,
    pub final_gradient_norm: f64,
    pub initial_step: f64,
}

/// Power-iteration estimate of `|lambda_max|` of the Hessian at `X`.
pub fn curvature_estimate<T: Real>(
    op: &SensingOperator<T>,
    x: &FactorMatrix<T>,
    b: &DVector<T>,
    iterations: usize,
) -> Result<T> {
    let (n, r) = (x.n(), x.r());
    // Deterministic, non-symmetric start so it is not orthogonal to the top eigenvector by accident.
    let mut v = DMatrix::from_fn(n, r, |i, j| T::one() + T::lit(0.1 * ((i * r + j) % 7) as f64));
    v /= v.norm();
    let mut lambda = T::zero();
    for _ in 0..iterations.max(1) {
        let hv = hessian_vector_product(op, x, b, &v)?;
        let norm = hv.norm();
        if !(norm > T::zero()) || !norm.is_finite() {
            break;
        }
        lambda = norm;
        v = hv / norm;
    }
    Ok(lambda)
}

/// Gradient descent with Armijo backtracking (step halving). Each iteration
/// first tries twice the previous accepted step; the first trial is `1/L`
/// where `L` is a power-iteration curvature estimate at `X0`.
pub fn gradient_descent<T: Real>(
    op: &SensingOperator<T>,
    b: &DVector<T>,
    x0: &FactorMatrix<T>,
    opts: &GdOptions,
) -> Result<GdOutcome<T>> {
    let mut x = x0.clone();
    let mut f = objective(op, &x, b)?;
    if !f.is_finite() {
        return Err(Error::Diverged { iteration: 0 });
    }
    let lip = curvature_estimate(op, &x, b, opts.power_iterations)?;
    let initial_step = if lip > T::zero() { T::one() / lip } else { T::one() };
    let mut step = initial_step * T::lit(0.5);
    let tol = T::lit(opts.tol);
    let armijo = T::lit(opts.armijo);
    let mut history = vec![f.to_f64_lossy()];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        let g = gradient(op, &x, b)?;
        grad_norm = g.norm();
        let xn = x.frobenius_norm();
        if grad_norm <= tol * (T::one() + xn * xn * xn) {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        step *= T::lit(2.0);
        let decrease = armijo * grad_norm * grad_norm;
        let mut accepted = None;
        for _ in 0..80 {
            let cand = FactorMatrix::new(x.as_matrix() - &g * step);
            if let Ok(cand) = cand {
                let fc = objective(op, &cand, b)?;
                if fc.is_finite() && fc <= f - step * decrease {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            step *= T::lit(0.5);
        }
        match accepted {
            Some((cand, fc)) => {
                x = cand;
                f = fc;
                history.push(f.to_f64_lossy());
                iterations += 1;
            }
            // No decrease at any representable step: stationary to working precision.
            None => break,
        }
    }
    Ok(GdOutcome {
        x,
        iterations,
        converged,
        objective_history: history,
        final_gradient_norm: grad_norm.to_f64_lossy(),
        initial_step: initial_step.to_f64_lossy(),
    })
}

/// Where in `B_eps` a sample is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    /// With probability 1/2 on the shell `[eps/2, eps]`, otherwise anywhere in `(0, eps]`.
    Mixed,
    /// On the boundary `||XX^T - ZZ^T||_F = eps ||ZZ^T||_F` (from the inside).
    Boundary,
}

/// Samples a point of `B_eps` around `Z`.
pub fn sample_b_eps<T: Real>(z: &FactorMatrix<T>, epsilon: T, seed: u64) -> Result<FactorMatrix<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_b_eps_with(z, epsilon, Placement::Mixed, &mut rng)
}

/// Samples `X = Z + t D` with a Gaussian direction `D` and `t` found by
/// bisection so that the relative Gram error hits a target radius.
/// Membership is re-checked on the assembled `X`.
pub fn sample_b_eps_with<T: Real, R: Rng + ?Sized>(
    z: &FactorMatrix<T>,
    epsilon: T,
    placement: Placement,
    rng: &mut R,
) -> Result<FactorMatrix<T>> {
    if !(epsilon > T::zero()) || !epsilon.is_finite() {
        return Err(Error::InvalidConfig(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    let zm = z.as_matrix();
    let zz_norm = z.gram().norm();
    if zz_norm == T::zero() {
        return Err(Error::ZeroMatrix);
    }
    let target = match placement {
        Placement::Boundary => epsilon,
        Placement::Mixed => {
            let u = T::lit(rng.random_range(0.0..1.0));
            if rng.random_bool(0.5) {
                epsilon * (T::lit(0.5) + T::lit(0.5) * (T::one() - u))
            } else {
                epsilon * (T::one() - u)
            }
        }
    };
    const ATTEMPTS: usize = 16;
    for _ in 0..ATTEMPTS {
        let mut d = DMatrix::from_fn(z.n(), z.r(), |_, _| T::lit(StandardNormal.sample(rng)));
        let dn = d.norm();
        if dn == T::zero() {
            continue;
        }
        d *= zm.norm() / dn;
        // ||(Z + tD)(Z + tD)^T - ZZ^T||^2 = t^2 a + 2 t^3 b + t^4 c
        let zd = zm * d.transpose();
        let s1 = &zd + zd.transpose();
        let s2 = &d * d.transpose();
        let (a, bb, c) = (s1.dot(&s1), s1.dot(&s2), s2.dot(&s2));
        let rel = |t: T| -> T {
            let v = t * t * a + T::lit(2.0) * t * t * t * bb + t * t * t * t * c;
            (if v > T::zero() { v } else { T::zero() }).sqrt() / zz_norm
        };
        let mut hi = T::one();
        let mut grown = 0;
        while rel(hi) < target && grown < 200 {
            hi *= T::lit(2.0);
            grown += 1;
        }
        if rel(hi) < target {
            continue;
        }
        let mut lo = T::zero();
        for _ in 0..200 {
            let mid = (lo + hi) * T::lit(0.5);
            if mid <= lo || mid >= hi {
                break;
            }
            if rel(mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        for _ in 0..8 {
            let x = FactorMatrix::new(zm + &d * lo)?;
            if relative_error(&x, z)? <= epsilon {
                return Ok(x);
            }
            lo *= T::one() - T::lit(1e-9);
        }
    }
    Err(Error::SamplerFailure { attempts: ATTEMPTS })
}

/// Configuration of [`recovery_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub r: usize,
    pub m_list: Vec<usize>,
    pub epsilon_list: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub c0: f64,
    /// A trial succeeds when the final relative Gram error is at most this.
    pub success_threshold: f64,
    pub gd: GdOptions,
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 8,
            r: 1,
            m_list: vec![8, 16, 32, 64],
            epsilon_list: vec![0.2, 0.8],
            trials: 200,
            seed: 0,
            c0: 1.0,
            success_threshold: 1e-4,
            gd: GdOptions::default(),
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n == 0 || self.r == 0 || self.r > self.n {
            return bad(format!("need 1 <= r <= n, got n={}, r={}", self.n, self.r));
        }
        if self.m_list.is_empty() || self.m_list.contains(&0) {
            return bad("m_list must be nonempty with positive entries".into());
        }
        if self.epsilon_list.is_empty() || self.epsilon_list.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return bad("epsilon_list must be nonempty with finite nonnegative entries".into());
        }
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        if !(self.c0 > 0.0) {
            return bad(format!("C0 must be positive, got {}", self.c0));
        }
        if !(self.success_threshold > 0.0) {
            return bad("success threshold must be positive".into());
        }
        Ok(())
    }
}

/// One gradient-descent run of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub m: usize,
    pub epsilon: f64,
    pub trial: usize,
    pub ensemble_seed: u64,
    pub start_seed: u64,
    pub conditioning: f64,
    pub sample_estimate: u64,
    pub initial_rel_error: f64,
    pub final_rel_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub success: bool,
}

/// Aggregate of one `(m, eps)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub m: usize,
    pub epsilon: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub diverged: usize,
    pub mean_iterations: f64,
    /// Median over trials of the measurement count that rules out spurious minima in `B_eps`.
    pub median_sample_estimate: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub records: Vec<TrialRecord>,
    pub cells: Vec<CellSummary>,
}

impl ExperimentResult {
    pub fn cell(&self, m: usize, epsilon: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.m == m && c.epsilon == epsilon)
    }
}

/// Ground truth of trial `trial`: Gaussian, scaled to `||ZZ^T||_F = 1`.
pub fn experiment_ground_truth<T: Real>(n: usize, r: usize, seed: u64) -> Result<FactorMatrix<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let z = DMatrix::from_fn(n, r, |_, _| T::lit(StandardNormal.sample(&mut rng)));
        let gram_norm = (&z * z.transpose()).norm();
        if gram_norm > T::zero() {
            return FactorMatrix::new(z / gram_norm.sqrt());
        }
    }
}

fn run_trial<T: Real>(cfg: &ExperimentConfig, m: usize, epsilon: f64, trial: usize) -> Result<TrialRecord> {
    let t = trial as u64;
    // Ground truth and ensemble depend only on the trial, so cells are coupled across m and eps.
    let z: FactorMatrix<T> = experiment_ground_truth(cfg.n, cfg.r, derive_seed(derive_seed(cfg.seed, 1), t))?;
    let ensemble_seed = derive_seed(derive_seed(cfg.seed, 2), t);
    let start_seed = derive_seed(derive_seed(derive_seed(cfg.seed, 3), epsilon.to_bits()), t);
    let op = gaussian_ensemble::<T>(cfg.n, m, ensemble_seed)?;
    let b = op.measure(&z)?;
    let x0 = if epsilon == 0.0 {
        z.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(start_seed);
        sample_b_eps_with(&z, T::lit(epsilon), Placement::Boundary, &mut rng)?
    };
    let initial_rel_error = relative_error(&x0, &z)?.to_f64_lossy();
    let (final_rel_error, iterations, converged, diverged) = match gradient_descent(&op, &b, &x0, &cfg.gd) {
        Ok(out) => (relative_error(&out.x, &z)?.to_f64_lossy(), out.iterations, out.converged, false),
        Err(Error::Diverged { iteration }) => (f64::INFINITY, iteration, false, true),
        Err(err) => return Err(err),
    };
    let eps_t = T::lit(epsilon);
    Ok(TrialRecord {
        m,
        epsilon,
        trial,
        ensemble_seed,
        start_seed,
        conditioning: conditioning(&z)?.to_f64_lossy(),
        sample_estimate: sample_complexity(eps_t, &z, cfg.n, cfg.r, cfg.c0)?,
        initial_rel_error,
        final_rel_error,
        iterations,
        converged,
        diverged,
        success: !diverged && final_rel_error <= cfg.success_threshold,
    })
}

/// Runs gradient descent from boundary points of `B_eps` for every `(m, eps)` cell.
///
/// Cells are listed with `m` varying slowest. Results are identical with and
/// without `parallel`.
pub fn recovery_experiment<T: Real>(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.m_list.len() * cfg.epsilon_list.len() * cfg.trials);
    let mut cells = Vec::new();
    for &m in &cfg.m_list {
        for &epsilon in &cfg.epsilon_list {
            let cell: Vec<TrialRecord> = if cfg.parallel {
                (0..cfg.trials)
                    .into_par_iter()
                    .map(|t| run_trial::<T>(cfg, m, epsilon, t))
                    .collect::<Result<_>>()?
            } else {
                (0..cfg.trials).map(|t| run_trial::<T>(cfg, m, epsilon, t)).collect::<Result<_>>()?
            };
            let successes = cell.iter().filter(|r| r.success).count();
            let mut estimates: Vec<u64> = cell.iter().map(|r| r.sample_estimate).collect();
            estimates.sort_unstable();
            cells.push(CellSummary {
                m,
                epsilon,
                trials: cfg.trials,
                successes,
                success_rate: successes as f64 / cfg.trials as f64,
                diverged: cell.iter().filter(|r| r.diverged).count(),
                mean_iterations: cell.iter().map(|r| r.iterations as f64).sum::<f64>() / cfg.trials as f64,
                median_sample_estimate: estimates[estimates.len() / 2],
            });
            records.extend(cell);
        }
    }
    Ok(ExperimentResult { config: cfg.clone(), records, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_factor(rng: &mut ChaCha8Rng, n: usize, r: usize) -> FactorMatrix<f64> {
        FactorMatrix::new(DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(rng))).unwrap()
    }

    #[test]
    fn application_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op = gaussian_ensemble::<f64>(5, 12, 3).unwrap();
        for a in op.matrices() {
            assert_eq!(a, &a.transpose());
        }
        for _ in 0..50 {
            let m = DMatrix::from_fn(5, 5, |_, _| StandardNormal.sample(&mut rng));
            let lhs = op.apply(&m).unwrap();
            let rhs = op.apply_entrywise(&m).unwrap();
            assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + m.norm()));
        }
    }

    #[test]
    fn ensemble_is_deterministic_and_nested() {
        let a = gaussian_ensemble::<f64>(4, 10, 99).unwrap();
        assert_eq!(a, gaussian_ensemble::<f64>(4, 10, 99).unwrap());
        assert_ne!(a, gaussian_ensemble::<f64>(4, 10, 100).unwrap());
        let big = gaussian_ensemble::<f64>(4, 40, 99).unwrap();
        let ratio = (40.0f64 / 10.0).sqrt();
        for i in 0..10 {
            assert!((&big.matrices()[i] * ratio - &a.matrices()[i]).norm() < 1e-14);
        }
        assert!(gaussian_ensemble::<f64>(0, 3, 1).is_err());
    }

    #[test]
    fn ensemble_size_from_rip_conversion() {
        let m = crate::thresholds::samples_for_rip(0.5, 8, 1, 1.0).unwrap() as usize;
        assert_eq!(gaussian_ensemble::<f64>(8, m, 5).unwrap().m(), 32);
    }

    #[test]
    fn ensemble_expectation_is_isometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = DMatrix::from_fn(6, 6, |_, _| { let v: f64 = StandardNormal.sample(&mut rng); v });
        let mut m = &raw + raw.transpose();
        m /= m.norm();
        let mean: f64 = (0..200)
            .map(|s| gaussian_ensemble::<f64>(6, 20, 1000 + s).unwrap().apply(&m).unwrap().norm_squared())
            .sum::<f64>()
            / 200.0;
        assert!((0.9..=1.1).contains(&mean), "mean {mean}");
    }

    #[test]
    fn identity_operator_is_isometric_on_symmetric_inputs() {
        let op = SensingOperator::<f64>::identity(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_factor(&mut rng, 4, 2);
        let z = random_factor(&mut rng, 4, 2);
        let b = op.measure(&z).unwrap();
        let f = objective(&op, &x, &b).unwrap();
        let direct = (x.gram() - z.gram()).norm_squared();
        assert!((f - direct).abs() <= 1e-12 * direct);
        assert_eq!(objective(&op, &z, &b).unwrap(), 0.0);
    }

    #[test]
    fn objective_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = gaussian_ensemble::<f64>(4, 9, 4).unwrap();
        let x = random_factor(&mut rng, 4, 2);
        let z = random_factor(&mut rng, 4, 2);
        let b = op.measure(&z).unwrap();
        let xx = x.gram();
        let mut naive = 0.0;
        for (a, bi) in op.matrices().iter().zip(b.iter()) {
            let mut ip = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    ip += a[(i, j)] * xx[(i, j)];
                }
            }
            naive += (ip - bi) * (ip - bi);
        }
        let f = objective(&op, &x, &b).unwrap();
        assert!((f - naive).abs() <= 1e-12 * naive.max(1.0));
    }

    #[test]
    fn gradient_vanishes_at_solution_and_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = gaussian_ensemble::<f64>(5, 20, 6).unwrap();
        let z = random_factor(&mut rng, 5, 2);
        let b = op.measure(&z).unwrap();
        assert!(gradient(&op, &z, &b).unwrap().norm() < 1e-12);
        assert_eq!(gradient(&op, &FactorMatrix::zeros(5, 2), &b).unwrap(), DMatrix::zeros(5, 2));
    }

    #[test]
    fn hessian_at_solution_and_saddle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let op = SensingOperator::<f64>::identity(4);
        let z = random_factor(&mut rng, 4, 1);
        let b = op.measure(&z).unwrap();
        for _ in 0..20 {
            let y = DMatrix::from_fn(4, 1, |_, _| StandardNormal.sample(&mut rng));
            let at_z = hessian_quadratic_form(&op, &z, &b, &y).unwrap();
            let zy = z.as_matrix() * y.transpose();
            let expected = 2.0 * (&zy + zy.transpose()).norm_squared();
            assert!((at_z - expected).abs() <= 1e-10 * expected.max(1.0));
            assert!(at_z >= 0.0);
            let at_zero = hessian_quadratic_form(&op, &FactorMatrix::zeros(4, 1), &b, &y).unwrap();
            let expected = -4.0 * z.gram().dot(&(&y * y.transpose()));
            assert!((at_zero - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
        let along_z = hessian_quadratic_form(&op, &FactorMatrix::zeros(4, 1), &b, z.as_matrix()).unwrap();
        assert!(along_z < 0.0);
    }

    #[test]
    fn descent_from_solution_takes_no_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let op = gaussian_ensemble::<f64>(4, 30, 12).unwrap();
        let z = random_factor(&mut rng, 4, 1);
        let b = op.measure(&z).unwrap();
        let out = gradient_descent(&op, &b, &z, &GdOptions::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.converged);
    }

    #[test]
    fn descent_converges_on_identity_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let op = SensingOperator::<f64>::identity(5);
        let z = random_factor(&mut rng, 5, 2);
        let b = op.measure(&z).unwrap();
        let x0 = sample_b_eps(&z, 0.3, 5).unwrap();
        let out = gradient_descent(&op, &b, &x0, &GdOptions::default()).unwrap();
        assert!(out.converged);
        assert!(relative_error(&out.x, &z).unwrap() <= 1e-6);
    }

    #[test]
    fn descent_objective_is_monotone() {
        for s in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
            let n = rng.random_range(2..6);
            let r = rng.random_range(1..=n.min(2));
            let m = rng.random_range(n..4 * n * r + n);
            let op = gaussian_ensemble::<f64>(n, m, s).unwrap();
            let z = random_factor(&mut rng, n, r);
            let x0 = random_factor(&mut rng, n, r);
            let b = op.measure(&z).unwrap();
            let opts = GdOptions { max_iter: 300, ..GdOptions::default() };
            let out = gradient_descent(&op, &b, &x0, &opts).unwrap();
            for w in out.objective_history.windows(2) {
                assert!(w[1] <= w[0], "seed {s}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn b_eps_samples_are_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_factor(&mut rng, 4, 2);
        for s in 0..500 {
            let x = sample_b_eps(&z, 0.4, s).unwrap();
            assert!(relative_error(&x, &z).unwrap() <= 0.4);
        }
        for _ in 0..100 {
            let x = sample_b_eps_with(&z, 0.4, Placement::Boundary, &mut rng).unwrap();
            let rel = relative_error(&x, &z).unwrap();
            assert!(rel <= 0.4 && rel > 0.4 * (1.0 - 1e-8), "{rel}");
        }
        let tiny = sample_b_eps(&z, 1e-6, 9).unwrap();
        assert!(relative_error(&tiny, &z).unwrap() <= 1e-6);
        assert!(sample_b_eps(&z, 0.0, 1).is_err());
        assert_eq!(sample_b_eps(&FactorMatrix::<f64>::zeros(3, 1), 0.1, 1), Err(Error::ZeroMatrix));
    }

    #[test]
    fn experiment_cell_with_zero_radius_always_succeeds() {
        let cfg = ExperimentConfig { n: 4, m_list: vec![6], epsilon_list: vec![0.0], trials: 5, ..Default::default() };
        let res = recovery_experiment::<f64>(&cfg).unwrap();
        assert_eq!(res.cells[0].success_rate, 1.0);
        assert!(res.records.iter().all(|r| r.iterations == 0));
    }

    #[test]
    fn experiment_is_deterministic_and_parallel_invariant() {
        let cfg = ExperimentConfig {
            n: 5,
            m_list: vec![10, 40],
            epsilon_list: vec![0.3],
            trials: 6,
            seed: 77,
            ..Default::default()
        };
        let a = recovery_experiment::<f64>(&cfg).unwrap();
        let b = recovery_experiment::<f64>(&ExperimentConfig { parallel: false, ..cfg.clone() }).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.cells, b.cells);
        for c in &a.cells {
            assert_eq!(c.success_rate, c.successes as f64 / c.trials as f64);
        }
    }

    #[test]
    fn experiment_config_validation() {
        let bad = ExperimentConfig { r: 3, n: 2, ..Default::default() };
        assert!(matches!(recovery_experiment::<f64>(&bad), Err(Error::InvalidConfig(_))));
        let bad = ExperimentConfig { m_list: vec![], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { epsilon_list: vec![-0.1], ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
