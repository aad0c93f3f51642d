//! Dense linear-algebra primitives and the geometric objects of the
//! first-order landscape analysis: column-major vectorization, the error
//! vector `e = vec(XX^T - ZZ^T)`, the Jacobian operator
//! `Jac(X) vec(Y) = vec(XY^T + YX^T)` and the spectrum of rank-two
//! symmetric matrices.
//!
//! Vectorization is column-major everywhere in the crate. `nalgebra` stores
//! matrices column-major, so `vectorize` is a copy of the backing slice.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Numerical tolerances shared by the threshold routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances<T> {
    /// `XX^T = ZZ^T` is declared when `||XX^T - ZZ^T||_F <= coincidence * max(1, ||ZZ^T||_F)`.
    pub coincidence: T,
    /// Relative singular-value cutoff. `None` selects `max(rows, cols) * eps`.
    pub rank_rtol: Option<T>,
}

impl<T: Real> Default for Tolerances<T> {
    fn default() -> Self {
        let floor = T::machine_epsilon() * T::lit(64.0);
        let coincidence = if T::lit(1e-12) > floor { T::lit(1e-12) } else { floor };
        Self { coincidence, rank_rtol: None }
    }
}

impl<T: Real> Tolerances<T> {
    /// Absolute singular-value cutoff for a matrix with the given shape and largest singular value.
    pub fn rank_cutoff(&self, rows: usize, cols: usize, sigma_max: T) -> T {
        let rtol = self
            .rank_rtol
            .unwrap_or_else(|| T::from_usize_lossy(rows.max(cols)) * T::machine_epsilon());
        rtol * sigma_max
    }
}

/// An `n x r` factor: a candidate point `X` or the ground truth `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix<T: Real> {
    entries: DMatrix<T>,
}

impl<T: Real> FactorMatrix<T> {
    pub fn new(entries: DMatrix<T>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "factor must be at least 1x1, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.ncols() > entries.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "factor must have r <= n, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { entries })
    }

    /// Builds from row-major data, the layout of the text matrix format.
    pub fn from_row_slice(n: usize, r: usize, data: &[T]) -> Result<Self> {
        if data.len() != n * r {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for a {n}x{r} factor, got {}",
                n * r,
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, r, data))
    }

    pub fn from_column(v: &[T]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(v.len(), 1, v))
    }

    pub fn zeros(n: usize, r: usize) -> Self {
        Self { entries: DMatrix::zeros(n, r) }
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn r(&self) -> usize {
        self.entries.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.entries
    }

    /// `XX^T`.
    pub fn gram(&self) -> DMatrix<T> {
        &self.entries * self.entries.transpose()
    }

    pub fn frobenius_norm(&self) -> T {
        self.entries.norm()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|v| *v == T::zero())
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self { entries: &self.entries * alpha }
    }

    /// Singular values in decreasing order.
    pub fn singular_values(&self) -> Vec<T> {
        Svd::new(&self.entries).singular_values.iter().copied().collect()
    }

    pub fn numerical_rank(&self) -> usize {
        numerical_rank(&self.entries, &Tolerances::default())
    }

    /// Smallest of the `r` singular values (zero when rank deficient).
    pub fn sigma_min(&self) -> T {
        self.singular_values().last().copied().unwrap_or_else(T::zero)
    }
}

/// Column-major stacking of a matrix.
pub fn vectorize<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vectorize`] for square matrices.
pub fn unvectorize<T: Real>(v: &DVector<T>, n: usize) -> Result<DMatrix<T>> {
    if v.len() != n * n {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} is not the vectorization of a {n}x{n} matrix",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(n, n, v.as_slice()))
}

pub(crate) fn check_pair<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<()> {
    if x.n() != z.n() || x.r() != z.r() {
        return Err(Error::DimensionMismatch(format!(
            "X is {}x{} but Z is {}x{}",
            x.n(),
            x.r(),
            z.n(),
            z.r()
        )));
    }
    Ok(())
}

/// `e = vec(XX^T - ZZ^T)`.
pub fn error_vector<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<DVector<T>> {
    check_pair(x, z)?;
    Ok(vectorize(&(x.gram() - z.gram())))
}

/// Dense Jacobian `Jac(X)` of size `n^2 x nr`, assembled column by column from
/// the basis matrices `E_ij` of `R^{n x r}`.
pub fn jacobian_matrix<T: Real>(x: &FactorMatrix<T>) -> DMatrix<T> {
    let (n, r) = (x.n(), x.r());
    let xm = x.as_matrix();
    let mut jac = DMatrix::zeros(n * n, n * r);
    for j in 0..r {
        for i in 0..n {
            let col = i + j * n;
            // X E_ij^T puts X[:, j] in column i; E_ij X^T puts X[:, j]^T in row i.
            for k in 0..n {
                let v = xm[(k, j)];
                jac[(k + i * n, col)] += v;
                jac[(i + k * n, col)] += v;
            }
        }
    }
    jac
}

/// Matrix-free `Jac(X) vec(Y) = vec(XY^T + YX^T)`.
pub fn jacobian_apply<T: Real>(x: &FactorMatrix<T>, y: &DMatrix<T>) -> DVector<T> {
    let xy = x.as_matrix() * y.transpose();
    let s = &xy + xy.transpose();
    vectorize(&s)
}

/// Matrix-free `Jac(X)^T v = vec((S + S^T) X)` with `S = mat(v)`.
pub fn jacobian_transpose_apply<T: Real>(x: &FactorMatrix<T>, v: &DVector<T>) -> Result<DMatrix<T>> {
    let s = unvectorize(v, x.n())?;
    Ok((&s + s.transpose()) * x.as_matrix())
}

/// The two nonzero eigenvalues of `ab^T + ba^T` and the cosine of the angle between `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rank2Spectrum<T> {
    pub lambda_max: T,
    pub lambda_min: T,
    pub cos_angle: T,
}

/// Closed-form spectrum of the symmetric rank-two matrix `ab^T + ba^T`:
/// `||a|| ||b|| (cos t + 1)` and `||a|| ||b|| (cos t - 1)`, all other eigenvalues zero.
pub fn rank2_eigvals<T: Real>(a: &DVector<T>, b: &DVector<T>) -> Result<Rank2Spectrum<T>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("a has length {}, b has length {}", a.len(), b.len())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroVector);
    }
    let scale = na * nb;
    let cos = clamp_unit(a.dot(b) / scale);
    Ok(Rank2Spectrum {
        lambda_max: scale * (T::one() + cos),
        lambda_min: -(scale * (T::one() - cos)),
        cos_angle: cos,
    })
}

pub(crate) fn clamp_unit<T: Real>(v: T) -> T {
    if v > T::one() {
        T::one()
    } else if v < -T::one() {
        -T::one()
    } else {
        v
    }
}

pub(crate) fn clamp01<T: Real>(v: T) -> T {
    if v > T::one() {
        T::one()
    } else if v < T::zero() {
        T::zero()
    } else {
        v
    }
}

/// Thin singular value decomposition `m = U diag(s) V^T` with `s` decreasing.
///
/// Computed by one-sided Jacobi rotations, which keep full accuracy on
/// rank-deficient inputs such as the Jacobian for `r >= 2`. Columns of `U`
/// belonging to a zero singular value are zero.
#[derive(Debug, Clone)]
pub struct Svd<T: Real> {
    pub u: DMatrix<T>,
    pub singular_values: DVector<T>,
    pub v: DMatrix<T>,
}

impl<T: Real> Svd<T> {
    pub fn new(m: &DMatrix<T>) -> Self {
        if m.nrows() < m.ncols() {
            let t = Self::new(&m.transpose());
            return Self { u: t.v, singular_values: t.singular_values, v: t.u };
        }
        let cols = m.ncols();
        let mut w = m.clone();
        let mut v = DMatrix::<T>::identity(cols, cols);
        let eps = T::machine_epsilon();
        for _ in 0..80 {
            let mut rotated = false;
            for p in 0..cols {
                for q in (p + 1)..cols {
                    let alpha = w.column(p).norm_squared();
                    let beta = w.column(q).norm_squared();
                    let gamma = w.column(p).dot(&w.column(q));
                    if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (gamma + gamma);
                    let sign = if zeta >= T::zero() { T::one() } else { -T::one() };
                    let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                    let c = T::one() / (T::one() + t * t).sqrt();
                    let s = c * t;
                    rotate_columns(&mut w, p, q, c, s);
                    rotate_columns(&mut v, p, q, c, s);
                }
            }
            if !rotated {
                break;
            }
        }
        let mut order: Vec<(usize, T)> = (0..cols).map(|k| (k, w.column(k).norm())).collect();
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let mut u = DMatrix::zeros(m.nrows(), cols);
        let mut vs = DMatrix::zeros(cols, cols);
        let mut sv = DVector::zeros(cols);
        for (j, &(k, sk)) in order.iter().enumerate() {
            sv[j] = sk;
            if sk > T::zero() {
                u.set_column(j, &(w.column(k) / sk));
            }
            vs.set_column(j, &v.column(k));
        }
        Self { u, singular_values: sv, v: vs }
    }

    pub fn sigma_max(&self) -> T {
        self.singular_values.iter().next().copied().unwrap_or_else(T::zero)
    }

    /// Number of singular values above the rank cutoff.
    fn kept(&self, tol: &Tolerances<T>) -> usize {
        let cutoff = tol.rank_cutoff(self.u.nrows(), self.v.nrows(), self.sigma_max());
        self.singular_values.iter().filter(|v| **v > cutoff && **v > T::zero()).count()
    }
}

fn rotate_columns<T: Real>(m: &mut DMatrix<T>, p: usize, q: usize, c: T, s: T) {
    for i in 0..m.nrows() {
        let (a, b) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}

/// Rank of `m` under the crate's singular-value cutoff.
pub fn numerical_rank<T: Real>(m: &DMatrix<T>, tol: &Tolerances<T>) -> usize {
    if m.is_empty() {
        return 0;
    }
    Svd::new(m).kept(tol)
}

/// Truncated-SVD Moore-Penrose pseudo-inverse of an arbitrary matrix.
pub fn pinv<T: Real>(m: &DMatrix<T>, tol: &Tolerances<T>) -> DMatrix<T> {
    let (rows, cols) = m.shape();
    if m.is_empty() {
        return DMatrix::zeros(cols, rows);
    }
    let svd = Svd::new(m);
    let mut out = DMatrix::zeros(cols, rows);
    for k in 0..svd.kept(tol) {
        out += (svd.v.column(k) * svd.u.column(k).transpose()) / svd.singular_values[k];
    }
    out
}

/// `X^+` (size `r x n`). Rank-deficient inputs are truncated, the zero matrix maps to zero.
pub fn pseudo_inverse<T: Real>(x: &FactorMatrix<T>) -> DMatrix<T> {
    pinv(x.as_matrix(), &Tolerances::default())
}

/// Orthonormal basis of `range(m)` (the left singular vectors above the cutoff).
pub fn range_basis<T: Real>(m: &DMatrix<T>, tol: &Tolerances<T>) -> DMatrix<T> {
    if m.is_empty() {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = Svd::new(m);
    let k = svd.kept(tol);
    svd.u.columns(0, k).into_owned()
}

/// Least-squares split `e = Jac y* + w` with `Jac^T w = 0`.
#[derive(Debug, Clone)]
pub struct LeastSquaresSplit<T: Real> {
    pub y_star: DVector<T>,
    pub fitted: DVector<T>,
    pub residual: DVector<T>,
}

/// Minimum-norm least-squares solution of `min_y ||e - jac y||` via the truncated SVD.
pub fn least_squares_split<T: Real>(jac: &DMatrix<T>, e: &DVector<T>, tol: &Tolerances<T>) -> LeastSquaresSplit<T> {
    let svd = Svd::new(jac);
    let mut y_star = DVector::zeros(jac.ncols());
    let mut fitted = DVector::zeros(jac.nrows());
    for k in 0..svd.kept(tol) {
        let uk = svd.u.column(k);
        let c = uk.dot(e);
        fitted += uk * c;
        y_star += svd.v.column(k) * (c / svd.singular_values[k]);
    }
    let residual = e - &fitted;
    LeastSquaresSplit { y_star, fitted, residual }
}

/// Error vector, Jacobian and incidence angle for a non-coincident pair `(X, Z)`.
#[derive(Debug, Clone)]
pub struct CriticalPointGeometry<T: Real> {
    pub e: DVector<T>,
    pub jac: DMatrix<T>,
    pub split: LeastSquaresSplit<T>,
    /// `||w|| = min_y ||e - Jac y||`.
    pub residual_norm: T,
    pub sin_theta: T,
    pub cos_theta: T,
}

impl<T: Real> CriticalPointGeometry<T> {
    pub fn new(x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<Self> {
        Self::with_tolerances(x, z, &Tolerances::default())
    }

    pub fn with_tolerances(x: &FactorMatrix<T>, z: &FactorMatrix<T>, tol: &Tolerances<T>) -> Result<Self> {
        let e = error_vector(x, z)?;
        let e_norm = e.norm();
        ensure_not_coincident(e_norm, z, tol)?;
        let jac = jacobian_matrix(x);
        let split = least_squares_split(&jac, &e, tol);
        let residual_norm = split.residual.norm();
        let fitted_norm = split.fitted.norm();
        // Normalise by the Pythagorean total so that sin^2 + cos^2 = 1 to rounding.
        let hyp = (residual_norm * residual_norm + fitted_norm * fitted_norm).sqrt();
        let (sin_theta, cos_theta) = (clamp01(residual_norm / hyp), clamp01(fitted_norm / hyp));
        Ok(Self { e, jac, split, residual_norm, sin_theta, cos_theta })
    }

    pub fn e_norm(&self) -> T {
        self.e.norm()
    }
}

/// Relative Gram gap `||XX^T - ZZ^T||_F / ||ZZ^T||_F`.
pub fn relative_error<T: Real>(x: &FactorMatrix<T>, z: &FactorMatrix<T>) -> Result<T> {
    check_pair(x, z)?;
    let zz = z.gram();
    let denom = zz.norm();
    if denom == T::zero() {
        return Err(Error::ZeroMatrix);
    }
    Ok((x.gram() - zz).norm() / denom)
}

pub(crate) fn ensure_not_coincident<T: Real>(e_norm: T, z: &FactorMatrix<T>, tol: &Tolerances<T>) -> Result<()> {
    let zz_norm = z.gram().norm();
    let scale = if zz_norm > T::one() { zz_norm } else { T::one() };
    if e_norm <= tol.coincidence * scale {
        return Err(Error::Coincident { gap: (e_norm / scale).to_f64_lossy() });
    }
    Ok(())
}
