//! Rank-one `(rho, phi)` grids of `delta_foc` and the `eps`-sweep of the
//! neighborhood bound against sampled infima over `B_eps`.
//!
//! For rank one, `rho = ||x|| / ||z||` and `cos(phi) = x^T z / (||x|| ||z||)`
//! determine every threshold quantity, so a grid over the quarter plane
//! `x = rho (z cos phi + z_perp sin phi)` covers all configurations.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{relative_error, FactorMatrix};
use crate::scalar::Real;
use crate::seed::derive_seed;
use crate::sensing::{sample_b_eps_with, Placement};
use crate::thresholds::{delta_foc, neighborhood_delta_foc_bound, soc_lower_bound};

/// `delta_foc` and the relative Gram error over a `rho x phi` grid.
///
/// Value matrices are indexed `(rho index, phi index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank1Grid<T: Real> {
    pub rho_axis: Vec<T>,
    pub phi_axis: Vec<T>,
    pub delta_foc_values: DMatrix<T>,
    pub rel_error_values: DMatrix<T>,
}

/// One cell in long format, as written to CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub rho: f64,
    pub phi: f64,
    pub delta_foc: f64,
    pub rel_error: f64,
}

impl<T: Real> Rank1Grid<T> {
    /// Rows in `rho`-major order.
    pub fn rows(&self) -> Vec<GridRow> {
        let mut out = Vec::with_capacity(self.rho_axis.len() * self.phi_axis.len());
        for (i, rho) in self.rho_axis.iter().enumerate() {
            for (j, phi) in self.phi_axis.iter().enumerate() {
                out.push(GridRow {
                    rho: rho.to_f64_lossy(),
                    phi: phi.to_f64_lossy(),
                    delta_foc: self.delta_foc_values[(i, j)].to_f64_lossy(),
                    rel_error: self.rel_error_values[(i, j)].to_f64_lossy(),
                });
            }
        }
        out
    }

    pub fn index_of_rho(&self, rho: T) -> Option<usize> {
        self.rho_axis.iter().position(|v| *v == rho)
    }

    pub fn index_of_phi(&self, phi: T) -> Option<usize> {
        self.phi_axis.iter().position(|v| *v == phi)
    }
}

/// `count` evenly spaced points from `a` to `b`, both ends exact.
pub fn linspace<T: Real>(a: T, b: T, count: usize) -> Vec<T> {
    match count {
        0 => Vec::new(),
        1 => vec![a],
        _ => {
            let last = T::from_usize_lossy(count - 1);
            let mut v: Vec<T> = (0..count).map(|i| a + (b - a) * T::from_usize_lossy(i) / last).collect();
            v[count - 1] = b;
            v
        }
    }
}

/// `rho` in `[0.05, 2]`, 200 points.
pub fn default_rho_axis<T: Real>() -> Vec<T> {
    linspace(T::lit(0.05), T::lit(2.0), 200)
}

/// `phi` in `[0, pi/2]`, 200 points.
pub fn default_phi_axis<T: Real>() -> Vec<T> {
    linspace(T::zero(), T::frac_pi_2(), 200)
}

fn check_axes<T: Real>(rho_axis: &[T], phi_axis: &[T]) -> Result<()> {
    if rho_axis.is_empty() || phi_axis.is_empty() {
        return Err(Error::InvalidConfig("grid axes must be nonempty".into()));
    }
    if let Some(bad) = rho_axis.iter().find(|v| !(**v > T::zero()) || !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("rho must be positive and finite, got {bad}")));
    }
    let tiny = T::lit(1e-12);
    if let Some(bad) = phi_axis.iter().find(|v| !(**v >= -tiny && **v <= T::frac_pi_2() + tiny)) {
        return Err(Error::InvalidConfig(format!("phi must lie in [0, pi/2], got {bad}")));
    }
    Ok(())
}

/// Unit `z = e1` and `x = rho (cos phi, sin phi)` in the plane.
pub fn rank1_pair<T: Real>(rho: T, phi: T) -> (FactorMatrix<T>, FactorMatrix<T>) {
    let z = FactorMatrix::from_column(&[T::one(), T::zero()]).expect("2x1 factor");
    let x = FactorMatrix::from_column(&[rho * phi.cos(), rho * phi.sin()]).expect("2x1 factor");
    (x, z)
}

fn fill_grid<T: Real, F>(rho_axis: &[T], phi_axis: &[T], pair: F) -> Result<Rank1Grid<T>>
where
    F: Fn(T, T) -> (FactorMatrix<T>, FactorMatrix<T>) + Sync,
{
    check_axes(rho_axis, phi_axis)?;
    let (nr, np) = (rho_axis.len(), phi_axis.len());
    let cells: Vec<(T, T)> = (0..nr * np)
        .into_par_iter()
        .map(|k| {
            let (x, z) = pair(rho_axis[k / np], phi_axis[k % np]);
            Ok((delta_foc(&x, &z)?, relative_error(&x, &z)?))
        })
        .collect::<Result<_>>()?;
    Ok(Rank1Grid {
        rho_axis: rho_axis.to_vec(),
        phi_axis: phi_axis.to_vec(),
        delta_foc_values: DMatrix::from_fn(nr, np, |i, j| cells[i * np + j].0),
        rel_error_values: DMatrix::from_fn(nr, np, |i, j| cells[i * np + j].1),
    })
}

/// Evaluates the grid in the fixed frame `z = e1`, `z_perp = e2` of `R^2`.
pub fn rank1_grid<T: Real>(rho_axis: &[T], phi_axis: &[T]) -> Result<Rank1Grid<T>> {
    fill_grid(rho_axis, phi_axis, rank1_pair)
}

/// Random `n x n` orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal<T: Real>(n: usize, seed: u64) -> DMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n, |_, _| T::lit(StandardNormal.sample(&mut rng)));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < T::zero() {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// The same grid with `z = Q e1`, `z_perp = Q e2` for a random orthogonal `Q` of `R^n`.
pub fn rank1_grid_in_frame<T: Real>(rho_axis: &[T], phi_axis: &[T], n: usize, seed: u64) -> Result<Rank1Grid<T>> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("ambient dimension must be at least 2, got {n}")));
    }
    let q = random_orthogonal::<T>(n, seed);
    let (u, w) = (q.column(0).into_owned(), q.column(1).into_owned());
    fill_grid(rho_axis, phi_axis, |rho, phi| {
        let z = FactorMatrix::from_column(u.as_slice()).expect("nonempty column");
        let x = (&u * phi.cos() + &w * phi.sin()) * rho;
        (FactorMatrix::from_column(x.as_slice()).expect("nonempty column"), z)
    })
}

/// One row of the `eps` sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    /// `sqrt([1 - C eps]_+)`.
    pub bound: f64,
    /// Smallest `delta_foc` over the boundary samples.
    pub empirical_inf: f64,
    /// `max { bound, delta* }`.
    pub soc_floor: f64,
}

const SWEEP_CHUNK: usize = 1024;

/// Minimum of `delta_foc` over `samples` boundary points of `B_eps`.
///
/// Samples are drawn in fixed-size chunks with per-chunk seeds, so the result
/// does not depend on the thread count.
pub fn sampled_infimum<T: Real>(z: &FactorMatrix<T>, epsilon: T, samples: usize, seed: u64) -> Result<T> {
    if samples == 0 {
        return Err(Error::InvalidConfig("need at least one sample per epsilon".into()));
    }
    let chunks = samples.div_ceil(SWEEP_CHUNK);
    let minima: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let len = SWEEP_CHUNK.min(samples - c * SWEEP_CHUNK);
            let mut best = T::one();
            for _ in 0..len {
                let x = sample_b_eps_with(z, epsilon, Placement::Boundary, &mut rng)?;
                let d = delta_foc(&x, z)?;
                if d < best {
                    best = d;
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(minima.into_iter().fold(T::one(), |a, b| if b < a { b } else { a }))
}

/// Neighborhood bound, sampled infimum and second-order floor for each `eps`, sorted by `eps`.
pub fn epsilon_sweep<T: Real>(
    z: &FactorMatrix<T>,
    epsilon_list: &[f64],
    samples_per_eps: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if z.is_zero() {
        return Err(Error::ZeroMatrix);
    }
    if epsilon_list.is_empty() {
        return Err(Error::InvalidConfig("epsilon list is empty".into()));
    }
    if let Some(bad) = epsilon_list.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
        return Err(Error::InvalidConfig(format!("epsilon values must be positive and finite, got {bad}")));
    }
    let mut eps: Vec<f64> = epsilon_list.to_vec();
    eps.sort_by(|a, b| a.total_cmp(b));
    eps.into_iter()
        .map(|e| {
            let et = T::lit(e);
            let inf = sampled_infimum(z, et, samples_per_eps, derive_seed(seed, e.to_bits()))?;
            Ok(SweepRow {
                eps: e,
                bound: neighborhood_delta_foc_bound(et, z)?.to_f64_lossy(),
                empirical_inf: inf.to_f64_lossy(),
                soc_floor: soc_lower_bound(et, z, z.r())?.to_f64_lossy(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};

    #[test]
    fn anchor_values() {
        let g = rank1_grid(&[0.05, 1.0, 2.0], &[0.0, FRAC_PI_2]).unwrap();
        assert_eq!(g.delta_foc_values[(2, 0)], 1.0);
        assert_eq!(g.delta_foc_values[(1, 0)], 1.0);
        assert!((g.delta_foc_values[(1, 1)] - FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(g.delta_foc_values[(0, 1)] <= 0.06);
        assert!((g.rel_error_values[(1, 1)] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(g.rows().len(), 6);
    }

    #[test]
    fn axes() {
        let rho = default_rho_axis::<f64>();
        let phi = default_phi_axis::<f64>();
        assert_eq!((rho.len(), phi.len()), (200, 200));
        assert_eq!((rho[0], rho[199]), (0.05, 2.0));
        assert_eq!((phi[0], phi[199]), (0.0, FRAC_PI_2));
        assert!(rank1_grid(&[0.0], &[0.1]).is_err());
        assert!(rank1_grid::<f64>(&[], &[0.1]).is_err());
        assert!(rank1_grid(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn rotated_frame_agrees() {
        let rho = linspace(0.1, 2.0, 9);
        let phi = linspace(0.0, FRAC_PI_2, 9);
        let a = rank1_grid(&rho, &phi).unwrap();
        let b = rank1_grid_in_frame(&rho, &phi, 5, 3).unwrap();
        assert!((a.delta_foc_values - b.delta_foc_values).amax() < 1e-10);
        assert!((a.rel_error_values - b.rel_error_values).amax() < 1e-10);
        let q = random_orthogonal::<f64>(5, 3);
        assert!((q.transpose() * &q - DMatrix::identity(5, 5)).norm() < 1e-13);
    }

    #[test]
    fn sweep_unit_rank_one() {
        let z = FactorMatrix::from_column(&[1.0, 0.0, 0.0]).unwrap();
        let rows = epsilon_sweep(&z, &[0.75, 0.3, 0.05], 400, 7).unwrap();
        assert_eq!(rows.iter().map(|r| r.eps).collect::<Vec<_>>(), vec![0.05, 0.3, 0.75]);
        for row in &rows {
            assert!((row.bound - (1.0 - row.eps).sqrt()).abs() < 1e-12);
            assert!(row.empirical_inf > row.bound);
        }
        assert_eq!(rows[2].soc_floor, 0.5);
        assert!(rows[1].empirical_inf <= 1.0 && rows[1].empirical_inf >= 0.7f64.sqrt());
        assert_eq!(rows, epsilon_sweep(&z, &[0.75, 0.3, 0.05], 400, 7).unwrap());
        assert!(epsilon_sweep(&z, &[0.0], 10, 7).is_err());
    }
}
