//! Error covariance propagation, probabilistic reachable sets and the
//! resulting constraint tightening.
//!
//! The predicted error `e_{k+1} = A_K e_k + w_k`, `e_0 = 0`, has covariance
//! `Sigma_{k+1} = A_K Sigma_k A_K' + Sigma_w`. Each constraint row
//! `c' x + d' u <= h` only sees the scalar `(c + K'd)' e`, so the tightening
//! works row by row on that one-dimensional output.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, spectral_radius};
use crate::model::{ChanceConstraintSpec, Polytope};

const STATIONARY_TOL: f64 = 1e-12;
const STATIONARY_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSequence {
    sigmas: Vec<DMatrix<f64>>,
    sigma_inf: Option<DMatrix<f64>>,
    converged_at: Option<usize>,
}

impl VarianceSequence {
    /// `Sigma_0 ..= Sigma_{k_max}`.
    pub fn sigmas(&self) -> &[DMatrix<f64>] {
        &self.sigmas
    }

    /// Stationary covariance; `None` when `A_K` is not Schur.
    pub fn sigma_inf(&self) -> Option<&DMatrix<f64>> {
        self.sigma_inf.as_ref()
    }

    /// First index whose covariance is within `1e-12` of the stationary one.
    pub fn converged_at(&self) -> Option<usize> {
        self.converged_at
    }

    pub fn k_max(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// `Sigma_k`, falling back to the stationary value past `k_max`.
    pub fn at(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.sigmas.get(k).or(self.sigma_inf.as_ref())
    }
}

/// Runs the covariance recursion up to `k_max`, plus its fixed point when
/// `A_K` is Schur.
pub fn propagate_variance(a_k: &DMatrix<f64>, sigma_w: &DMatrix<f64>, k_max: usize) -> Result<VarianceSequence> {
    let n = a_k.nrows();
    if !a_k.is_square() || sigma_w.shape() != (n, n) {
        return Err(Error::dim("A_K and sigma_w must be square of equal size"));
    }
    let a_t = a_k.transpose();
    let mut sigmas = Vec::with_capacity(k_max + 1);
    sigmas.push(DMatrix::zeros(n, n));
    for k in 0..k_max {
        let next = a_k * &sigmas[k] * &a_t + sigma_w;
        sigmas.push((&next + next.transpose()) * 0.5);
    }

    let sigma_inf = if spectral_radius(a_k) < 1.0 {
        Some(stationary_from(a_k, sigma_w, sigmas.last().expect("non-empty"))?)
    } else {
        None
    };
    let converged_at = sigma_inf
        .as_ref()
        .and_then(|inf| sigmas.iter().position(|s| max_abs(&(s - inf)) <= STATIONARY_TOL));
    Ok(VarianceSequence {
        sigmas,
        sigma_inf,
        converged_at,
    })
}

/// Fixed point of the covariance recursion.
pub fn stationary_variance(a_k: &DMatrix<f64>, sigma_w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rho = spectral_radius(a_k);
    if rho >= 1.0 {
        return Err(Error::NotSchur(rho));
    }
    stationary_from(a_k, sigma_w, &DMatrix::zeros(a_k.nrows(), a_k.nrows()))
}

fn stationary_from(a_k: &DMatrix<f64>, sigma_w: &DMatrix<f64>, start: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a_t = a_k.transpose();
    let mut s = start.clone();
    for _ in 0..STATIONARY_MAX_ITER {
        let next = a_k * &s * &a_t + sigma_w;
        let next = (&next + next.transpose()) * 0.5;
        let change = max_abs(&(&next - &s));
        s = next;
        if change <= STATIONARY_TOL {
            return Ok(s);
        }
    }
    Err(Error::config("stationary covariance iteration did not converge"))
}

/// `z` with `Phi(z) = p`.
pub fn standard_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config(format!("quantile level must lie in (0, 1), got {p}")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// `n / (1 - p)`: the ellipsoid `{x : x' Sigma^-1 x <= n / (1 - p)}` holds
/// probability `p` for any zero-mean law with covariance `Sigma` (Markov).
pub fn chebyshev_level(p: f64, dim: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config(format!("level must lie in (0, 1), got {p}")));
    }
    Ok(dim as f64 / (1.0 - p))
}

pub fn chi_squared_quantile(p: f64, dim: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config(format!("level must lie in (0, 1), got {p}")));
    }
    if dim == 0 {
        return Err(Error::config("chi-squared needs at least one degree of freedom"));
    }
    // The library inverse stops at a coarse tolerance; bisect the CDF instead.
    let dist = ChiSquared::new(dim as f64).map_err(|e| Error::config(e.to_string()))?;
    let mut hi = dim as f64 + 10.0;
    while dist.cdf(hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dist.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrsMode {
    GaussianExact,
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrsShape {
    /// `|y_e| <= delta` per row.
    #[serde(rename = "symmetric")]
    SymmetricPerRow,
    /// `y_e <= delta` per row. Not symmetric, so the closed-loop guarantee
    /// for interpolated initial states does not apply.
    #[serde(rename = "one-sided")]
    OneSidedPerRow,
    /// One ellipsoid `{e : e' Sigma^-1 e <= p~}` in the full error space.
    Ellipsoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrsSpec {
    pub mode: PrsMode,
    pub shape: PrsShape,
    /// Use the stationary covariance at every step.
    pub stationary: bool,
}

impl Default for PrsSpec {
    fn default() -> Self {
        Self {
            mode: PrsMode::GaussianExact,
            shape: PrsShape::SymmetricPerRow,
            stationary: true,
        }
    }
}

impl PrsSpec {
    /// Whether the sets are symmetric, as the closed-loop analysis needs.
    pub fn is_symmetric(&self) -> bool {
        self.shape != PrsShape::OneSidedPerRow
    }

    /// Multiplier on the row standard deviation.
    pub fn level_factor(&self, p: f64, state_dim: usize) -> Result<f64> {
        Ok(match (self.mode, self.shape) {
            (PrsMode::GaussianExact, PrsShape::SymmetricPerRow) => standard_normal_quantile(0.5 * (1.0 + p))?,
            (PrsMode::GaussianExact, PrsShape::OneSidedPerRow) => standard_normal_quantile(p)?,
            (PrsMode::GaussianExact, PrsShape::Ellipsoidal) => chi_squared_quantile(p, state_dim)?.sqrt(),
            (PrsMode::Chebyshev, PrsShape::SymmetricPerRow | PrsShape::OneSidedPerRow) => chebyshev_level(p, 1)?.sqrt(),
            (PrsMode::Chebyshev, PrsShape::Ellipsoidal) => chebyshev_level(p, state_dim)?.sqrt(),
        })
    }
}

/// Error direction seen by a constraint row: `c + K'd`.
pub fn row_direction(c: &DVector<f64>, d: &DVector<f64>, k: &DMatrix<f64>) -> DVector<f64> {
    c + k.transpose() * d
}

/// Margin `delta` for one row so that `(c + dK) e <= delta` (or `|.| <= delta`
/// for symmetric sets) holds with probability `p_row` under covariance `sigma`.
pub fn row_tightening(
    c: &DVector<f64>,
    d: &DVector<f64>,
    k: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    p_row: f64,
    spec: &PrsSpec,
) -> Result<f64> {
    let n = sigma.nrows();
    if c.len() != n || k.shape() != (d.len(), n) {
        return Err(Error::dim("row, gain and covariance dimensions disagree"));
    }
    let dir = row_direction(c, d, k);
    let factor = spec.level_factor(p_row, n)?;
    margin_for(&dir, sigma, factor)
}

fn margin_for(dir: &DVector<f64>, sigma: &DMatrix<f64>, factor: f64) -> Result<f64> {
    let mut var = dir.dot(&(sigma * dir));
    if var < 0.0 {
        if var > -1e-12 {
            warn!("clamping slightly negative row variance {var:e} to zero");
            var = 0.0;
        } else {
            return Err(Error::config(format!("negative row variance {var:e}")));
        }
    }
    Ok(var.sqrt() * factor)
}

/// Tightened sets `Zbar_k` with offsets `h_i - delta_{i,k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TightenedConstraints {
    base: Polytope,
    /// `margins[k][i]` for `k = 0..=k_max`; empty when stationary.
    margins: Vec<Vec<f64>>,
    limit: Vec<f64>,
    stationary: bool,
}

impl TightenedConstraints {
    pub fn base(&self) -> &Polytope {
        &self.base
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    /// Margins `delta_{., k}`; the limit margins past the computed range.
    pub fn margins_at(&self, k: usize) -> &[f64] {
        if self.stationary {
            &self.limit
        } else {
            self.margins.get(k).unwrap_or(&self.limit)
        }
    }

    pub fn limit_margins(&self) -> &[f64] {
        &self.limit
    }

    pub fn margin_steps(&self) -> usize {
        self.margins.len()
    }

    pub fn offsets_at(&self, k: usize) -> DVector<f64> {
        let m = self.margins_at(k);
        DVector::from_iterator(m.len(), self.base.offsets().iter().zip(m).map(|(h, d)| h - d))
    }

    pub fn set_at(&self, k: usize) -> Polytope {
        self.base
            .with_offsets(self.offsets_at(k))
            .expect("same shape as the base polytope")
    }

    pub fn limit_set(&self) -> Polytope {
        let offsets = DVector::from_iterator(
            self.limit.len(),
            self.base.offsets().iter().zip(&self.limit).map(|(h, d)| h - d),
        );
        self.base
            .with_offsets(offsets)
            .expect("same shape as the base polytope")
    }
}

/// Builds `Zbar_k = Z - (R_k x K R_k)` row by row.
///
/// Rows whose error direction `c + K'd` vanishes are never tightened, so a
/// non-Schur `A_K` is acceptable as long as every row is of that kind.
pub fn tighten(
    chance: &ChanceConstraintSpec,
    k: &DMatrix<f64>,
    variances: &VarianceSequence,
    spec: &PrsSpec,
) -> Result<TightenedConstraints> {
    let set = chance.set();
    let n = k.ncols();
    if set.dim() != n + k.nrows() {
        return Err(Error::dim("constraint set does not match the gain dimensions"));
    }
    let rows = set.rows();
    let mut dirs = Vec::with_capacity(rows);
    let mut factors = Vec::with_capacity(rows);
    for i in 0..rows {
        let (c, d) = set.split_row(i, n);
        dirs.push(row_direction(&c, &d, k));
        factors.push(spec.level_factor(chance.row_level(i), n)?);
    }
    let needs_sigma = dirs.iter().any(|d| d.amax() > 0.0);

    let margins_for = |sigma: &DMatrix<f64>| -> Result<Vec<f64>> {
        dirs.iter()
            .zip(&factors)
            .map(|(dir, &f)| {
                if dir.amax() > 0.0 {
                    margin_for(dir, sigma, f)
                } else {
                    Ok(0.0)
                }
            })
            .collect()
    };

    let limit = match (variances.sigma_inf(), needs_sigma) {
        (Some(inf), _) => margins_for(inf)?,
        (None, false) => vec![0.0; rows],
        (None, true) => {
            return Err(Error::config(
                "state-error tightening needs a Schur A_K (no stationary covariance)",
            ))
        }
    };
    let margins = if spec.stationary {
        Vec::new()
    } else {
        variances.sigmas().iter().map(margins_for).collect::<Result<Vec<_>>>()?
    };

    let tightened = TightenedConstraints {
        base: set.clone(),
        margins,
        limit,
        stationary: spec.stationary,
    };
    // Margins grow with k, so the limit set is the smallest one.
    if tightened.limit_set().is_empty()? {
        return Err(Error::config("tightened constraint set is empty"));
    }
    Ok(tightened)
}
