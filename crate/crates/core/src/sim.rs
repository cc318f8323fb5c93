//! Closed-loop rollouts and Monte Carlo estimators.
//!
//! Every rollout draws its disturbances from its own ChaCha8 stream, seeded
//! with `splitmix64(master_seed ^ splitmix64(index))`. Gaussian samples come
//! from Box-Muller on that stream, uniform-box samples from
//! `L * U[-sqrt 3, sqrt 3]^n` with `L` the Cholesky factor of `Sigma_w`.
//! Rollouts run on the rayon pool but are reduced in index order, so
//! statistics do not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::DisturbanceLaw;
use crate::prs::standard_normal_cdf;
use crate::smpc::{solve_step, SmpcConfig};

/// Tolerance of the constraint-satisfied flag.
pub const SATISFACTION_TOL: f64 = 1e-7;

const ANALYTIC_STREAM_SALT: u64 = 0xA5A5_5A5A_0F0F_F0F0;

pub fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RngSpec {
    pub master_seed: u64,
}

impl RngSpec {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn rollout_seed(&self, index: u64) -> u64 {
        splitmix64(self.master_seed ^ splitmix64(index))
    }

    pub fn sampler(&self, index: u64, law: DisturbanceLaw, chol: &DMatrix<f64>) -> DisturbanceSampler {
        DisturbanceSampler::new(self.rollout_seed(index), law, chol.clone())
    }
}

/// Source of `w(k)` for a rollout.
pub trait Disturbances {
    fn next_disturbance(&mut self, k: usize) -> DVector<f64>;
}

#[derive(Debug, Clone)]
pub struct DisturbanceSampler {
    rng: ChaCha8Rng,
    law: DisturbanceLaw,
    chol: DMatrix<f64>,
    spare: Option<f64>,
}

impl DisturbanceSampler {
    pub fn new(seed: u64, law: DisturbanceLaw, chol: DMatrix<f64>) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            law,
            chol,
            spare: None,
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn sample(&mut self) -> DVector<f64> {
        let n = self.chol.nrows();
        let unit = match self.law {
            DisturbanceLaw::Gaussian => DVector::from_fn(n, |_, _| self.standard_normal()),
            DisturbanceLaw::UniformBox => {
                let half = 3f64.sqrt();
                DVector::from_fn(n, |_, _| self.rng.gen_range(-half..half))
            }
        };
        &self.chol * unit
    }
}

impl Disturbances for DisturbanceSampler {
    fn next_disturbance(&mut self, _k: usize) -> DVector<f64> {
        self.sample()
    }
}

/// A fixed disturbance sequence.
#[derive(Debug, Clone)]
pub struct Sequence<'a>(pub &'a [DVector<f64>]);

impl Disturbances for Sequence<'_> {
    fn next_disturbance(&mut self, k: usize) -> DVector<f64> {
        self.0[k].clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    /// NaN for the pure feedback controllers.
    pub lambda: f64,
    /// `z*_{0|k}`; the origin for the pure feedback controllers.
    pub z0: DVector<f64>,
    pub e: DVector<f64>,
    pub stage_cost: f64,
    pub satisfied: bool,
    pub j_star: f64,
    pub w: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub steps: Vec<StepRecord>,
    pub final_state: DVector<f64>,
}

impl RolloutRecord {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Closed loop over `t` steps with `z_prev` initialized to `x0`.
pub fn rollout(cfg: &SmpcConfig, x0: &DVector<f64>, t: usize, w: &mut impl Disturbances) -> Result<RolloutRecord> {
    let n = cfg.state_dim();
    if x0.len() != n {
        return Err(Error::dim("x0 must have length n"));
    }
    let set = cfg.chance.set();
    let mut steps = Vec::with_capacity(t);
    let mut x = x0.clone();
    let mut z_prev = x0.clone();
    for k in 0..t {
        let res = solve_step(cfg, &x, &z_prev, k)?;
        let u = res.u_applied.clone();
        let z0 = res.nominal_state().unwrap_or_else(|| DVector::zeros(n));
        let wk = w.next_disturbance(k);
        if wk.len() != n {
            return Err(Error::dim("disturbance must have length n"));
        }
        let next = cfg.sys.step(&x, &u, &wk);
        if let Some(z1) = res.next_nominal() {
            z_prev = z1;
        }
        steps.push(StepRecord {
            k,
            e: &x - &z0,
            stage_cost: cfg.cost.eval(&x, &u),
            satisfied: set.contains_pair(&x, &u, SATISFACTION_TOL),
            lambda: res.lambda_star,
            j_star: res.j_star,
            x,
            u,
            z0,
            w: wk,
        });
        x = next;
    }
    Ok(RolloutRecord { steps, final_state: x })
}

/// Seeded rollout `index` of a Monte Carlo run.
pub fn seeded_rollout(
    cfg: &SmpcConfig,
    x0: &DVector<f64>,
    t: usize,
    rng: &RngSpec,
    index: usize,
) -> Result<RolloutRecord> {
    let mut sampler = rng.sampler(index as u64, cfg.sys.law(), cfg.sys.sigma_w_chol());
    rollout(cfg, x0, t, &mut sampler).map_err(|e| Error::Rollout {
        rollout: index,
        source: Box::new(e),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub k: usize,
    pub p_hat: f64,
    pub p_stderr: f64,
    pub mean_cost: f64,
    /// First input component.
    pub mean_u: f64,
    /// First state component.
    pub mean_x: f64,
    pub mean_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloStats {
    pub n_rollouts: usize,
    pub horizon: usize,
    pub per_step: Vec<StepStats>,
    /// Stage cost averaged over steps and rollouts.
    pub mean_cost: f64,
    /// Standard error over the per-rollout time averages.
    pub mean_cost_stderr: f64,
    /// Time average of the per-step satisfaction probabilities.
    pub satisfaction_mean: f64,
    pub satisfaction_min: f64,
    pub satisfaction_min_step: usize,
    /// `None` for controllers without `lambda`.
    pub lambda_mean: Option<f64>,
    pub lambda_fraction_zero: Option<f64>,
    pub lambda_fraction_one: Option<f64>,
}

impl MonteCarloStats {
    /// Mean cost as a percentage of `baseline`'s.
    pub fn cost_ratio(&self, baseline: &MonteCarloStats) -> f64 {
        100.0 * self.mean_cost / baseline.mean_cost
    }
}

#[derive(Debug, Clone, Default)]
pub struct MonteCarloOptions {
    /// 0 uses the ambient rayon pool.
    pub threads: usize,
    /// Number of leading rollouts returned in full.
    pub keep_records: usize,
}

struct Trace {
    cost: Vec<f64>,
    satisfied: Vec<bool>,
    u: Vec<f64>,
    x: Vec<f64>,
    lambda: Vec<f64>,
    record: Option<RolloutRecord>,
}

impl Trace {
    fn from_record(rec: RolloutRecord, keep: bool) -> Self {
        let s = &rec.steps;
        Self {
            cost: s.iter().map(|r| r.stage_cost).collect(),
            satisfied: s.iter().map(|r| r.satisfied).collect(),
            u: s.iter().map(|r| r.u[0]).collect(),
            x: s.iter().map(|r| r.x[0]).collect(),
            lambda: s.iter().map(|r| r.lambda).collect(),
            record: keep.then_some(rec),
        }
    }
}

pub fn monte_carlo(cfg: &SmpcConfig, x0: &DVector<f64>, t: usize, n: usize, rng: &RngSpec) -> Result<MonteCarloStats> {
    monte_carlo_with(cfg, x0, t, n, rng, &MonteCarloOptions::default()).map(|(s, _)| s)
}

pub fn monte_carlo_with(
    cfg: &SmpcConfig,
    x0: &DVector<f64>,
    t: usize,
    n: usize,
    rng: &RngSpec,
    opts: &MonteCarloOptions,
) -> Result<(MonteCarloStats, Vec<RolloutRecord>)> {
    if n == 0 {
        return Err(Error::config("monte carlo needs at least one rollout"));
    }
    if t == 0 {
        return Err(Error::config("simulation needs at least one step"));
    }
    let run = || -> Result<Vec<Trace>> {
        (0..n)
            .into_par_iter()
            .map(|i| seeded_rollout(cfg, x0, t, rng, i).map(|r| Trace::from_record(r, i < opts.keep_records)))
            .collect()
    };
    let traces = if opts.threads == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(run)?
    };
    Ok(aggregate(t, traces))
}

fn aggregate(t: usize, mut traces: Vec<Trace>) -> (MonteCarloStats, Vec<RolloutRecord>) {
    let n = traces.len();
    let nf = n as f64;
    let has_lambda = traces[0].lambda.iter().all(|l| !l.is_nan());
    let mut per_step = Vec::with_capacity(t);
    for k in 0..t {
        let (mut sat, mut cost, mut u, mut x, mut lambda) = (0usize, 0.0, 0.0, 0.0, 0.0);
        for tr in &traces {
            sat += usize::from(tr.satisfied[k]);
            cost += tr.cost[k];
            u += tr.u[k];
            x += tr.x[k];
            lambda += tr.lambda[k];
        }
        let p_hat = sat as f64 / nf;
        per_step.push(StepStats {
            k,
            p_hat,
            p_stderr: (p_hat * (1.0 - p_hat) / nf).sqrt(),
            mean_cost: cost / nf,
            mean_u: u / nf,
            mean_x: x / nf,
            mean_lambda: if has_lambda { lambda / nf } else { f64::NAN },
        });
    }

    let averages: Vec<f64> = traces.iter().map(|tr| tr.cost.iter().sum::<f64>() / t as f64).collect();
    let mean_cost = averages.iter().sum::<f64>() / nf;
    let mean_cost_stderr = if n > 1 {
        let var = averages.iter().map(|a| (a - mean_cost).powi(2)).sum::<f64>() / (nf - 1.0);
        (var / nf).sqrt()
    } else {
        0.0
    };
    let satisfaction_mean = per_step.iter().map(|s| s.p_hat).sum::<f64>() / t as f64;
    let (satisfaction_min_step, satisfaction_min) = per_step.iter().map(|s| s.p_hat).enumerate().fold(
        (0, f64::INFINITY),
        |best, (k, p)| if p < best.1 { (k, p) } else { best },
    );

    let lambda_stats = has_lambda.then(|| {
        let total = (n * t) as f64;
        let all = || traces.iter().flat_map(|tr| tr.lambda.iter().copied());
        let mean = all().sum::<f64>() / total;
        let zero = all().filter(|l| l.abs() <= 1e-9).count() as f64 / total;
        let one = all().filter(|l| (l - 1.0).abs() <= 1e-9).count() as f64 / total;
        (mean, zero, one)
    });

    let records = traces.iter_mut().filter_map(|tr| tr.record.take()).collect();
    let stats = MonteCarloStats {
        n_rollouts: n,
        horizon: t,
        per_step,
        mean_cost,
        mean_cost_stderr,
        satisfaction_mean,
        satisfaction_min,
        satisfaction_min_step,
        lambda_mean: lambda_stats.map(|s| s.0),
        lambda_fraction_zero: lambda_stats.map(|s| s.1),
        lambda_fraction_one: lambda_stats.map(|s| s.2),
    };
    (stats, records)
}

/// Region for the error nestedness comparison.
#[derive(Debug, Clone, PartialEq)]
pub enum ErrorRegion {
    /// `|a'e| <= r`.
    Interval { direction: DVector<f64>, radius: f64 },
    /// `a'e <= r`.
    HalfSpace { direction: DVector<f64>, bound: f64 },
    /// `e' M e <= r^2`.
    Ellipsoid { shape: DMatrix<f64>, radius: f64 },
}

impl ErrorRegion {
    pub fn contains(&self, e: &DVector<f64>) -> bool {
        match self {
            ErrorRegion::Interval { direction, radius } => direction.dot(e).abs() <= *radius,
            ErrorRegion::HalfSpace { direction, bound } => direction.dot(e) <= *bound,
            ErrorRegion::Ellipsoid { shape, radius } => e.dot(&(shape * e)) <= radius * radius,
        }
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        let ok = match self {
            ErrorRegion::Interval { direction, .. } | ErrorRegion::HalfSpace { direction, .. } => direction.len() == n,
            ErrorRegion::Ellipsoid { shape, .. } => shape.shape() == (n, n),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim("error region dimension must match the state"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NestednessReport {
    /// Fraction of closed-loop rollouts with `e(k)` in the region.
    pub empirical: f64,
    pub empirical_stderr: f64,
    /// Probability of the predicted error `e_{k|0}` lying in the region.
    pub analytic: f64,
}

/// Compares `P{e(k) in R}` along the closed loop from `x0` with the
/// predicted `P{e_{k|0} in R}`. The analytic side is closed form for
/// Gaussian noise and interval or half-space regions, and sampled from the
/// open-loop error recursion otherwise.
pub fn nestedness_check(
    cfg: &SmpcConfig,
    x0: &DVector<f64>,
    region: &ErrorRegion,
    k: usize,
    n: usize,
    rng: &RngSpec,
) -> Result<NestednessReport> {
    region.check_dim(cfg.state_dim())?;
    if n == 0 {
        return Err(Error::config("nestedness check needs at least one rollout"));
    }
    let hits: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| seeded_rollout(cfg, x0, k + 1, rng, i).map(|r| region.contains(&r.steps[k].e)))
        .collect::<Result<_>>()?;
    let empirical = hits.iter().filter(|&&h| h).count() as f64 / n as f64;
    Ok(NestednessReport {
        empirical,
        empirical_stderr: (empirical * (1.0 - empirical) / n as f64).sqrt(),
        analytic: predicted_probability(cfg, region, k, n, rng)?,
    })
}

fn predicted_probability(cfg: &SmpcConfig, region: &ErrorRegion, k: usize, n: usize, rng: &RngSpec) -> Result<f64> {
    if cfg.sys.law() == DisturbanceLaw::Gaussian {
        let sigma = match cfg.variances.at(k) {
            Some(s) => s.clone(),
            None => propagate_to(cfg, k)?,
        };
        let std_along = |a: &DVector<f64>| a.dot(&(&sigma * a)).max(0.0).sqrt();
        match region {
            ErrorRegion::Interval { direction, radius } => {
                let s = std_along(direction);
                return Ok(if s == 0.0 {
                    f64::from(*radius >= 0.0)
                } else {
                    2.0 * standard_normal_cdf(radius / s) - 1.0
                });
            }
            ErrorRegion::HalfSpace { direction, bound } => {
                let s = std_along(direction);
                return Ok(if s == 0.0 {
                    f64::from(*bound >= 0.0)
                } else {
                    standard_normal_cdf(bound / s)
                });
            }
            ErrorRegion::Ellipsoid { .. } => {}
        }
    }
    let a_k = cfg.sys.closed_loop(&cfg.gain)?;
    let salted = RngSpec::new(rng.master_seed ^ ANALYTIC_STREAM_SALT);
    let hits = (0..n)
        .into_par_iter()
        .filter(|&i| {
            let mut sampler = salted.sampler(i as u64, cfg.sys.law(), cfg.sys.sigma_w_chol());
            let mut e = DVector::zeros(cfg.state_dim());
            for _ in 0..k {
                e = &a_k * e + sampler.sample();
            }
            region.contains(&e)
        })
        .count();
    Ok(hits as f64 / n as f64)
}

fn propagate_to(cfg: &SmpcConfig, k: usize) -> Result<DMatrix<f64>> {
    let a_k = cfg.sys.closed_loop(&cfg.gain)?;
    let seq = crate::prs::propagate_variance(&a_k, cfg.sys.sigma_w(), k)?;
    Ok(seq.at(k).expect("sequence covers k").clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference generator seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn rollout_seeds_differ() {
        let rng = RngSpec::new(1);
        assert_ne!(rng.rollout_seed(0), rng.rollout_seed(1));
        assert_ne!(RngSpec::new(2).rollout_seed(0), rng.rollout_seed(0));
    }

    #[test]
    fn sampler_moments() {
        let chol = DMatrix::from_element(1, 1, 2.0);
        for law in [DisturbanceLaw::Gaussian, DisturbanceLaw::UniformBox] {
            let mut s = DisturbanceSampler::new(7, law, chol.clone());
            let draws: Vec<f64> = (0..200_000).map(|_| s.sample()[0]).collect();
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
            assert!(mean.abs() < 0.03, "{law:?} mean {mean}");
            assert!((var - 4.0).abs() < 0.06, "{law:?} variance {var}");
        }
    }

    #[test]
    fn region_membership() {
        let a = DVector::from_element(1, 1.0);
        let e = DVector::from_element(1, -1.2);
        assert!(!ErrorRegion::Interval {
            direction: a.clone(),
            radius: 1.0
        }
        .contains(&e));
        assert!(ErrorRegion::HalfSpace {
            direction: a,
            bound: 1.0
        }
        .contains(&e));
        let ell = ErrorRegion::Ellipsoid {
            shape: DMatrix::identity(1, 1),
            radius: 1.5,
        };
        assert!(ell.contains(&e));
    }
}
