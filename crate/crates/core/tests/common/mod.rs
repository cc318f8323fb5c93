#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use smpc_core::config::ExperimentConfig;
use smpc_core::model::{ChanceConstraintSpec, Polytope, RiskAllocation};
use smpc_core::prs::PrsShape;
use smpc_core::smpc::{ControllerVariant, SmpcConfig};

pub fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

pub fn x(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

pub fn table1_config(variant: ControllerVariant) -> SmpcConfig {
    ExperimentConfig::preset("table1")
        .unwrap()
        .smpc_config(variant)
        .unwrap()
}

pub fn appendix_b_config(variant: ControllerVariant, shape: PrsShape) -> SmpcConfig {
    let mut cfg = ExperimentConfig::preset("appendixB").unwrap();
    cfg.prs.shape = shape;
    cfg.smpc_config(variant).unwrap()
}

/// `|u| <= 1` on the scalar integrator.
pub fn input_box(p: f64) -> ChanceConstraintSpec {
    let set = Polytope::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]),
        DVector::from_element(2, 1.0),
    )
    .unwrap();
    ChanceConstraintSpec::new(set, p, RiskAllocation::Joint).unwrap()
}

/// Standard normal CDF and quantile from an erf power series, a
/// continued fraction for the tails and bisection.
pub mod oracle {
    use std::f64::consts::{PI, SQRT_2};

    fn erf_series(t: f64) -> f64 {
        let mut term = t;
        let mut sum = t;
        for n in 1..200 {
            term *= -t * t / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        2.0 / PI.sqrt() * sum
    }

    fn erfc_fraction(t: f64) -> f64 {
        let mut f = t;
        for k in (1..=300).rev() {
            f = t + (k as f64 / 2.0) / f;
        }
        (-t * t).exp() / PI.sqrt() / f
    }

    fn erfc(t: f64) -> f64 {
        if t < 0.0 {
            2.0 - erfc(-t)
        } else if t < 2.5 {
            1.0 - erf_series(t)
        } else {
            erfc_fraction(t)
        }
    }

    pub fn cdf(z: f64) -> f64 {
        0.5 * erfc(-z / SQRT_2)
    }

    pub fn quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}
