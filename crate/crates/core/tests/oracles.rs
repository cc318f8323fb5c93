//! Library values checked against independent reference computations.

mod common;

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use smpc_core::model::{terminal_cost_from_lyapunov, DisturbanceLaw, LtiSystem, QuadraticStageCost};
use smpc_core::prs::{
    chi_squared_quantile, propagate_variance, standard_normal_quantile, stationary_variance, tighten, PrsShape, PrsSpec,
};
use smpc_core::qp::{solve_qp, QpSettings, QpStatus};
use smpc_core::smpc::{build_step_qp, build_step_qp_with, expected_cost_constant, LambdaMode};

use common::{oracle, scalar, table1_config, x};

#[test]
fn normal_quantile_matches_series_oracle() {
    for p in [0.5, 0.8061, 0.814, 0.90305, 0.907, 0.975, 0.999, 1e-6] {
        assert_abs_diff_eq!(
            standard_normal_quantile(p).unwrap(),
            oracle::quantile(p),
            epsilon = 1e-9
        );
    }
    assert_abs_diff_eq!(oracle::quantile(0.975), 1.959964, epsilon = 1e-6);
    assert_abs_diff_eq!(oracle::quantile(0.814), 0.892733, epsilon = 1e-6);
}

#[test]
fn chi_squared_quantile_closed_forms() {
    for p in [0.1, 0.5, 0.8061, 0.95] {
        // One degree of freedom: the square of the symmetric normal quantile.
        let z = oracle::quantile(0.5 * (1.0 + p));
        assert_abs_diff_eq!(chi_squared_quantile(p, 1).unwrap(), z * z, epsilon = 1e-7);
        // Two degrees of freedom: exponential with mean 2.
        assert_abs_diff_eq!(
            chi_squared_quantile(p, 2).unwrap(),
            -2.0 * (1.0 - p).ln(),
            epsilon = 1e-7
        );
    }
}

#[test]
fn scalar_variance_recursion_closed_form() {
    for (a, w) in [(0.5, 1.0), (0.75, 1.0), (-0.3, 2.5)] {
        let seq = propagate_variance(&scalar(a), &scalar(w), 30).unwrap();
        for (k, s) in seq.sigmas().iter().enumerate() {
            let exact = w * (1.0 - a.powi(2 * k as i32)) / (1.0 - a * a);
            assert_abs_diff_eq!(s[(0, 0)], exact, epsilon = 1e-12);
        }
        let inf = stationary_variance(&scalar(a), &scalar(w)).unwrap();
        assert_abs_diff_eq!(inf[(0, 0)], w / (1.0 - a * a), epsilon = 1e-10);
    }
}

#[test]
fn stationary_variances_of_both_examples() {
    let s = stationary_variance(&scalar(0.5), &scalar(1.0)).unwrap();
    assert_abs_diff_eq!(s[(0, 0)], 4.0 / 3.0, epsilon = 1e-10);
    let s = stationary_variance(&scalar(0.75), &scalar(1.0)).unwrap();
    assert_abs_diff_eq!(s[(0, 0)], 16.0 / 7.0, epsilon = 1e-10);
}

#[test]
fn two_state_stationary_variance_solves_lyapunov() {
    let a = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, -0.1, 0.4]);
    let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let s = stationary_variance(&a, &w).unwrap();
    // Vectorized oracle: (I - A kron A) vec(S) = vec(W).
    let kron = a.kronecker(&a);
    let lhs = DMatrix::<f64>::identity(4, 4) - kron;
    let vec_w = DVector::from_column_slice(w.as_slice());
    let vec_s = lhs.lu().solve(&vec_w).unwrap();
    for i in 0..4 {
        assert_abs_diff_eq!(s.as_slice()[i], vec_s[i], epsilon = 1e-10);
    }
}

#[test]
fn terminal_cost_of_the_integrator() {
    let sys = LtiSystem::new(scalar(1.0), scalar(1.0), scalar(1.0), DisturbanceLaw::Gaussian).unwrap();
    let cost = QuadraticStageCost::new(scalar(1.0), x(0.0), scalar(0.0), x(0.0)).unwrap();
    let (pf, _) = terminal_cost_from_lyapunov(&sys, &scalar(-0.5), &cost).unwrap();
    // Pf = 1 + 0.25 Pf
    assert_abs_diff_eq!(pf[(0, 0)], 4.0 / 3.0, epsilon = 1e-10);
}

#[test]
fn integrator_input_tightening() {
    let cfg = table1_config(smpc_core::smpc::ControllerVariant::Proposed);
    let offsets = cfg.tightened.limit_set().offsets().clone();
    // |K| sqrt(4/3) times the symmetric quantile of 0.8061.
    let margin = 0.5 * (4.0f64 / 3.0).sqrt() * oracle::quantile(0.5 * (1.0 + 0.8061));
    for i in 0..2 {
        assert_abs_diff_eq!(offsets[i], 1.0 - margin, epsilon = 1e-9);
        // p is given to four digits; the intended set is |v| <= 0.25.
        assert_abs_diff_eq!(offsets[i], 0.25, epsilon = 1e-4);
    }
}

#[test]
fn appendix_b_state_tightening() {
    let std = (16.0f64 / 7.0).sqrt();
    let cases = [
        (PrsShape::SymmetricPerRow, oracle::quantile(0.5 * (1.0 + 0.814))),
        (PrsShape::OneSidedPerRow, oracle::quantile(0.814)),
    ];
    for (shape, z) in cases {
        let cfg = common::appendix_b_config(smpc_core::smpc::ControllerVariant::Indirect, shape);
        let offset = cfg.tightened.limit_set().offsets()[0];
        // Row -x <= 2 - delta, i.e. x >= delta - 2.
        assert_abs_diff_eq!(offset, 2.0 - std * z, epsilon = 1e-9);
    }
}

#[test]
fn chebyshev_margin_on_a_row() {
    let sys_var = scalar(4.0 / 3.0);
    let seq = propagate_variance(&scalar(0.5), &scalar(1.0), 5).unwrap();
    assert!(seq.sigma_inf().is_some());
    // At 0.8061 the Chebyshev margin exceeds the bound, so use a looser level.
    let chance = common::input_box(0.5);
    let spec = PrsSpec {
        mode: smpc_core::prs::PrsMode::Chebyshev,
        ..PrsSpec::default()
    };
    let t = tighten(&chance, &scalar(-0.5), &seq, &spec).unwrap();
    let expected = 0.5 * sys_var[(0, 0)].sqrt() * (1.0f64 / (1.0 - 0.5)).sqrt();
    assert_abs_diff_eq!(t.limit_margins()[0], expected, epsilon = 1e-9);
}

#[test]
fn expected_cost_constant_by_direct_summation() {
    let cfg = table1_config(smpc_core::smpc::ControllerVariant::Proposed);
    let mut sum = 0.0;
    let mut sigma = 0.0;
    // R = 0, so the stage weight on the error is Q alone.
    for _ in 0..10 {
        sum += sigma;
        sigma = 0.25 * sigma + 1.0;
    }
    sum += 4.0 / 3.0 * sigma;
    assert_abs_diff_eq!(expected_cost_constant(&cfg), sum, epsilon = 1e-10);
}

#[test]
fn step_objective_matches_forward_simulation() {
    let cfg = table1_config(smpc_core::smpc::ControllerVariant::Proposed);
    let (xk, zp) = (x(0.8), x(0.3));
    let qp = build_step_qp(&cfg, &xk, &zp, 0).unwrap();
    let sol = solve_qp(&qp, &QpSettings::default());
    assert_eq!(sol.status, QpStatus::Optimal);
    let (z, v, _) = cfg.unpack(&sol.x);
    // xbar_0 = x, ubar = v + K (xbar - z), xbar+ = xbar + ubar
    let mut xbar = xk[0];
    let mut cost = 0.0;
    for i in 0..10 {
        let ubar = v[(0, i)] - 0.5 * (xbar - z[(0, i)]);
        cost += xbar * xbar;
        xbar += ubar;
    }
    cost += 4.0 / 3.0 * xbar * xbar;
    assert_abs_diff_eq!(sol.objective, cost, epsilon = 1e-9);
    // Random feasible-or-not points agree too: the objective is a polynomial identity.
    let theta = DVector::from_fn(cfg.decision_dim(), |i, _| ((i * 37 % 11) as f64 - 5.0) * 0.1);
    let (z, v, _) = cfg.unpack(&theta);
    let mut xbar = xk[0];
    let mut cost = 0.0;
    for i in 0..10 {
        let ubar = v[(0, i)] - 0.5 * (xbar - z[(0, i)]);
        cost += xbar * xbar;
        xbar += ubar;
    }
    cost += 4.0 / 3.0 * xbar * xbar;
    assert_abs_diff_eq!(qp.objective_at(&theta), cost, epsilon = 1e-9);
}

#[test]
fn free_lambda_beats_every_grid_point() {
    let cfg = table1_config(smpc_core::smpc::ControllerVariant::Proposed);
    let (xk, zp) = (x(0.8), x(0.3));
    let free = solve_qp(&build_step_qp(&cfg, &xk, &zp, 0).unwrap(), &QpSettings::default());
    let grid_best = (0..=100)
        .map(|i| {
            let qp = build_step_qp_with(&cfg, &xk, &zp, 0, LambdaMode::Pinned(i as f64 / 100.0)).unwrap();
            solve_qp(&qp, &QpSettings::default()).objective
        })
        .fold(f64::INFINITY, f64::min);
    assert!(free.objective <= grid_best + 1e-9);
    assert_abs_diff_eq!(free.objective, grid_best, epsilon = 1e-5);
}

#[test]
fn stationary_satisfaction_of_linear_feedback() {
    // u = -0.5 x with x ~ N(0, 4/3): P(|u| <= 1) = P(|x| <= 2).
    let fixed = 2.0 * oracle::cdf(2.0 / (4.0f64 / 3.0).sqrt()) - 1.0;
    assert_abs_diff_eq!(fixed, 0.9167, epsilon = 5e-5);
    // u = -x with x ~ N(0, 1).
    let lqr = 2.0 * oracle::cdf(1.0) - 1.0;
    assert_abs_diff_eq!(lqr, 0.6827, epsilon = 5e-5);
}
