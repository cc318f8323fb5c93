mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

use smpc_core::linalg::{min_symmetric_eigenvalue, spectral_radius};
use smpc_core::prs::{propagate_variance, row_tightening, PrsMode, PrsShape, PrsSpec};
use smpc_core::qp::{check_feasible, solve_qp, QpSettings, QpStatus, QuadraticProgram};
use smpc_core::sim::{monte_carlo_with, nestedness_check, ErrorRegion, MonteCarloOptions, RngSpec};
use smpc_core::smpc::{
    build_step_qp, build_step_qp_with, check_step_invariants, shifted_candidate, solve_step, ControllerVariant,
    LambdaMode, SmpcConfig,
};

use common::{appendix_b_config, table1_config, x};

fn config(cases: u32) -> Config {
    Config {
        cases,
        failure_persistence: None,
        rng_seed: RngSeed::Fixed(0x5eed),
        ..Config::default()
    }
}

fn closed_loop_configs() -> impl Strategy<Value = (ControllerVariant, bool)> {
    (
        prop_oneof![
            Just(ControllerVariant::Proposed),
            Just(ControllerVariant::CaseMin),
            Just(ControllerVariant::CaseReset),
            Just(ControllerVariant::Indirect),
            Just(ControllerVariant::NominalMpc),
        ],
        any::<bool>(),
    )
}

fn build(variant: ControllerVariant, appendix: bool) -> SmpcConfig {
    if appendix {
        appendix_b_config(variant, PrsShape::SymmetricPerRow)
    } else {
        table1_config(variant)
    }
}

/// Walks a closed loop and calls `check` with `(cfg, x, z_prev, k)` at
/// every step before advancing.
fn walk(
    cfg: &SmpcConfig,
    x0: f64,
    noise: &[f64],
    mut check: impl FnMut(&SmpcConfig, &DVector<f64>, &DVector<f64>, usize),
) {
    // The symmetric state constraint of the second system admits only x >= 0 (nearly).
    let mut xk = x(x0.abs());
    let mut z_prev = xk.clone();
    for (k, w) in noise.iter().enumerate() {
        check(cfg, &xk, &z_prev, k);
        let res = solve_step(cfg, &xk, &z_prev, k).unwrap();
        xk = cfg.sys.step(&xk, &res.u_applied, &x(*w));
        z_prev = res.next_nominal().unwrap();
    }
}

proptest! {
    #![proptest_config(config(50))]

    #[test]
    fn shifted_candidate_stays_feasible(
        (variant, appendix) in closed_loop_configs(),
        x0 in -0.4f64..0.4,
        noise in prop::collection::vec(-2.5f64..2.5, 20),
    ) {
        let cfg = build(variant, appendix);
        walk(&cfg, x0, &noise, |cfg, xk, z_prev, k| {
            let res = solve_step(cfg, xk, z_prev, k).unwrap();
            check_step_invariants(cfg, xk, z_prev, k, &res).unwrap();
            let cand = shifted_candidate(&res, cfg).unwrap();
            let next_x = x(xk[0] + 1.0);
            let next_z = res.next_nominal().unwrap();
            // Any measured state: lambda = 0 ignores it.
            let qp = build_step_qp_with(cfg, &next_x, &next_z, k + 1, LambdaMode::Pinned(0.0)).unwrap();
            let viol = qp.max_violation(&cand.theta(cfg));
            assert!(viol <= 1e-7, "{variant} k = {k}: candidate violation {viol:e}");
        });
    }

    #[test]
    fn lambda_and_error_relation(
        (variant, appendix) in closed_loop_configs(),
        x0 in -0.4f64..0.4,
        noise in prop::collection::vec(-2.5f64..2.5, 20),
    ) {
        let cfg = build(variant, appendix);
        walk(&cfg, x0, &noise, |cfg, xk, z_prev, k| {
            let res = solve_step(cfg, xk, z_prev, k).unwrap();
            let l = res.lambda_star;
            assert!((0.0..=1.0).contains(&l), "lambda {l}");
            let e = xk - res.nominal_state().unwrap();
            let expected = (xk - z_prev) * (1.0 - l);
            assert!((e - expected).amax() <= 1e-7);
        });
    }

    #[test]
    fn free_lambda_is_no_worse_than_any_pinned_value(
        appendix in any::<bool>(),
        x0 in -0.4f64..0.4,
        noise in prop::collection::vec(-2.5f64..2.5, 10),
    ) {
        let cfg = build(ControllerVariant::Proposed, appendix);
        walk(&cfg, x0, &noise, |cfg, xk, z_prev, k| {
            let free = solve_qp(&build_step_qp(cfg, xk, z_prev, k).unwrap(), &QpSettings::default());
            assert_eq!(free.status, QpStatus::Optimal);
            for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let qp = build_step_qp_with(cfg, xk, z_prev, k, LambdaMode::Pinned(lambda)).unwrap();
                let pinned = solve_qp(&qp, &QpSettings::default());
                if pinned.status == QpStatus::Optimal {
                    assert!(free.objective <= pinned.objective + 1e-6, "lambda {lambda}");
                }
            }
        });
    }
}

fn stable_pair() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>)> {
    (
        prop::collection::vec(-1.0f64..1.0, 4),
        prop::collection::vec(-1.0f64..1.0, 4),
    )
        .prop_map(|(a, l)| {
            let mut a = DMatrix::from_row_slice(2, 2, &a);
            let rho = spectral_radius(&a);
            if rho >= 0.95 {
                a *= 0.9 / rho;
            }
            let l = DMatrix::from_row_slice(2, 2, &l);
            (a, &l * l.transpose())
        })
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn variance_sequence_grows_in_the_loewner_order((a, w) in stable_pair()) {
        let seq = propagate_variance(&a, &w, 40).unwrap();
        let scale = 1.0 + w.amax();
        for pair in seq.sigmas().windows(2) {
            let diff = &pair[1] - &pair[0];
            prop_assert!(min_symmetric_eigenvalue(&diff) >= -1e-10 * scale);
        }
    }

    #[test]
    fn chebyshev_margins_dominate_gaussian(
        p in 0.01f64..0.995,
        (_, sigma) in stable_pair(),
        c in prop::collection::vec(-2.0f64..2.0, 2),
        d in -2.0f64..2.0,
        k in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let c = DVector::from_vec(c);
        let d = DVector::from_element(1, d);
        let k = DMatrix::from_row_slice(1, 2, &k);
        for shape in [PrsShape::SymmetricPerRow, PrsShape::OneSidedPerRow, PrsShape::Ellipsoidal] {
            let gauss = PrsSpec { mode: PrsMode::GaussianExact, shape, stationary: true };
            let cheb = PrsSpec { mode: PrsMode::Chebyshev, ..gauss };
            let g = row_tightening(&c, &d, &k, &sigma, p, &gauss).unwrap();
            let h = row_tightening(&c, &d, &k, &sigma, p, &cheb).unwrap();
            prop_assert!(g <= h + 1e-12, "{shape:?}: {g} > {h}");
        }
    }
}

/// Random convex QP with box bounds, some inequalities and maybe an equality.
#[derive(Debug, Clone)]
struct RandomQp {
    p: DMatrix<f64>,
    q: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    bound: f64,
}

impl RandomQp {
    fn qp(&self) -> QuadraticProgram {
        let d = self.q.len();
        QuadraticProgram::new(self.p.clone(), self.q.clone())
            .unwrap()
            .with_inequalities(self.g.clone(), self.h.clone())
            .unwrap()
            .with_equalities(self.a_eq.clone(), self.b_eq.clone())
            .unwrap()
            .with_bounds(
                DVector::from_element(d, -self.bound),
                DVector::from_element(d, self.bound),
            )
            .unwrap()
    }

    /// All constraints as rows `a'x <= b`, equalities as two rows.
    fn rows(&self) -> (Vec<DVector<f64>>, Vec<f64>) {
        let d = self.q.len();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for i in 0..d {
            for s in [1.0, -1.0] {
                let mut e = DVector::zeros(d);
                e[i] = s;
                rows.push(e);
                rhs.push(self.bound);
            }
        }
        for i in 0..self.g.nrows() {
            rows.push(self.g.row(i).transpose());
            rhs.push(self.h[i]);
        }
        for i in 0..self.a_eq.nrows() {
            rows.push(self.a_eq.row(i).transpose());
            rhs.push(self.b_eq[i]);
            rows.push(-self.a_eq.row(i).transpose());
            rhs.push(-self.b_eq[i]);
        }
        (rows, rhs)
    }
}

fn random_qp(strict: bool) -> impl Strategy<Value = RandomQp> {
    (1usize..=3, 0usize..=4, 0usize..=1)
        .prop_flat_map(move |(d, m, e)| {
            (
                prop::collection::vec(-1.0f64..1.0, d * d),
                prop::collection::vec(-2.0f64..2.0, d),
                prop::collection::vec(-1.0f64..1.0, m * d),
                prop::collection::vec(-1.5f64..2.0, m),
                prop::collection::vec(-1.0f64..1.0, e * d),
                prop::collection::vec(-1.0f64..1.0, e),
                0.5f64..3.0,
                Just((d, m, e)),
            )
        })
        .prop_map(move |(l, q, g, h, a, b, bound, (d, m, e))| {
            let l = DMatrix::from_row_slice(d, d, &l);
            let mut p = &l * l.transpose();
            if strict {
                p += DMatrix::identity(d, d) * 0.1;
            }
            RandomQp {
                p,
                q: DVector::from_vec(q),
                g: DMatrix::from_row_slice(m, d, &g),
                h: DVector::from_vec(h),
                a_eq: DMatrix::from_row_slice(e, d, &a),
                b_eq: DVector::from_vec(b),
                bound,
            }
        })
}

/// Brute force over active sets of a strictly convex QP: the optimum is the
/// unique KKT point, found by some subset of at most `d` active rows.
fn enumerate_optimum(inst: &RandomQp) -> Option<f64> {
    let d = inst.q.len();
    let (rows, rhs) = inst.rows();
    let r = rows.len();
    let f = |x: &DVector<f64>| 0.5 * x.dot(&(&inst.p * x)) + inst.q.dot(x);
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << r) {
        let active: Vec<usize> = (0..r).filter(|i| mask & (1 << i) != 0).collect();
        if active.len() > d {
            continue;
        }
        let s = active.len();
        let mut kkt = DMatrix::zeros(d + s, d + s);
        let mut b = DVector::zeros(d + s);
        kkt.view_mut((0, 0), (d, d)).copy_from(&inst.p);
        for (j, &i) in active.iter().enumerate() {
            kkt.view_mut((0, d + j), (d, 1)).copy_from(&rows[i]);
            kkt.view_mut((d + j, 0), (1, d)).copy_from(&rows[i].transpose());
            b[d + j] = rhs[i];
        }
        b.rows_mut(0, d).copy_from(&(-&inst.q));
        let Some(sol) = kkt.clone().lu().solve(&b) else {
            continue;
        };
        if (&kkt * &sol - &b).amax() > 1e-9 {
            continue;
        }
        let xs = sol.rows(0, d).into_owned();
        let primal = rows.iter().zip(&rhs).all(|(a, b)| a.dot(&xs) <= b + 1e-9);
        let dual = (0..s).all(|j| sol[d + j] >= -1e-9);
        if primal && dual {
            let val = f(&xs);
            best = Some(best.map_or(val, |b: f64| b.min(val)));
        }
    }
    best
}

proptest! {
    #![proptest_config(config(1000))]

    #[test]
    fn qp_matches_active_set_enumeration(inst in random_qp(true)) {
        let qp = inst.qp();
        let sol = solve_qp(&qp, &QpSettings::default());
        let feasible = check_feasible(&qp, &QpSettings::default()).unwrap();
        prop_assert_eq!(feasible, sol.status != QpStatus::Infeasible);
        match enumerate_optimum(&inst) {
            Some(best) => {
                prop_assert_eq!(sol.status, QpStatus::Optimal);
                prop_assert!((sol.objective - best).abs() <= 1e-6 * (1.0 + best.abs()), "{} vs {}", sol.objective, best);
                prop_assert!(sol.kkt_residual <= 1e-6);
                prop_assert!(qp.max_violation(&sol.x) <= 1e-7);
            }
            None => prop_assert_eq!(sol.status, QpStatus::Infeasible),
        }
    }

    #[test]
    fn qp_status_agrees_with_phase_one(inst in random_qp(false)) {
        let qp = inst.qp();
        let sol = solve_qp(&qp, &QpSettings::default());
        let feasible = check_feasible(&qp, &QpSettings::default()).unwrap();
        prop_assert_eq!(feasible, sol.status != QpStatus::Infeasible);
        // Bounded box: never unbounded, never out of iterations.
        prop_assert!(matches!(sol.status, QpStatus::Optimal | QpStatus::Infeasible));
        if sol.status == QpStatus::Optimal {
            prop_assert!(sol.kkt_residual <= 1e-6);
            prop_assert!(qp.max_violation(&sol.x) <= 1e-7);
            prop_assert!(sol.phase1_violation <= 1e-8);
        } else {
            prop_assert!(sol.phase1_violation > 1e-8);
        }
    }
}

proptest! {
    #![proptest_config(config(8))]

    #[test]
    fn monte_carlo_is_thread_count_invariant(seed in any::<u64>(), threads in 2usize..6) {
        let cfg = table1_config(ControllerVariant::CaseMin);
        let rng = RngSpec::new(seed);
        let run = |threads| {
            monte_carlo_with(&cfg, &x(0.0), 12, 24, &rng, &MonteCarloOptions { threads, keep_records: 3 }).unwrap()
        };
        prop_assert_eq!(run(1), run(threads));
    }

    #[test]
    fn closed_loop_error_is_more_concentrated_than_predicted(
        variant in prop_oneof![
            Just(ControllerVariant::Proposed),
            Just(ControllerVariant::CaseMin),
            Just(ControllerVariant::Indirect),
        ],
        radius in 0.3f64..2.0,
        k in 1usize..8,
        seed in any::<u64>(),
    ) {
        let cfg = table1_config(variant);
        let region = ErrorRegion::Interval { direction: x(1.0), radius };
        let r = nestedness_check(&cfg, &x(0.0), &region, k, 600, &RngSpec::new(seed)).unwrap();
        prop_assert!(r.empirical >= r.analytic - 3.0 * r.empirical_stderr.max(1.0 / 600.0), "{r:?}");
    }
}
