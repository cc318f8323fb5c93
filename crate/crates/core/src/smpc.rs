//! The per-step SMPC problem with an interpolated initial nominal state.
//!
//! At time `k` the controller picks a nominal trajectory `(z, v)` and a
//! weight `lambda in [0, 1]` with `z_0 = (1 - lambda) z_prev + lambda x`,
//! where `z_prev` is the nominal state predicted for this step at `k - 1`.
//! `lambda = 0` keeps the previous prediction (indirect feedback), `lambda = 1`
//! resets to the measurement. The objective is the expected cost of the
//! closed loop `u = v + K (x - z)` conditioned on the measured state; its mean
//! part is a quadratic in the decision vector and the covariance part is a
//! constant.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_terminal_admissibility, terminal_cost_from_lyapunov, validate_closed_loop_stability, ChanceConstraintSpec,
    LtiSystem, Polytope, QuadraticStageCost, TerminalIngredients, TerminalSet,
};
use crate::prs::{propagate_variance, tighten, PrsSpec, TightenedConstraints, VarianceSequence};
use crate::qp::{check_feasible, solve_qp, QpSettings, QpSolution, QpStatus, QuadraticProgram};

/// Tolerance for the step-result invariants.
pub const INVARIANT_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerVariant {
    /// `lambda in [0, 1]` optimized in one QP.
    Proposed,
    /// Solve with `lambda = 0` and `lambda = 1`, keep the cheaper one.
    CaseMin,
    /// `lambda = 1` whenever that problem is feasible, else `lambda = 0`.
    CaseReset,
    /// `lambda = 0`.
    Indirect,
    /// The proposed formulation with `K = 0`.
    #[serde(rename = "nominal")]
    NominalMpc,
    /// `u = K x`.
    FixedGain,
    /// `u = K_lqr x`.
    #[serde(rename = "lqr")]
    LqrGain,
}

impl ControllerVariant {
    /// Column order of the comparison table.
    pub const TABLE_ORDER: [ControllerVariant; 7] = [
        ControllerVariant::LqrGain,
        ControllerVariant::Proposed,
        ControllerVariant::CaseMin,
        ControllerVariant::Indirect,
        ControllerVariant::NominalMpc,
        ControllerVariant::FixedGain,
        ControllerVariant::CaseReset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerVariant::Proposed => "proposed",
            ControllerVariant::CaseMin => "case-min",
            ControllerVariant::CaseReset => "case-reset",
            ControllerVariant::Indirect => "indirect",
            ControllerVariant::NominalMpc => "nominal",
            ControllerVariant::FixedGain => "fixed-gain",
            ControllerVariant::LqrGain => "lqr",
        }
    }

    pub fn solves_qp(self) -> bool {
        !matches!(self, ControllerVariant::FixedGain | ControllerVariant::LqrGain)
    }
}

impl fmt::Display for ControllerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::TABLE_ORDER
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown controller `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalSpec {
    /// `Xf = {0}`, `Kf = K`.
    Origin,
    /// `Xf = {z : (z, Kf z) in Zbar_inf}`.
    HalfspaceFromTightening { kf: DMatrix<f64> },
}

/// Everything that defines a controller except the variant.
#[derive(Debug, Clone)]
pub struct ControllerSetup {
    pub sys: LtiSystem,
    pub cost: QuadraticStageCost,
    pub chance: ChanceConstraintSpec,
    pub tube_gain: DMatrix<f64>,
    pub lqr_gain: Option<DMatrix<f64>>,
    pub terminal: TerminalSpec,
    pub horizon: usize,
    pub prs: PrsSpec,
    pub lambda_penalty: f64,
    /// Number of covariance steps computed for time-varying tightening.
    pub tightening_steps: usize,
}

#[derive(Debug, Clone)]
pub struct SmpcConfig {
    pub sys: LtiSystem,
    pub cost: QuadraticStageCost,
    pub chance: ChanceConstraintSpec,
    /// Gain acting on `x - z`; zero for the nominal variant.
    pub gain: DMatrix<f64>,
    pub lqr_gain: Option<DMatrix<f64>>,
    pub terminal: TerminalIngredients,
    pub horizon: usize,
    pub prs: PrsSpec,
    pub tightened: TightenedConstraints,
    pub variances: VarianceSequence,
    pub lambda_penalty: f64,
    pub variant: ControllerVariant,
    cost_constant: f64,
}

impl SmpcConfig {
    pub fn new(setup: &ControllerSetup, variant: ControllerVariant) -> Result<Self> {
        let sys = &setup.sys;
        let (n, m) = (sys.state_dim(), sys.input_dim());
        setup.cost.check_dims(sys)?;
        sys.check_gain(&setup.tube_gain)?;
        if setup.chance.set().dim() != n + m {
            return Err(Error::dim("chance constraint set must live in (x, u) space"));
        }
        if setup.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(setup.lambda_penalty >= 0.0 && setup.lambda_penalty.is_finite()) {
            return Err(Error::config("lambda penalty must be a finite non-negative number"));
        }
        if let Some(k_lqr) = &setup.lqr_gain {
            sys.check_gain(k_lqr)?;
        } else if variant == ControllerVariant::LqrGain {
            return Err(Error::config("the lqr controller needs K_lqr"));
        }
        if !setup.prs.is_symmetric() {
            warn!("one-sided PRS: closed-loop chance constraint guarantees do not apply");
        }

        let gain = if variant == ControllerVariant::NominalMpc {
            DMatrix::zeros(m, n)
        } else {
            setup.tube_gain.clone()
        };
        let rho = validate_closed_loop_stability(sys, &gain)?;
        let a_k = sys.closed_loop(&gain)?;
        let steps = setup.tightening_steps.max(setup.horizon);
        let variances = propagate_variance(&a_k, sys.sigma_w(), steps)?;
        let tightened = tighten(&setup.chance, &gain, &variances, &setup.prs).map_err(|e| match e {
            Error::Config(msg) if rho >= 1.0 => Error::config(format!("{msg} (spectral radius {rho})")),
            other => other,
        })?;

        let (pf, pf_lin) = terminal_cost_from_lyapunov(sys, &setup.tube_gain, &setup.cost)?;
        let (set, kf) = match &setup.terminal {
            TerminalSpec::Origin => (TerminalSet::Point(DVector::zeros(n)), setup.tube_gain.clone()),
            TerminalSpec::HalfspaceFromTightening { kf } => {
                sys.check_gain(kf)?;
                let limit = tightened.limit_set();
                let mut normals = DMatrix::zeros(limit.rows(), n);
                for i in 0..limit.rows() {
                    let (c, d) = limit.split_row(i, n);
                    normals.set_row(i, &(c + kf.transpose() * d).transpose());
                }
                let xf = Polytope::new(normals, limit.offsets().clone())?;
                (TerminalSet::Polytope(xf), kf.clone())
            }
        };
        let terminal = TerminalIngredients {
            set,
            kf,
            pf,
            pf_lin,
            tube_gain: gain.clone(),
        };
        if !check_terminal_admissibility(sys, &terminal, &tightened.limit_set())? {
            return Err(Error::config(
                "terminal set is not admissible for the tightened constraints",
            ));
        }

        let mut cfg = Self {
            sys: sys.clone(),
            cost: setup.cost.clone(),
            chance: setup.chance.clone(),
            gain,
            lqr_gain: setup.lqr_gain.clone(),
            terminal,
            horizon: setup.horizon,
            prs: setup.prs,
            tightened,
            variances,
            lambda_penalty: setup.lambda_penalty,
            variant,
            cost_constant: 0.0,
        };
        cfg.cost_constant = expected_cost_constant(&cfg);
        Ok(cfg)
    }

    pub fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.sys.input_dim()
    }

    pub fn cost_constant(&self) -> f64 {
        self.cost_constant
    }

    /// Bound on the average closed-loop stage cost: `tr(Pf Sigma_w)`.
    pub fn performance_bound(&self) -> f64 {
        (&self.terminal.pf * self.sys.sigma_w()).trace()
    }

    /// Stationary average stage cost of `u = K x`, `tr((Q + K'RK) Sigma_inf)`,
    /// when the closed loop is stable.
    pub fn stationary_feedback_cost(&self) -> Option<f64> {
        let sigma = self.variances.sigma_inf()?;
        let k = &self.gain;
        let weight = &self.cost.q_mat + k.transpose() * &self.cost.r_mat * k;
        Some((weight * sigma).trace())
    }

    /// Length of the decision vector `(z_0..z_N, v_0..v_{N-1}, lambda)`.
    pub fn decision_dim(&self) -> usize {
        let (n, m, big_n) = (self.state_dim(), self.input_dim(), self.horizon);
        (big_n + 1) * n + big_n * m + 1
    }

    fn z_index(&self, i: usize) -> usize {
        i * self.state_dim()
    }

    fn v_index(&self, i: usize) -> usize {
        (self.horizon + 1) * self.state_dim() + i * self.input_dim()
    }

    fn lambda_index(&self) -> usize {
        self.decision_dim() - 1
    }

    /// Splits a decision vector into `(z, v, lambda)` with `z` as `n x (N+1)`
    /// and `v` as `m x N` column trajectories.
    pub fn unpack(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, f64) {
        let (n, m, big_n) = (self.state_dim(), self.input_dim(), self.horizon);
        let z = DMatrix::from_fn(n, big_n + 1, |r, c| theta[self.z_index(c) + r]);
        let v = DMatrix::from_fn(m, big_n, |r, c| theta[self.v_index(c) + r]);
        (z, v, theta[self.lambda_index()])
    }

    pub fn pack(&self, z: &DMatrix<f64>, v: &DMatrix<f64>, lambda: f64) -> DVector<f64> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut theta = DVector::zeros(self.decision_dim());
        for i in 0..=self.horizon {
            for r in 0..n {
                theta[self.z_index(i) + r] = z[(r, i)];
            }
        }
        for i in 0..self.horizon {
            for r in 0..m {
                theta[self.v_index(i) + r] = v[(r, i)];
            }
        }
        theta[self.lambda_index()] = lambda;
        theta
    }

    /// Default treatment of `lambda` for this variant's main QP.
    pub fn lambda_mode(&self) -> LambdaMode {
        match self.variant {
            ControllerVariant::Indirect => LambdaMode::Pinned(0.0),
            _ => LambdaMode::Free,
        }
    }
}

/// Objective of the step QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepObjective {
    /// Mean-trajectory cost conditioned on the measured state.
    Expected,
    /// `sum l(z_i, v_i) + V_f(z_N)`, ignoring the measurement.
    Nominal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    Free,
    Pinned(f64),
}

/// Covariance part of the expected cost:
/// `sum_{i<N} tr((Q + K'RK) Sigma_i) + tr(Pf Sigma_N)`.
pub fn expected_cost_constant(cfg: &SmpcConfig) -> f64 {
    let k = &cfg.gain;
    let weight = &cfg.cost.q_mat + k.transpose() * &cfg.cost.r_mat * k;
    let sigmas = cfg.variances.sigmas();
    let stage: f64 = (0..cfg.horizon).map(|i| (&weight * &sigmas[i]).trace()).sum();
    stage + (&cfg.terminal.pf * &sigmas[cfg.horizon]).trace()
}

/// Step QP with the variant's own `lambda` treatment.
pub fn build_step_qp(cfg: &SmpcConfig, x: &DVector<f64>, z_prev: &DVector<f64>, k: usize) -> Result<QuadraticProgram> {
    build_step_qp_with(cfg, x, z_prev, k, cfg.lambda_mode())
}

/// Builds the step QP over `theta = (z_0..z_N, v_0..v_{N-1}, lambda)`.
///
/// The objective is the mean-trajectory cost `sum l(xbar_i, ubar_i) +
/// V_f(xbar_N) + penalty * lambda^2` (constant included), where
/// `xbar_0 = x`, `ubar_i = v_i + K (xbar_i - z_i)` and
/// `xbar_{i+1} = A xbar_i + B ubar_i`.
pub fn build_step_qp_with(
    cfg: &SmpcConfig,
    x: &DVector<f64>,
    z_prev: &DVector<f64>,
    k: usize,
    lambda: LambdaMode,
) -> Result<QuadraticProgram> {
    build_step_qp_objective(cfg, x, z_prev, k, lambda, StepObjective::Expected)
}

/// As [`build_step_qp_with`] with a choice of objective.
pub fn build_step_qp_objective(
    cfg: &SmpcConfig,
    x: &DVector<f64>,
    z_prev: &DVector<f64>,
    k: usize,
    lambda: LambdaMode,
    objective: StepObjective,
) -> Result<QuadraticProgram> {
    let (n, m, big_n) = (cfg.state_dim(), cfg.input_dim(), cfg.horizon);
    if x.len() != n || z_prev.len() != n {
        return Err(Error::dim("state and previous nominal state must have length n"));
    }
    let d = cfg.decision_dim();
    let a = cfg.sys.a();
    let b = cfg.sys.b();
    let gain = &cfg.gain;
    let cost = &cfg.cost;
    let li = cfg.lambda_index();

    // Objective by forward substitution of the mean trajectory.
    let mut p = DMatrix::<f64>::zeros(d, d);
    let mut q = DVector::<f64>::zeros(d);
    let mut constant = 0.0;
    let mut add_quadratic = |map: &DMatrix<f64>, offset: &DVector<f64>, w: &DMatrix<f64>, lin: &DVector<f64>| {
        let wm = w * map;
        p.gemm_tr(2.0, map, &wm, 1.0);
        q.gemv_tr(2.0, &wm, offset, 1.0);
        q.gemv_tr(1.0, map, lin, 1.0);
        constant += offset.dot(&(w * offset)) + lin.dot(offset);
    };

    match objective {
        StepObjective::Expected => {
            let mut x_map = DMatrix::<f64>::zeros(n, d);
            let mut x_off = x.clone();
            for i in 0..big_n {
                // ubar_i = v_i + K (xbar_i - z_i)
                let mut u_map = gain * &x_map;
                for r in 0..m {
                    u_map[(r, cfg.v_index(i) + r)] += 1.0;
                }
                for r in 0..m {
                    for c in 0..n {
                        u_map[(r, cfg.z_index(i) + c)] -= gain[(r, c)];
                    }
                }
                let u_off = gain * &x_off;
                add_quadratic(&x_map, &x_off, &cost.q_mat, &cost.q_vec);
                add_quadratic(&u_map, &u_off, &cost.r_mat, &cost.r_vec);
                x_map = a * &x_map + b * &u_map;
                x_off = a * &x_off + b * &u_off;
            }
            add_quadratic(&x_map, &x_off, &cfg.terminal.pf, &cfg.terminal.pf_lin);
        }
        StepObjective::Nominal => {
            let select = |rows: usize, start: usize| {
                let mut s = DMatrix::<f64>::zeros(rows, d);
                for r in 0..rows {
                    s[(r, start + r)] = 1.0;
                }
                s
            };
            let (zero_n, zero_m) = (DVector::zeros(n), DVector::zeros(m));
            for i in 0..big_n {
                add_quadratic(&select(n, cfg.z_index(i)), &zero_n, &cost.q_mat, &cost.q_vec);
                add_quadratic(&select(m, cfg.v_index(i)), &zero_m, &cost.r_mat, &cost.r_vec);
            }
            add_quadratic(
                &select(n, cfg.z_index(big_n)),
                &zero_n,
                &cfg.terminal.pf,
                &cfg.terminal.pf_lin,
            );
        }
    }
    p[(li, li)] += 2.0 * cfg.lambda_penalty;

    // Equalities: interpolated initial state, nominal dynamics, terminal point.
    let terminal_rows = match &cfg.terminal.set {
        TerminalSet::Point(_) => n,
        TerminalSet::Polytope(_) => 0,
    };
    let eq_rows = n + big_n * n + terminal_rows;
    let mut a_eq = DMatrix::<f64>::zeros(eq_rows, d);
    let mut b_eq = DVector::<f64>::zeros(eq_rows);
    for r in 0..n {
        a_eq[(r, cfg.z_index(0) + r)] = 1.0;
        a_eq[(r, li)] = z_prev[r] - x[r];
        b_eq[r] = z_prev[r];
    }
    for i in 0..big_n {
        let row0 = n + i * n;
        for r in 0..n {
            a_eq[(row0 + r, cfg.z_index(i + 1) + r)] = 1.0;
            for c in 0..n {
                a_eq[(row0 + r, cfg.z_index(i) + c)] = -a[(r, c)];
            }
            for c in 0..m {
                a_eq[(row0 + r, cfg.v_index(i) + c)] = -b[(r, c)];
            }
        }
    }
    if let TerminalSet::Point(zf) = &cfg.terminal.set {
        let row0 = n + big_n * n;
        for r in 0..n {
            a_eq[(row0 + r, cfg.z_index(big_n) + r)] = 1.0;
            b_eq[row0 + r] = zf[r];
        }
    }

    // Inequalities: tightened sets along the horizon, terminal polytope.
    let base = cfg.tightened.base();
    let rows = base.rows();
    let terminal_ineq = match &cfg.terminal.set {
        TerminalSet::Polytope(xf) => xf.rows(),
        TerminalSet::Point(_) => 0,
    };
    let mut g = DMatrix::<f64>::zeros(big_n * rows + terminal_ineq, d);
    let mut h = DVector::<f64>::zeros(big_n * rows + terminal_ineq);
    for i in 0..big_n {
        let offsets = cfg.tightened.offsets_at(k + i);
        for j in 0..rows {
            let row = i * rows + j;
            for c in 0..n {
                g[(row, cfg.z_index(i) + c)] = base.normals()[(j, c)];
            }
            for c in 0..m {
                g[(row, cfg.v_index(i) + c)] = base.normals()[(j, n + c)];
            }
            h[row] = offsets[j];
        }
    }
    if let TerminalSet::Polytope(xf) = &cfg.terminal.set {
        for j in 0..xf.rows() {
            let row = big_n * rows + j;
            for c in 0..n {
                g[(row, cfg.z_index(big_n) + c)] = xf.normals()[(j, c)];
            }
            h[row] = xf.offsets()[j];
        }
    }

    let mut lb = DVector::from_element(d, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(d, f64::INFINITY);
    match lambda {
        LambdaMode::Free => {
            lb[li] = 0.0;
            ub[li] = 1.0;
        }
        LambdaMode::Pinned(value) => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::config(format!("pinned lambda {value} outside [0, 1]")));
            }
            lb[li] = value;
            ub[li] = value;
        }
    }

    Ok(QuadraticProgram::new(p, q)?
        .with_equalities(a_eq, b_eq)?
        .with_inequalities(g, h)?
        .with_bounds(lb, ub)?
        .with_constant(constant))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcStepResult {
    /// `m x N`; empty for the pure feedback variants.
    pub v_star: DMatrix<f64>,
    /// `n x (N+1)`; empty for the pure feedback variants.
    pub z_star: DMatrix<f64>,
    /// NaN for the pure feedback variants.
    pub lambda_star: f64,
    /// Expected cost including the covariance terms; the stage cost for the
    /// pure feedback variants.
    pub j_star: f64,
    pub u_applied: DVector<f64>,
    pub feasible: bool,
    pub qp_solves: usize,
}

impl MpcStepResult {
    /// `z*_{1|k}`, the next step's `z_prev`.
    pub fn next_nominal(&self) -> Option<DVector<f64>> {
        (self.z_star.ncols() > 1).then(|| self.z_star.column(1).into_owned())
    }

    /// `z*_{0|k}`.
    pub fn nominal_state(&self) -> Option<DVector<f64>> {
        (self.z_star.ncols() > 0).then(|| self.z_star.column(0).into_owned())
    }
}

/// Solves one step for the configured variant.
pub fn solve_step(cfg: &SmpcConfig, x: &DVector<f64>, z_prev: &DVector<f64>, k: usize) -> Result<MpcStepResult> {
    solve_step_warm(cfg, x, z_prev, k, None)
}

/// As [`solve_step`], seeding the solver with a starting point for the
/// `lambda`-free and `lambda = 0` problems (typically the shifted candidate).
pub fn solve_step_warm(
    cfg: &SmpcConfig,
    x: &DVector<f64>,
    z_prev: &DVector<f64>,
    k: usize,
    warm: Option<&DVector<f64>>,
) -> Result<MpcStepResult> {
    let n = cfg.state_dim();
    if x.len() != n || z_prev.len() != n {
        return Err(Error::dim("state and previous nominal state must have length n"));
    }
    let feedback = |gain: &DMatrix<f64>| {
        let u = gain * x;
        MpcStepResult {
            v_star: DMatrix::zeros(cfg.input_dim(), 0),
            z_star: DMatrix::zeros(n, 0),
            lambda_star: f64::NAN,
            j_star: cfg.cost.eval(x, &u),
            u_applied: u,
            feasible: true,
            qp_solves: 0,
        }
    };
    let settings = |warm: Option<&DVector<f64>>| QpSettings {
        warm_start: warm.cloned(),
        ..QpSettings::default()
    };

    let (solution, solves) = match cfg.variant {
        ControllerVariant::FixedGain => return Ok(feedback(&cfg.gain)),
        ControllerVariant::LqrGain => {
            let k_lqr = cfg.lqr_gain.as_ref().expect("checked at construction");
            return Ok(feedback(k_lqr));
        }
        ControllerVariant::Proposed | ControllerVariant::NominalMpc => {
            let qp = build_step_qp_with(cfg, x, z_prev, k, LambdaMode::Free)?;
            (solve_qp(&qp, &settings(warm)), 1)
        }
        ControllerVariant::Indirect => {
            let qp = build_step_qp_with(cfg, x, z_prev, k, LambdaMode::Pinned(0.0))?;
            (solve_qp(&qp, &settings(warm)), 1)
        }
        ControllerVariant::CaseMin => {
            let qp0 = build_step_qp_with(cfg, x, z_prev, k, LambdaMode::Pinned(0.0))?;
            let qp1 = build_step_qp_with(cfg, x, z_prev, k, LambdaMode::Pinned(1.0))?;
            let s0 = solve_qp(&qp0, &settings(warm));
            let s1 = solve_qp(&qp1, &settings(None));
            check_max_iter(&s1)?;
            let pick_reset =
                s1.status == QpStatus::Optimal && (s0.status != QpStatus::Optimal || s1.objective < s0.objective);
            (if pick_reset { s1 } else { s0 }, 2)
        }
        ControllerVariant::CaseReset => {
            let qp1 = build_step_qp_with(cfg, x, z_prev, k, LambdaMode::Pinned(1.0))?;
            if check_feasible(&qp1, &QpSettings::default())? {
                (solve_qp(&qp1, &settings(None)), 1)
            } else {
                let qp0 = build_step_qp_objective(cfg, x, z_prev, k, LambdaMode::Pinned(0.0), StepObjective::Nominal)?;
                (solve_qp(&qp0, &settings(warm)), 2)
            }
        }
    };
    check_max_iter(&solution)?;
    match solution.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible if k == 0 => return Err(Error::InfeasibleStart),
        status => {
            return Err(Error::Invariant {
                step: k,
                detail: format!("step problem returned {status:?} after a feasible start"),
            })
        }
    }

    let (z, v, lambda) = cfg.unpack(&solution.x);
    let z0 = z.column(0).into_owned();
    let u = v.column(0) + &cfg.gain * (x - &z0);
    let result = MpcStepResult {
        v_star: v,
        z_star: z,
        lambda_star: lambda,
        j_star: solution.objective + cfg.cost_constant,
        u_applied: u,
        feasible: true,
        qp_solves: solves,
    };
    check_step_invariants(cfg, x, z_prev, k, &result)?;
    Ok(result)
}

fn check_max_iter(sol: &QpSolution) -> Result<()> {
    if sol.status == QpStatus::MaxIter {
        Err(Error::MaxIter(sol.iterations))
    } else {
        Ok(())
    }
}

/// Checks the interpolation, dynamics, constraint and terminal conditions of
/// a solved step to [`INVARIANT_TOL`].
pub fn check_step_invariants(
    cfg: &SmpcConfig,
    x: &DVector<f64>,
    z_prev: &DVector<f64>,
    k: usize,
    res: &MpcStepResult,
) -> Result<()> {
    let fail = |detail: String| Err(Error::Invariant { step: k, detail });
    let lambda = res.lambda_star;
    if !(-INVARIANT_TOL..=1.0 + INVARIANT_TOL).contains(&lambda) {
        return fail(format!("lambda {lambda} outside [0, 1]"));
    }
    let z = &res.z_star;
    let v = &res.v_star;
    let expected_z0 = z_prev * (1.0 - lambda) + x * lambda;
    let gap = (z.column(0) - &expected_z0).amax();
    if gap > INVARIANT_TOL {
        return fail(format!("initial-state interpolation off by {gap:e}"));
    }
    let (a, b) = (cfg.sys.a(), cfg.sys.b());
    for i in 0..cfg.horizon {
        let zi = z.column(i).into_owned();
        let vi = v.column(i).into_owned();
        let gap = (z.column(i + 1) - (a * &zi + b * &vi)).amax();
        if gap > INVARIANT_TOL {
            return fail(format!("nominal dynamics residual {gap:e} at i = {i}"));
        }
        if !cfg.tightened.set_at(k + i).contains_pair(&zi, &vi, INVARIANT_TOL) {
            return fail(format!("nominal pair outside the tightened set at i = {i}"));
        }
    }
    let zn = z.column(cfg.horizon).into_owned();
    let inside = match &cfg.terminal.set {
        TerminalSet::Point(p) => (&zn - p).amax() <= INVARIANT_TOL,
        TerminalSet::Polytope(xf) => xf.contains(&zn, INVARIANT_TOL),
    };
    if !inside {
        return fail("terminal state outside the terminal set".into());
    }
    let z0 = z.column(0).into_owned();
    let u = v.column(0) + &cfg.gain * (x - &z0);
    let gap = (&u - &res.u_applied).amax();
    if gap > INVARIANT_TOL {
        return fail(format!("applied input differs from v0 + K(x - z0) by {gap:e}"));
    }
    Ok(())
}

/// Candidate for the next step: `lambda = 0`, inputs shifted by one and the
/// terminal controller appended.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedCandidate {
    pub z: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub lambda: f64,
}

impl ShiftedCandidate {
    pub fn theta(&self, cfg: &SmpcConfig) -> DVector<f64> {
        cfg.pack(&self.z, &self.v, self.lambda)
    }
}

pub fn shifted_candidate(prev: &MpcStepResult, cfg: &SmpcConfig) -> Result<ShiftedCandidate> {
    let (n, m, big_n) = (cfg.state_dim(), cfg.input_dim(), cfg.horizon);
    if !prev.feasible || prev.z_star.shape() != (n, big_n + 1) || prev.v_star.shape() != (m, big_n) {
        return Err(Error::config("shifted candidate needs a feasible QP step result"));
    }
    let (a, b) = (cfg.sys.a(), cfg.sys.b());
    let mut z = DMatrix::zeros(n, big_n + 1);
    let mut v = DMatrix::zeros(m, big_n);
    z.set_column(0, &prev.z_star.column(1));
    for i in 0..big_n {
        let zi = z.column(i).into_owned();
        let vi = if i + 1 < big_n {
            prev.v_star.column(i + 1).into_owned()
        } else {
            &cfg.terminal.kf * &zi
        };
        z.set_column(i + 1, &(a * &zi + b * &vi));
        v.set_column(i, &vi);
    }
    Ok(ShiftedCandidate { z, v, lambda: 0.0 })
}
