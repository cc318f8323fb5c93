//! Plant, cost, constraint and terminal-ingredient types.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, max_abs, min_symmetric_eigenvalue, spectral_radius};
use crate::qp::{check_feasible, QpSettings, QuadraticProgram};

const LYAPUNOV_TOL: f64 = 1e-12;
const LYAPUNOV_MAX_ITER: usize = 1_000_000;

/// Zero-mean, symmetric disturbance distributions with a given covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceLaw {
    Gaussian,
    /// Uniform on the parallelotope `L [-sqrt(3), sqrt(3)]^n` with `L L' = sigma_w`.
    UniformBox,
}

/// `x(k+1) = A x(k) + B u(k) + w(k)` with i.i.d. `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma_w: DMatrix<f64>,
    /// Lower Cholesky factor of `sigma_w`, used for sampling.
    sigma_w_chol: DMatrix<f64>,
    law: DisturbanceLaw,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, sigma_w: DMatrix<f64>, law: DisturbanceLaw) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::dim(format!(
                "A must be square and non-empty, got {:?}",
                a.shape()
            )));
        }
        if b.nrows() != n {
            return Err(Error::dim(format!("B has {} rows, A has {n}", b.nrows())));
        }
        if sigma_w.shape() != (n, n) {
            return Err(Error::dim(format!(
                "sigma_w is {:?}, expected {n}x{n}",
                sigma_w.shape()
            )));
        }
        if a.iter().chain(b.iter()).chain(sigma_w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("system matrices must be finite"));
        }
        if !is_symmetric(&sigma_w, 1e-12) {
            return Err(Error::config("sigma_w must be symmetric"));
        }
        let sigma_w_chol = match sigma_w.clone().cholesky() {
            Some(c) if min_symmetric_eigenvalue(&sigma_w) > 0.0 => c.l(),
            _ => return Err(Error::config("sigma_w must be positive definite")),
        };
        Ok(Self {
            a,
            b,
            sigma_w,
            sigma_w_chol,
            law,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma_w(&self) -> &DMatrix<f64> {
        &self.sigma_w
    }

    pub fn sigma_w_chol(&self) -> &DMatrix<f64> {
        &self.sigma_w_chol
    }

    pub fn law(&self) -> DisturbanceLaw {
        self.law
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn check_gain(&self, k: &DMatrix<f64>) -> Result<()> {
        if k.shape() != (self.input_dim(), self.state_dim()) {
            return Err(Error::dim(format!(
                "gain is {:?}, expected {}x{}",
                k.shape(),
                self.input_dim(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// `A + B K`.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_gain(k)?;
        Ok(&self.a + &self.b * k)
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + w
    }
}

/// `l(x, u) = x'Qx + q'x + u'Ru + r'u`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticStageCost {
    pub q_mat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub r_mat: DMatrix<f64>,
    pub r_vec: DVector<f64>,
}

impl QuadraticStageCost {
    pub fn new(q_mat: DMatrix<f64>, q_vec: DVector<f64>, r_mat: DMatrix<f64>, r_vec: DVector<f64>) -> Result<Self> {
        let n = q_vec.len();
        let m = r_vec.len();
        if q_mat.shape() != (n, n) || r_mat.shape() != (m, m) {
            return Err(Error::dim("stage cost matrices do not match their linear terms"));
        }
        for (name, mat) in [("Q", &q_mat), ("R", &r_mat)] {
            if !is_symmetric(mat, 1e-12) {
                return Err(Error::config(format!("{name} must be symmetric")));
            }
            if min_symmetric_eigenvalue(mat) < -1e-10 * (1.0 + max_abs(mat)) {
                return Err(Error::config(format!("{name} must be positive semi-definite")));
            }
        }
        Ok(Self {
            q_mat,
            q_vec,
            r_mat,
            r_vec,
        })
    }

    pub fn check_dims(&self, sys: &LtiSystem) -> Result<()> {
        if self.q_vec.len() != sys.state_dim() || self.r_vec.len() != sys.input_dim() {
            return Err(Error::dim("stage cost dimensions do not match the system"));
        }
        Ok(())
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x.dot(&(&self.q_mat * x)) + self.q_vec.dot(x) + u.dot(&(&self.r_mat * u)) + self.r_vec.dot(u)
    }
}

/// `{ y : H y <= h }`. For joint state/input sets `y = (x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl Polytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        if normals.nrows() == 0 {
            return Err(Error::config("polytope needs at least one row"));
        }
        if normals.nrows() != offsets.len() {
            return Err(Error::dim(format!(
                "polytope has {} normals and {} offsets",
                normals.nrows(),
                offsets.len()
            )));
        }
        if normals.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("polytope entries must be finite"));
        }
        Ok(Self { normals, offsets })
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn rows(&self) -> usize {
        self.normals.nrows()
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn contains_origin(&self) -> bool {
        self.offsets.iter().all(|&h| h >= 0.0)
    }

    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        (&self.normals * y - &self.offsets).iter().all(|&v| v <= tol)
    }

    /// Same normals, new offsets.
    pub fn with_offsets(&self, offsets: DVector<f64>) -> Result<Self> {
        Self::new(self.normals.clone(), offsets)
    }

    /// Joint-set membership for `(x, u)`.
    pub fn contains_pair(&self, x: &DVector<f64>, u: &DVector<f64>, tol: f64) -> bool {
        let n = x.len();
        (0..self.rows()).all(|i| {
            let row = self.normals.row(i);
            let s: f64 =
                (0..n).map(|j| row[j] * x[j]).sum::<f64>() + (0..u.len()).map(|j| row[n + j] * u[j]).sum::<f64>();
            s <= self.offsets[i] + tol
        })
    }

    /// Row `i` split into its state part `c_i` and input part `d_i`.
    pub fn split_row(&self, i: usize, n: usize) -> (DVector<f64>, DVector<f64>) {
        let row = self.normals.row(i);
        let m = self.dim() - n;
        (
            DVector::from_iterator(n, (0..n).map(|j| row[j])),
            DVector::from_iterator(m, (0..m).map(|j| row[n + j])),
        )
    }

    /// Feasibility of the polytope as an LP.
    pub fn is_empty(&self) -> Result<bool> {
        let d = self.dim();
        let qp = QuadraticProgram::new(DMatrix::zeros(d, d), DVector::zeros(d))?
            .with_inequalities(self.normals.clone(), self.offsets.clone())?;
        Ok(!check_feasible(&qp, &QpSettings::default())?)
    }

    /// `max a'y` over the polytope is at most `bound`, decided through the
    /// dual: some `mu >= 0` has `H'mu = a` and `h'mu <= bound`. Works for
    /// unbounded polytopes, where a finite support may still exist.
    pub fn support_at_most(&self, a: &DVector<f64>, bound: f64, tol: f64) -> Result<bool> {
        let rows = self.rows();
        let qp = QuadraticProgram::new(DMatrix::zeros(rows, rows), DVector::zeros(rows))?
            .with_equalities(self.normals.transpose(), a.clone())?
            .with_inequalities(
                DMatrix::from_row_slice(1, rows, self.offsets.as_slice()),
                DVector::from_element(1, bound + tol),
            )?
            .with_bounds(DVector::zeros(rows), DVector::from_element(rows, f64::INFINITY))?;
        check_feasible(&qp, &QpSettings::default())
    }
}

/// How the level `p` is distributed over the rows of the constraint set.
#[derive(Debug, Clone, PartialEq)]
pub enum RiskAllocation {
    /// The single level `p` for every row.
    Joint,
    PerRow(Vec<f64>),
}

/// `P{(x, u) in Z} >= p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChanceConstraintSpec {
    set: Polytope,
    level: f64,
    allocation: RiskAllocation,
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{what} must lie in (0, 1), got {p}")))
    }
}

impl ChanceConstraintSpec {
    pub fn new(set: Polytope, level: f64, allocation: RiskAllocation) -> Result<Self> {
        check_probability(level, "chance constraint level")?;
        if let RiskAllocation::PerRow(levels) = &allocation {
            if levels.len() != set.rows() {
                return Err(Error::dim(format!(
                    "{} per-row levels for {} rows",
                    levels.len(),
                    set.rows()
                )));
            }
            for &p in levels {
                check_probability(p, "per-row level")?;
            }
        }
        Ok(Self { set, level, allocation })
    }

    pub fn set(&self) -> &Polytope {
        &self.set
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn allocation(&self) -> &RiskAllocation {
        &self.allocation
    }

    pub fn row_level(&self, i: usize) -> f64 {
        match &self.allocation {
            RiskAllocation::Joint => self.level,
            RiskAllocation::PerRow(levels) => levels[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalSet {
    /// `{z}`; enforced as equality rows.
    Point(DVector<f64>),
    /// State-space polytope `{z : F z <= f}`.
    Polytope(Polytope),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalIngredients {
    pub set: TerminalSet,
    pub kf: DMatrix<f64>,
    pub pf: DMatrix<f64>,
    pub pf_lin: DVector<f64>,
    pub tube_gain: DMatrix<f64>,
}

impl TerminalIngredients {
    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.pf * x)) + self.pf_lin.dot(x)
    }
}

/// Spectral radius of `A + BK`. Callers decide whether `>= 1` is acceptable.
pub fn validate_closed_loop_stability(sys: &LtiSystem, k: &DMatrix<f64>) -> Result<f64> {
    Ok(spectral_radius(&sys.closed_loop(k)?))
}

/// `(Pf, pf)` with `A_K' Pf A_K + Q + K'RK = Pf` and `A_K' pf + q + K'r = pf`.
pub fn terminal_cost_from_lyapunov(
    sys: &LtiSystem,
    k: &DMatrix<f64>,
    cost: &QuadraticStageCost,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    cost.check_dims(sys)?;
    let a_k = sys.closed_loop(k)?;
    let rho = spectral_radius(&a_k);
    if rho >= 1.0 {
        return Err(Error::NotSchur(rho));
    }
    let q_tilde = &cost.q_mat + k.transpose() * &cost.r_mat * k;
    let q_lin = &cost.q_vec + k.transpose() * &cost.r_vec;
    let a_t = a_k.transpose();

    let mut p = DMatrix::zeros(a_k.nrows(), a_k.nrows());
    let mut p_lin = DVector::zeros(a_k.nrows());
    for _ in 0..LYAPUNOV_MAX_ITER {
        let next = &a_t * &p * &a_k + &q_tilde;
        let next_lin = &a_t * &p_lin + &q_lin;
        let change = max_abs(&(&next - &p)).max(crate::linalg::max_abs_vec(&(&next_lin - &p_lin)));
        p = next;
        p_lin = next_lin;
        if change <= LYAPUNOV_TOL {
            let p = (&p + p.transpose()) * 0.5;
            return Ok((p, p_lin));
        }
    }
    warn!("Lyapunov iteration hit the cap of {LYAPUNOV_MAX_ITER} steps");
    Err(Error::config("Lyapunov iteration did not converge"))
}

/// Assumption check for the terminal set: every `z` in `Xf` has
/// `(z, Kf z)` in `zbar` and `(A + B Kf) z` in `Xf`.
pub fn check_terminal_admissibility(sys: &LtiSystem, term: &TerminalIngredients, zbar: &Polytope) -> Result<bool> {
    const TOL: f64 = 1e-9;
    let n = sys.state_dim();
    if zbar.dim() != n + sys.input_dim() {
        return Err(Error::dim("tightened set does not live in (x, u) space"));
    }
    let a_f = sys.closed_loop(&term.kf)?;
    match &term.set {
        TerminalSet::Point(z) => {
            if z.len() != n {
                return Err(Error::dim("terminal point has the wrong dimension"));
            }
            let u = &term.kf * z;
            let next = &a_f * z;
            Ok(zbar.contains_pair(z, &u, TOL) && (next - z).amax() <= TOL)
        }
        TerminalSet::Polytope(xf) => {
            if xf.dim() != n {
                return Err(Error::dim("terminal polytope has the wrong dimension"));
            }
            if xf.is_empty()? {
                return Err(Error::config("terminal set is empty"));
            }
            for i in 0..zbar.rows() {
                let (c, d) = zbar.split_row(i, n);
                let dir = c + term.kf.transpose() * d;
                if !xf.support_at_most(&dir, zbar.offsets()[i], TOL)? {
                    return Ok(false);
                }
            }
            for j in 0..xf.rows() {
                let dir = a_f.transpose() * xf.normals().row(j).transpose();
                if !xf.support_at_most(&dir, xf.offsets()[j], TOL)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
    }
}
