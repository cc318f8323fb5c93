//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize     1/2 x' P x + q' x + c
//!     subject to   G x <= h
//!                  Aeq x = beq
//!                  lb <= x <= ub
//! ```
//!
//! with `P` symmetric positive semi-definite. Equality rows (including bounds
//! with `lb == ub`) are eliminated with a rank-revealing QR, a phase-1 LP that
//! minimizes the largest normalized violation finds a feasible point or
//! certifies infeasibility, and a primal active-set method finishes the job.
//! Singular reduced Hessians (pure LPs, zero input weights) are handled by
//! moving along zero-curvature descent directions until a constraint blocks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_solve, cholesky_strict, max_abs, max_abs_vec, upper_solve, upper_transpose_solve, FullQr,
};

pub const PRIMAL_TOL: f64 = 1e-8;
pub const STATIONARITY_TOL: f64 = 1e-6;
/// Phase-1 optimum at or below this value counts as feasible.
pub const PHASE1_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100_000;

const PSD_TOL: f64 = 1e-9;
const RANK_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    p: DMatrix<f64>,
    q: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    lb: DVector<f64>,
    ub: DVector<f64>,
    constant: f64,
}

impl QuadraticProgram {
    /// Unconstrained problem `min 1/2 x'Px + q'x`. `P` is symmetrized and must
    /// be positive semi-definite up to `1e-9` relative to its largest entry.
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let d = q.len();
        if p.shape() != (d, d) {
            return Err(Error::dim(format!("P is {:?}, expected {d}x{d}", p.shape())));
        }
        if p.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("QP objective has non-finite entries"));
        }
        let p = (&p + p.transpose()) * 0.5;
        let shift = PSD_TOL * (1.0 + max_abs(&p));
        let shifted = &p + DMatrix::<f64>::identity(d, d) * shift;
        if d > 0 && shifted.cholesky().is_none() {
            let min_eig = crate::linalg::min_symmetric_eigenvalue(&p);
            return Err(Error::config(format!(
                "QP Hessian is not positive semi-definite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(Self {
            p,
            q,
            g: DMatrix::zeros(0, d),
            h: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            lb: DVector::from_element(d, f64::NEG_INFINITY),
            ub: DVector::from_element(d, f64::INFINITY),
            constant: 0.0,
        })
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        self.check_rows("G", &g, &h)?;
        self.g = g;
        self.h = h;
        Ok(self)
    }

    pub fn with_equalities(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Result<Self> {
        self.check_rows("Aeq", &a_eq, &b_eq)?;
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        Ok(self)
    }

    /// Box bounds; `±inf` entries are allowed, NaN is not.
    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Result<Self> {
        let d = self.dim();
        if lb.len() != d || ub.len() != d {
            return Err(Error::dim(format!(
                "bounds have lengths {} and {}, expected {d}",
                lb.len(),
                ub.len()
            )));
        }
        if lb.iter().chain(ub.iter()).any(|v| v.is_nan()) {
            return Err(Error::config("QP bounds contain NaN"));
        }
        self.lb = lb;
        self.ub = ub;
        Ok(self)
    }

    /// Constant added to the reported objective.
    pub fn with_constant(mut self, constant: f64) -> Self {
        self.constant = constant;
        self
    }

    fn check_rows(&self, name: &str, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<()> {
        let d = self.dim();
        if a.ncols() != d || a.nrows() != b.len() {
            return Err(Error::dim(format!(
                "{name} is {:?} with rhs of length {}, expected ?x{d}",
                a.shape(),
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config(format!("{name} has non-finite entries")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn a_eq(&self) -> &DMatrix<f64> {
        &self.a_eq
    }

    pub fn b_eq(&self) -> &DVector<f64> {
        &self.b_eq
    }

    pub fn lb(&self) -> &DVector<f64> {
        &self.lb
    }

    pub fn ub(&self) -> &DVector<f64> {
        &self.ub
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn objective_at(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x) + self.constant
    }

    /// Largest violation of any constraint at `x` (0 when feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        if self.g.nrows() > 0 {
            let gx = &self.g * x;
            for (v, b) in gx.iter().zip(self.h.iter()) {
                worst = worst.max(v - b);
            }
        }
        if self.a_eq.nrows() > 0 {
            let ax = &self.a_eq * x;
            for (v, b) in ax.iter().zip(self.b_eq.iter()) {
                worst = worst.max((v - b).abs());
            }
        }
        for i in 0..self.dim() {
            worst = worst.max(self.lb[i] - x[i]).max(x[i] - self.ub[i]);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    /// Objective decreases without bound along a feasible ray.
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: DVector<f64>,
    /// Includes the constant term. `+inf` when infeasible.
    pub objective: f64,
    pub max_primal_violation: f64,
    /// Projected stationarity residual plus dual infeasibility, divided by `1 + |q|_inf`.
    pub kkt_residual: f64,
    /// Optimal value of the phase-1 LP (largest normalized violation).
    pub phase1_violation: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub max_iter: usize,
    /// Starting guess. It need not be feasible; phase 1 is skipped when it is.
    pub warm_start: Option<DVector<f64>>,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            warm_start: None,
        }
    }
}

/// Affine parametrization `x = x_p + Z y` of the equality-feasible set.
struct Elimination {
    x_p: DVector<f64>,
    z: DMatrix<f64>,
    residual: f64,
}

fn eliminate(qp: &QuadraticProgram) -> Elimination {
    let d = qp.dim();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for i in 0..qp.a_eq.nrows() {
        rows.push((qp.a_eq.row(i).transpose(), qp.b_eq[i]));
    }
    for j in 0..d {
        if qp.lb[j] == qp.ub[j] {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            rows.push((e, qp.lb[j]));
        }
    }
    if rows.is_empty() {
        return Elimination {
            x_p: DVector::zeros(d),
            z: DMatrix::identity(d, d),
            residual: 0.0,
        };
    }

    let mut et = DMatrix::<f64>::zeros(d, rows.len());
    for (j, (a, _)) in rows.iter().enumerate() {
        et.set_column(j, a);
    }
    let qr = FullQr::new(&et, true);
    let k = qr.rank(RANK_TOL);
    let f_perm = DVector::from_iterator(k, qr.perm[..k].iter().map(|&j| rows[j].1));
    let y1 = upper_transpose_solve(&qr.r, &f_perm, k);
    let x_p = qr.q.columns(0, k) * y1;
    let residual = rows.iter().map(|(a, b)| (a.dot(&x_p) - b).abs()).fold(0.0, f64::max);
    Elimination {
        x_p,
        z: qr.q.columns(k, d - k).into_owned(),
        residual,
    }
}

/// Inequality rows expressed in the reduced coordinates, each scaled to unit norm.
struct ReducedRows {
    c: DMatrix<f64>,
    b: DVector<f64>,
    /// Original row (in `G`, then `ub`, then `lb` order) and its scale.
    origin: Vec<(RowRef, f64)>,
    /// Worst violation among rows that vanish in the reduced space.
    constant_violation: f64,
}

#[derive(Debug, Clone, Copy)]
enum RowRef {
    G(usize),
    Upper(usize),
    Lower(usize),
}

impl RowRef {
    fn normal(self, qp: &QuadraticProgram) -> DVector<f64> {
        match self {
            RowRef::G(i) => qp.g.row(i).transpose(),
            RowRef::Upper(j) => {
                let mut e = DVector::zeros(qp.dim());
                e[j] = 1.0;
                e
            }
            RowRef::Lower(j) => {
                let mut e = DVector::zeros(qp.dim());
                e[j] = -1.0;
                e
            }
        }
    }
}

fn reduce_rows(qp: &QuadraticProgram, elim: &Elimination) -> ReducedRows {
    let d = qp.dim();
    let ny = elim.z.ncols();
    let mut refs: Vec<(RowRef, f64)> = (0..qp.g.nrows()).map(|i| (RowRef::G(i), qp.h[i])).collect();
    for j in 0..d {
        if qp.lb[j] != qp.ub[j] && qp.ub[j].is_finite() {
            refs.push((RowRef::Upper(j), qp.ub[j]));
        }
    }
    for j in 0..d {
        if qp.lb[j] != qp.ub[j] && qp.lb[j].is_finite() {
            refs.push((RowRef::Lower(j), -qp.lb[j]));
        }
    }

    let gz = if qp.g.nrows() > 0 {
        &qp.g * &elim.z
    } else {
        DMatrix::zeros(0, ny)
    };
    let gx = if qp.g.nrows() > 0 {
        &qp.g * &elim.x_p
    } else {
        DVector::zeros(0)
    };

    let mut c_rows: Vec<DVector<f64>> = Vec::with_capacity(refs.len());
    let mut b = Vec::with_capacity(refs.len());
    let mut origin = Vec::with_capacity(refs.len());
    let mut constant_violation: f64 = 0.0;
    for (r, rhs) in refs {
        let (row, offset, full_norm): (DVector<f64>, f64, f64) = match r {
            RowRef::G(i) => (gz.row(i).transpose(), gx[i], qp.g.row(i).norm()),
            RowRef::Upper(j) => (elim.z.row(j).transpose(), elim.x_p[j], 1.0),
            RowRef::Lower(j) => (-elim.z.row(j).transpose(), -elim.x_p[j], 1.0),
        };
        let slack = rhs - offset;
        let scale = row.norm();
        if scale <= 1e-12 * (1.0 + full_norm) {
            constant_violation = constant_violation.max(-slack);
            continue;
        }
        c_rows.push(row / scale);
        b.push(slack / scale);
        origin.push((r, scale));
    }
    let mut c = DMatrix::zeros(c_rows.len(), ny);
    for (i, row) in c_rows.iter().enumerate() {
        c.set_row(i, &row.transpose());
    }
    ReducedRows {
        c,
        b: DVector::from_vec(b),
        origin,
        constant_violation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CoreStatus {
    Optimal,
    Unbounded,
    MaxIter,
}

struct CoreResult {
    status: CoreStatus,
    working: Vec<usize>,
    multipliers: Vec<f64>,
}

/// Primal active-set iterations for `min 1/2 y'Hy + g'y s.t. C y <= b` from a
/// feasible `y`. Rows of `C` are unit norm.
struct ActiveSet<'a> {
    h: &'a DMatrix<f64>,
    g: &'a DVector<f64>,
    c: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    grad_tol: f64,
    curvature_tol: f64,
}

impl<'a> ActiveSet<'a> {
    fn new(h: &'a DMatrix<f64>, g: &'a DVector<f64>, c: &'a DMatrix<f64>, b: &'a DVector<f64>) -> Self {
        let scale = 1.0 + max_abs_vec(g) + max_abs(h);
        Self {
            h,
            g,
            c,
            b,
            grad_tol: 1e-11 * scale,
            curvature_tol: 1e-10 * (1.0 + max_abs(h)),
        }
    }

    fn run(
        &self,
        y: &mut DVector<f64>,
        mut working: Vec<usize>,
        iterations: &mut usize,
        max_iter: usize,
    ) -> CoreResult {
        let ny = y.len();
        let m = self.c.nrows();
        let mut in_working = vec![false; m];
        for &i in &working {
            in_working[i] = true;
        }
        let mut last_step_degenerate = false;

        loop {
            if *iterations >= max_iter {
                return CoreResult {
                    status: CoreStatus::MaxIter,
                    working,
                    multipliers: Vec::new(),
                };
            }
            *iterations += 1;

            let grad = self.h * &*y + self.g;
            let w = working.len();

            // Basis of the working rows (first w columns) and their null space.
            let (q, r) = if w == 0 {
                (DMatrix::identity(ny, ny), DMatrix::zeros(0, 0))
            } else {
                let mut mt = DMatrix::zeros(ny, w);
                for (j, &i) in working.iter().enumerate() {
                    mt.set_column(j, &self.c.row(i).transpose());
                }
                let f = FullQr::new(&mt, false);
                (f.q, f.r)
            };
            // A working set that lost rank numerically: drop the newest row.
            if w > 0 && (0..w).any(|j| r[(j, j)].abs() <= 1e-12) {
                let i = working.pop().expect("non-empty working set");
                in_working[i] = false;
                continue;
            }

            let t = ny - w;
            let step = if t > 0 {
                let n = q.columns(w, t);
                let gr = n.transpose() * &grad;
                if max_abs_vec(&gr) > self.grad_tol {
                    let hr = n.transpose() * self.h * n;
                    let (pr, alpha_max) = self.reduced_direction(&hr, &gr);
                    let p = n * pr;
                    if max_abs_vec(&p) > 1e-14 * (1.0 + max_abs_vec(y)) {
                        Some((p, alpha_max))
                    } else {
                        None
                    }
                } else {
                    None
                }
            } else {
                None
            };

            match step {
                None => {
                    if w == 0 {
                        return CoreResult {
                            status: CoreStatus::Optimal,
                            working,
                            multipliers: Vec::new(),
                        };
                    }
                    let rhs = -(q.columns(0, w).transpose() * &grad);
                    let mu = upper_solve(&r, &rhs, w);
                    let mu_tol = self.grad_tol.max(1e-12);
                    // Most negative multiplier; lowest row index after a degenerate step.
                    let mut leave: Option<(usize, f64)> = None;
                    for (j, &i) in working.iter().enumerate() {
                        if mu[j] < -mu_tol {
                            let better = match leave {
                                None => true,
                                Some((jj, v)) => {
                                    if last_step_degenerate {
                                        i < working[jj]
                                    } else {
                                        mu[j] < v || (mu[j] == v && i < working[jj])
                                    }
                                }
                            };
                            if better {
                                leave = Some((j, mu[j]));
                            }
                        }
                    }
                    match leave {
                        None => {
                            return CoreResult {
                                status: CoreStatus::Optimal,
                                working,
                                multipliers: mu.iter().copied().collect(),
                            }
                        }
                        Some((j, _)) => {
                            let i = working.remove(j);
                            in_working[i] = false;
                        }
                    }
                }
                Some((p, alpha_max)) => {
                    let pnorm = p.norm();
                    let cp = self.c * &p;
                    let cy = self.c * &*y;
                    let mut alpha = alpha_max;
                    let mut blocking: Option<usize> = None;
                    for i in 0..m {
                        if in_working[i] || cp[i] <= 1e-12 * pnorm {
                            continue;
                        }
                        let slack = (self.b[i] - cy[i]).max(0.0);
                        let a = slack / cp[i];
                        if a < alpha {
                            alpha = a;
                            blocking = Some(i);
                        }
                    }
                    if !alpha.is_finite() {
                        return CoreResult {
                            status: CoreStatus::Unbounded,
                            working,
                            multipliers: Vec::new(),
                        };
                    }
                    y.axpy(alpha, &p, 1.0);
                    last_step_degenerate = alpha == 0.0;
                    if let Some(i) = blocking {
                        working.push(i);
                        in_working[i] = true;
                    }
                }
            }
        }
    }

    /// Descent direction in the null-space coordinates and the largest useful step.
    fn reduced_direction(&self, hr: &DMatrix<f64>, gr: &DVector<f64>) -> (DVector<f64>, f64) {
        if let Some(l) = cholesky_strict(hr, self.curvature_tol) {
            return (-cholesky_solve(&l, gr), 1.0);
        }
        let eig = hr.clone().symmetric_eigen();
        let mut g_null = DVector::zeros(gr.len());
        let mut newton = DVector::zeros(gr.len());
        for (k, &val) in eig.eigenvalues.iter().enumerate() {
            let u = eig.eigenvectors.column(k);
            let coeff = u.dot(gr);
            if val <= self.curvature_tol {
                g_null.axpy(coeff, &u, 1.0);
            } else {
                newton.axpy(-coeff / val, &u, 1.0);
            }
        }
        if max_abs_vec(&g_null) > self.grad_tol {
            let p = -g_null;
            let curvature = p.dot(&(hr * &p));
            let slope = gr.dot(&p);
            let alpha_max = if curvature > 1e-14 * p.norm_squared() {
                -slope / curvature
            } else {
                f64::INFINITY
            };
            (p, alpha_max)
        } else {
            (newton, 1.0)
        }
    }
}

struct Phase1 {
    y: DVector<f64>,
    violation: f64,
    status: CoreStatus,
}

/// Minimizes `t` subject to `C y - t <= b`, `t >= 0`, starting from `y0`.
fn phase1(rows: &ReducedRows, y0: DVector<f64>, iterations: &mut usize, max_iter: usize) -> Phase1 {
    let m = rows.c.nrows();
    let ny = y0.len();
    let cy = &rows.c * &y0;
    let mut worst = 0.0;
    let mut worst_row = None;
    for i in 0..m {
        let v = cy[i] - rows.b[i];
        if v > worst {
            worst = v;
            worst_row = Some(i);
        }
    }
    if worst <= PHASE1_TOL {
        return Phase1 {
            y: y0,
            violation: worst.max(0.0),
            status: CoreStatus::Optimal,
        };
    }

    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut c = DMatrix::zeros(m + 1, ny + 1);
    let mut b = DVector::zeros(m + 1);
    for i in 0..m {
        for j in 0..ny {
            c[(i, j)] = rows.c[(i, j)] * inv_sqrt2;
        }
        c[(i, ny)] = -inv_sqrt2;
        b[i] = rows.b[i] * inv_sqrt2;
    }
    c[(m, ny)] = -1.0;
    let h = DMatrix::zeros(ny + 1, ny + 1);
    let mut g = DVector::zeros(ny + 1);
    g[ny] = 1.0;

    let mut yt = DVector::zeros(ny + 1);
    yt.rows_mut(0, ny).copy_from(&y0);
    yt[ny] = worst;
    let working = worst_row.into_iter().collect();
    let solver = ActiveSet::new(&h, &g, &c, &b);
    let res = solver.run(&mut yt, working, iterations, max_iter);
    let violation = yt[ny].max(0.0);
    Phase1 {
        y: yt.rows(0, ny).into_owned(),
        violation,
        status: res.status,
    }
}

struct Prepared {
    elim: Elimination,
    rows: ReducedRows,
}

fn prepare(qp: &QuadraticProgram) -> Prepared {
    let elim = eliminate(qp);
    let rows = reduce_rows(qp, &elim);
    Prepared { elim, rows }
}

fn initial_reduced(prep: &Prepared, settings: &QpSettings) -> DVector<f64> {
    match &settings.warm_start {
        Some(x0) if x0.len() == prep.elim.x_p.len() => prep.elim.z.transpose() * (x0 - &prep.elim.x_p),
        _ => DVector::zeros(prep.elim.z.ncols()),
    }
}

fn trivially_infeasible(qp: &QuadraticProgram, prep: &Prepared) -> Option<f64> {
    let bound_gap = (0..qp.dim()).map(|j| qp.lb[j] - qp.ub[j]).fold(0.0, f64::max);
    let worst = prep.elim.residual.max(prep.rows.constant_violation).max(bound_gap);
    let scale = 1.0 + max_abs_vec(&qp.b_eq).max(max_abs_vec(&qp.h));
    (worst > PRIMAL_TOL * scale).then_some(worst)
}

/// Phase-1 feasibility test. Agrees with the status returned by [`solve_qp`].
pub fn check_feasible(qp: &QuadraticProgram, settings: &QpSettings) -> Result<bool> {
    let prep = prepare(qp);
    if trivially_infeasible(qp, &prep).is_some() {
        return Ok(false);
    }
    let mut iterations = 0;
    let y0 = initial_reduced(&prep, settings);
    let p1 = phase1(&prep.rows, y0, &mut iterations, settings.max_iter);
    if p1.status == CoreStatus::MaxIter {
        return Err(Error::MaxIter(iterations));
    }
    Ok(p1.violation <= PHASE1_TOL)
}

pub fn solve_qp(qp: &QuadraticProgram, settings: &QpSettings) -> QpSolution {
    let d = qp.dim();
    let prep = prepare(qp);
    let mut iterations = 0;

    if let Some(worst) = trivially_infeasible(qp, &prep) {
        return infeasible(qp, prep.elim.x_p.clone(), worst, 0);
    }

    let y0 = initial_reduced(&prep, settings);
    let p1 = phase1(&prep.rows, y0, &mut iterations, settings.max_iter);
    // Rounding in the reduced space can leave a coordinate a few ulps past
    // its box; report it on the bound instead.
    let x_of = |y: &DVector<f64>| {
        let mut x = &prep.elim.x_p + &prep.elim.z * y;
        for i in 0..d {
            x[i] = x[i].clamp(qp.lb[i], qp.ub[i]);
        }
        x
    };
    match p1.status {
        CoreStatus::MaxIter => return max_iter(qp, x_of(&p1.y), iterations),
        _ if p1.violation > PHASE1_TOL => {
            return infeasible(qp, x_of(&p1.y), p1.violation, iterations);
        }
        _ => {}
    }

    let z = &prep.elim.z;
    let hr = z.transpose() * &qp.p * z;
    let hr = (&hr + hr.transpose()) * 0.5;
    let gr = z.transpose() * (&qp.p * &prep.elim.x_p + &qp.q);
    let mut y = p1.y;
    let solver = ActiveSet::new(&hr, &gr, &prep.rows.c, &prep.rows.b);
    let res = solver.run(&mut y, Vec::new(), &mut iterations, settings.max_iter);
    let x = x_of(&y);

    match res.status {
        CoreStatus::MaxIter => max_iter(qp, x, iterations),
        CoreStatus::Unbounded => QpSolution {
            status: QpStatus::Unbounded,
            objective: f64::NEG_INFINITY,
            max_primal_violation: qp.max_violation(&x),
            kkt_residual: f64::NAN,
            phase1_violation: p1.violation,
            iterations,
            x,
        },
        CoreStatus::Optimal => {
            let mut r = &qp.p * &x + &qp.q;
            let mut dual_infeasibility: f64 = 0.0;
            for (&i, &mu) in res.working.iter().zip(res.multipliers.iter()) {
                let (row, scale) = prep.rows.origin[i];
                r.axpy(mu / scale, &row.normal(qp), 1.0);
                dual_infeasibility = dual_infeasibility.max(-mu / scale);
            }
            let projected = if d > 0 { z * (z.transpose() * &r) } else { r };
            let kkt = max_abs_vec(&projected).max(dual_infeasibility) / (1.0 + max_abs_vec(&qp.q));
            QpSolution {
                status: QpStatus::Optimal,
                objective: qp.objective_at(&x),
                max_primal_violation: qp.max_violation(&x),
                kkt_residual: kkt,
                phase1_violation: p1.violation,
                iterations,
                x,
            }
        }
    }
}

fn infeasible(qp: &QuadraticProgram, x: DVector<f64>, violation: f64, iterations: usize) -> QpSolution {
    QpSolution {
        status: QpStatus::Infeasible,
        objective: f64::INFINITY,
        max_primal_violation: qp.max_violation(&x),
        kkt_residual: f64::NAN,
        phase1_violation: violation,
        iterations,
        x,
    }
}

fn max_iter(qp: &QuadraticProgram, x: DVector<f64>, iterations: usize) -> QpSolution {
    QpSolution {
        status: QpStatus::MaxIter,
        objective: qp.objective_at(&x),
        max_primal_violation: qp.max_violation(&x),
        kkt_residual: f64::NAN,
        phase1_violation: f64::NAN,
        iterations,
        x,
    }
}
