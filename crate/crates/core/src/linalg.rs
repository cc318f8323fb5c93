//! Small dense helpers shared by the solver and the model checks.
//!
//! Everything here works on `nalgebra` dynamic matrices and is tuned for the
//! problem sizes this crate deals with (tens of variables), not for speed on
//! large systems.

use nalgebra::{DMatrix, DVector};

/// Householder QR of an `rows x cols` matrix with the full orthogonal factor.
///
/// With `pivot` set, columns are permuted so that the diagonal of `r` is
/// non-increasing in magnitude, which makes the factorization rank revealing.
#[derive(Debug, Clone)]
pub(crate) struct FullQr {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `perm[j]` is the original column that ended up in position `j`.
    pub perm: Vec<usize>,
}

impl FullQr {
    pub fn new(a: &DMatrix<f64>, pivot: bool) -> Self {
        let (rows, cols) = a.shape();
        let mut r = a.clone();
        let mut q = DMatrix::<f64>::identity(rows, rows);
        let mut perm: Vec<usize> = (0..cols).collect();
        let mut v = DVector::<f64>::zeros(rows);

        for j in 0..rows.min(cols) {
            if pivot {
                let mut best = j;
                let mut best_norm = -1.0;
                for c in j..cols {
                    let norm: f64 = (j..rows).map(|i| r[(i, c)] * r[(i, c)]).sum();
                    if norm > best_norm {
                        best_norm = norm;
                        best = c;
                    }
                }
                if best != j {
                    r.swap_columns(j, best);
                    perm.swap(j, best);
                }
            }

            let norm_x: f64 = (j..rows).map(|i| r[(i, j)] * r[(i, j)]).sum::<f64>().sqrt();
            if norm_x == 0.0 {
                continue;
            }
            let x0 = r[(j, j)];
            let alpha = if x0 >= 0.0 { -norm_x } else { norm_x };
            for i in j..rows {
                v[i] = r[(i, j)];
            }
            v[j] -= alpha;
            let vnorm2: f64 = (j..rows).map(|i| v[i] * v[i]).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            let beta = 2.0 / vnorm2;

            // r <- (I - beta v v^T) r on the trailing block
            for c in j..cols {
                let s: f64 = (j..rows).map(|i| v[i] * r[(i, c)]).sum::<f64>() * beta;
                if s != 0.0 {
                    for i in j..rows {
                        r[(i, c)] -= s * v[i];
                    }
                }
            }
            for i in (j + 1)..rows {
                r[(i, j)] = 0.0;
            }
            // q <- q (I - beta v v^T)
            for row in 0..rows {
                let s: f64 = (j..rows).map(|i| q[(row, i)] * v[i]).sum::<f64>() * beta;
                if s != 0.0 {
                    for i in j..rows {
                        q[(row, i)] -= s * v[i];
                    }
                }
            }
        }
        Self { q, r, perm }
    }

    /// Number of diagonal entries of `r` above `rel_tol * |r[0,0]|`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let k = self.r.nrows().min(self.r.ncols());
        if k == 0 {
            return 0;
        }
        let lead = self.r[(0, 0)].abs();
        if lead == 0.0 {
            return 0;
        }
        (0..k).take_while(|&j| self.r[(j, j)].abs() > rel_tol * lead).count()
    }
}

/// Cholesky factor of a symmetric matrix, refusing pivots at or below
/// `min_pivot`. Returns the lower factor.
pub(crate) fn cholesky_strict(a: &DMatrix<f64>, min_pivot: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= min_pivot {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solves `L L^T x = b` given the lower Cholesky factor.
pub(crate) fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Back substitution with the leading `k x k` upper triangle of `r`.
pub(crate) fn upper_solve(r: &DMatrix<f64>, b: &DVector<f64>, k: usize) -> DVector<f64> {
    let mut x = DVector::<f64>::zeros(k);
    for i in (0..k).rev() {
        let mut s = b[i];
        for j in (i + 1)..k {
            s -= r[(i, j)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

/// Forward substitution with the transpose of the leading `k x k` upper
/// triangle of `r`, i.e. solves `R^T x = b`.
pub(crate) fn upper_transpose_solve(r: &DMatrix<f64>, b: &DVector<f64>, k: usize) -> DVector<f64> {
    let mut x = DVector::<f64>::zeros(k);
    for i in 0..k {
        let mut s = b[i];
        for j in 0..i {
            s -= r[(j, i)] * x[j];
        }
        x[i] = s / r[(i, i)];
    }
    x
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub(crate) fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .fold(0.0, |acc, z| acc.max(z.norm()))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v))
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).iter().all(|v| v.abs() <= tol * (1.0 + max_abs(m)))
}
