//! Dense symmetric positive-definite linear algebra.
//!
//! Everything the GP math needs — factorization, solves, inverses and
//! log-determinants — goes through one Cholesky routine with an additive
//! jitter ladder: the factorization is attempted as given, then with jitter
//! starting at 1e-8 and escalating tenfold up to 1e-4 before giving up.
//! Problem sizes stay in the low hundreds, so plain dense loops are enough.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// First rung of the jitter ladder.
pub const JITTER_START: f64 = 1e-8;
/// Last rung; beyond this the matrix is reported as not positive definite.
pub const JITTER_MAX: f64 = 1e-4;

/// Lower-triangular Cholesky factor of `A + jitter * I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: Array2<f64>,
    /// Jitter that was actually added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

fn chol_attempt(a: &ArrayView2<f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Factor a symmetric matrix, escalating jitter from `start` upward.
///
/// `start = 0.0` first tries the matrix exactly as given.
pub fn cholesky_from(a: ArrayView2<f64>, start: f64, context: &str) -> Result<CholFactor> {
    assert_eq!(a.nrows(), a.ncols(), "cholesky needs a square matrix");
    let mut jitter = start;
    loop {
        if let Some(l) = chol_attempt(&a, jitter) {
            return Ok(CholFactor { l, jitter });
        }
        jitter = if jitter == 0.0 {
            JITTER_START
        } else {
            jitter * 10.0
        };
        if jitter > JITTER_MAX * (1.0 + 1e-12) {
            return Err(Error::FactorizationFailure {
                max_jitter: JITTER_MAX,
                context: context.to_string(),
            });
        }
    }
}

/// Factor with the default ladder (exact first, then 1e-8..1e-4).
pub fn cholesky(a: ArrayView2<f64>, context: &str) -> Result<CholFactor> {
    cholesky_from(a, 0.0, context)
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solve `A x = b` for one right-hand side.
    pub fn solve_vec(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        // forward: L z = b
        let mut z = b.to_owned();
        for i in 0..n {
            for k in 0..i {
                let t = self.l[[i, k]] * z[k];
                z[i] -= t;
            }
            z[i] /= self.l[[i, i]];
        }
        // backward: L^T x = z
        for i in (0..n).rev() {
            for k in i + 1..n {
                let t = self.l[[k, i]] * z[k];
                z[i] -= t;
            }
            z[i] /= self.l[[i, i]];
        }
        z
    }

    /// Solve `A X = B` column by column.
    pub fn solve_mat(&self, b: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve_vec(col));
        }
        out
    }

    /// Dense inverse of `A` (small matrices only, which is all we have).
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        self.solve_mat(Array2::<f64>::eye(n).view())
    }

    /// `log det A`, via the factor diagonal.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Deterministic pairwise tree sum over an indexed slice of gradients or
/// losses; the reduction order depends only on the slice length.
pub fn tree_sum<T, F>(items: &[T], zero: T, combine: &F) -> T
where
    T: Clone,
    F: Fn(&T, &T) -> T,
{
    match items.len() {
        0 => zero,
        1 => items[0].clone(),
        n => {
            let mid = n / 2;
            let left = tree_sum(&items[..mid], zero.clone(), combine);
            let right = tree_sum(&items[mid..], zero, combine);
            combine(&left, &right)
        }
    }
}
