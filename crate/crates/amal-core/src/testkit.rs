//! Shared oracles and fixtures for unit/integration tests (test builds
//! only). Everything here is deliberately independent of the production
//! linear-algebra path: inverses and determinants come from Gauss-Jordan /
//! Gaussian elimination, not Cholesky.

use ndarray::{Array1, Array2, Axis};

use crate::kernel_gp::{gram, Dataset, KernelConfig};
use crate::objectives::{Experiment, Grid, LabelGen};
use crate::policy::{forward, PolicyParams};
use crate::rff::SampledFunction;

/// Dense inverse by Gauss-Jordan elimination with partial pivoting.
pub(crate) fn gauss_jordan_inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = Array2::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().partial_cmp(&m[[j, col]].abs()).unwrap())
            .unwrap();
        if pivot != col {
            for j in 0..n {
                m.swap([col, j], [pivot, j]);
                inv.swap([col, j], [pivot, j]);
            }
        }
        let p = m[[col, col]];
        for j in 0..n {
            m[[col, j]] /= p;
            inv[[col, j]] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[[i, col]];
                for j in 0..n {
                    m[[i, j]] -= f * m[[col, j]];
                    inv[[i, j]] -= f * inv[[col, j]];
                }
            }
        }
    }
    inv
}

/// Log-determinant of a positive-definite matrix via Gaussian elimination
/// (no pivot sign bookkeeping needed: pivots stay positive for PD inputs).
pub(crate) fn ge_log_det(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut m = a.clone();
    let mut acc = 0.0;
    for col in 0..n {
        let p = m[[col, col]];
        assert!(p > 0.0, "oracle log-det expects a positive-definite input");
        acc += p.ln();
        for i in col + 1..n {
            let f = m[[i, col]] / p;
            for j in col..n {
                m[[i, j]] -= f * m[[col, j]];
            }
        }
    }
    acc
}

/// Multivariate normal log-density from explicit inverse and determinant.
pub(crate) fn mvn_log_pdf_oracle(y: &Array1<f64>, mean: &Array1<f64>, cov: &Array2<f64>) -> f64 {
    let n = y.len() as f64;
    let r = y - mean;
    let quad = r.dot(&gauss_jordan_inverse(cov).dot(&r));
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * ge_log_det(cov) - 0.5 * quad
}

pub(crate) fn mvn_entropy_oracle(cov: &Array2<f64>) -> f64 {
    let n = cov.nrows() as f64;
    0.5 * n * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + 0.5 * ge_log_det(cov)
}

/// Zero-mean joint-Gaussian conditioning: distribution of the `target` rows
/// given observed values `y_obs` at the `observed` rows of `points`. The
/// joint covariance is `gram(points) + noise * I`.
pub(crate) fn condition_joint(
    points: &Array2<f64>,
    cfg: &KernelConfig,
    observed: &[usize],
    y_obs: &Array1<f64>,
    target: &[usize],
) -> (Array1<f64>, Array2<f64>) {
    let mut k = gram(points.view(), points.view(), cfg);
    for i in 0..k.nrows() {
        k[[i, i]] += cfg.noise_variance;
    }
    let pick = |rows: &[usize], cols: &[usize]| {
        Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| k[[rows[i], cols[j]]])
    };
    let k_tt = pick(target, target);
    if observed.is_empty() {
        return (Array1::zeros(target.len()), k_tt);
    }
    let k_oo = pick(observed, observed);
    let k_to = pick(target, observed);
    let inv = gauss_jordan_inverse(&k_oo);
    let mean = k_to.dot(&inv).dot(y_obs);
    let cov = &k_tt - &k_to.dot(&inv).dot(&k_to.t());
    (mean, cov)
}

/// Run the policy sequentially over a frozen realization (fixed function,
/// noise draws and initial data), recording queries and labels the way the
/// trainer's rollout does.
pub(crate) fn frozen_rollout(
    params: &PolicyParams,
    cfg: &KernelConfig,
    init: Dataset,
    function: SampledFunction,
    noise: &[f64],
    grid: Option<Grid>,
) -> Experiment {
    let dim = init.dim();
    let mut data = init.clone();
    let mut queries = Array2::zeros((noise.len(), dim));
    let mut labels = Array1::zeros(noise.len());
    for (t, &eps) in noise.iter().enumerate() {
        let q = forward(params, &data).expect("frozen rollout forward");
        let y = function.eval_one(q.x.view()) + eps;
        queries.row_mut(t).assign(&q.x);
        labels[t] = y;
        data.push(q.x.view(), y).expect("query row in unit cube");
    }
    Experiment {
        cfg: cfg.clone(),
        init,
        queries,
        labels,
        grid,
        gen: Some(LabelGen {
            function,
            noise: Array1::from(noise.to_vec()),
        }),
    }
}

/// Stack two row matrices vertically.
pub(crate) fn vstack(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("column counts match")
}
