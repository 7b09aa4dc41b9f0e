//! Exact Gaussian-process mathematics: RBF kernel, posterior predictive,
//! Gaussian log-density and entropy.
//!
//! Every operation exists twice: a plain `f64`/`ndarray` form used by the
//! deployment and reporting paths, and a tape form (in [`diff`]) used where
//! gradients must flow — policy training differentiates these quantities with
//! respect to query locations, and hyperparameter fitting with respect to
//! kernel parameters.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// RBF kernel hyperparameters plus observation-noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Output variance `v`. Any positive value is a valid kernel; the
    /// training prior additionally keeps `v <= 1` so the kernel never
    /// exceeds one on simulated functions.
    pub variance: f64,
    /// Per-dimension lengthscales; the input dimension is their count.
    pub lengthscales: Vec<f64>,
    /// Observation noise variance added to every predictive covariance.
    pub noise_variance: f64,
}

impl KernelConfig {
    pub fn new(variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let cfg = KernelConfig {
            variance,
            lengthscales,
            noise_variance,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) {
            return Err(Error::ConfigInvalid {
                field: "variance".into(),
                message: format!("must be positive, got {}", self.variance),
            });
        }
        if self.lengthscales.is_empty() || self.lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::ConfigInvalid {
                field: "lengthscales".into(),
                message: "need at least one strictly positive lengthscale".into(),
            });
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::ConfigInvalid {
                field: "noise_variance".into(),
                message: format!("must be positive, got {}", self.noise_variance),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// Ordered observations: inputs in the unit hypercube, real-valued outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: Array2<f64>,
    y: Array1<f64>,
}

impl Dataset {
    pub fn empty(dim: usize) -> Self {
        Dataset {
            x: Array2::zeros((0, dim)),
            y: Array1::zeros(0),
        }
    }

    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
                context: "dataset inputs vs outputs".into(),
            });
        }
        check_unit_cube(x.view())?;
        Ok(Dataset { x, y })
    }

    pub fn push(&mut self, x: ArrayView1<f64>, y: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
                context: "dataset push".into(),
            });
        }
        check_unit_cube(x.insert_axis(Axis(0)))?;
        self.x.push_row(x).expect("row shape already checked");
        self.y
            .push(Axis(0), ndarray::arr0(y).view())
            .expect("scalar push");
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }
}

fn check_unit_cube(x: ArrayView2<f64>) -> Result<()> {
    for (i, row) in x.rows().into_iter().enumerate() {
        if row.iter().any(|&c| !(0.0..=1.0).contains(&c) || !c.is_finite()) {
            return Err(Error::ConfigInvalid {
                field: "dataset.inputs".into(),
                message: format!("row {i} leaves the unit hypercube: {row}"),
            });
        }
    }
    Ok(())
}

/// Multivariate Gaussian over test outputs; the covariance already carries
/// the observation-noise diagonal.
#[derive(Debug, Clone)]
pub struct GaussianPredictive {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl GaussianPredictive {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// ARD RBF kernel: `v * exp(-0.5 * sum_d ((x_d - x'_d) / l_d)^2)`.
pub fn rbf_kernel(x: ArrayView1<f64>, x2: ArrayView1<f64>, cfg: &KernelConfig) -> f64 {
    debug_assert_eq!(x.len(), cfg.dim());
    debug_assert_eq!(x2.len(), cfg.dim());
    let mut s = 0.0;
    for d in 0..x.len() {
        let z = (x[d] - x2[d]) / cfg.lengthscales[d];
        s += z * z;
    }
    cfg.variance * (-0.5 * s).exp()
}

/// Cross-covariance matrix with entry `(i, j) = rbf_kernel(xa_i, xb_j)`.
pub fn gram(xa: ArrayView2<f64>, xb: ArrayView2<f64>, cfg: &KernelConfig) -> Array2<f64> {
    let mut out = Array2::zeros((xa.nrows(), xb.nrows()));
    for (i, ri) in xa.rows().into_iter().enumerate() {
        for (j, rj) in xb.rows().into_iter().enumerate() {
            out[[i, j]] = rbf_kernel(ri, rj, cfg);
        }
    }
    out
}

/// GP posterior predictive at `x_test` given `data`. Empty data returns the
/// prior. The predictive covariance includes the noise diagonal.
pub fn gp_posterior(
    data: &Dataset,
    x_test: ArrayView2<f64>,
    cfg: &KernelConfig,
) -> Result<GaussianPredictive> {
    if x_test.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut cov = gram(x_test, x_test, cfg);
    for i in 0..cov.nrows() {
        cov[[i, i]] += cfg.noise_variance;
    }
    if data.is_empty() {
        return Ok(GaussianPredictive {
            mean: Array1::zeros(x_test.nrows()),
            cov,
        });
    }
    let mut kxx = gram(data.x(), data.x(), cfg);
    for i in 0..kxx.nrows() {
        kxx[[i, i]] += cfg.noise_variance;
    }
    let factor = linalg::cholesky(kxx.view(), "gp posterior train gram")?;
    let ksx = gram(x_test, data.x(), cfg);
    let mean = ksx.dot(&factor.solve_vec(data.y()));
    let solved = factor.solve_mat(ksx.t());
    cov -= &ksx.dot(&solved);
    Ok(GaussianPredictive { mean, cov })
}

/// Log-density of `y` under the predictive Gaussian.
pub fn gaussian_log_pdf(y: ArrayView1<f64>, pred: &GaussianPredictive) -> Result<f64> {
    let n = pred.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
            context: "gaussian_log_pdf outputs".into(),
        });
    }
    let factor = linalg::cholesky(pred.cov.view(), "gaussian_log_pdf covariance")?;
    let r = &y.to_owned() - &pred.mean;
    let quad = r.dot(&factor.solve_vec(r.view()));
    Ok(-0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * factor.log_det() - 0.5 * quad)
}

/// Differential entropy of the predictive Gaussian:
/// `n/2 * log(2*pi*e) + 1/2 * log det cov`.
pub fn gaussian_entropy(pred: &GaussianPredictive) -> Result<f64> {
    let factor = linalg::cholesky(pred.cov.view(), "gaussian_entropy covariance")?;
    let n = pred.len() as f64;
    Ok(0.5 * n * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + 0.5 * factor.log_det())
}

/// Tape (reverse-mode differentiable) forms of the same quantities.
pub mod diff {
    use std::f64::consts::{E, PI};

    use ndarray::Array2;

    use crate::error::Result;
    use crate::tape::{psd_inv_logdet, Var};

    /// Cross-covariance between row matrices `xa (na,D)` and `xb (nb,D)`.
    /// `v` is the 1x1 output variance and `inv_l` the 1xD elementwise inverse
    /// lengthscales — pass them as leaves when they are not optimized.
    pub fn gram(xa: &Var, xb: &Var, v: &Var, inv_l: &Var) -> Var {
        let sa = xa.broadcast_mul_row(inv_l);
        let sb = xb.broadcast_mul_row(inv_l);
        let a2 = sa.mul(&sa).sum_cols();
        let b2 = sb.mul(&sb).sum_cols();
        let cross = sa.matmul(&sb.t());
        cross
            .scale(-2.0)
            .broadcast_add_col(&a2)
            .broadcast_add_row(&b2.t())
            .scale(-0.5)
            .exp()
            .scale_by(v)
    }

    /// Kernel matrix of `x` with itself plus the noise diagonal, where the
    /// noise variance is itself a 1x1 variable.
    pub fn gram_noisy(x: &Var, v: &Var, inv_l: &Var, sn2: &Var) -> Var {
        let k = gram(x, x, v, inv_l);
        let n = k.dim().0;
        let eye = x.tape().leaf(Array2::eye(n));
        k.add(&eye.scale_by(sn2))
    }

    /// Posterior predictive mean (n,1) and covariance (n,n) at `x_test`
    /// given conditioning inputs `x_train` and outputs `y_train` (n,1).
    /// The covariance includes the noise diagonal.
    pub fn posterior(
        x_train: &Var,
        y_train: &Var,
        x_test: &Var,
        v: &Var,
        inv_l: &Var,
        sn2: &Var,
    ) -> Result<(Var, Var)> {
        let kxx = gram_noisy(x_train, v, inv_l, sn2);
        let (kxx_inv, _) = psd_inv_logdet(&kxx, "posterior train gram")?;
        let ksx = gram(x_test, x_train, v, inv_l);
        let mean = ksx.matmul(&kxx_inv).matmul(y_train);
        let kss = gram_noisy(x_test, v, inv_l, sn2);
        let cov = kss.sub(&ksx.matmul(&kxx_inv).matmul(&ksx.t()));
        Ok((mean, cov))
    }

    /// Gaussian log-density of column `y (n,1)` under `(mean, cov)`, as 1x1.
    pub fn log_pdf(y: &Var, mean: &Var, cov: &Var) -> Result<Var> {
        let n = y.dim().0 as f64;
        let (cov_inv, logdet) = psd_inv_logdet(cov, "log_pdf covariance")?;
        let r = y.sub(mean);
        let quad = r.t().matmul(&cov_inv).matmul(&r);
        Ok(logdet
            .add(&quad)
            .scale_add(-0.5, -0.5 * n * (2.0 * PI).ln()))
    }

    /// Gaussian entropy of a covariance variable, as 1x1.
    pub fn entropy(cov: &Var) -> Result<Var> {
        let n = cov.dim().0 as f64;
        let (_, logdet) = psd_inv_logdet(cov, "entropy covariance")?;
        Ok(logdet.scale_add(0.5, 0.5 * n * (2.0 * PI * E).ln()))
    }
}
