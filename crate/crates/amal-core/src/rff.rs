//! Random Fourier feature sampling of GP prior draws.
//!
//! A sampled function is a finite cosine expansion that can be evaluated (and
//! differentiated) anywhere in linear time, avoiding cubic-cost exact path
//! sampling. Functions are mean-centered over the unit window `[0,1]^D` using
//! an analytic integral so that simulated labels hover around zero.

use std::f64::consts::PI;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::kernel_gp::KernelConfig;
use crate::tape::Var;

/// Threshold under which a frequency component counts as "close to zero" for
/// the window-mean division guard.
pub const GUARD_THRESHOLD: f64 = 1e-5;
/// Magnitude substituted for `|1 / prod_d a_d|` when the guard triggers.
pub const GUARD_MAGNITUDE: f64 = 100_000.0;

/// One GP prior draw in feature form:
/// `f(x) = sqrt(v) * sum_l w_l * sqrt(2/L) * cos(a_l . x + b_l) - shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledFunction {
    /// Feature weights `w`, standard normal, length `L`.
    pub weights: Array1<f64>,
    /// Frequencies `a`, `L x D`, row `l` has per-dimension std `1/l_d`.
    pub frequencies: Array2<f64>,
    /// Phases `b` in `[0, 2*pi)`, length `L`.
    pub phases: Array1<f64>,
    /// `sqrt(v)` output scale.
    pub variance_scale: f64,
    /// Analytic mean of the uncentered function over `[0,1]^D`, subtracted at
    /// every evaluation.
    pub window_mean_shift: f64,
}

impl SampledFunction {
    pub fn feature_count(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.frequencies.ncols()
    }

    /// Evaluate at a single point.
    pub fn eval_one(&self, x: ArrayView1<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let l = self.feature_count() as f64;
        let mut s = 0.0;
        for (i, row) in self.frequencies.rows().into_iter().enumerate() {
            s += self.weights[i] * (row.dot(&x) + self.phases[i]).cos();
        }
        self.variance_scale * (2.0 / l).sqrt() * s - self.window_mean_shift
    }

    /// Gradient with respect to the input point.
    pub fn grad_one(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let l = self.feature_count() as f64;
        let mut g = Array1::zeros(self.dim());
        for (i, row) in self.frequencies.rows().into_iter().enumerate() {
            let s = -(row.dot(&x) + self.phases[i]).sin() * self.weights[i];
            g.scaled_add(s, &row);
        }
        g * (self.variance_scale * (2.0 / l).sqrt())
    }
}

/// Draw one function from the GP prior described by `cfg`, centering it with
/// the analytic window mean. The draw order (weights, then frequencies
/// row-major, then phases) is fixed, so a fixed seed reproduces the function
/// bit for bit.
pub fn sample_function<R: Rng>(cfg: &KernelConfig, features: usize, rng: &mut R) -> SampledFunction {
    assert!(features >= 1, "need at least one feature");
    let d = cfg.dim();
    let weights = Array1::from_iter((0..features).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let frequencies = Array2::from_shape_fn((features, d), |(_, j)| {
        rng.sample::<f64, _>(StandardNormal) / cfg.lengthscales[j]
    });
    let phases = Array1::from_iter((0..features).map(|_| rng.gen_range(0.0..2.0 * PI)));
    let mut f = SampledFunction {
        weights,
        frequencies,
        phases,
        variance_scale: cfg.variance.sqrt(),
        window_mean_shift: 0.0,
    };
    f.window_mean_shift = window_mean(&f);
    f
}

/// Evaluate at every row of `x` (vectorized over points and features).
pub fn evaluate(f: &SampledFunction, x: ArrayView2<f64>) -> Array1<f64> {
    debug_assert_eq!(x.ncols(), f.dim());
    let l = f.feature_count() as f64;
    let mut z = x.dot(&f.frequencies.t());
    z += &f.phases.view().insert_axis(Axis(0));
    z.mapv_inplace(f64::cos);
    let mut out = z.dot(&f.weights);
    out.mapv_inplace(|v| f.variance_scale * (2.0 / l).sqrt() * v - f.window_mean_shift);
    out
}

/// Analytic mean of the *uncentered* function over `[0,1]^D`.
///
/// Per feature the integral has the closed form
/// `(1 / prod_d a_d) * sum_{c in {0,1}^D} (-1)^(D-|c|) * g(a.c + b)` where `g`
/// is `cos` integrated `D` times (`sin` for D=1, `-cos` for D=2, ...). When
/// any `|a_d|` falls below [`GUARD_THRESHOLD`] a division blow-up is avoided
/// by substituting [`GUARD_MAGNITUDE`] for `|1 / prod_d a_d|`, keeping the
/// sign of the analytic prefactor.
pub fn window_mean(f: &SampledFunction) -> f64 {
    let d = f.dim();
    let l = f.feature_count() as f64;
    let mut total = 0.0;
    for (i, row) in f.frequencies.rows().into_iter().enumerate() {
        total += f.weights[i] * feature_window_integral(row, f.phases[i], d);
    }
    f.variance_scale * (2.0 / l).sqrt() * total
}

/// `cos` integrated `d` times, evaluated at `theta`.
fn iterated_cos(theta: f64, d: usize) -> f64 {
    match d % 4 {
        0 => theta.cos(),
        1 => theta.sin(),
        2 => -theta.cos(),
        _ => -theta.sin(),
    }
}

fn feature_window_integral(a: ArrayView1<f64>, b: f64, d: usize) -> f64 {
    let mut corner_sum = 0.0;
    for mask in 0..(1usize << d) {
        let mut theta = b;
        let mut ones = 0;
        for (j, &aj) in a.iter().enumerate() {
            if mask >> j & 1 == 1 {
                theta += aj;
                ones += 1;
            }
        }
        let sign = if (d - ones) % 2 == 0 { 1.0 } else { -1.0 };
        corner_sum += sign * iterated_cos(theta, d);
    }
    let product: f64 = a.iter().product();
    let guard = a.iter().any(|&aj| aj.abs() < GUARD_THRESHOLD);
    let prefactor = if guard {
        GUARD_MAGNITUDE * if product < 0.0 { -1.0 } else { 1.0 }
    } else {
        1.0 / product
    };
    prefactor * corner_sum
}

/// Tape evaluation at a 1xD input variable, producing a 1x1 variable whose
/// gradient with respect to the input flows through the cosine expansion.
pub fn eval_on_tape(f: &Rc<SampledFunction>, x: &Var) -> Var {
    let xv = x.value();
    assert_eq!(xv.dim(), (1, f.dim()));
    let value = Array2::from_elem((1, 1), f.eval_one(xv.row(0)));
    let f = Rc::clone(f);
    x.unary_from_vjp(
        value,
        Box::new(move |g| {
            let grad = f.grad_one(xv.row(0));
            grad.insert_axis(Axis(0)).to_owned() * g[[0, 0]]
        }),
    )
}
