//! Meta-training losses over simulated active-learning rollouts.
//!
//! Four objectives are supported: the entropy and regularized-entropy losses
//! built from the log-density of the policy's query labels, and a second
//! version of each built from Gaussian entropies (which ignore realized
//! label values). Every loss is the negative of the quantity the policy is
//! meant to maximize, so the trainer always minimizes.
//!
//! Gradients with respect to policy parameters are obtained by *replaying*
//! each experiment on a fresh tape: the stored function, noise draws and
//! initial data deterministically reproduce the recorded queries, this time
//! connected to the parameters, and one backward pass per experiment yields
//! the parameter gradient. Batch reduction uses a fixed chunked order so
//! results are identical regardless of worker count.

use std::rc::Rc;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_gp::{diff, Dataset, KernelConfig};
use crate::policy::{forward_vars, pairs_matrix, PolicyParams};
use crate::rff::{self, SampledFunction};
use crate::tape::{concat_cols, concat_rows, Tape, Var};

/// Experiments folded per reduction chunk; fixed so the floating-point
/// summation order never depends on the worker pool.
const REDUCTION_CHUNK: usize = 32;

/// Which meta-training loss to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Negated predictive entropy surrogate: mean of `+log p(y_q | Y_init)`.
    Entropy,
    /// Negated grid-regularized entropy: mean of
    /// `log p(y_q | Y_init) - log p(y_q | Y_init, Y_grid)`.
    RegEntropy,
    /// Negated Gaussian entropy of the query block: `-H(y_q | Y_init)`.
    EntropyV2,
    /// Negated grid mutual-information surrogate:
    /// `H(y_q | Y_init, Y_grid) - H(y_q | Y_init)`.
    RegEntropyV2,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::Entropy,
        Objective::RegEntropy,
        Objective::EntropyV2,
        Objective::RegEntropyV2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Entropy => "entropy",
            Objective::RegEntropy => "reg_entropy",
            Objective::EntropyV2 => "entropy_v2",
            Objective::RegEntropyV2 => "reg_entropy_v2",
        }
    }

    /// Regularized objectives condition on a label grid.
    pub fn requires_grid(&self) -> bool {
        matches!(self, Objective::RegEntropy | Objective::RegEntropyV2)
    }

    /// Version-1 objectives consume realized label values; version-2
    /// objectives depend on query locations only.
    pub fn uses_label_values(&self) -> bool {
        matches!(self, Objective::Entropy | Objective::RegEntropy)
    }

    /// Default training length: 20,000 steps for the entropy family,
    /// 10,000 for the regularized family.
    pub fn default_steps(&self) -> usize {
        if self.requires_grid() {
            10_000
        } else {
            20_000
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::ConfigInvalid {
                field: "objective".into(),
                message: format!(
                    "unknown objective {s:?}; expected one of entropy, reg_entropy, \
                     entropy_v2, reg_entropy_v2"
                ),
            })
    }
}

/// Conditioning grid: locations and (noisy) labels.
#[derive(Debug, Clone)]
pub struct Grid {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

/// Provenance needed to replay an experiment's labels: the sampled function
/// and the per-query noise draws.
#[derive(Debug, Clone)]
pub struct LabelGen {
    pub function: SampledFunction,
    pub noise: Array1<f64>,
}

/// One simulated AL experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: KernelConfig,
    pub init: Dataset,
    /// Recorded queries, one row per step.
    pub queries: Array2<f64>,
    /// Recorded labels `f(x_t) + eps_t`.
    pub labels: Array1<f64>,
    pub grid: Option<Grid>,
    /// Present on trainer-produced batches; required for gradients.
    pub gen: Option<LabelGen>,
}

/// A batch of experiments rolled out under one parameter snapshot.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub params: PolicyParams,
    pub experiments: Vec<Experiment>,
}

/// Scalar loss plus its gradient with respect to every parameter tensor
/// (canonical order).
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<Array2<f64>>,
}

pub fn loss_entropy(batch: &RolloutBatch) -> Result<LossValue> {
    loss(batch, Objective::Entropy)
}

pub fn loss_reg_entropy(batch: &RolloutBatch) -> Result<LossValue> {
    loss(batch, Objective::RegEntropy)
}

pub fn loss_entropy_v2(batch: &RolloutBatch) -> Result<LossValue> {
    loss(batch, Objective::EntropyV2)
}

pub fn loss_reg_entropy_v2(batch: &RolloutBatch) -> Result<LossValue> {
    loss(batch, Objective::RegEntropyV2)
}

/// Batch loss with parameter gradient.
pub fn loss(batch: &RolloutBatch, objective: Objective) -> Result<LossValue> {
    loss_impl(batch, objective, false)
}

/// Test hook: replay with the queries cut off from the parameters, proving
/// that the loss gradient flows only through query coordinates.
#[cfg(test)]
pub(crate) fn loss_detached(batch: &RolloutBatch, objective: Objective) -> Result<LossValue> {
    loss_impl(batch, objective, true)
}

fn loss_impl(batch: &RolloutBatch, objective: Objective, detach: bool) -> Result<LossValue> {
    if batch.experiments.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let grad_shapes: Vec<(usize, usize)> = batch
        .params
        .tensors()
        .iter()
        .map(|(_, t)| t.dim())
        .collect();
    let zero_grad = || -> Vec<Array2<f64>> {
        grad_shapes.iter().map(|&d| Array2::zeros(d)).collect()
    };

    let chunks: Vec<Result<(f64, Vec<Array2<f64>>)>> = batch
        .experiments
        .par_chunks(REDUCTION_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut value = 0.0;
            let mut grad = zero_grad();
            for (k, exp) in chunk.iter().enumerate() {
                let idx = ci * REDUCTION_CHUNK + k;
                let (v, g) = experiment_loss(&batch.params, exp, objective, detach)
                    .map_err(|e| annotate(e, idx))?;
                value += v;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            Ok((value, grad))
        })
        .collect();

    let n = batch.experiments.len() as f64;
    let mut value = 0.0;
    let mut grad = zero_grad();
    for chunk in chunks {
        let (v, g) = chunk?;
        value += v;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    value /= n;
    for g in &mut grad {
        *g /= n;
    }
    Ok(LossValue { value, grad })
}

/// Batch loss evaluated from the recorded queries and labels alone — no
/// parameters or label provenance needed, no gradient produced.
pub fn loss_value(experiments: &[Experiment], objective: Objective) -> Result<f64> {
    if experiments.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chunks: Vec<Result<f64>> = experiments
        .par_chunks(REDUCTION_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut value = 0.0;
            for (k, exp) in chunk.iter().enumerate() {
                let idx = ci * REDUCTION_CHUNK + k;
                let tape = Tape::new(false);
                let xq = tape.leaf(exp.queries.clone());
                let yq = tape.leaf(exp.labels.clone().insert_axis(Axis(1)));
                let term =
                    experiment_term(&tape, exp, objective, &xq, &yq).map_err(|e| annotate(e, idx))?;
                value += term.scalar();
            }
            Ok(value)
        })
        .collect();
    let mut value = 0.0;
    for chunk in chunks {
        value += chunk?;
    }
    Ok(value / experiments.len() as f64)
}

/// Attach the failing experiment's index to errors that support it.
fn annotate(e: Error, idx: usize) -> Error {
    match e {
        Error::FactorizationFailure {
            max_jitter,
            context,
        } => Error::FactorizationFailure {
            max_jitter,
            context: format!("experiment {idx}: {context}"),
        },
        Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
            experiment: idx,
            detail,
        },
        other => other,
    }
}

/// Replay one experiment on a gradient tape and differentiate its loss term.
fn experiment_loss(
    params: &PolicyParams,
    exp: &Experiment,
    objective: Objective,
    detach: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let gen = exp.gen.as_ref().ok_or_else(|| Error::ConfigInvalid {
        field: "gen".into(),
        message: "gradient computation needs the experiment's label provenance".into(),
    })?;
    if exp.init.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let steps = gen.noise.len();
    let tape = Tape::new(true);
    let pv = params.to_tape(&tape);
    let function = Rc::new(gen.function.clone());

    let mut pair_blocks = vec![tape.leaf(pairs_matrix(&exp.init))];
    let mut query_vars = Vec::with_capacity(steps);
    let mut label_vars = Vec::with_capacity(steps);
    for t in 0..steps {
        let pairs = if pair_blocks.len() == 1 {
            pair_blocks[0].clone()
        } else {
            concat_rows(&pair_blocks)
        };
        let mut x_t = forward_vars(&pv, &pairs);
        if detach {
            x_t = tape.leaf((*x_t.value()).clone());
        }
        let y_t = rff::eval_on_tape(&function, &x_t).scale_add(1.0, gen.noise[t]);
        pair_blocks.push(concat_cols(&[x_t.clone(), y_t.clone()]));
        query_vars.push(x_t);
        label_vars.push(y_t);
    }
    let xq = concat_rows(&query_vars);
    let yq = concat_rows(&label_vars);

    let term = experiment_term(&tape, exp, objective, &xq, &yq)?;
    let value = term.scalar();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            experiment: 0,
            detail: format!("{} loss value is {value}", objective.name()),
        });
    }
    let grads = tape.backward(&term);
    let grad: Vec<Array2<f64>> = pv.vars().map(|v| grads.get(v)).collect();
    if grad.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss {
            experiment: 0,
            detail: format!("{} gradient is non-finite", objective.name()),
        });
    }
    Ok((value, grad))
}

/// The per-experiment loss term, given the query block `(T, D)` and its
/// labels `(T, 1)` as tape variables.
fn experiment_term(
    tape: &Rc<Tape>,
    exp: &Experiment,
    objective: Objective,
    xq: &Var,
    yq: &Var,
) -> Result<Var> {
    if exp.init.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let v = tape.leaf(Array2::from_elem((1, 1), exp.cfg.variance));
    let inv_l = tape.leaf(
        Array2::from_shape_vec(
            (1, exp.cfg.dim()),
            exp.cfg.lengthscales.iter().map(|l| 1.0 / l).collect(),
        )
        .expect("lengthscale row"),
    );
    let sn2 = tape.leaf(Array2::from_elem((1, 1), exp.cfg.noise_variance));
    let xi = tape.leaf(exp.init.x().to_owned());
    let yi = tape.leaf(exp.init.y().to_owned().insert_axis(Axis(1)));

    let conditioned_on_init = || diff::posterior(&xi, &yi, xq, &v, &inv_l, &sn2);
    let conditioned_on_init_and_grid = |grid: &Grid| {
        let x2 = tape.leaf(
            concatenate(Axis(0), &[exp.init.x(), grid.x.view()]).expect("stack grid"),
        );
        let mut y2 = exp.init.y().to_vec();
        y2.extend(grid.y.iter());
        let y2 = tape.leaf(Array2::from_shape_vec((y2.len(), 1), y2).expect("column"));
        diff::posterior(&x2, &y2, xq, &v, &inv_l, &sn2)
    };
    let need_grid = || {
        exp.grid.as_ref().ok_or_else(|| Error::ConfigInvalid {
            field: "grid".into(),
            message: format!("objective {} requires a grid", objective.name()),
        })
    };

    match objective {
        Objective::Entropy => {
            let (mean, cov) = conditioned_on_init()?;
            diff::log_pdf(yq, &mean, &cov)
        }
        Objective::RegEntropy => {
            let grid = need_grid()?;
            let (mean1, cov1) = conditioned_on_init()?;
            let lp1 = diff::log_pdf(yq, &mean1, &cov1)?;
            let (mean2, cov2) = conditioned_on_init_and_grid(grid)?;
            let lp2 = diff::log_pdf(yq, &mean2, &cov2)?;
            Ok(lp1.sub(&lp2))
        }
        Objective::EntropyV2 => {
            let (_, cov) = conditioned_on_init()?;
            Ok(diff::entropy(&cov)?.neg())
        }
        Objective::RegEntropyV2 => {
            let grid = need_grid()?;
            let (_, cov1) = conditioned_on_init()?;
            let h1 = diff::entropy(&cov1)?;
            let (_, cov2) = conditioned_on_init_and_grid(grid)?;
            let h2 = diff::entropy(&cov2)?;
            Ok(h2.sub(&h1))
        }
    }
}
