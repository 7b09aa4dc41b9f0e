//! Simulation-based policy optimization.
//!
//! A training step samples kernel hyperparameters from the prior, draws
//! random functions and noise, rolls the current policy out over them
//! (nonmyopically over `T` sequential queries, or myopically with a single
//! query after a random-size conditioning set), evaluates the selected loss,
//! and applies a rectified-Adam update. Runs are fully deterministic given
//! `(config, seed)`: sampling is sequential on one seeded generator and the
//! loss reduction uses a fixed chunk order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_gp::{Dataset, KernelConfig};
use crate::objectives::{loss, Experiment, Grid, LabelGen, Objective, RolloutBatch};
use crate::policy::{forward, init_params, save_checkpoint, PolicyParams};
use crate::rff::{sample_function, SampledFunction};

/// An epoch is 50 optimizer steps; checkpoints and the learning-rate decay
/// are pinned to epoch boundaries.
pub const EPOCH_STEPS: usize = 50;
/// The learning rate is multiplied by this factor at every epoch boundary.
pub const LR_DECAY: f64 = 0.98;
/// Gradients are rescaled to this global L2 norm when they exceed it.
pub const GRAD_CLIP_NORM: f64 = 10.0;
/// Myopic training splits its kernel batch into this many chunks, each with
/// its own initial-dataset size.
pub const MYOPIC_CHUNKS: usize = 20;

/// Which rollout generator drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Full `T`-step sequential rollouts with recursive policy forwarding.
    #[default]
    Nonmyopic,
    /// One-step rollouts from conditioning sets of random size
    /// `N_init ..= N_init + T - 1`, loss computed as if `T = 1`.
    Myopic,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Nonmyopic => "nonmyopic",
            Algorithm::Myopic => "myopic",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonmyopic" => Ok(Algorithm::Nonmyopic),
            "myopic" => Ok(Algorithm::Myopic),
            other => Err(Error::ConfigInvalid {
                field: "algorithm".into(),
                message: format!("unknown algorithm {other:?}; expected nonmyopic or myopic"),
            }),
        }
    }
}

/// Hyperparameter prior for simulated functions. The defaults encode unit
/// data variance with a signal-to-noise ratio of at least one: the function
/// and noise variances always sum to `variance_sum`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub v_min: f64,
    pub v_max: f64,
    /// `noise_variance = variance_sum - v`.
    pub variance_sum: f64,
    pub l_min: f64,
    pub l_max: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            v_min: 0.505,
            v_max: 1.0,
            variance_sum: 1.01,
            l_min: 0.05,
            l_max: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::ConfigInvalid {
                field: format!("prior.{field}"),
                message,
            })
        };
        if !(self.v_min > 0.0 && self.v_min <= self.v_max) {
            return bad("v_min", "need 0 < v_min <= v_max".into());
        }
        if self.v_max >= self.variance_sum {
            return bad(
                "v_max",
                format!(
                    "v_max must stay below variance_sum {} so the noise variance is positive",
                    self.variance_sum
                ),
            );
        }
        if self.v_max > 1.0 {
            return bad(
                "v_max",
                "kernel scale is bounded by one on simulated functions".into(),
            );
        }
        if !(self.l_min > 0.0 && self.l_min <= self.l_max) {
            return bad("l_min", "need 0 < l_min <= l_max".into());
        }
        Ok(())
    }
}

/// Everything a training run needs besides the output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Input dimension `D`.
    pub dim: usize,
    /// Deployment horizon `T` (queries per simulated experiment).
    pub t_steps: usize,
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    /// Conditioning-grid size for the regularized objectives.
    #[serde(default = "default_n_grid")]
    pub n_grid: usize,
    /// Fourier features per sampled function.
    #[serde(default = "default_rff_features")]
    pub rff_features: usize,
    pub objective: Objective,
    #[serde(default)]
    pub algorithm: Algorithm,
    /// Kernel draws per step; defaults to 25 (nonmyopic) or 250 (myopic).
    #[serde(default)]
    pub kernels: Option<usize>,
    /// Noise-realization sets per kernel, reused across the function axis.
    #[serde(default = "default_noise_sets")]
    pub noise_sets: usize,
    #[serde(default = "default_functions_per_prior")]
    pub functions_per_prior: usize,
    /// Optimizer steps; defaults to the objective's standard budget.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_initial_lr")]
    pub initial_lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub prior: PriorConfig,
}

fn default_n_init() -> usize {
    1
}
fn default_n_grid() -> usize {
    100
}
fn default_rff_features() -> usize {
    100
}
fn default_noise_sets() -> usize {
    10
}
fn default_functions_per_prior() -> usize {
    25
}
fn default_initial_lr() -> f64 {
    1e-4
}

impl TrainConfig {
    pub fn kernel_count(&self) -> usize {
        self.kernels.unwrap_or(match self.algorithm {
            Algorithm::Nonmyopic => 25,
            Algorithm::Myopic => 250,
        })
    }

    pub fn step_count(&self) -> usize {
        self.steps.unwrap_or_else(|| self.objective.default_steps())
    }

    /// Experiments per optimizer step.
    pub fn batch_size(&self) -> usize {
        self.kernel_count() * self.noise_sets * self.functions_per_prior
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::ConfigInvalid {
                field: field.into(),
                message,
            })
        };
        if self.dim == 0 {
            return bad("dim", "input dimension must be at least 1".into());
        }
        if self.t_steps == 0 {
            return bad("t_steps", "horizon must be at least 1".into());
        }
        if self.n_init == 0 {
            return bad("n_init", "need at least one initial observation".into());
        }
        if self.rff_features == 0 {
            return bad("rff_features", "need at least one Fourier feature".into());
        }
        if self.noise_sets == 0 || self.functions_per_prior == 0 || self.kernel_count() == 0 {
            return bad("batch", "all batch-shape factors must be positive".into());
        }
        let steps = self.step_count();
        if steps == 0 || steps % EPOCH_STEPS != 0 {
            return bad(
                "steps",
                format!("step count must be a positive multiple of {EPOCH_STEPS}, got {steps}"),
            );
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr", "learning rate must be positive".into());
        }
        if self.objective.requires_grid() && self.n_grid < 5 * self.t_steps {
            return bad(
                "n_grid",
                format!(
                    "objective {} needs a grid much larger than the horizon: n_grid >= 5*t_steps \
                     = {}, got {}",
                    self.objective.name(),
                    5 * self.t_steps,
                    self.n_grid
                ),
            );
        }
        self.prior.validate()
    }
}

/// Draw kernel hyperparameters from the default prior: `v` uniform on
/// `[0.505, 1.0]`, `noise_variance = 1.01 - v`, lengthscales uniform on
/// `[0.05, 1.0]` per dimension.
pub fn sample_prior<R: Rng>(dim: usize, rng: &mut R) -> KernelConfig {
    sample_prior_with(&PriorConfig::default(), dim, rng)
}

/// [`sample_prior`] under an explicit prior.
pub fn sample_prior_with<R: Rng>(prior: &PriorConfig, dim: usize, rng: &mut R) -> KernelConfig {
    let v = rng.gen_range(prior.v_min..=prior.v_max);
    let lengthscales = (0..dim)
        .map(|_| rng.gen_range(prior.l_min..=prior.l_max))
        .collect();
    KernelConfig::new(v, lengthscales, prior.variance_sum - v)
        .expect("validated prior yields a valid kernel config")
}

/// Attach the failing experiment's index to context-bearing errors.
fn annotate_experiment(e: Error, idx: usize) -> Error {
    match e {
        Error::DimensionMismatch {
            expected,
            got,
            context,
        } => Error::DimensionMismatch {
            expected,
            got,
            context: format!("experiment {idx}: {context}"),
        },
        Error::FactorizationFailure {
            max_jitter,
            context,
        } => Error::FactorizationFailure {
            max_jitter,
            context: format!("experiment {idx}: {context}"),
        },
        other => other,
    }
}

/// Simulate every experiment for one kernel draw: `noise_sets` noise vectors
/// and `functions_per_prior` functions, paired exhaustively. Each experiment
/// gets a fresh uniform initial set (and grid, when the objective wants one);
/// the noise vector drives the query labels and is shared across functions.
fn kernel_group<R: Rng>(
    params: &PolicyParams,
    cfg: &TrainConfig,
    kcfg: &KernelConfig,
    steps: usize,
    init_size: usize,
    base_idx: usize,
    rng: &mut R,
) -> Result<Vec<Experiment>> {
    let noise = Normal::new(0.0, kcfg.noise_variance.sqrt()).expect("positive noise sd");
    let noise_sets: Vec<Array1<f64>> = (0..cfg.noise_sets)
        .map(|_| Array1::from_iter((0..steps).map(|_| noise.sample(rng))))
        .collect();
    let functions: Vec<SampledFunction> = (0..cfg.functions_per_prior)
        .map(|_| sample_function(kcfg, cfg.rff_features, rng))
        .collect();

    let mut out = Vec::with_capacity(cfg.noise_sets * cfg.functions_per_prior);
    for noise_set in &noise_sets {
        for function in &functions {
            let idx = base_idx + out.len();
            let x_init =
                Array2::from_shape_fn((init_size, cfg.dim), |_| rng.gen_range(0.0..1.0));
            let y_init = Array1::from_iter(
                x_init
                    .rows()
                    .into_iter()
                    .map(|r| function.eval_one(r) + noise.sample(rng)),
            );
            let init =
                Dataset::new(x_init, y_init).map_err(|e| annotate_experiment(e, idx))?;

            let mut data = init.clone();
            let mut queries = Array2::zeros((steps, cfg.dim));
            let mut labels = Array1::zeros(steps);
            for t in 0..steps {
                let q = forward(params, &data).map_err(|e| annotate_experiment(e, idx))?;
                let y = function.eval_one(q.x.view()) + noise_set[t];
                queries.row_mut(t).assign(&q.x);
                labels[t] = y;
                data.push(q.x.view(), y)
                    .map_err(|e| annotate_experiment(e, idx))?;
            }

            let grid = if cfg.objective.requires_grid() {
                let x = Array2::from_shape_fn((cfg.n_grid, cfg.dim), |_| {
                    rng.gen_range(0.0..1.0)
                });
                let y = Array1::from_iter(
                    x.rows()
                        .into_iter()
                        .map(|r| function.eval_one(r) + noise.sample(rng)),
                );
                Some(Grid { x, y })
            } else {
                None
            };

            out.push(Experiment {
                cfg: kcfg.clone(),
                init,
                queries,
                labels,
                grid,
                gen: Some(LabelGen {
                    function: function.clone(),
                    noise: noise_set.clone(),
                }),
            });
        }
    }
    Ok(out)
}

/// Full `T`-step rollouts: every kernel draw contributes
/// `noise_sets * functions_per_prior` sequential experiments.
pub fn rollout_nonmyopic<R: Rng>(
    params: &PolicyParams,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<RolloutBatch> {
    let mut experiments = Vec::with_capacity(cfg.batch_size());
    for _ in 0..cfg.kernel_count() {
        let kcfg = sample_prior_with(&cfg.prior, cfg.dim, rng);
        let group = kernel_group(
            params,
            cfg,
            &kcfg,
            cfg.t_steps,
            cfg.n_init,
            experiments.len(),
            rng,
        )?;
        experiments.extend(group);
    }
    Ok(RolloutBatch {
        params: params.clone(),
        experiments,
    })
}

/// One-step rollouts: kernels are assigned round-robin to [`MYOPIC_CHUNKS`]
/// chunks, each chunk draws one initial-set size uniformly from
/// `n_init ..= n_init + t_steps - 1` (skipping the draw when the range is a
/// single value), and every experiment makes exactly one policy call.
pub fn rollout_myopic<R: Rng>(
    params: &PolicyParams,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<RolloutBatch> {
    let lo = cfg.n_init;
    let hi = cfg.n_init + cfg.t_steps - 1;
    let kernels = cfg.kernel_count();
    let mut experiments = Vec::with_capacity(cfg.batch_size());
    for chunk in 0..MYOPIC_CHUNKS.min(kernels) {
        // Kernels chunk, chunk + MYOPIC_CHUNKS, ... — sizes 13/12 for the
        // default 250 kernels.
        let in_chunk = (kernels - chunk).div_ceil(MYOPIC_CHUNKS);
        let init_size = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        for _ in 0..in_chunk {
            let kcfg = sample_prior_with(&cfg.prior, cfg.dim, rng);
            let group =
                kernel_group(params, cfg, &kcfg, 1, init_size, experiments.len(), rng)?;
            experiments.extend(group);
        }
    }
    Ok(RolloutBatch {
        params: params.clone(),
        experiments,
    })
}

/// Rectified Adam with the standard moment estimates: the adaptive step is
/// rectified by the variance-of-variance term once its approximated SMA
/// length exceeds 4, and falls back to an unadapted momentum step before
/// that.
#[derive(Debug, Clone)]
pub struct RAdam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Default for RAdam {
    fn default() -> Self {
        RAdam::new(0.9, 0.999, 1e-8)
    }
}

impl RAdam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        RAdam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &[Array2<f64>], lr: f64) {
        if self.m.is_empty() {
            self.m = grad.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t as f64;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let rho = rho_inf - 2.0 * t * self.beta2.powi(self.t as i32) / bias2;
        let rect = (rho > 4.0).then(|| {
            ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                .sqrt()
        });

        for (i, (_, theta)) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grad[i];
            self.m[i] = &self.m[i] * self.beta1 + g * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + &(g * g) * (1.0 - self.beta2);
            let m_hat = &self.m[i] / bias1;
            match rect {
                Some(r) => {
                    let denom = (&self.v[i] / bias2).mapv(f64::sqrt) + self.eps;
                    *theta -= &(m_hat / denom * (lr * r));
                }
                None => *theta -= &(m_hat * lr),
            }
        }
    }
}

/// Rescale `grads` in place to global L2 norm `max_norm` when they exceed
/// it; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub seed: u64,
    pub step_losses: Vec<f64>,
    pub total_wall_ms: f64,
    /// One checkpoint per epoch, in order; the last is the trained policy.
    pub checkpoints: Vec<PathBuf>,
    pub record_path: PathBuf,
}

impl TrainRecord {
    /// Mean loss per 50-step epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.step_losses
            .chunks(EPOCH_STEPS)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// Mean loss over the final 10 epochs (fewer if the run was shorter) —
    /// the model-selection score.
    pub fn last10_mean(&self) -> f64 {
        let means = self.epoch_means();
        let tail = &means[means.len().saturating_sub(10)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("every run saves checkpoints")
    }
}

/// Run one seeded training loop, writing `run_<seed>/epoch_<n>.ckpt`
/// checkpoints and `run_<seed>/record.csv` under `out_root`.
pub fn train(cfg: &TrainConfig, out_root: &Path) -> Result<TrainRecord> {
    cfg.validate()?;
    let run_dir = out_root.join(format!("run_{}", cfg.seed));
    std::fs::create_dir_all(&run_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(cfg.dim, &mut rng);
    let mut opt = RAdam::default();
    let steps = cfg.step_count();
    let mut step_losses = Vec::with_capacity(steps);
    let mut csv = String::from("step,loss,lr,wall_ms\n");
    let mut checkpoints = Vec::with_capacity(steps / EPOCH_STEPS);
    let started = Instant::now();

    for step in 0..steps {
        let lr = cfg.initial_lr * LR_DECAY.powi((step / EPOCH_STEPS) as i32);
        let clock = Instant::now();
        let batch = match cfg.algorithm {
            Algorithm::Nonmyopic => rollout_nonmyopic(&params, cfg, &mut rng)?,
            Algorithm::Myopic => rollout_myopic(&params, cfg, &mut rng)?,
        };
        let mut lv = match loss(&batch, cfg.objective) {
            Ok(lv) => lv,
            Err(e) => {
                dump_nonfinite(&run_dir, step, &e, &batch);
                return Err(e);
            }
        };
        clip_global_norm(&mut lv.grad, GRAD_CLIP_NORM);
        opt.step(&mut params, &lv.grad, lr);

        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        step_losses.push(lv.value);
        csv.push_str(&format!("{step},{},{lr},{wall_ms:.3}\n", lv.value));

        if (step + 1) % EPOCH_STEPS == 0 {
            let epoch = (step + 1) / EPOCH_STEPS;
            let path = run_dir.join(format!("epoch_{epoch}.ckpt"));
            save_checkpoint(&params, &path)?;
            checkpoints.push(path);
        }
    }

    let record_path = run_dir.join("record.csv");
    let tmp = record_path.with_extension("csv.tmp");
    std::fs::write(&tmp, csv)?;
    std::fs::rename(&tmp, &record_path)?;

    Ok(TrainRecord {
        seed: cfg.seed,
        step_losses,
        total_wall_ms: started.elapsed().as_secs_f64() * 1e3,
        checkpoints,
        record_path,
    })
}

/// Best-effort diagnostic dump for a non-finite loss abort.
fn dump_nonfinite(run_dir: &Path, step: usize, e: &Error, batch: &RolloutBatch) {
    let mut body = format!("step {step}: {e}\n");
    if let Error::NonFiniteLoss { experiment, .. } = e {
        if let Some(exp) = batch.experiments.get(*experiment) {
            body.push_str(&format!("{exp:#?}\n"));
        }
    }
    let _ = std::fs::write(run_dir.join(format!("nonfinite_step_{step}.txt")), body);
}

/// Pick the trained policy with the lowest mean loss over its final 10
/// epochs; ties go to the lower seed.
pub fn select_best(records: &[TrainRecord]) -> Result<&Path> {
    records
        .iter()
        .min_by(|a, b| {
            a.last10_mean()
                .total_cmp(&b.last10_mean())
                .then(a.seed.cmp(&b.seed))
        })
        .map(|r| r.final_checkpoint())
        .ok_or_else(|| Error::ConfigInvalid {
            field: "records".into(),
            message: "best-policy selection needs at least one training record".into(),
        })
}
