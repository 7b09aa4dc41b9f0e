//! Active-learning deployment engines.
//!
//! Three ways to drive an AL loop over a [`Problem`]: the amortized policy
//! (one forward pass per query), classical GP active learning (Type-II fit
//! plus entropy acquisition per query), and uniform random selection. Every
//! engine produces an [`ALTrace`] whose per-iteration wall times cover the
//! selection work only — labeling is explicitly outside the clock.
//!
//! Randomness is split over independent, documented generator streams of the
//! run seed, so stored traces can be replayed: re-labeling the recorded
//! queries against the label stream reproduces the recorded labels.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalreport::fit_gp_type2;
use crate::kernel_gp::{gram, rbf_kernel, Dataset, KernelConfig};
use crate::linalg;
use crate::policy::{forward, PolicyParams};

/// Candidate draws per iteration when maximizing an acquisition over a
/// continuous input space.
pub const CANDIDATE_COUNT: usize = 5000;

/// Generator streams of a deployment seed (ChaCha streams): initial-design
/// draws, label noise, and selection randomness (candidate sets / random
/// picks) are independent so traces stay replayable.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_LABEL: u64 = 2;
pub(crate) const STREAM_SELECT: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Label source of a [`Problem`].
pub enum ProblemKind {
    /// Noise-free objective on unit coordinates plus Gaussian label noise.
    Continuous {
        f: Box<dyn Fn(ArrayView1<f64>) -> f64 + Send + Sync>,
        noise_sd: f64,
    },
    /// Finite candidate set with recorded labels (no added noise).
    Pool {
        x_unit: Array2<f64>,
        y: Array1<f64>,
    },
}

impl std::fmt::Debug for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProblemKind::Continuous { noise_sd, .. } => f
                .debug_struct("Continuous")
                .field("noise_sd", noise_sd)
                .finish_non_exhaustive(),
            ProblemKind::Pool { x_unit, .. } => f
                .debug_struct("Pool")
                .field("size", &x_unit.nrows())
                .finish_non_exhaustive(),
        }
    }
}

/// An AL problem on the unit cube: a label oracle plus the affine map back
/// to native coordinates.
#[derive(Debug)]
pub struct Problem {
    pub name: String,
    dim: usize,
    lo: Array1<f64>,
    hi: Array1<f64>,
    pub kind: ProblemKind,
}

impl Problem {
    pub fn continuous(
        name: impl Into<String>,
        lo: Array1<f64>,
        hi: Array1<f64>,
        noise_sd: f64,
        f: Box<dyn Fn(ArrayView1<f64>) -> f64 + Send + Sync>,
    ) -> Result<Self> {
        let dim = lo.len();
        Self::check_box(dim, &lo, &hi)?;
        Ok(Problem {
            name: name.into(),
            dim,
            lo,
            hi,
            kind: ProblemKind::Continuous { f, noise_sd },
        })
    }

    pub fn pool(
        name: impl Into<String>,
        lo: Array1<f64>,
        hi: Array1<f64>,
        x_unit: Array2<f64>,
        y: Array1<f64>,
    ) -> Result<Self> {
        let dim = lo.len();
        Self::check_box(dim, &lo, &hi)?;
        if x_unit.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x_unit.ncols(),
                context: "pool input width".into(),
            });
        }
        if x_unit.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x_unit.nrows(),
                got: y.len(),
                context: "pool label count".into(),
            });
        }
        if x_unit.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if x_unit.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::ConfigInvalid {
                field: "pool".into(),
                message: "pool inputs must lie in the unit cube".into(),
            });
        }
        Ok(Problem {
            name: name.into(),
            dim,
            lo,
            hi,
            kind: ProblemKind::Pool { x_unit, y },
        })
    }

    fn check_box(dim: usize, lo: &Array1<f64>, hi: &Array1<f64>) -> Result<()> {
        if dim == 0 || hi.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim.max(1),
                got: hi.len(),
                context: "native box bounds".into(),
            });
        }
        if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
            return Err(Error::ConfigInvalid {
                field: "native_box".into(),
                message: "every native box side needs lo < hi".into(),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_pool(&self) -> bool {
        matches!(self.kind, ProblemKind::Pool { .. })
    }

    pub fn pool_size(&self) -> Option<usize> {
        match &self.kind {
            ProblemKind::Pool { x_unit, .. } => Some(x_unit.nrows()),
            ProblemKind::Continuous { .. } => None,
        }
    }

    /// Affine map from unit to native coordinates.
    pub fn to_native(&self, unit: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(
            unit.iter()
                .zip(&self.lo)
                .zip(&self.hi)
                .map(|((&u, &lo), &hi)| lo + (hi - lo) * u),
        )
    }

    /// Inverse of [`Problem::to_native`].
    pub fn to_unit(&self, native: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(
            native
                .iter()
                .zip(&self.lo)
                .zip(&self.hi)
                .map(|((&x, &lo), &hi)| (x - lo) / (hi - lo)),
        )
    }

    /// Noise-free objective value at a unit point (continuous problems).
    pub fn noise_free(&self, unit: ArrayView1<f64>) -> Option<f64> {
        match &self.kind {
            ProblemKind::Continuous { f, .. } => Some(f(unit)),
            ProblemKind::Pool { .. } => None,
        }
    }
}

/// One selection step of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    /// 1-based iteration index.
    pub t: usize,
    pub x_unit: Array1<f64>,
    pub x_native: Array1<f64>,
    pub y: f64,
    /// Selection time only; labeling is excluded.
    pub wall_ms: f64,
}

/// Full record of one deployment run.
#[derive(Debug, Clone, PartialEq)]
pub struct ALTrace {
    pub method: String,
    pub problem: String,
    pub seed: u64,
    pub n_init: usize,
    pub t_steps: usize,
    /// SHA-256 of the policy checkpoint, for policy runs.
    pub checkpoint_sha256: Option<String>,
    pub init: Dataset,
    pub steps: Vec<TraceStep>,
}

impl ALTrace {
    /// Initial data plus every queried point, in query order.
    pub fn final_dataset(&self) -> Dataset {
        let mut data = self.init.clone();
        for step in &self.steps {
            data.push(step.x_unit.view(), step.y)
                .expect("trace points share the problem dimension");
        }
        data
    }

    /// Total selection time across iterations.
    pub fn total_query_ms(&self) -> f64 {
        self.steps.iter().map(|s| s.wall_ms).sum()
    }
}

/// Shared run state: initial design, pool bookkeeping, labeling.
struct Session<'a> {
    problem: &'a Problem,
    data: Dataset,
    /// Original indices of still-unlabeled pool rows, ascending.
    remaining: Vec<usize>,
    label_rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl<'a> Session<'a> {
    fn start(problem: &'a Problem, n_init: usize, t_steps: usize, seed: u64) -> Result<Self> {
        if n_init == 0 {
            return Err(Error::ConfigInvalid {
                field: "n_init".into(),
                message: "deployment needs a nonempty initial design".into(),
            });
        }
        if t_steps == 0 {
            return Err(Error::ConfigInvalid {
                field: "t_steps".into(),
                message: "deployment needs at least one iteration".into(),
            });
        }
        let mut init_rng = stream_rng(seed, STREAM_INIT);
        let mut label_rng = stream_rng(seed, STREAM_LABEL);
        let noise = match &problem.kind {
            ProblemKind::Continuous { noise_sd, .. } => {
                Some(Normal::new(0.0, *noise_sd).expect("finite noise sd"))
            }
            ProblemKind::Pool { .. } => None,
        };

        let (data, remaining) = match &problem.kind {
            ProblemKind::Continuous { f, .. } => {
                let x = Array2::from_shape_fn((n_init, problem.dim), |_| {
                    init_rng.gen_range(0.0..1.0)
                });
                let noise = noise.as_ref().expect("continuous problems have noise");
                let y = Array1::from_iter(
                    x.rows()
                        .into_iter()
                        .map(|r| f(r) + noise.sample(&mut label_rng)),
                );
                (Dataset::new(x, y)?, Vec::new())
            }
            ProblemKind::Pool { x_unit, y } => {
                let total = x_unit.nrows();
                if n_init + t_steps > total {
                    return Err(Error::PoolExhausted);
                }
                // Partial Fisher-Yates over the original indices.
                let mut order: Vec<usize> = (0..total).collect();
                for i in 0..n_init {
                    let j = init_rng.gen_range(i..total);
                    order.swap(i, j);
                }
                let chosen = &order[..n_init];
                let x = Array2::from_shape_fn((n_init, problem.dim), |(i, d)| {
                    x_unit[[chosen[i], d]]
                });
                let labels = Array1::from_iter(chosen.iter().map(|&i| y[i]));
                let mut remaining = order[n_init..].to_vec();
                remaining.sort_unstable();
                (Dataset::new(x, labels)?, remaining)
            }
        };
        Ok(Session {
            problem,
            data,
            remaining,
            label_rng,
            noise,
        })
    }

    /// Reveal the label at a unit point (pool labels are looked up by the
    /// original index). Consumes label-stream noise on continuous problems.
    fn label(&mut self, x: ArrayView1<f64>, pool_idx: Option<usize>) -> f64 {
        match &self.problem.kind {
            ProblemKind::Continuous { f, .. } => {
                let noise = self.noise.as_ref().expect("continuous noise");
                f(x) + noise.sample(&mut self.label_rng)
            }
            ProblemKind::Pool { y, .. } => y[pool_idx.expect("pool selections carry an index")],
        }
    }
}

/// Position (within `remaining`) of the unlabeled pool row nearest to `q` in
/// Euclidean distance; ties go to the lower original index.
pub(crate) fn nearest_unseen(
    q: ArrayView1<f64>,
    pool: ArrayView2<f64>,
    remaining: &[usize],
) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (pos, &idx) in remaining.iter().enumerate() {
        let d: f64 = pool
            .row(idx)
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best_d {
            best_d = d;
            best = pos;
        }
    }
    best
}

/// Deploy the trained policy: one forward pass per iteration, projected to
/// the nearest unlabeled candidate in pool mode.
pub fn deploy_policy(
    params: &PolicyParams,
    problem: &Problem,
    n_init: usize,
    t_steps: usize,
    seed: u64,
    checkpoint_sha256: Option<String>,
) -> Result<ALTrace> {
    if params.dim() != problem.dim {
        return Err(Error::DimensionMismatch {
            expected: problem.dim,
            got: params.dim(),
            context: "policy checkpoint dimension vs problem".into(),
        });
    }
    let mut session = Session::start(problem, n_init, t_steps, seed)?;
    let mut steps = Vec::with_capacity(t_steps);
    for t in 1..=t_steps {
        let clock = Instant::now();
        let proposal = forward(params, &session.data)?;
        let (x_unit, pool_idx) = match &problem.kind {
            ProblemKind::Continuous { .. } => (proposal.x, None),
            ProblemKind::Pool { x_unit, .. } => {
                let pos = nearest_unseen(proposal.x.view(), x_unit.view(), &session.remaining);
                let idx = session.remaining.remove(pos);
                (x_unit.row(idx).to_owned(), Some(idx))
            }
        };
        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        let y = session.label(x_unit.view(), pool_idx);
        session.data.push(x_unit.view(), y)?;
        steps.push(TraceStep {
            t,
            x_unit: x_unit.clone(),
            x_native: problem.to_native(x_unit.view()),
            y,
            wall_ms,
        });
    }
    Ok(ALTrace {
        method: "policy".into(),
        problem: problem.name.clone(),
        seed,
        n_init,
        t_steps,
        checkpoint_sha256,
        init: session_init(&session, n_init),
        steps,
    })
}

fn session_init(session: &Session, n_init: usize) -> Dataset {
    let x = session.data.x().slice(ndarray::s![..n_init, ..]).to_owned();
    let y = session.data.y().slice(ndarray::s![..n_init]).to_owned();
    Dataset::new(x, y).expect("prefix of a valid dataset")
}

/// Fallback hyperparameters when no Type-II fit is available yet (fewer than
/// two observations, or every restart failed).
pub(crate) fn fallback_config(dim: usize) -> KernelConfig {
    KernelConfig::new(1.0, vec![0.3; dim], 0.01).expect("static fallback config")
}

/// Predictive entropies `H(y(x) | data)` for each candidate row under `cfg`,
/// sharing one factorization of the training covariance.
pub(crate) fn acquisition_entropies(
    data: &Dataset,
    candidates: ArrayView2<f64>,
    cfg: &KernelConfig,
) -> Result<Array1<f64>> {
    let mut k_xx = gram(data.x(), data.x(), cfg);
    for i in 0..k_xx.nrows() {
        k_xx[[i, i]] += cfg.noise_variance;
    }
    let factor = linalg::cholesky(k_xx.view(), "acquisition training covariance")?;
    let prior = cfg.variance + cfg.noise_variance;
    let half_log_2pie = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    Ok(Array1::from_iter(candidates.rows().into_iter().map(|c| {
        let k_c = Array1::from_iter(
            data.x()
                .rows()
                .into_iter()
                .map(|r| rbf_kernel(c, r, cfg)),
        );
        let var = prior - k_c.dot(&factor.solve_vec(k_c.view()));
        half_log_2pie + 0.5 * var.max(1e-300).ln()
    })))
}

/// Classical GP active learning: per iteration, fit hyperparameters by
/// Type-II maximum likelihood (falling back to the previous iteration's fit
/// on failure, with a log record) and query the entropy-maximizing
/// candidate. Fit time counts toward the selection wall time.
pub fn deploy_gp_al(
    problem: &Problem,
    n_init: usize,
    t_steps: usize,
    seed: u64,
) -> Result<ALTrace> {
    let mut session = Session::start(problem, n_init, t_steps, seed)?;
    let mut select_rng = stream_rng(seed, STREAM_SELECT);
    let mut current = fallback_config(problem.dim);
    let mut steps = Vec::with_capacity(t_steps);
    for t in 1..=t_steps {
        let clock = Instant::now();
        if session.data.len() >= 2 {
            match fit_gp_type2(&session.data) {
                Ok(fit) => current = fit.config,
                Err(e) => log::warn!(
                    "gp_al iteration {t}: type-II fit failed ({e}); reusing previous \
                     hyperparameters"
                ),
            }
        }
        let (x_unit, pool_idx) = match &problem.kind {
            ProblemKind::Continuous { .. } => {
                let cands = Array2::from_shape_fn((CANDIDATE_COUNT, problem.dim), |_| {
                    select_rng.gen_range(0.0..1.0)
                });
                let scores = acquisition_entropies(&session.data, cands.view(), &current)?;
                (cands.row(argmax(&scores)).to_owned(), None)
            }
            ProblemKind::Pool { x_unit, .. } => {
                let cands = Array2::from_shape_fn(
                    (session.remaining.len(), problem.dim),
                    |(i, d)| x_unit[[session.remaining[i], d]],
                );
                let scores = acquisition_entropies(&session.data, cands.view(), &current)?;
                let idx = session.remaining.remove(argmax(&scores));
                (x_unit.row(idx).to_owned(), Some(idx))
            }
        };
        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        let y = session.label(x_unit.view(), pool_idx);
        session.data.push(x_unit.view(), y)?;
        steps.push(TraceStep {
            t,
            x_unit: x_unit.clone(),
            x_native: problem.to_native(x_unit.view()),
            y,
            wall_ms,
        });
    }
    Ok(ALTrace {
        method: "gp_al".into(),
        problem: problem.name.clone(),
        seed,
        n_init,
        t_steps,
        checkpoint_sha256: None,
        init: session_init(&session, n_init),
        steps,
    })
}

fn argmax(scores: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Uniform random selection over the unit cube (continuous) or the
/// unlabeled pool.
pub fn deploy_random(
    problem: &Problem,
    n_init: usize,
    t_steps: usize,
    seed: u64,
) -> Result<ALTrace> {
    let mut session = Session::start(problem, n_init, t_steps, seed)?;
    let mut select_rng = stream_rng(seed, STREAM_SELECT);
    let mut steps = Vec::with_capacity(t_steps);
    for t in 1..=t_steps {
        let clock = Instant::now();
        let (x_unit, pool_idx) = match &problem.kind {
            ProblemKind::Continuous { .. } => (
                Array1::from_shape_fn(problem.dim, |_| select_rng.gen_range(0.0..1.0)),
                None,
            ),
            ProblemKind::Pool { x_unit, .. } => {
                let pos = select_rng.gen_range(0..session.remaining.len());
                let idx = session.remaining.remove(pos);
                (x_unit.row(idx).to_owned(), Some(idx))
            }
        };
        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        let y = session.label(x_unit.view(), pool_idx);
        session.data.push(x_unit.view(), y)?;
        steps.push(TraceStep {
            t,
            x_unit: x_unit.clone(),
            x_native: problem.to_native(x_unit.view()),
            y,
            wall_ms,
        });
    }
    Ok(ALTrace {
        method: "random".into(),
        problem: problem.name.clone(),
        seed,
        n_init,
        t_steps,
        checkpoint_sha256: None,
        init: session_init(&session, n_init),
        steps,
    })
}

// --- trace files ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    method: String,
    problem: String,
    seed: u64,
    n_init: usize,
    t_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_sha256: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct InitRow {
    x_unit: Vec<f64>,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct IterRow {
    t: usize,
    x_unit: Vec<f64>,
    x_native: Vec<f64>,
    y: f64,
    wall_ms: f64,
}

#[derive(Serialize, Deserialize)]
struct TraceFile {
    header: TraceHeader,
    init: Vec<InitRow>,
    iteration: Vec<IterRow>,
}

/// Serialize a trace to a TOML file.
pub fn write_trace(trace: &ALTrace, path: &Path) -> Result<()> {
    let file = TraceFile {
        header: TraceHeader {
            method: trace.method.clone(),
            problem: trace.problem.clone(),
            seed: trace.seed,
            n_init: trace.n_init,
            t_steps: trace.t_steps,
            checkpoint_sha256: trace.checkpoint_sha256.clone(),
        },
        init: trace
            .init
            .x()
            .rows()
            .into_iter()
            .zip(trace.init.y())
            .map(|(x, &y)| InitRow {
                x_unit: x.to_vec(),
                y,
            })
            .collect(),
        iteration: trace
            .steps
            .iter()
            .map(|s| IterRow {
                t: s.t,
                x_unit: s.x_unit.to_vec(),
                x_native: s.x_native.to_vec(),
                y: s.y,
                wall_ms: s.wall_ms,
            })
            .collect(),
    };
    let text = toml::to_string_pretty(&file).map_err(|e| Error::TraceFormat(e.to_string()))?;
    let tmp = path.with_extension("toml.tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parse a trace file written by [`write_trace`].
pub fn read_trace(path: &Path) -> Result<ALTrace> {
    let text = std::fs::read_to_string(path)?;
    let file: TraceFile =
        toml::from_str(&text).map_err(|e| Error::TraceFormat(format!("{}: {e}", path.display())))?;
    if file.iteration.len() != file.header.t_steps {
        return Err(Error::TraceFormat(format!(
            "{}: {} iterations recorded but header says t_steps = {}",
            path.display(),
            file.iteration.len(),
            file.header.t_steps
        )));
    }
    if file.init.is_empty() {
        return Err(Error::TraceFormat(format!(
            "{}: empty initial design",
            path.display()
        )));
    }
    let dim = file.init[0].x_unit.len();
    let x = Array2::from_shape_fn((file.init.len(), dim), |(i, d)| file.init[i].x_unit[d]);
    let y = Array1::from_iter(file.init.iter().map(|r| r.y));
    let init = Dataset::new(x, y).map_err(|e| Error::TraceFormat(e.to_string()))?;
    let steps = file
        .iteration
        .iter()
        .map(|r| TraceStep {
            t: r.t,
            x_unit: Array1::from(r.x_unit.clone()),
            x_native: Array1::from(r.x_native.clone()),
            y: r.y,
            wall_ms: r.wall_ms,
        })
        .collect();
    Ok(ALTrace {
        method: file.header.method,
        problem: file.header.problem,
        seed: file.header.seed,
        n_init: file.header.n_init,
        t_steps: file.header.t_steps,
        checkpoint_sha256: file.header.checkpoint_sha256,
        init,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_params;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn smooth_problem_1d() -> Problem {
        Problem::continuous(
            "smooth1d",
            array![0.0],
            array![1.0],
            0.1,
            Box::new(|x: ArrayView1<f64>| (6.0 * x[0]).sin()),
        )
        .unwrap()
    }

    fn smooth_problem_2d() -> Problem {
        Problem::continuous(
            "smooth2d",
            array![-1.0, 2.0],
            array![1.0, 5.0],
            0.1,
            Box::new(|x: ArrayView1<f64>| (4.0 * x[0]).cos() + x[1] * x[1]),
        )
        .unwrap()
    }

    fn grid_pool(n: usize) -> Problem {
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / (n - 1) as f64);
        let y = Array1::from_shape_fn(n, |i| (i as f64 * 0.37).sin());
        Problem::pool("grid", array![0.0], array![10.0], x, y).unwrap()
    }

    #[test]
    fn rescaling_round_trips() {
        let p = smooth_problem_2d();
        let native = p.to_native(array![0.0, 1.0].view());
        assert_eq!(native, array![-1.0, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..100 {
            let u = Array1::from_shape_fn(2, |_| rng.gen_range(0.0..1.0));
            let back = p.to_unit(p.to_native(u.view()).view());
            for (a, b) in u.iter().zip(&back) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn policy_deployment_collects_the_documented_observation_count() {
        let params = init_params(1, &mut ChaCha8Rng::seed_from_u64(61));
        let problem = smooth_problem_1d();
        let trace = deploy_policy(&params, &problem, 1, 10, 5, Some("abc".into())).unwrap();
        assert_eq!(trace.steps.len(), 10);
        let data = trace.final_dataset();
        assert_eq!(data.len(), 11);
        for step in &trace.steps {
            assert!((0.0..=1.0).contains(&step.x_unit[0]));
            assert!(step.wall_ms < 100.0, "query took {} ms", step.wall_ms);
        }

        // Wrong checkpoint dimension is rejected up front.
        let params2 = init_params(2, &mut ChaCha8Rng::seed_from_u64(61));
        assert!(matches!(
            deploy_policy(&params2, &problem, 1, 10, 5, None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pool_projection_picks_exact_matches_and_breaks_ties_low() {
        let pool = array![[0.0, 0.0], [0.5, 0.5], [1.0, 1.0], [0.5, 0.5]];
        let remaining = vec![0, 1, 2, 3];
        // Exact hit.
        let pos = nearest_unseen(array![0.5, 0.5].view(), pool.view(), &remaining);
        assert_eq!(remaining[pos], 1);
        // Tie between rows 1 and 3 once row 1 is gone... and between two
        // equidistant corners: the lower original index wins.
        let pos = nearest_unseen(array![0.5, 0.5].view(), pool.view(), &[0, 2]);
        assert_eq!([0, 2][pos], 0);
    }

    #[test]
    fn pool_candidacy_shrinks_and_never_repeats() {
        let params = init_params(1, &mut ChaCha8Rng::seed_from_u64(62));
        let problem = grid_pool(30);
        for trace in [
            deploy_policy(&params, &problem, 2, 8, 9, None).unwrap(),
            deploy_gp_al(&problem, 2, 8, 9).unwrap(),
            deploy_random(&problem, 2, 8, 9).unwrap(),
        ] {
            let data = trace.final_dataset();
            assert_eq!(data.len(), 10);
            // All selected rows are distinct pool members.
            let mut seen = std::collections::BTreeSet::new();
            for row in data.x().rows() {
                let key = (row[0] * 1e12) as i64;
                assert!(seen.insert(key), "{} re-selected a pool point", trace.method);
            }
        }
        // Exhaustion is caught up front.
        assert!(matches!(
            deploy_random(&grid_pool(5), 2, 8, 0),
            Err(Error::PoolExhausted)
        ));
    }

    #[test]
    fn random_selection_is_uniform_distinct_and_seeded() {
        let problem = smooth_problem_2d();
        let trace = deploy_random(&problem, 1, 10_000, 12).unwrap();
        for d in 0..2 {
            let mean: f64 =
                trace.steps.iter().map(|s| s.x_unit[d]).sum::<f64>() / trace.steps.len() as f64;
            assert!((0.49..=0.51).contains(&mean), "dim {d} mean {mean}");
        }
        // Rerunning reproduces everything except the clock readings.
        let again = deploy_random(&problem, 1, 10_000, 12).unwrap();
        let strip = |mut t: ALTrace| {
            for s in &mut t.steps {
                s.wall_ms = 0.0;
            }
            t
        };
        assert_eq!(strip(trace), strip(again));
    }

    #[test]
    fn gp_al_picks_the_farthest_candidate_from_a_single_point() {
        // With one observation and any RBF config, predictive entropy is
        // monotone in distance, so the winner must be the candidate farthest
        // from the initial point. Rebuild the candidate set from the
        // documented selection stream to check exactly.
        let problem = smooth_problem_1d();
        let seed = 13;
        let trace = deploy_gp_al(&problem, 1, 1, seed).unwrap();
        let x0 = trace.init.x()[[0, 0]];

        let mut select_rng = stream_rng(seed, STREAM_SELECT);
        let cands =
            Array2::from_shape_fn((CANDIDATE_COUNT, 1), |_| select_rng.gen_range(0.0..1.0));
        let mut best = 0;
        for i in 0..CANDIDATE_COUNT {
            if (cands[[i, 0]] - x0).abs() > (cands[[best, 0]] - x0).abs() {
                best = i;
            }
        }
        assert_eq!(trace.steps[0].x_unit[0], cands[[best, 0]]);
    }

    #[test]
    fn acquisition_approaches_prior_entropy_far_from_data() {
        let cfg = KernelConfig::new(0.9, vec![0.05], 0.01).unwrap();
        let data = Dataset::new(array![[0.0]], array![0.3]).unwrap();
        let h = acquisition_entropies(&data, array![[1.0]].view(), &cfg).unwrap();
        let prior = 0.5
            * (2.0 * std::f64::consts::PI * std::f64::consts::E * (0.9 + 0.01))
                .ln();
        assert_abs_diff_eq!(h[0], prior, epsilon = 1e-6);
        // And near the data the entropy is strictly smaller.
        let near = acquisition_entropies(&data, array![[0.01]].view(), &cfg).unwrap();
        assert!(near[0] < h[0]);
    }

    #[test]
    fn traces_replay_and_round_trip_through_files() {
        let params = init_params(1, &mut ChaCha8Rng::seed_from_u64(63));
        let problem = smooth_problem_1d();
        let trace = deploy_policy(&params, &problem, 2, 5, 21, Some("deadbeef".into())).unwrap();

        // Replay: regenerate label noise from the label stream in draw
        // order (init labels first, then queries).
        let mut label_rng = stream_rng(21, STREAM_LABEL);
        let noise = Normal::new(0.0, 0.1).unwrap();
        for i in 0..2 {
            let expect =
                (6.0 * trace.init.x()[[i, 0]]).sin() + noise.sample(&mut label_rng);
            assert_eq!(trace.init.y()[i], expect);
        }
        for step in &trace.steps {
            let expect = (6.0 * step.x_unit[0]).sin() + noise.sample(&mut label_rng);
            assert_eq!(step.y, expect);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.toml");
        write_trace(&trace, &path).unwrap();
        let loaded = read_trace(&path).unwrap();
        assert_eq!(trace, loaded);

        // Corrupt header count.
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("t_steps = 5", "t_steps = 7");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_trace(&path), Err(Error::TraceFormat(_))));
    }

    #[test]
    fn gp_al_selection_is_slower_than_policy_selection() {
        let params = init_params(2, &mut ChaCha8Rng::seed_from_u64(64));
        let problem = smooth_problem_2d();
        let policy_trace = deploy_policy(&params, &problem, 1, 5, 3, None).unwrap();
        let gp_trace = deploy_gp_al(&problem, 1, 5, 3).unwrap();
        assert!(
            gp_trace.total_query_ms() > policy_trace.total_query_ms(),
            "gp_al {} ms vs policy {} ms",
            gp_trace.total_query_ms(),
            policy_trace.total_query_ms()
        );
    }
}
