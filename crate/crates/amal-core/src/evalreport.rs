//! Post-hoc evaluation and reporting.
//!
//! After deployment, every trace's final dataset gets a fresh GP fit by
//! Type-II maximum likelihood, RMSE is measured on a held-out evaluation
//! set, seeds are aggregated into mean ± standard error, and each method is
//! compared against the random baseline with an exact one-sided Wilcoxon
//! signed-rank test. [`build_report`] writes `report.csv` plus per-problem
//! bar charts; rerunning it over the same traces is byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::deploy::{ALTrace, Problem, ProblemKind};
use crate::error::{Error, Result};
use crate::kernel_gp::{diff, gram, rbf_kernel, Dataset, KernelConfig};
use crate::linalg;
use crate::tape::Tape;

/// Restart count for the Type-II fit.
pub const FIT_RESTARTS: usize = 5;
/// Ascent iterations per restart.
const FIT_ITERS: usize = 100;
/// Adam step size for the log-parameter ascent.
const FIT_LR: f64 = 0.05;
/// Seed of the restart-initialization stream (the fit takes no generator, so
/// results are reproducible from the data alone).
const FIT_SEED: u64 = 7;

/// Hyperparameter box for the fit: variance and lengthscales in
/// `[0.01, 2]`, noise variance in `[1e-4, 1]`.
const V_BOUNDS: (f64, f64) = (0.01, 2.0);
const L_BOUNDS: (f64, f64) = (0.01, 2.0);
const SN2_BOUNDS: (f64, f64) = (1e-4, 1.0);

/// Evaluation-set stream for synthetic problems.
const EVAL_SEED: u64 = 99;
/// Held-out points per synthetic problem.
pub const EVAL_POINTS: usize = 2000;

/// Outcome of [`fit_gp_type2`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub config: KernelConfig,
    /// Log marginal likelihood at `config`.
    pub log_marginal: f64,
    /// Which restart produced the winner.
    pub restart: usize,
    /// Whether the winner is stationary: gradient norm below one percent of
    /// `1 + |log_marginal|`.
    pub converged: bool,
}

/// Log-parameter vector layout used by the fit: `[ln v, ln l_1 .. ln l_D,
/// ln sigma_n^2]`.
fn config_of(log_params: &[f64]) -> KernelConfig {
    let d = log_params.len() - 2;
    KernelConfig::new(
        log_params[0].exp(),
        log_params[1..=d].iter().map(|p| p.exp()).collect(),
        log_params[d + 1].exp(),
    )
    .expect("exponentials of finite log-parameters are positive")
}

/// Marginal log likelihood of `data` under a zero-mean GP with `cfg`,
/// computed on the value-only path.
pub fn log_marginal(data: &Dataset, cfg: &KernelConfig) -> Result<f64> {
    let n = data.len();
    let mut k = gram(data.x(), data.x(), cfg);
    for i in 0..n {
        k[[i, i]] += cfg.noise_variance;
    }
    let factor = linalg::cholesky(k.view(), "marginal likelihood covariance")?;
    let alpha = factor.solve_vec(data.y());
    Ok(-0.5 * data.y().dot(&alpha)
        - 0.5 * factor.log_det()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Marginal log likelihood and its gradient with respect to the
/// log-parameter vector `[ln v, ln l_1 .. ln l_D, ln sigma_n^2]`.
pub fn log_marginal_grad(data: &Dataset, log_params: &[f64]) -> Result<(f64, Vec<f64>)> {
    let d = data.dim();
    if log_params.len() != d + 2 {
        return Err(Error::DimensionMismatch {
            expected: d + 2,
            got: log_params.len(),
            context: "log-parameter vector".into(),
        });
    }
    let tape = Tape::new(true);
    let log_v = tape.leaf(Array2::from_elem((1, 1), log_params[0]));
    let log_l = tape.leaf(Array2::from_shape_fn((1, d), |(_, j)| log_params[1 + j]));
    let log_sn2 = tape.leaf(Array2::from_elem((1, 1), log_params[d + 1]));
    let v = log_v.exp();
    let inv_l = log_l.neg().exp();
    let sn2 = log_sn2.exp();
    let x = tape.leaf(data.x().to_owned());
    let y = tape.leaf(data.y().to_owned().insert_axis(Axis(1)));
    let zero = tape.leaf(Array2::zeros((data.len(), 1)));
    let k = diff::gram_noisy(&x, &v, &inv_l, &sn2);
    let lml = diff::log_pdf(&y, &zero, &k)?;
    let value = lml.scalar();
    let grads = tape.backward(&lml);
    let mut g = vec![grads.get(&log_v)[[0, 0]]];
    g.extend(grads.get(&log_l).iter().copied());
    g.push(grads.get(&log_sn2)[[0, 0]]);
    Ok((value, g))
}

/// The restart initializations for a `dim`-dimensional fit, log-uniform
/// within the hyperparameter box and fixed by [`FIT_SEED`].
pub(crate) fn restart_inits(dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(FIT_SEED);
    let log_range =
        |(lo, hi): (f64, f64), rng: &mut ChaCha8Rng| rng.gen_range(lo.ln()..=hi.ln());
    (0..FIT_RESTARTS)
        .map(|_| {
            let mut p = vec![log_range(V_BOUNDS, &mut rng)];
            p.extend((0..dim).map(|_| log_range(L_BOUNDS, &mut rng)));
            p.push(log_range(SN2_BOUNDS, &mut rng));
            p
        })
        .collect()
}

fn clamp_log_params(p: &mut [f64]) {
    let d = p.len() - 2;
    p[0] = p[0].clamp(V_BOUNDS.0.ln(), V_BOUNDS.1.ln());
    for l in &mut p[1..=d] {
        *l = l.clamp(L_BOUNDS.0.ln(), L_BOUNDS.1.ln());
    }
    p[d + 1] = p[d + 1].clamp(SN2_BOUNDS.0.ln(), SN2_BOUNDS.1.ln());
}

/// Fit RBF kernel hyperparameters to `data` by Type-II maximum likelihood:
/// Adam ascent on the marginal log likelihood in log-parameter space, five
/// restarts drawn log-uniformly inside the hyperparameter box, best iterate
/// seen anywhere wins. `converged` reports whether the winning iterate is
/// stationary relative to the objective's scale.
pub fn fit_gp_type2(data: &Dataset) -> Result<FitResult> {
    if data.len() < 2 {
        return Err(Error::ConfigInvalid {
            field: "data".into(),
            message: "type-II fitting needs at least two observations".into(),
        });
    }
    let mut best: Option<(f64, Vec<f64>, f64, usize)> = None;
    let mut last_err = String::from("no evaluation succeeded");
    for (restart, init) in restart_inits(data.dim()).into_iter().enumerate() {
        let mut theta = init;
        let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
        let mut m = vec![0.0; theta.len()];
        let mut vv = vec![0.0; theta.len()];
        for t in 1..=FIT_ITERS + 1 {
            let (value, grad) = match log_marginal_grad(data, &theta) {
                Ok(pair) => pair,
                Err(e) => {
                    last_err = e.to_string();
                    break;
                }
            };
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                last_err = format!("non-finite marginal likelihood at restart {restart}");
                break;
            }
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(b, ..)| value > *b) {
                best = Some((value, theta.clone(), grad_norm, restart));
            }
            if t == FIT_ITERS + 1 {
                break;
            }
            for i in 0..theta.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                vv[i] = beta2 * vv[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / (1.0 - beta1.powi(t as i32));
                let v_hat = vv[i] / (1.0 - beta2.powi(t as i32));
                theta[i] += FIT_LR * m_hat / (v_hat.sqrt() + eps);
            }
            clamp_log_params(&mut theta);
        }
    }
    match best {
        Some((log_marginal, theta, grad_norm, restart)) => Ok(FitResult {
            config: config_of(&theta),
            log_marginal,
            restart,
            converged: grad_norm < 1e-2 * (1.0 + log_marginal.abs()),
        }),
        None => Err(Error::AllRestartsFailed {
            restarts: FIT_RESTARTS,
            detail: last_err,
        }),
    }
}

/// Root mean squared error of the posterior mean (conditioned on `train`
/// under `cfg`) against `eval_y` at `eval_x`. Only the mean is formed, so
/// large evaluation sets stay cheap.
pub fn rmse(
    cfg: &KernelConfig,
    train: &Dataset,
    eval_x: ArrayView2<f64>,
    eval_y: ArrayView1<f64>,
) -> Result<f64> {
    if eval_x.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if eval_x.nrows() != eval_y.len() {
        return Err(Error::DimensionMismatch {
            expected: eval_x.nrows(),
            got: eval_y.len(),
            context: "evaluation labels".into(),
        });
    }
    let mut k = gram(train.x(), train.x(), cfg);
    for i in 0..k.nrows() {
        k[[i, i]] += cfg.noise_variance;
    }
    let factor = linalg::cholesky(k.view(), "rmse training covariance")?;
    let alpha = factor.solve_vec(train.y());
    let sq_sum: f64 = eval_x
        .rows()
        .into_iter()
        .zip(eval_y)
        .map(|(xe, &ye)| {
            let k_vec = Array1::from_iter(
                train.x().rows().into_iter().map(|r| rbf_kernel(xe, r, cfg)),
            );
            let mu = k_vec.dot(&alpha);
            (mu - ye) * (mu - ye)
        })
        .sum();
    Ok((sq_sum / eval_x.nrows() as f64).sqrt())
}

/// Exact one-sided Wilcoxon signed-rank test of "a < b" on per-seed paired
/// scores. Zero differences are dropped; ties in magnitude get average
/// ranks; the p-value enumerates all `2^m` sign assignments of the
/// remaining differences.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
            context: "paired score vectors".into(),
        });
    }
    if !(5..=20).contains(&a.len()) {
        return Err(Error::BadSampleCount { n: a.len() });
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let m = diffs.len();
    // Average ranks of |d|, ascending.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0; m];
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let w_obs: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    // Exact null: every sign assignment equally likely.
    let total = 1u64 << m;
    let mut at_most = 0u64;
    for mask in 0..total {
        let w: f64 = (0..m)
            .filter(|k| mask >> k & 1 == 1)
            .map(|k| ranks[k])
            .sum();
        if w <= w_obs + 1e-9 {
            at_most += 1;
        }
    }
    Ok(at_most as f64 / total as f64)
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub problem: String,
    pub method: String,
    pub n_seeds: usize,
    pub rmse_mean: f64,
    pub rmse_se: f64,
    pub time_mean_ms: f64,
    /// One-sided signed-rank p-value vs the random baseline; absent for the
    /// baseline itself and for seed counts outside the exact-test range.
    pub p_vs_random: Option<f64>,
    pub star: bool,
}

/// Sample mean and standard error (sample standard deviation over sqrt n).
pub(crate) fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Held-out evaluation set for a synthetic problem: fresh uniform unit
/// points with noise-free labels, fixed by [`EVAL_SEED`].
pub(crate) fn synthetic_eval_set(problem: &Problem) -> (Array2<f64>, Array1<f64>) {
    let ProblemKind::Continuous { f, .. } = &problem.kind else {
        panic!("synthetic evaluation requires a continuous problem");
    };
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let x = Array2::from_shape_fn((EVAL_POINTS, problem.dim()), |_| rng.gen_range(0.0..1.0));
    let y = Array1::from_iter(x.rows().into_iter().map(|r| f(r)));
    (x, y)
}

/// Held-out evaluation set for a pool problem and one trace: every pool row
/// the trace never queried (matched exactly on unit coordinates).
pub(crate) fn pool_eval_set(problem: &Problem, trace: &ALTrace) -> Result<(Array2<f64>, Array1<f64>)> {
    let ProblemKind::Pool { x_unit, y } = &problem.kind else {
        panic!("pool evaluation requires a pool problem");
    };
    let queried = trace.final_dataset();
    let mut keep = Vec::new();
    for (i, row) in x_unit.rows().into_iter().enumerate() {
        let taken = queried
            .x()
            .rows()
            .into_iter()
            .any(|q| q.iter().zip(&row).all(|(a, b)| a == b));
        if !taken {
            keep.push(i);
        }
    }
    if keep.is_empty() {
        return Err(Error::PoolExhausted);
    }
    let x = Array2::from_shape_fn((keep.len(), problem.dim()), |(i, d)| x_unit[[keep[i], d]]);
    let labels = Array1::from_iter(keep.iter().map(|&i| y[i]));
    Ok((x, labels))
}

fn trace_rmse(problem: &Problem, trace: &ALTrace) -> Result<f64> {
    let data = trace.final_dataset();
    let fit = fit_gp_type2(&data)?;
    match &problem.kind {
        ProblemKind::Continuous { .. } => {
            let (ex, ey) = synthetic_eval_set(problem);
            rmse(&fit.config, &data, ex.view(), ey.view())
        }
        ProblemKind::Pool { .. } => {
            let (ex, ey) = pool_eval_set(problem, trace)?;
            rmse(&fit.config, &data, ex.view(), ey.view())
        }
    }
}

/// Aggregate traces into report rows and write `report.csv` plus one RMSE
/// and one query-time bar chart per problem into `out_dir`. Requires the
/// random baseline for every problem and equal seed counts across methods.
pub fn build_report(
    traces: &[ALTrace],
    problems: &[Problem],
    out_dir: &Path,
) -> Result<Vec<ReportRow>> {
    let by_name: BTreeMap<&str, &Problem> =
        problems.iter().map(|p| (p.name.as_str(), p)).collect();

    // Group traces by (problem, method), ordered by seed within a group.
    let mut groups: BTreeMap<(String, String), Vec<&ALTrace>> = BTreeMap::new();
    for trace in traces {
        if !by_name.contains_key(trace.problem.as_str()) {
            return Err(Error::ConfigInvalid {
                field: "traces".into(),
                message: format!("no problem definition named '{}'", trace.problem),
            });
        }
        groups
            .entry((trace.problem.clone(), trace.method.clone()))
            .or_default()
            .push(trace);
    }
    for ((problem, method), group) in &mut groups {
        group.sort_by_key(|t| t.seed);
        if group.windows(2).any(|w| w[0].seed == w[1].seed) {
            return Err(Error::ConfigInvalid {
                field: "traces".into(),
                message: format!("duplicate seed for {method} on {problem}"),
            });
        }
    }

    // Per-trace scores; fits run in parallel, everything downstream is
    // sequential and ordered.
    let scored: Vec<((String, String), Vec<(u64, f64, f64)>)> = groups
        .iter()
        .map(|(key, group)| {
            let scores = group
                .par_iter()
                .map(|t| {
                    trace_rmse(by_name[key.0.as_str()], t)
                        .map(|r| (t.seed, r, t.total_query_ms()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((key.clone(), scores))
        })
        .collect::<Result<_>>()?;
    let scored: BTreeMap<_, _> = scored.into_iter().collect();

    // Structural checks per problem: random baseline, aligned seeds.
    let mut problems_seen: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (problem, method) in scored.keys() {
        problems_seen
            .entry(problem.as_str())
            .or_default()
            .push(method.as_str());
    }
    for (problem, methods) in &problems_seen {
        if !methods.contains(&"random") {
            return Err(Error::MissingRandomBaseline {
                found: methods.iter().map(|m| format!("{problem}/{m}")).collect(),
            });
        }
    }

    let mut rows = Vec::new();
    for ((problem, method), scores) in &scored {
        let random = &scored[&(problem.clone(), "random".to_string())];
        if scores.len() != random.len() {
            return Err(Error::SeedCountMismatch {
                method: method.clone(),
                got: scores.len(),
                expected: random.len(),
            });
        }
        if method != "random"
            && scores
                .iter()
                .zip(random)
                .any(|((sa, ..), (sb, ..))| sa != sb)
        {
            return Err(Error::ConfigInvalid {
                field: "traces".into(),
                message: format!("{method} and random ran different seeds on {problem}"),
            });
        }
        let rmses: Vec<f64> = scores.iter().map(|(_, r, _)| *r).collect();
        let times: Vec<f64> = scores.iter().map(|(_, _, t)| *t).collect();
        let (rmse_mean, rmse_se) = mean_se(&rmses);
        let (time_mean_ms, _) = mean_se(&times);
        let p_vs_random = if method == "random" {
            None
        } else {
            let base: Vec<f64> = random.iter().map(|(_, r, _)| *r).collect();
            match wilcoxon_signed_rank(&rmses, &base) {
                Ok(p) => Some(p),
                Err(Error::BadSampleCount { .. }) => None,
                Err(e) => return Err(e),
            }
        };
        rows.push(ReportRow {
            problem: problem.clone(),
            method: method.clone(),
            n_seeds: scores.len(),
            rmse_mean,
            rmse_se,
            time_mean_ms,
            p_vs_random,
            star: p_vs_random.is_some_and(|p| p < 0.05),
        });
    }

    std::fs::create_dir_all(out_dir)?;
    write_csv(&rows, &out_dir.join("report.csv"))?;
    for problem in problems_seen.keys() {
        let subset: Vec<&ReportRow> = rows.iter().filter(|r| r.problem == *problem).collect();
        let rmse_chart = bar_chart(
            &format!("{problem}: held-out RMSE"),
            &subset
                .iter()
                .map(|r| Bar {
                    label: r.method.clone(),
                    value: r.rmse_mean,
                    se: Some(r.rmse_se),
                    star: r.star,
                })
                .collect::<Vec<_>>(),
        );
        std::fs::write(out_dir.join(format!("{problem}_rmse.svg")), rmse_chart)?;
        let time_chart = bar_chart(
            &format!("{problem}: total query time (ms)"),
            &subset
                .iter()
                .map(|r| Bar {
                    label: r.method.clone(),
                    value: r.time_mean_ms,
                    se: None,
                    star: false,
                })
                .collect::<Vec<_>>(),
        );
        std::fs::write(out_dir.join(format!("{problem}_time.svg")), time_chart)?;
    }
    Ok(rows)
}

fn write_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut text =
        String::from("problem,method,n_seeds,rmse_mean,rmse_se,time_mean_ms,p_vs_random,star\n");
    for r in rows {
        let p = r
            .p_vs_random
            .map(|p| format!("{p:.6}"))
            .unwrap_or_default();
        writeln!(
            text,
            "{},{},{},{:.6},{:.6},{:.3},{},{}",
            r.problem,
            r.method,
            r.n_seeds,
            r.rmse_mean,
            r.rmse_se,
            r.time_mean_ms,
            p,
            if r.star { "*" } else { "" }
        )
        .expect("string writes are infallible");
    }
    std::fs::write(path, text)?;
    Ok(())
}

struct Bar {
    label: String,
    value: f64,
    se: Option<f64>,
    star: bool,
}

/// Minimal hand-rolled SVG bar chart (no external renderer, no timestamps,
/// deterministic output bytes).
fn bar_chart(title: &str, bars: &[Bar]) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let max = bars
        .iter()
        .map(|b| b.value + b.se.unwrap_or(0.0))
        .fold(f64::EPSILON, f64::max)
        * 1.15;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        w / 2.0,
        top + plot_h,
        left + plot_w,
        top + plot_h,
        top + plot_h,
    );
    let slot = plot_w / bars.len() as f64;
    for (i, bar) in bars.iter().enumerate() {
        let bw = slot * 0.6;
        let x = left + slot * i as f64 + (slot - bw) / 2.0;
        let bh = plot_h * (bar.value / max).max(0.0);
        let y = top + plot_h - bh;
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bw:.2}\" height=\"{bh:.2}\" \
             fill=\"#4878a8\"/>"
        );
        if let Some(se) = bar.se {
            let cx = x + bw / 2.0;
            let y_lo = top + plot_h - plot_h * ((bar.value - se) / max).max(0.0);
            let y_hi = top + plot_h - plot_h * ((bar.value + se) / max).max(0.0);
            let _ = writeln!(
                svg,
                "<line x1=\"{cx:.2}\" y1=\"{y_lo:.2}\" x2=\"{cx:.2}\" y2=\"{y_hi:.2}\" \
                 stroke=\"black\"/>\n\
                 <line x1=\"{:.2}\" y1=\"{y_lo:.2}\" x2=\"{:.2}\" y2=\"{y_lo:.2}\" \
                 stroke=\"black\"/>\n\
                 <line x1=\"{:.2}\" y1=\"{y_hi:.2}\" x2=\"{:.2}\" y2=\"{y_hi:.2}\" \
                 stroke=\"black\"/>",
                cx - 4.0,
                cx + 4.0,
                cx - 4.0,
                cx + 4.0,
            );
        }
        let label_y = top + plot_h + 18.0;
        let cx = x + bw / 2.0;
        let _ = writeln!(
            svg,
            "<text x=\"{cx:.2}\" y=\"{label_y:.1}\" text-anchor=\"middle\">{}</text>",
            bar.label
        );
        let _ = writeln!(
            svg,
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{:.4}</text>",
            y - (if bar.se.is_some() { 14.0 } else { 4.0 }),
            bar.value
        );
        if bar.star {
            let _ = writeln!(
                svg,
                "<text x=\"{cx:.2}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"16\">*</text>",
                top - 4.0 + 16.0
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deploy::TraceStep;
    use crate::rff;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn gp_draw_dataset(cfg: &KernelConfig, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rff::sample_function(cfg, 2000, &mut rng);
        let noise = rand_distr::Normal::new(0.0, cfg.noise_variance.sqrt()).unwrap();
        let x = Array2::from_shape_fn((n, cfg.dim()), |_| rng.gen_range(0.0..1.0));
        let y = Array1::from_iter(x.rows().into_iter().map(|r| {
            f.eval_one(r) + rand_distr::Distribution::sample(&noise, &mut rng)
        }));
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn type2_fit_recovers_the_generating_lengthscale() {
        let truth = KernelConfig::new(0.9, vec![0.3], 0.01).unwrap();
        let data = gp_draw_dataset(&truth, 60, 76);
        let fit = fit_gp_type2(&data).unwrap();
        let l = fit.config.lengthscales[0];
        assert!(
            (0.15..=0.6).contains(&l),
            "recovered lengthscale {l} outside factor 2 of 0.3"
        );
        assert!(fit.log_marginal.is_finite());
        assert!((V_BOUNDS.0..=V_BOUNDS.1).contains(&fit.config.variance));
        assert!((SN2_BOUNDS.0..=SN2_BOUNDS.1).contains(&fit.config.noise_variance));
        assert!(fit.restart < FIT_RESTARTS);
    }

    #[test]
    fn type2_fit_beats_every_initialization() {
        let truth = KernelConfig::new(0.6, vec![0.2], 0.05).unwrap();
        let data = gp_draw_dataset(&truth, 25, 71);
        let fit = fit_gp_type2(&data).unwrap();
        for init in restart_inits(1) {
            let at_init = log_marginal(&data, &config_of(&init)).unwrap();
            assert!(
                fit.log_marginal >= at_init - 1e-9,
                "winner {} below initialization value {at_init}",
                fit.log_marginal
            );
        }
        // The winner's stored objective matches the value-only path.
        let recomputed = log_marginal(&data, &fit.config).unwrap();
        assert_abs_diff_eq!(fit.log_marginal, recomputed, epsilon = 1e-8);
    }

    #[test]
    fn type2_fit_survives_duplicated_rows() {
        let x = array![[0.1], [0.4], [0.8], [0.1], [0.4], [0.8]];
        let y = array![0.3, -0.2, 0.5, 0.3, -0.2, 0.5];
        let fit = fit_gp_type2(&Dataset::new(x, y).unwrap()).unwrap();
        assert!(fit.log_marginal.is_finite());
    }

    #[test]
    fn rmse_matches_a_direct_posterior_oracle() {
        let cfg = KernelConfig::new(0.8, vec![0.25], 0.01).unwrap();
        let train = gp_draw_dataset(&cfg, 12, 72);
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let eval_x = Array2::from_shape_fn((40, 1), |_| rng.gen_range(0.0..1.0));

        let pred = crate::kernel_gp::gp_posterior(&train, eval_x.view(), &cfg).unwrap();
        // Targets equal to the posterior mean: error vanishes.
        assert!(rmse(&cfg, &train, eval_x.view(), pred.mean.view()).unwrap() < 1e-9);
        // Constant offset of one: RMSE is one.
        let shifted = &pred.mean + 1.0;
        assert_abs_diff_eq!(
            rmse(&cfg, &train, eval_x.view(), shifted.view()).unwrap(),
            1.0,
            epsilon = 1e-9
        );
        // Random targets against the direct formula.
        let eval_y = Array1::from_shape_fn(40, |_| rng.gen_range(-1.0..1.0));
        let oracle = (pred
            .mean
            .iter()
            .zip(&eval_y)
            .map(|(m, y)| (m - y) * (m - y))
            .sum::<f64>()
            / 40.0)
            .sqrt();
        assert_abs_diff_eq!(
            rmse(&cfg, &train, eval_x.view(), eval_y.view()).unwrap(),
            oracle,
            epsilon = 1e-12
        );
    }

    #[test]
    fn wilcoxon_reproduces_documented_examples() {
        // All five differences negative: smallest possible one-sided p.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        assert_abs_diff_eq!(
            wilcoxon_signed_rank(&a, &b).unwrap(),
            0.03125,
            epsilon = 1e-12
        );
        // Four negative, one positive with the smallest magnitude: W+ = 1,
        // so p = P(W+ <= 1) = 2/32.
        let a = [1.0, 2.0, 3.0, 4.0, 5.05];
        let b = [2.0, 3.0, 4.0, 5.0, 5.0];
        assert_abs_diff_eq!(
            wilcoxon_signed_rank(&a, &b).unwrap(),
            0.0625,
            epsilon = 1e-12
        );
        // Identical vectors leave no information.
        assert!(matches!(
            wilcoxon_signed_rank(&a, &a),
            Err(Error::AllZeroDifferences)
        ));
        // Outside the exact-test range.
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0; 4], &[2.0; 4]),
            Err(Error::BadSampleCount { n: 4 })
        ));
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0; 21], &[2.0; 21]),
            Err(Error::BadSampleCount { n: 21 })
        ));
    }

    /// Independent enumeration oracle with its own ranking code.
    fn wilcoxon_oracle(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(x, y)| x - y)
            .filter(|d| *d != 0.0)
            .collect();
        let m = d.len();
        let rank = |i: usize| -> f64 {
            let below = d.iter().filter(|o| o.abs() < d[i].abs()).count();
            let equal = d.iter().filter(|o| o.abs() == d[i].abs()).count();
            below as f64 + (equal as f64 + 1.0) / 2.0
        };
        let ranks: Vec<f64> = (0..m).map(rank).collect();
        let w_obs: f64 = (0..m).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
        let mut count = 0u64;
        for mask in 0u64..1 << m {
            let w: f64 = (0..m).filter(|k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
            if w <= w_obs + 1e-9 {
                count += 1;
            }
        }
        count as f64 / (1u64 << m) as f64
    }

    #[test]
    fn wilcoxon_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        for n in 5..=12 {
            for _ in 0..10 {
                // Round to one decimal so ties and zeros actually occur.
                let a: Vec<f64> = (0..n)
                    .map(|_| (rng.gen_range(0.0_f64..2.0) * 10.0).round() / 10.0)
                    .collect();
                let b: Vec<f64> = (0..n)
                    .map(|_| (rng.gen_range(0.0_f64..2.0) * 10.0).round() / 10.0)
                    .collect();
                match wilcoxon_signed_rank(&a, &b) {
                    Ok(p) => assert_abs_diff_eq!(p, wilcoxon_oracle(&a, &b), epsilon = 1e-12),
                    Err(Error::AllZeroDifferences) => {
                        assert!(a.iter().zip(&b).all(|(x, y)| x == y))
                    }
                    Err(e) => panic!("unexpected error {e}"),
                }
            }
        }
    }

    #[test]
    fn standard_error_matches_the_textbook_value() {
        let (mean, se) = mean_se(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_abs_diff_eq!(mean, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(se, 0.7071067811865476, epsilon = 1e-9);
    }

    fn synthetic_trace(method: &str, seed: u64, xs: &[f64]) -> ALTrace {
        let f = |x: f64| (6.0 * x).sin();
        let init = Dataset::new(array![[xs[0]]], array![f(xs[0])]).unwrap();
        let steps = xs[1..]
            .iter()
            .enumerate()
            .map(|(i, &x)| TraceStep {
                t: i + 1,
                x_unit: array![x],
                x_native: array![x],
                y: f(x),
                wall_ms: if method == "policy" { 1.0 } else { 50.0 },
            })
            .collect();
        ALTrace {
            method: method.into(),
            problem: "wave".into(),
            seed,
            n_init: 1,
            t_steps: xs.len() - 1,
            checkpoint_sha256: None,
            init,
            steps,
        }
    }

    fn wave_problem() -> Problem {
        Problem::continuous(
            "wave",
            array![0.0],
            array![1.0],
            0.0_f64.max(1e-9),
            Box::new(|x: ArrayView1<f64>| (6.0 * x[0]).sin()),
        )
        .unwrap()
    }

    #[test]
    fn report_aggregates_stars_and_reruns_byte_identically() {
        // Policy traces cover the domain; random traces huddle near zero, so
        // the policy wins on every seed and earns the n=5 floor p-value.
        let mut traces = Vec::new();
        for seed in 0..5u64 {
            let jitter = seed as f64 * 0.003;
            let spread: Vec<f64> = (0..9).map(|i| i as f64 / 8.0 * 0.9 + jitter).collect();
            let huddle: Vec<f64> = (0..9).map(|i| i as f64 * 0.012 + jitter).collect();
            traces.push(synthetic_trace("policy", seed, &spread));
            traces.push(synthetic_trace("random", seed, &huddle));
        }
        let problems = vec![wave_problem()];
        let dir = tempfile::tempdir().unwrap();
        let rows = build_report(&traces, &problems, dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        let policy = rows.iter().find(|r| r.method == "policy").unwrap();
        let random = rows.iter().find(|r| r.method == "random").unwrap();
        assert_eq!(policy.n_seeds, 5);
        assert!(policy.rmse_mean < random.rmse_mean);
        assert_abs_diff_eq!(policy.p_vs_random.unwrap(), 0.03125, epsilon = 1e-12);
        assert!(policy.star);
        assert_eq!(random.p_vs_random, None);
        assert!(!random.star);
        assert!(policy.time_mean_ms < random.time_mean_ms);

        let csv = std::fs::read(dir.path().join("report.csv")).unwrap();
        let text = String::from_utf8(csv.clone()).unwrap();
        assert!(text.starts_with(
            "problem,method,n_seeds,rmse_mean,rmse_se,time_mean_ms,p_vs_random,star\n"
        ));
        assert_eq!(text.lines().count(), 3);
        let rmse_svg = std::fs::read(dir.path().join("wave_rmse.svg")).unwrap();
        let time_svg = std::fs::read(dir.path().join("wave_time.svg")).unwrap();
        assert!(String::from_utf8_lossy(&rmse_svg).contains("held-out RMSE"));

        // Rerun: byte-identical artifacts.
        let rows2 = build_report(&traces, &problems, dir.path()).unwrap();
        assert_eq!(rows, rows2);
        assert_eq!(std::fs::read(dir.path().join("report.csv")).unwrap(), csv);
        assert_eq!(std::fs::read(dir.path().join("wave_rmse.svg")).unwrap(), rmse_svg);
        assert_eq!(std::fs::read(dir.path().join("wave_time.svg")).unwrap(), time_svg);
    }

    #[test]
    fn report_rejects_structural_mistakes() {
        let spread: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
        let problems = vec![wave_problem()];
        let dir = tempfile::tempdir().unwrap();

        // No random baseline.
        let traces: Vec<ALTrace> = (0..5)
            .map(|s| synthetic_trace("policy", s, &spread))
            .collect();
        assert!(matches!(
            build_report(&traces, &problems, dir.path()),
            Err(Error::MissingRandomBaseline { .. })
        ));

        // Unequal seed counts.
        let mut traces: Vec<ALTrace> = (0..5)
            .map(|s| synthetic_trace("random", s, &spread))
            .collect();
        traces.extend((0..4).map(|s| synthetic_trace("policy", s, &spread)));
        assert!(matches!(
            build_report(&traces, &problems, dir.path()),
            Err(Error::SeedCountMismatch { got: 4, expected: 5, .. })
        ));

        // Unknown problem name.
        let mut stray = synthetic_trace("random", 0, &spread);
        stray.problem = "nowhere".into();
        assert!(matches!(
            build_report(&[stray], &problems, dir.path()),
            Err(Error::ConfigInvalid { .. })
        ));
    }

    #[test]
    fn pool_evaluation_keeps_exactly_the_unqueried_points() {
        let n = 20;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / (n - 1) as f64);
        let y = Array1::from_shape_fn(n, |i| (i as f64).sin());
        let problem = Problem::pool("tiny", array![0.0], array![1.0], x.clone(), y).unwrap();

        let picked = [0usize, 3, 7, 11, 19];
        let init = Dataset::new(
            array![[x[[picked[0], 0]]]],
            array![(picked[0] as f64).sin()],
        )
        .unwrap();
        let steps = picked[1..]
            .iter()
            .enumerate()
            .map(|(i, &idx)| TraceStep {
                t: i + 1,
                x_unit: array![x[[idx, 0]]],
                x_native: array![x[[idx, 0]]],
                y: (idx as f64).sin(),
                wall_ms: 1.0,
            })
            .collect();
        let trace = ALTrace {
            method: "random".into(),
            problem: "tiny".into(),
            seed: 0,
            n_init: 1,
            t_steps: 4,
            checkpoint_sha256: None,
            init,
            steps,
        };
        let (ex, ey) = pool_eval_set(&problem, &trace).unwrap();
        assert_eq!(ex.nrows(), n - picked.len());
        assert_eq!(ey.len(), n - picked.len());
        for row in ex.rows() {
            let original = (row[0] * (n - 1) as f64).round() as usize;
            assert!(!picked.contains(&original));
        }
    }
}
