//! Condensed oracle suites behind `amal selftest`.
//!
//! Each check re-derives a core quantity through an independent route — a
//! dense Gauss-Jordan conditioning oracle, Monte Carlo, quadrature, finite
//! differences, or brute-force enumeration — and compares the production
//! path against it. The full-strength versions live in the test suite;
//! these run in seconds so a deployment environment can be vetted quickly.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::evalreport;
use crate::kernel_gp::{
    gaussian_entropy, gaussian_log_pdf, gp_posterior, gram, Dataset, KernelConfig,
};
use crate::objectives::{loss, loss_value, Experiment, Grid, LabelGen, Objective, RolloutBatch};
use crate::policy::{self, PolicyParams};
use crate::rff;
use crate::tape::Tape;
use crate::trainer;

/// One named self-check.
pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Result<(), String>,
}

/// Every check, in execution order.
pub fn checks() -> Vec<Check> {
    vec![
        Check {
            name: "gp_math_vs_dense_conditioning_oracle",
            run: gp_math_vs_dense_oracle,
        },
        Check {
            name: "rff_covariance_monte_carlo",
            run: rff_covariance_monte_carlo,
        },
        Check {
            name: "rff_window_mean_vs_quadrature",
            run: rff_window_mean_vs_quadrature,
        },
        Check {
            name: "policy_forward_vs_finite_differences",
            run: policy_forward_vs_finite_differences,
        },
        Check {
            name: "loss_gradients_vs_finite_differences",
            run: loss_gradients_vs_finite_differences,
        },
        Check {
            name: "type2_gradient_vs_finite_differences",
            run: type2_gradient_vs_finite_differences,
        },
        Check {
            name: "wilcoxon_vs_exact_enumeration",
            run: wilcoxon_vs_exact_enumeration,
        },
    ]
}

/// Run every check, returning the failures as `(name, message)` pairs.
pub fn run_all() -> Vec<(&'static str, String)> {
    checks()
        .into_iter()
        .filter_map(|c| (c.run)().err().map(|e| (c.name, e)))
        .collect()
}

fn ensure(cond: bool, msg: impl Fn() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// --- independent dense linear algebra ---------------------------------------

fn gauss_jordan_inverse(a: &Array2<f64>) -> Result<Array2<f64>, String> {
    let n = a.nrows();
    let mut m = Array2::<f64>::zeros((n, 2 * n));
    m.slice_mut(ndarray::s![.., ..n]).assign(a);
    for i in 0..n {
        m[[i, n + i]] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .expect("nonempty range");
        if m[[pivot, col]].abs() < 1e-12 {
            return Err(format!("oracle matrix singular at column {col}"));
        }
        if pivot != col {
            for k in 0..2 * n {
                m.swap([pivot, k], [col, k]);
            }
        }
        let p = m[[col, col]];
        for k in 0..2 * n {
            m[[col, k]] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = m[[row, col]];
                for k in 0..2 * n {
                    m[[row, k]] -= f * m[[col, k]];
                }
            }
        }
    }
    Ok(m.slice(ndarray::s![.., n..]).to_owned())
}

fn dense_log_det(a: &Array2<f64>) -> f64 {
    // LU without pivoting is fine for the well-conditioned oracle matrices.
    let n = a.nrows();
    let mut m = a.clone();
    let mut log_det = 0.0;
    for col in 0..n {
        log_det += m[[col, col]].ln();
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            for k in col..n {
                m[[row, k]] -= f * m[[col, k]];
            }
        }
    }
    log_det
}

// --- checks ------------------------------------------------------------------

/// Posterior mean/covariance, Gaussian log-density and entropy against a
/// dense joint-Gaussian conditioning oracle.
fn gp_math_vs_dense_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for trial in 0..10 {
        let dim = 1 + trial % 2;
        let cfg = trainer::sample_prior(dim, &mut rng);
        let n_obs = 2 + trial % 3;
        let n_tgt = 2 + trial % 2;
        let x_obs = Array2::from_shape_fn((n_obs, dim), |_| rng.gen_range(0.0..1.0));
        let y_obs = Array1::from_shape_fn(n_obs, |_| rng.gen_range(-1.0..1.0));
        let x_tgt = Array2::from_shape_fn((n_tgt, dim), |_| rng.gen_range(0.0..1.0));

        let data = Dataset::new(x_obs.clone(), y_obs.clone()).map_err(|e| e.to_string())?;
        let pred = gp_posterior(&data, x_tgt.view(), &cfg).map_err(|e| e.to_string())?;

        // Oracle: condition the dense joint Gaussian over obs + targets.
        let mut k_oo = gram(x_obs.view(), x_obs.view(), &cfg);
        for i in 0..n_obs {
            k_oo[[i, i]] += cfg.noise_variance;
        }
        let k_ot = gram(x_obs.view(), x_tgt.view(), &cfg);
        let mut k_tt = gram(x_tgt.view(), x_tgt.view(), &cfg);
        for i in 0..n_tgt {
            k_tt[[i, i]] += cfg.noise_variance;
        }
        let inv = gauss_jordan_inverse(&k_oo)?;
        let mean = k_ot.t().dot(&inv).dot(&y_obs);
        let cov = &k_tt - &k_ot.t().dot(&inv).dot(&k_ot);

        let mean_err = (&mean - &pred.mean).iter().map(|d| d.abs()).fold(0.0, f64::max);
        let cov_err = (&cov - &pred.cov).iter().map(|d| d.abs()).fold(0.0, f64::max);
        ensure(mean_err < 1e-6, || {
            format!("trial {trial}: posterior mean off by {mean_err}")
        })?;
        ensure(cov_err < 1e-6, || {
            format!("trial {trial}: posterior covariance off by {cov_err}")
        })?;

        // Log-density and entropy against direct dense formulas.
        let y_tgt = Array1::from_shape_fn(n_tgt, |_| rng.gen_range(-1.0..1.0));
        let lp = gaussian_log_pdf(y_tgt.view(), &pred).map_err(|e| e.to_string())?;
        let cov_inv = gauss_jordan_inverse(&cov)?;
        let resid = &y_tgt - &mean;
        let lp_oracle = -0.5 * resid.dot(&cov_inv.dot(&resid))
            - 0.5 * dense_log_det(&cov)
            - 0.5 * n_tgt as f64 * (2.0 * std::f64::consts::PI).ln();
        ensure((lp - lp_oracle).abs() < 1e-6, || {
            format!("trial {trial}: log-density {lp} vs oracle {lp_oracle}")
        })?;

        let h = gaussian_entropy(&pred).map_err(|e| e.to_string())?;
        let h_oracle = 0.5 * n_tgt as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln())
            + 0.5 * dense_log_det(&cov);
        ensure((h - h_oracle).abs() < 1e-6, || {
            format!("trial {trial}: entropy {h} vs oracle {h_oracle}")
        })?;
    }
    Ok(())
}

/// Sampled-function covariance recovers the RBF kernel (condensed Monte
/// Carlo; the full 50,000-draw version lives in the acceptance tests).
fn rff_covariance_monte_carlo() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let cfg = KernelConfig::new(0.8, vec![0.4], 0.01).map_err(|e| e.to_string())?;
    let pairs = [(0.2, 0.25), (0.3, 0.7), (0.5, 0.5)];
    let draws = 4000;
    let mut sums = [0.0; 3];
    for _ in 0..draws {
        let f = rff::sample_function(&cfg, 100, &mut rng);
        // The window-mean shift is a per-draw constant; the raw cosine sum
        // is the zero-mean process whose covariance is the kernel.
        for (k, (a, b)) in pairs.iter().enumerate() {
            sums[k] += (f.eval_one(Array1::from(vec![*a]).view()) + f.window_mean_shift)
                * (f.eval_one(Array1::from(vec![*b]).view()) + f.window_mean_shift);
        }
    }
    for (k, (a, b)) in pairs.iter().enumerate() {
        let mc = sums[k] / draws as f64;
        let exact = crate::kernel_gp::rbf_kernel(
            Array1::from(vec![*a]).view(),
            Array1::from(vec![*b]).view(),
            &cfg,
        );
        ensure((mc - exact).abs() < 0.05, || {
            format!("pair ({a}, {b}): MC covariance {mc} vs kernel {exact}")
        })?;
    }
    Ok(())
}

/// Closed-form window mean against midpoint quadrature.
fn rff_window_mean_vs_quadrature() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let cfg = KernelConfig::new(0.9, vec![0.3, 0.5], 0.01).map_err(|e| e.to_string())?;
    let f = rff::sample_function(&cfg, 60, &mut rng);
    let grid = 400;
    let mut sum = 0.0;
    for i in 0..grid {
        for j in 0..grid {
            let x = Array1::from(vec![
                (i as f64 + 0.5) / grid as f64,
                (j as f64 + 0.5) / grid as f64,
            ]);
            sum += f.eval_one(x.view()) + f.window_mean_shift;
        }
    }
    let quad = sum / (grid * grid) as f64;
    ensure((quad - f.window_mean_shift).abs() < 1e-3 * (1.0 + f.window_mean_shift.abs()), || {
        format!(
            "window mean {} vs quadrature {quad}",
            f.window_mean_shift
        )
    })
}

/// Policy network VJP against finite differences on the input pairs.
fn policy_forward_vs_finite_differences() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let params = policy::init_params(2, &mut rng);
    let pairs = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-0.5..0.5));

    let eval_sum = |p: &Array2<f64>| -> f64 {
        let tape = Tape::new(false);
        let pv = params.to_tape(&tape);
        let leaf = tape.leaf(p.clone());
        policy::forward_vars(&pv, &leaf).sum_all().scalar()
    };

    let tape = Tape::new(true);
    let pv = params.to_tape(&tape);
    let leaf = tape.leaf(pairs.clone());
    let out = policy::forward_vars(&pv, &leaf).sum_all();
    let grads = tape.backward(&out);
    let grad = grads.get(&leaf);

    let h = 1e-4;
    for (r, c) in [(0, 0), (1, 2), (3, 1)] {
        let mut plus = pairs.clone();
        plus[[r, c]] += h;
        let mut minus = pairs.clone();
        minus[[r, c]] -= h;
        let fd = (eval_sum(&plus) - eval_sum(&minus)) / (2.0 * h);
        let ad = grad[[r, c]];
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
        ensure(rel < 1e-2, || {
            format!("pairs[{r},{c}]: finite difference {fd} vs tape {ad}")
        })?;
    }
    Ok(())
}

/// The ingredients of one frozen simulated experiment: enough to replay the
/// rollout under perturbed parameters.
struct FrozenSpec {
    cfg: KernelConfig,
    init: Dataset,
    function: rff::SampledFunction,
    noise: Array1<f64>,
    grid: Option<Grid>,
}

fn roll(params: &PolicyParams, spec: &FrozenSpec) -> Result<Experiment, String> {
    let t_steps = spec.noise.len();
    let mut data = spec.init.clone();
    let mut queries = Array2::zeros((0, data.dim()));
    let mut labels = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let q = policy::forward(params, &data).map_err(|e| e.to_string())?;
        let y = spec.function.eval_one(q.x.view()) + spec.noise[t];
        queries
            .push(Axis(0), q.x.view())
            .map_err(|e| e.to_string())?;
        labels.push(y);
        data.push(q.x.view(), y).map_err(|e| e.to_string())?;
    }
    Ok(Experiment {
        cfg: spec.cfg.clone(),
        init: spec.init.clone(),
        queries,
        labels: Array1::from(labels),
        grid: spec.grid.clone(),
        gen: Some(LabelGen {
            function: spec.function.clone(),
            noise: spec.noise.clone(),
        }),
    })
}

/// Loss parameter gradients against finite differences through re-rollouts.
fn loss_gradients_vs_finite_differences() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let params = policy::init_params(1, &mut rng);
    let t_steps = 3;
    let specs: Vec<FrozenSpec> = (0..4)
        .map(|_| {
            let cfg = trainer::sample_prior(1, &mut rng);
            let function = rff::sample_function(&cfg, 50, &mut rng);
            let noise_sd = cfg.noise_variance.sqrt();
            let normal = Normal::new(0.0, noise_sd).expect("finite noise sd");
            let x0 = Array2::from_shape_fn((1, 1), |_| rng.gen_range(0.0..1.0));
            let y0 = Array1::from(vec![
                function.eval_one(x0.row(0)) + normal.sample(&mut rng),
            ]);
            let grid_x = Array2::from_shape_fn((20, 1), |_| rng.gen_range(0.0..1.0));
            let grid_y = Array1::from_iter(
                grid_x
                    .rows()
                    .into_iter()
                    .map(|r| function.eval_one(r) + normal.sample(&mut rng)),
            );
            FrozenSpec {
                cfg,
                init: Dataset::new(x0, y0).expect("valid init"),
                function,
                noise: Array1::from_shape_fn(t_steps, |_| normal.sample(&mut rng)),
                grid: Some(Grid {
                    x: grid_x,
                    y: grid_y,
                }),
            }
        })
        .collect();

    for objective in [Objective::Entropy, Objective::RegEntropyV2] {
        let experiments = specs
            .iter()
            .map(|s| roll(&params, s))
            .collect::<Result<Vec<_>, _>>()?;
        let batch = RolloutBatch {
            params: params.clone(),
            experiments,
        };
        let out = loss(&batch, objective).map_err(|e| e.to_string())?;

        let value_at = |p: &PolicyParams| -> Result<f64, String> {
            let experiments = specs
                .iter()
                .map(|s| roll(p, s))
                .collect::<Result<Vec<_>, _>>()?;
            loss_value(&experiments, objective).map_err(|e| e.to_string())
        };

        let h = 1e-4;
        for (tensor_idx, row, col) in [(0usize, 0usize, 3usize), (8, 0, 5)] {
            let name = params.tensors()[tensor_idx].0.clone();
            let mut plus = params.clone();
            plus.tensors_mut()[tensor_idx].1[[row, col]] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[tensor_idx].1[[row, col]] -= h;
            let fd = (value_at(&plus)? - value_at(&minus)?) / (2.0 * h);
            let ad = out.grad[tensor_idx][[row, col]];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
            ensure(rel < 1e-2, || {
                format!(
                    "{} gradient of {name}[{row},{col}]: finite difference {fd} vs tape {ad}",
                    objective.name()
                )
            })?;
        }
    }
    Ok(())
}

/// Type-II marginal-likelihood gradient against finite differences in
/// log-parameter space.
fn type2_gradient_vs_finite_differences() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let x = Array2::from_shape_fn((8, 2), |_| rng.gen_range(0.0..1.0));
    let y = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
    let data = Dataset::new(x, y).map_err(|e| e.to_string())?;
    let log_params = [0.3_f64.ln(), 0.5_f64.ln(), 0.4_f64.ln(), 0.05_f64.ln()];
    let (_, grad) =
        evalreport::log_marginal_grad(&data, &log_params).map_err(|e| e.to_string())?;

    let value_at = |lp: &[f64]| -> Result<f64, String> {
        let cfg = KernelConfig::new(lp[0].exp(), vec![lp[1].exp(), lp[2].exp()], lp[3].exp())
            .map_err(|e| e.to_string())?;
        evalreport::log_marginal(&data, &cfg).map_err(|e| e.to_string())
    };
    let h = 1e-4;
    for i in 0..log_params.len() {
        let mut plus = log_params;
        plus[i] += h;
        let mut minus = log_params;
        minus[i] -= h;
        let fd = (value_at(&plus)? - value_at(&minus)?) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        ensure(rel < 1e-2, || {
            format!(
                "log-parameter {i}: finite difference {fd} vs tape {}",
                grad[i]
            )
        })?;
    }
    Ok(())
}

/// Signed-rank p-values against hand-enumerated sign patterns.
fn wilcoxon_vs_exact_enumeration() -> Result<(), String> {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [2.0, 3.0, 4.0, 5.0, 6.0];
    let p = evalreport::wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
    ensure((p - 0.03125).abs() < 1e-12, || {
        format!("all-negative n=5 case: p = {p}, want 1/32")
    })?;

    let a = [1.0, 2.0, 3.0, 4.0, 5.05];
    let b = [2.0, 3.0, 4.0, 5.0, 5.0];
    let p = evalreport::wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
    ensure((p - 0.0625).abs() < 1e-12, || {
        format!("four-negative n=5 case: p = {p}, want 2/32")
    })?;

    // One larger case against an inline enumeration with fresh ranking code.
    let a = [0.9, 1.4, 0.2, 2.2, 1.9, 0.7, 1.1];
    let b = [1.0, 1.2, 0.6, 2.0, 2.4, 0.7, 1.5];
    let p = evalreport::wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
    let d: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let ranks: Vec<f64> = d
        .iter()
        .map(|di| {
            let below = d.iter().filter(|o| o.abs() < di.abs()).count() as f64;
            let equal = d.iter().filter(|o| o.abs() == di.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let w_obs: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(di, _)| **di > 0.0)
        .map(|(_, r)| r)
        .sum();
    let mut count = 0u64;
    for mask in 0u64..1 << d.len() {
        let w: f64 = ranks
            .iter()
            .enumerate()
            .filter(|(k, _)| mask >> k & 1 == 1)
            .map(|(_, r)| r)
            .sum();
        if w <= w_obs + 1e-9 {
            count += 1;
        }
    }
    let oracle = count as f64 / (1u64 << d.len()) as f64;
    ensure((p - oracle).abs() < 1e-12, || {
        format!("n=7 case: p = {p} vs enumeration {oracle}")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_selftest_check_passes() {
        let failures = run_all();
        assert!(failures.is_empty(), "selftest failures: {failures:?}");
    }
}
