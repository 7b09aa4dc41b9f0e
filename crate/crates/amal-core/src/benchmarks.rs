//! Evaluation problems.
//!
//! Four synthetic functions (sin, Branin, unconstrained Simionescu,
//! unconstrained Townsend) and two ingested datasets (airline passengers,
//! LGBB lift), all exposed through [`Problem`] on the unit cube. Synthetic
//! outputs other than sin are standardized against a fixed-seed sample of
//! noise-free evaluations; pool outputs are standardized over the full
//! dataset. Label noise is `N(0, 0.1^2)` for synthetic problems and absent
//! for pools.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{array, Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deploy::Problem;
use crate::error::{Error, Result};

/// Noise-free evaluations drawn to estimate normalization constants.
pub const NORM_SAMPLES: usize = 10_000;
/// Dedicated seed of the normalization sample.
pub const NORM_SEED: u64 = 2718;
/// Label noise standard deviation for synthetic problems.
pub const SYNTHETIC_NOISE_SD: f64 = 0.1;

/// Everything needed to reproduce a problem's preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub name: String,
    pub dim: usize,
    pub native_lo: Array1<f64>,
    pub native_hi: Array1<f64>,
    /// Output standardization: reported values are `(raw - mean) / std`.
    pub norm_mean: f64,
    pub norm_std: f64,
    /// Seed of the normalization sample, when one was drawn.
    pub norm_seed: Option<u64>,
    /// Label noise added by the oracle (zero for pools).
    pub noise_sd: f64,
}

/// The Branin source prints the first term linearly; the conventional form
/// squares it. Both are available and the problem name records the choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BraninVariant {
    Standard,
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Synthetic {
    Sin,
    Branin(BraninVariant),
    Simionescu,
    Townsend,
}

impl Synthetic {
    pub fn name(&self) -> &'static str {
        match self {
            Synthetic::Sin => "sin",
            Synthetic::Branin(BraninVariant::Standard) => "branin",
            Synthetic::Branin(BraninVariant::Printed) => "branin_printed",
            Synthetic::Simionescu => "simionescu",
            Synthetic::Townsend => "townsend",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Synthetic::Sin => 1,
            _ => 2,
        }
    }

    pub fn native_box(&self) -> (Array1<f64>, Array1<f64>) {
        match self {
            Synthetic::Sin => (array![0.0], array![1.0]),
            Synthetic::Branin(_) => (array![-5.0, 0.0], array![10.0, 15.0]),
            Synthetic::Simionescu => (array![-1.25, -1.25], array![1.25, 1.25]),
            Synthetic::Townsend => (array![-2.25, -2.5], array![2.25, 1.75]),
        }
    }

    /// Raw (pre-normalization) value at native coordinates.
    pub fn eval_native(&self, x: ArrayView1<f64>) -> f64 {
        match self {
            Synthetic::Sin => (20.0 * x[0]).sin(),
            Synthetic::Branin(variant) => branin_raw(x[0], x[1], *variant),
            Synthetic::Simionescu => 0.1 * x[0] * x[1],
            Synthetic::Townsend => {
                -((x[0] - 0.1) * x[1]).cos().powi(2) - x[0] * (3.0 * x[0] + x[1]).sin()
            }
        }
    }

    /// Raw value at unit-cube coordinates.
    pub fn eval_unit_raw(&self, u: ArrayView1<f64>) -> f64 {
        let (lo, hi) = self.native_box();
        let native = Array1::from_iter(
            u.iter()
                .zip(&lo)
                .zip(&hi)
                .map(|((&u, &lo), &hi)| lo + (hi - lo) * u),
        );
        self.eval_native(native.view())
    }

    /// The sin problem keeps its natural scale; the others standardize.
    fn standardized(&self) -> bool {
        !matches!(self, Synthetic::Sin)
    }
}

fn branin_raw(x1: f64, x2: f64, variant: BraninVariant) -> f64 {
    let (a, b, c, r, s, t) = (
        1.0,
        5.1 / (4.0 * PI * PI),
        5.0 / PI,
        6.0,
        10.0,
        1.0 / (8.0 * PI),
    );
    let inner = x2 - b * x1 * x1 + c * x1 - r;
    let first = match variant {
        BraninVariant::Standard => inner * inner,
        BraninVariant::Printed => inner,
    };
    a * first + s * (1.0 - t) * x1.cos() + s
}

/// Standardization constants `(mean, std)` for a synthetic function:
/// [`NORM_SAMPLES`] uniform noise-free evaluations under [`NORM_SEED`],
/// population standard deviation. The sin problem returns identity
/// constants.
pub fn normalization_constants(fun: Synthetic) -> (f64, f64) {
    if !fun.standardized() {
        return (0.0, 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(NORM_SEED);
    let dim = fun.dim();
    let vals: Vec<f64> = (0..NORM_SAMPLES)
        .map(|_| {
            let u = Array1::from_shape_fn(dim, |_| rng.gen_range(0.0..1.0));
            fun.eval_unit_raw(u.view())
        })
        .collect();
    standardize_constants(&vals)
}

/// Mean and population standard deviation.
fn standardize_constants(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Build a synthetic [`Problem`] and its provenance record.
pub fn synthetic_problem(fun: Synthetic) -> (Problem, BenchmarkSpec) {
    let (mean, std) = normalization_constants(fun);
    let (lo, hi) = fun.native_box();
    let spec = BenchmarkSpec {
        name: fun.name().into(),
        dim: fun.dim(),
        native_lo: lo.clone(),
        native_hi: hi.clone(),
        norm_mean: mean,
        norm_std: std,
        norm_seed: fun.standardized().then_some(NORM_SEED),
        noise_sd: SYNTHETIC_NOISE_SD,
    };
    let problem = Problem::continuous(
        fun.name(),
        lo,
        hi,
        SYNTHETIC_NOISE_SD,
        Box::new(move |u: ArrayView1<f64>| (fun.eval_unit_raw(u) - mean) / std),
    )
    .expect("synthetic boxes are valid");
    (problem, spec)
}

/// Parse the airline passenger CSV ("YYYY-MM,count" rows, optional header)
/// into a 1-D pool: dates become `year + (month-1)/12` min-max scaled to
/// `[0,1]`, counts are standardized over the full dataset.
pub fn ingest_airline(path: &Path) -> Result<(Problem, BenchmarkSpec)> {
    let text = std::fs::read_to_string(path)?;
    let mut times = Vec::new();
    let mut counts = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let month_field = line.split(',').next().unwrap_or_default().trim();
        let looks_like_date = month_field.len() == 7
            && month_field.as_bytes()[4] == b'-'
            && month_field.chars().filter(|c| c.is_ascii_digit()).count() == 6;
        if line_no == 1 && !looks_like_date {
            continue; // header
        }
        let mut fields = line.split(',');
        let month_field = fields.next().unwrap_or_default().trim();
        let count_field = fields.next().map(str::trim).ok_or(Error::MalformedRow {
            line: line_no,
            message: "expected 'YYYY-MM,count'".into(),
        })?;
        let (year_s, month_s) = month_field.split_once('-').ok_or(Error::MalformedRow {
            line: line_no,
            message: format!("month '{month_field}' is not of the form YYYY-MM"),
        })?;
        let year: f64 = year_s.parse().map_err(|_| Error::MalformedRow {
            line: line_no,
            message: format!("bad year '{year_s}'"),
        })?;
        let month: u32 = month_s.parse().map_err(|_| Error::MalformedRow {
            line: line_no,
            message: format!("bad month '{month_s}'"),
        })?;
        if !(1..=12).contains(&month) {
            return Err(Error::MalformedRow {
                line: line_no,
                message: format!("month {month} outside 1..=12"),
            });
        }
        let count: f64 = count_field.parse().map_err(|_| Error::MalformedRow {
            line: line_no,
            message: format!("bad passenger count '{count_field}'"),
        })?;
        times.push(year + (month as f64 - 1.0) / 12.0);
        counts.push(count);
    }
    let spec_name = "airline";
    pool_from_columns(
        spec_name,
        vec![times],
        counts,
        |t_min, t_max| (array![t_min], array![t_max]),
    )
}

/// Parse the LGBB table (whitespace- or comma-separated, named header) into
/// a 2-D pool: `x1 = mach/6`, `x2 = (alpha+5)/35`, lift standardized over
/// the full dataset.
pub fn ingest_lgbb(path: &Path) -> Result<(Problem, BenchmarkSpec)> {
    let text = std::fs::read_to_string(path)?;
    let split = |line: &str| -> Vec<String> {
        line.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::MissingColumn {
            column: "mach".into(),
        });
    };
    let columns = split(header);
    let find = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MissingColumn {
                column: name.into(),
            })
    };
    let (i_mach, i_alpha, i_lift) = (find("mach")?, find("alpha")?, find("lift")?);
    let needed = i_mach.max(i_alpha).max(i_lift) + 1;

    let mut mach_col = Vec::new();
    let mut alpha_col = Vec::new();
    let mut lift_col = Vec::new();
    for (line_no, line) in lines {
        let fields = split(line);
        if fields.len() < needed {
            return Err(Error::MalformedRow {
                line: line_no,
                message: format!("{} fields, need at least {needed}", fields.len()),
            });
        }
        let parse = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| Error::MalformedRow {
                line: line_no,
                message: format!("'{}' is not a number", fields[i]),
            })
        };
        let mach = parse(i_mach)?;
        let alpha = parse(i_alpha)?;
        if !(0.0..=6.0).contains(&mach) || !(-5.0..=30.0).contains(&alpha) {
            return Err(Error::MalformedRow {
                line: line_no,
                message: format!("(mach, alpha) = ({mach}, {alpha}) outside [0,6] x [-5,30]"),
            });
        }
        mach_col.push(mach / 6.0);
        alpha_col.push((alpha + 5.0) / 35.0);
        lift_col.push(parse(i_lift)?);
    }
    pool_from_columns("lgbb", vec![mach_col, alpha_col], lift_col, |_, _| {
        (array![0.0, -5.0], array![6.0, 30.0])
    })
}

/// Assemble a pool problem from unit-scaled input columns and raw outputs.
fn pool_from_columns(
    name: &str,
    unit_cols: Vec<Vec<f64>>,
    raw_y: Vec<f64>,
    native_box: impl Fn(f64, f64) -> (Array1<f64>, Array1<f64>),
) -> Result<(Problem, BenchmarkSpec)> {
    let n = raw_y.len();
    if n < 2 {
        return Err(Error::ConfigInvalid {
            field: "pool".into(),
            message: format!("{name} needs at least two rows, found {n}"),
        });
    }
    let (x_unit, lo, hi) = if unit_cols.len() == 1 {
        // 1-D pools arrive in native units and are min-max scaled here.
        let t = &unit_cols[0];
        let (t_min, t_max) = t
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if t_max <= t_min {
            return Err(Error::ConfigInvalid {
                field: "pool".into(),
                message: format!("{name} inputs are all identical"),
            });
        }
        let x = Array2::from_shape_fn((n, 1), |(i, _)| (t[i] - t_min) / (t_max - t_min));
        let (lo, hi) = native_box(t_min, t_max);
        (x, lo, hi)
    } else {
        let d = unit_cols.len();
        let x = Array2::from_shape_fn((n, d), |(i, j)| unit_cols[j][i]);
        let (lo, hi) = native_box(0.0, 1.0);
        (x, lo, hi)
    };
    let (mean, std) = standardize_constants(&raw_y);
    if std == 0.0 {
        return Err(Error::ConfigInvalid {
            field: "pool".into(),
            message: format!("{name} outputs are constant; cannot standardize"),
        });
    }
    let y = Array1::from_iter(raw_y.iter().map(|v| (v - mean) / std));
    let spec = BenchmarkSpec {
        name: name.into(),
        dim: unit_cols.len(),
        native_lo: lo.clone(),
        native_hi: hi.clone(),
        norm_mean: mean,
        norm_std: std,
        norm_seed: None,
        noise_sd: 0.0,
    };
    let problem = Problem::pool(name, lo, hi, x_unit, y)?;
    Ok((problem, spec))
}

/// Look up a problem by its CLI-facing name. Dataset-backed problems load
/// from `data_dir` (`airline-passengers.csv`, `lgbb_original.txt`).
pub fn problem(name: &str, data_dir: &Path) -> Result<(Problem, BenchmarkSpec)> {
    match name {
        "sin" => Ok(synthetic_problem(Synthetic::Sin)),
        "branin" => Ok(synthetic_problem(Synthetic::Branin(BraninVariant::Standard))),
        "branin_printed" => Ok(synthetic_problem(Synthetic::Branin(BraninVariant::Printed))),
        "simionescu" => Ok(synthetic_problem(Synthetic::Simionescu)),
        "townsend" => Ok(synthetic_problem(Synthetic::Townsend)),
        "airline" => ingest_airline(&data_dir.join("airline-passengers.csv")),
        "lgbb" => ingest_lgbb(&data_dir.join("lgbb_original.txt")),
        other => Err(Error::ConfigInvalid {
            field: "problem".into(),
            message: format!(
                "unknown problem '{other}'; expected sin, branin, branin_printed, \
                 simionescu, townsend, airline, or lgbb"
            ),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fixture(name: &str) -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name)
    }

    #[test]
    fn sin_matches_hand_values_and_keeps_its_scale() {
        let f = Synthetic::Sin;
        assert_eq!(f.eval_native(array![0.0].view()), 0.0);
        assert_abs_diff_eq!(f.eval_native(array![PI / 20.0].view()), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.eval_native(array![0.25].view()), -0.95892, epsilon = 1e-5);
        let (_, spec) = synthetic_problem(Synthetic::Sin);
        assert_eq!((spec.norm_mean, spec.norm_std), (0.0, 1.0));
        assert_eq!(spec.norm_seed, None);
        assert_eq!(spec.noise_sd, 0.1);
    }

    #[test]
    fn branin_rescales_and_matches_both_variants() {
        let f = Synthetic::Branin(BraninVariant::Standard);
        let (lo, hi) = f.native_box();
        assert_eq!(lo, array![-5.0, 0.0]);
        assert_eq!(hi, array![10.0, 15.0]);
        // Known stationary value of the conventional form.
        assert_abs_diff_eq!(
            branin_raw(-PI, 12.275, BraninVariant::Standard),
            0.397887,
            epsilon = 1e-5
        );
        assert_abs_diff_eq!(
            branin_raw(9.42478, 2.475, BraninVariant::Standard),
            0.397887,
            epsilon = 1e-5
        );
        // The linear-term variant, evaluated as printed.
        assert_abs_diff_eq!(
            branin_raw(0.0, 0.0, BraninVariant::Printed),
            13.60212,
            epsilon = 1e-5
        );
        // Each variant standardizes against its own constants.
        let (_, std_spec) = synthetic_problem(f);
        let (_, printed_spec) = synthetic_problem(Synthetic::Branin(BraninVariant::Printed));
        assert_ne!(std_spec.norm_mean, printed_spec.norm_mean);
        assert_eq!(printed_spec.name, "branin_printed");
    }

    #[test]
    fn simionescu_and_townsend_match_hand_values() {
        let s = Synthetic::Simionescu;
        assert_eq!(s.eval_native(array![0.0, 0.7].view()), 0.0);
        assert_abs_diff_eq!(
            s.eval_native(array![1.25, 1.25].view()),
            0.15625,
            epsilon = 1e-12
        );
        assert_eq!(s.eval_unit_raw(array![0.5, 0.5].view()), 0.0);

        let t = Synthetic::Townsend;
        assert_abs_diff_eq!(t.eval_native(array![0.0, 0.0].view()), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            t.eval_native(array![0.0, 1.0].view()),
            -0.99003,
            epsilon = 1e-5
        );
        // Unit midpoint lands at native (0, -0.375).
        assert_abs_diff_eq!(
            t.eval_unit_raw(array![0.5, 0.5].view()),
            -(0.0375_f64.cos().powi(2)),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            t.eval_unit_raw(array![0.5, 0.5].view()),
            -0.99860,
            epsilon = 1e-5
        );
    }

    #[test]
    fn normalization_sample_standardizes_and_is_reproducible() {
        for fun in [
            Synthetic::Branin(BraninVariant::Standard),
            Synthetic::Simionescu,
            Synthetic::Townsend,
        ] {
            let (mean, std) = normalization_constants(fun);
            assert_eq!((mean, std), normalization_constants(fun));
            // Re-standardize the same sample and check the moments.
            let mut rng = ChaCha8Rng::seed_from_u64(NORM_SEED);
            let normed: Vec<f64> = (0..NORM_SAMPLES)
                .map(|_| {
                    let u = Array1::from_shape_fn(fun.dim(), |_| rng.gen_range(0.0..1.0));
                    (fun.eval_unit_raw(u.view()) - mean) / std
                })
                .collect();
            let (m2, s2) = standardize_constants(&normed);
            assert!(m2.abs() < 1e-9, "{}: residual mean {m2}", fun.name());
            assert!((s2 - 1.0).abs() < 1e-9, "{}: residual std {s2}", fun.name());
        }
    }

    #[test]
    fn problem_lookup_round_trips_the_unit_box() {
        let dir = fixture("");
        for name in ["sin", "branin", "simionescu", "townsend"] {
            let (problem, spec) = problem(name, &dir).unwrap();
            assert_eq!(problem.name, name);
            assert_eq!(problem.dim(), spec.dim);
            let mut rng = ChaCha8Rng::seed_from_u64(80);
            for _ in 0..50 {
                let u = Array1::from_shape_fn(spec.dim, |_| rng.gen_range(0.0..1.0));
                let native = problem.to_native(u.view());
                for d in 0..spec.dim {
                    assert!(native[d] >= spec.native_lo[d] && native[d] <= spec.native_hi[d]);
                }
                let back = problem.to_unit(native.view());
                for d in 0..spec.dim {
                    assert_abs_diff_eq!(u[d], back[d], epsilon = 1e-12);
                }
            }
        }
        let err = problem("rosenbrock", &dir).unwrap_err();
        assert!(err.to_string().contains("townsend"), "{err}");
    }

    #[test]
    fn airline_ingestion_hits_documented_endpoints() {
        let (problem, spec) = ingest_airline(&fixture("airline_sample.csv")).unwrap();
        assert!(problem.is_pool());
        assert_eq!(spec.noise_sd, 0.0);
        assert_eq!(spec.norm_seed, None);
        let crate::deploy::ProblemKind::Pool { x_unit, y } = &problem.kind else {
            panic!("airline must be a pool");
        };
        assert_eq!(x_unit.nrows(), 14);
        // 1949-01 is the earliest row and 1960-12 the latest.
        assert_eq!(x_unit[[0, 0]], 0.0);
        assert_eq!(x_unit[[13, 0]], 1.0);
        let (mean, std) = standardize_constants(&y.to_vec());
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-9);
    }

    #[test]
    fn airline_ingestion_reports_malformed_rows_by_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "Month,Passengers\n1949-01,112\n1949-13,99\n").unwrap();
        assert!(matches!(
            ingest_airline(&path),
            Err(Error::MalformedRow { line: 3, .. })
        ));
        std::fs::write(&path, "Month,Passengers\n1949-01,112\nnot-a-date,99\n").unwrap();
        assert!(matches!(
            ingest_airline(&path),
            Err(Error::MalformedRow { line: 3, .. })
        ));
        std::fs::write(&path, "Month,Passengers\n1949-01,112\n1949-02,many\n").unwrap();
        assert!(matches!(
            ingest_airline(&path),
            Err(Error::MalformedRow { line: 3, .. })
        ));
    }

    #[test]
    fn lgbb_ingestion_maps_inputs_and_standardizes_lift() {
        let (problem, spec) = ingest_lgbb(&fixture("lgbb_sample.txt")).unwrap();
        assert_eq!(problem.dim(), 2);
        assert_eq!(spec.native_lo, array![0.0, -5.0]);
        assert_eq!(spec.native_hi, array![6.0, 30.0]);
        let crate::deploy::ProblemKind::Pool { x_unit, y } = &problem.kind else {
            panic!("lgbb must be a pool");
        };
        // Row 1 has alpha = -5, row 11 has mach = 6, row 12 has alpha = 30.
        assert_eq!(x_unit[[0, 1]], 0.0);
        assert_eq!(x_unit[[10, 0]], 1.0);
        assert_eq!(x_unit[[11, 1]], 1.0);
        let (mean, std) = standardize_constants(&y.to_vec());
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lgbb_ingestion_requires_named_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no_lift.txt");
        std::fs::write(&path, "mach alpha beta drag\n1.0 0.0 0.0 0.05\n").unwrap();
        match ingest_lgbb(&path) {
            Err(Error::MissingColumn { column }) => assert_eq!(column, "lift"),
            other => panic!("expected missing column, got {other:?}"),
        }
        let path = dir.path().join("short_row.txt");
        std::fs::write(&path, "mach alpha lift\n1.0 0.0\n").unwrap();
        assert!(matches!(
            ingest_lgbb(&path),
            Err(Error::MalformedRow { line: 2, .. })
        ));
    }
}
