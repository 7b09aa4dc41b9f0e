//! `amal` — train, deploy, and evaluate amortized active-learning policies.
//!
//! Exit codes: 0 on success, 2 for configuration/argument problems, 3 for
//! numerical failures at runtime. Every output directory receives exactly
//! one `manifest.toml` capturing the command, configuration snapshot, seeds
//! and artifact hashes needed to reproduce it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use amal_core::deploy::{deploy_gp_al, deploy_policy, deploy_random, read_trace, write_trace};
use amal_core::error::{Error, Result};
use amal_core::{benchmarks, evalreport, policy, selftest, trainer};

#[derive(Parser)]
#[command(name = "amal", version, about = "Amortized active learning pipeline")]
struct Cli {
    /// Cap on worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train query policies on simulated GP functions, one run per seed.
    Train(TrainArgs),
    /// Run a policy checkpoint or a baseline on a benchmark problem.
    Deploy(DeployArgs),
    /// Aggregate trace files into report.csv and bar charts.
    Report(ReportArgs),
    /// Run the condensed oracle suites.
    Selftest,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Training configuration (TOML with a [prior] section).
    #[arg(long)]
    config: PathBuf,
    /// Seeds to train, one run directory each.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Policy,
    #[value(name = "gp_al")]
    GpAl,
    Random,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Policy => "policy",
            Method::GpAl => "gp_al",
            Method::Random => "random",
        }
    }
}

#[derive(clap::Args)]
struct DeployArgs {
    /// Selection method.
    #[arg(long, value_enum)]
    method: Method,
    /// Problem name: sin, branin, branin_printed, simionescu, townsend,
    /// airline, or lgbb.
    #[arg(long)]
    problem: String,
    /// Policy checkpoint (required for --method policy).
    #[arg(long, required_if_eq("method", "policy"))]
    ckpt: Option<PathBuf>,
    /// Seeds to deploy, one trace file each.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Query budget; defaults to 10 for 1-D problems and 20 for 2-D.
    #[arg(long = "T", visible_alias = "t-steps")]
    t_steps: Option<usize>,
    /// Initial design size.
    #[arg(long, default_value_t = 1)]
    n_init: usize,
    /// Directory holding dataset files for airline/lgbb.
    #[arg(long, env = "AMAL_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Directory of trace files produced by `amal deploy`.
    #[arg(long)]
    traces: PathBuf,
    /// Directory holding dataset files for airline/lgbb.
    #[arg(long, env = "AMAL_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Reproducibility record written once per output directory.
#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    seeds: Vec<u64>,
    /// Artifact paths relative to the manifest.
    outputs: Vec<String>,
    /// Full training configuration snapshot.
    #[serde(skip_serializing_if = "Option::is_none")]
    train_config: Option<toml::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    deploy: Option<DeploySnapshot>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<ReportSnapshot>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    sha256: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct DeploySnapshot {
    method: String,
    problem: String,
    t_steps: usize,
    n_init: usize,
    data_dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    ckpt: Option<String>,
}

#[derive(Serialize)]
struct ReportSnapshot {
    traces: String,
    data_dir: String,
}

impl Manifest {
    fn new(command: &str) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seeds: Vec::new(),
            outputs: Vec::new(),
            train_config: None,
            deploy: None,
            report: None,
            sha256: BTreeMap::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::ConfigInvalid {
            field: "manifest".into(),
            message: e.to_string(),
        })?;
        std::fs::write(dir.join("manifest.toml"), text)?;
        Ok(())
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn relative_name(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg: trainer::TrainConfig =
        toml::from_str(&text).map_err(|e| Error::ConfigInvalid {
            field: "config".into(),
            message: format!("{}: {e}", args.config.display()),
        })?;
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;

    let mut manifest = Manifest::new("train");
    manifest.seeds = args.seeds.clone();
    manifest.train_config = Some(
        toml::Value::try_from(&cfg).map_err(|e| Error::ConfigInvalid {
            field: "config".into(),
            message: e.to_string(),
        })?,
    );

    let mut records = Vec::with_capacity(args.seeds.len());
    for &seed in &args.seeds {
        cfg.seed = seed;
        let record = trainer::train(&cfg, &args.out)?;
        println!(
            "seed {seed}: {} steps, final loss {:.6}, {:.1} s",
            record.step_losses.len(),
            record.step_losses.last().copied().unwrap_or(f64::NAN),
            record.total_wall_ms / 1e3
        );
        for ckpt in &record.checkpoints {
            manifest
                .sha256
                .insert(relative_name(ckpt, &args.out), sha256_file(ckpt)?);
        }
        manifest
            .outputs
            .push(relative_name(&record.record_path, &args.out));
        records.push(record);
    }

    let best = trainer::select_best(&records)?.to_path_buf();
    let link = args.out.join("best");
    let target = best.strip_prefix(&args.out).unwrap_or(&best).to_path_buf();
    if link.symlink_metadata().is_ok() {
        std::fs::remove_file(&link)?;
    }
    std::os::unix::fs::symlink(&target, &link)?;
    println!("best checkpoint: {}", target.display());
    manifest.outputs.push("best".into());
    manifest.write(&args.out)
}

fn cmd_deploy(args: &DeployArgs) -> Result<()> {
    let (problem, _spec) = benchmarks::problem(&args.problem, &args.data_dir)?;
    let t_steps = args
        .t_steps
        .unwrap_or(if problem.dim() == 1 { 10 } else { 20 });
    let params_and_hash = match args.method {
        Method::Policy => {
            let ckpt = args.ckpt.as_ref().expect("clap enforces --ckpt");
            Some((policy::load_checkpoint(ckpt)?, sha256_file(ckpt)?))
        }
        _ => None,
    };
    std::fs::create_dir_all(&args.out)?;

    let mut manifest = Manifest::new("deploy");
    manifest.seeds = args.seeds.clone();
    manifest.deploy = Some(DeploySnapshot {
        method: args.method.name().into(),
        problem: args.problem.clone(),
        t_steps,
        n_init: args.n_init,
        data_dir: args.data_dir.display().to_string(),
        ckpt: args.ckpt.as_ref().map(|p| p.display().to_string()),
    });
    if let (Some((_, hash)), Some(ckpt)) = (&params_and_hash, &args.ckpt) {
        manifest
            .sha256
            .insert(ckpt.display().to_string(), hash.clone());
    }

    for &seed in &args.seeds {
        let trace = match &params_and_hash {
            Some((params, hash)) => deploy_policy(
                params,
                &problem,
                args.n_init,
                t_steps,
                seed,
                Some(hash.clone()),
            )?,
            None => match args.method {
                Method::GpAl => deploy_gp_al(&problem, args.n_init, t_steps, seed)?,
                Method::Random => deploy_random(&problem, args.n_init, t_steps, seed)?,
                Method::Policy => unreachable!("handled above"),
            },
        };
        let file = format!("{}_{}_seed{seed}.toml", args.problem, args.method.name());
        let path = args.out.join(&file);
        write_trace(&trace, &path)?;
        println!(
            "{file}: {} observations, {:.1} ms selection time",
            trace.final_dataset().len(),
            trace.total_query_ms()
        );
        manifest.outputs.push(file);
    }
    manifest.write(&args.out)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut traces = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.traces)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "toml")
                && p.file_name().is_some_and(|n| n != "manifest.toml")
        })
        .collect();
    entries.sort();
    for path in &entries {
        traces.push(read_trace(path)?);
    }
    if traces.is_empty() {
        return Err(Error::ConfigInvalid {
            field: "traces".into(),
            message: format!("no trace files found in {}", args.traces.display()),
        });
    }

    let mut names: Vec<String> = traces.iter().map(|t| t.problem.clone()).collect();
    names.sort();
    names.dedup();
    let problems = names
        .iter()
        .map(|n| benchmarks::problem(n, &args.data_dir).map(|(p, _)| p))
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(&args.out)?;
    let rows = evalreport::build_report(&traces, &problems, &args.out)?;
    println!("problem      method   n  rmse_mean  rmse_se    time_ms    p_vs_random");
    for r in &rows {
        println!(
            "{:<12} {:<8} {:<2} {:<10.4} {:<10.4} {:<10.1} {}{}",
            r.problem,
            r.method,
            r.n_seeds,
            r.rmse_mean,
            r.rmse_se,
            r.time_mean_ms,
            r.p_vs_random
                .map(|p| format!("{p:.4}"))
                .unwrap_or_else(|| "-".into()),
            if r.star { " *" } else { "" }
        );
    }

    let mut manifest = Manifest::new("report");
    manifest.report = Some(ReportSnapshot {
        traces: args.traces.display().to_string(),
        data_dir: args.data_dir.display().to_string(),
    });
    manifest.outputs.push("report.csv".into());
    for name in &names {
        manifest.outputs.push(format!("{name}_rmse.svg"));
        manifest.outputs.push(format!("{name}_time.svg"));
    }
    manifest
        .sha256
        .insert("report.csv".into(), sha256_file(&args.out.join("report.csv"))?);
    manifest.write(&args.out)
}

fn cmd_selftest() -> ExitCode {
    let mut failed = 0;
    for check in selftest::checks() {
        let clock = Instant::now();
        match (check.run)() {
            Ok(()) => println!(
                "ok   {} ({} ms)",
                check.name,
                clock.elapsed().as_millis()
            ),
            Err(msg) => {
                failed += 1;
                println!("FAIL {}: {msg}", check.name);
            }
        }
    }
    if failed == 0 {
        println!("all checks passed");
        ExitCode::SUCCESS
    } else {
        eprintln!("error: {failed} self-check(s) failed");
        ExitCode::from(3)
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // Ignore the error if a pool already exists (repeat initialization).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Deploy(args) => cmd_deploy(args),
        Command::Report(args) => cmd_report(args),
        Command::Selftest => return cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
