//! `forgetting`: runs the feature-reader experiments, the oracle suite and the crosscoder study.
//!
//! Exit status: 0 success, 1 configuration error, 2 oracle failure, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use forgetting_core::exec::Execution;
use forgetting_core::experiment::{
    load_snapshots, render_report, run_crosscoder_study, run_depth_sweep, run_oracle_suite, run_probe_sweep, run_scenario, write_results,
    ExperimentConfig, ExperimentError, Profile, RunManifest, RunRecord, SavedRun, SuiteSettings, OUT_DIR_ENV,
};
use forgetting_core::metrics::{forgetting, MetricKind};
use forgetting_core::reader::{GradientMode, LossKind, OptimizerKind, ProbeMode};
use forgetting_core::tasks::Scenario;

const EXIT_CONFIG: u8 = 1;
const EXIT_ORACLE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "forgetting", version, about = "Feature-level catastrophic forgetting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed on one scenario and write metric tables.
    Scenario(RunArgs),
    /// Repeat the scenario at several encoder depths.
    DepthSweep(RunArgs),
    /// Repeat the scenario with several probes per task.
    ProbeSweep(RunArgs),
    /// Compare every closed-form prediction with the trainer on random instances.
    Oracle(OracleArgs),
    /// Train crosscoders on run snapshots and track each task's top features.
    Crosscoder(CrosscoderArgs),
    /// Render SVG charts from a result directory's summary.csv.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// 2000 samples, 1000 epochs, 3 seeds.
    #[arg(long, conflicts_with = "paper")]
    fast: bool,
    /// 20000 samples, 10000 epochs, 5 seeds.
    #[arg(long)]
    paper: bool,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    n_features: Option<usize>,
    #[arg(long)]
    m_dims: Option<usize>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    probes_per_task: Option<usize>,
    #[arg(long)]
    probe_mode: Option<ProbeMode>,
    #[arg(long)]
    probe_lr: Option<f64>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    gradient: Option<GradientMode>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    features_per_task: Option<usize>,
    /// Depths for depth-sweep, comma-separated.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    /// Probe counts for probe-sweep, comma-separated.
    #[arg(long, value_delimiter = ',')]
    probe_counts: Option<Vec<usize>>,
    #[arg(long)]
    crosscoder_d_cross: Option<usize>,
    #[arg(long)]
    crosscoder_k: Option<usize>,
    #[arg(long)]
    crosscoder_lr: Option<f64>,
    #[arg(long)]
    crosscoder_batch_size: Option<usize>,
    #[arg(long)]
    crosscoder_epochs: Option<usize>,
    #[arg(long)]
    crosscoder_lambda_max: Option<f64>,
    #[arg(long)]
    crosscoder_warmup_fraction: Option<f64>,
    #[arg(long)]
    crosscoder_probe_samples: Option<usize>,
    #[arg(long)]
    crosscoder_top_features: Option<usize>,
}

#[derive(Args, Debug)]
struct Output {
    /// Result directory; defaults to `$FORGETTING_OUT_DIR/<command>` or `results/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run jobs one after another instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct CrosscoderArgs {
    /// Result directory of an earlier run whose `snapshots/` are reused; trains afresh when absent.
    #[arg(long)]
    snapshots: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Result directory containing summary.csv.
    #[arg(long)]
    dir: PathBuf,
}

enum Failure {
    Config(anyhow::Error),
    Oracle(String),
    Runtime(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) | ExperimentError::MissingSnapshots(_) => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

impl ConfigArgs {
    /// defaults, then file, then profile, then individual flags
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if self.fast {
            c.apply_profile(Profile::Fast);
        }
        if self.paper {
            c.apply_profile(Profile::Paper);
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($field).+ = v.clone(); })*
            };
        }
        set!(
            scenario => scenario,
            n_features => n_features,
            m_dims => m_dims,
            n_tasks => n_tasks,
            n_samples => n_samples,
            sparsity => sparsity,
            seeds => seeds,
            optimizer => optimizer,
            learning_rate => learning_rate,
            epochs => epochs,
            depth => depth,
            probes_per_task => probes_per_task,
            probe_mode => probe_mode,
            probe_lr => probe_lr,
            loss => loss,
            weight_decay => weight_decay,
            gradient => gradient,
            eval_samples => eval_samples,
            depths => depths,
            probe_counts => probe_counts,
            crosscoder_k => crosscoder.k,
            crosscoder_lr => crosscoder.lr,
            crosscoder_batch_size => crosscoder.batch_size,
            crosscoder_epochs => crosscoder.epochs,
            crosscoder_lambda_max => crosscoder.lambda_max,
            crosscoder_warmup_fraction => crosscoder.warmup_fraction,
            crosscoder_probe_samples => crosscoder.probe_samples,
            crosscoder_top_features => crosscoder.top_features,
        );
        if self.features_per_task.is_some() {
            c.features_per_task = self.features_per_task;
        }
        if self.crosscoder_d_cross.is_some() {
            c.crosscoder.d_cross = self.crosscoder_d_cross;
        }
        c.validate()?;
        Ok(c)
    }
}

impl Output {
    fn dir(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"));
            root.join(command)
        })
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

fn print_final_forgetting(records: &[RunRecord]) {
    let mut points: Vec<_> = records.iter().map(|r| r.point).collect();
    points.dedup();
    for p in points {
        let runs: Vec<_> = records.iter().filter(|r| r.point == p).collect();
        let t = runs[0].series.n_tasks();
        let line: Vec<String> = MetricKind::ALL
            .into_iter()
            .map(|k| {
                let v: Vec<f64> = runs.iter().filter_map(|r| forgetting(&r.series, k, t).ok()).map(|f| f.value).collect();
                format!("F-{}={:.4}", k.as_str(), v.iter().sum::<f64>() / v.len().max(1) as f64)
            })
            .collect();
        println!("depth {} probes {} (seed mean at t={t}): {}", p.depth, p.probes, line.join(" "));
    }
}

fn run_and_write(command: &str, args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.config.resolve()?;
    let exec = args.output.exec();
    let start = Instant::now();
    let records = match command {
        "scenario" => run_scenario(&cfg, exec)?,
        "depth-sweep" => run_depth_sweep(&cfg, &cfg.depths, exec)?,
        _ => run_probe_sweep(&cfg, &cfg.probe_counts, exec)?,
    };
    let dir = args.output.dir(command);
    write_results(&dir, command, &cfg, &records, exec == Execution::Parallel && Execution::parallel_available(), start.elapsed().as_secs_f64())?;
    print_final_forgetting(&records);
    println!("wrote {}", dir.display());
    Ok(())
}

fn oracle(args: &OracleArgs) -> Result<(), Failure> {
    if args.instances == 0 {
        return Err(config_error(anyhow::anyhow!("--instances must be at least 1")));
    }
    let report = run_oracle_suite(SuiteSettings { seed: args.seed, instances: args.instances }, args.output.exec());
    for line in report.lines() {
        println!("{line}");
    }
    if let Some(dir) = &args.output.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
        let path = dir.join("oracle.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report).map_err(runtime)?)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
        Err(Failure::Oracle(format!("failed checks: {}", failed.join(", "))))
    }
}

fn crosscoder(args: &CrosscoderArgs) -> Result<(), Failure> {
    let cfg = args.config.resolve()?;
    let exec = args.output.exec();
    let start = Instant::now();
    let runs: Vec<SavedRun> = match &args.snapshots {
        Some(dir) => load_snapshots(dir)?,
        None => run_scenario(&cfg, exec)?
            .into_iter()
            .map(|r| SavedRun {
                sequence: cfg.sequence_config(r.seed, r.point.depth, r.point.probes),
                tasks: r.run.tasks,
                snapshots: r.run.snapshots,
            })
            .collect(),
    };
    let result = run_crosscoder_study(&cfg, &runs, exec)?;
    let dir = args.output.dir("crosscoder");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    result.write(&dir)?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).with_context(|| format!("writing {}", cfg_path.display())).map_err(runtime)?;
    let mut manifest = RunManifest::new("crosscoder", &cfg, exec == Execution::Parallel && Execution::parallel_available());
    manifest.total_seconds = start.elapsed().as_secs_f64();
    manifest.record_outputs(&dir)?;
    manifest.write(&dir)?;
    for r in result.intervention_summary() {
        println!("task {} {}: {:.4} ± {:.4}", r.task_i, r.metric, r.mean, r.std);
    }
    for (seed, hit, total) in &result.planted {
        println!("planted recovery seed {seed}: {hit}/{total}");
    }
    println!("tracked features inactive at some checkpoint: {}", result.inactive_tracked);
    println!("wrote {}", dir.display());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<(), Failure> {
    if !Path::new(&args.dir).join("summary.csv").exists() {
        return Err(config_error(anyhow::anyhow!("{} has no summary.csv", args.dir.display())));
    }
    for p in render_report(&args.dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::Scenario(a) => run_and_write("scenario", a),
        Command::DepthSweep(a) => run_and_write("depth-sweep", a),
        Command::ProbeSweep(a) => run_and_write("probe-sweep", a),
        Command::Oracle(a) => oracle(a),
        Command::Crosscoder(a) => crosscoder(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Oracle(msg)) => {
            eprintln!("oracle failure: {msg}");
            ExitCode::from(EXIT_ORACLE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
