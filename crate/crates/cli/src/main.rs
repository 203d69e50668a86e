use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adakde::finetune::{calibrate, FinetuneConfig};
use adakde::harness::{emit_report, read_runs_csv, run_experiment, EvalReport, ExperimentConfig, Method};
use adakde::io::{read_sample_csv, write_factors_csv, write_task_dir, TaskDir};
use adakde::recommender::{
    load_checkpoint, recommend_factors, save_checkpoint, train, ArchConfig, GmdTaskSource, RecommenderParams, TaskSource,
    TrainConfig,
};
use adakde::rng::stream;
use adakde::targets::{ScenarioFamily, ScenarioSpec};
use adakde::Error;
use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "adakde", version, about = "Adaptive KDE experiments and neural bandwidth recommendation")]
struct Cli {
    /// Worker threads (defaults to ADAKDE_JOBS, then all cores).
    #[arg(long, global = true, env = "ADAKDE_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write GMD_F pre-training tasks to a directory.
    GenTasks(PretrainArgs),
    /// Pre-train a recommender and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: PretrainArgs,
        /// Read tasks written by gen-tasks instead of regenerating them.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Write recommended bandwidth factors for a sample file.
    Recommend(FactorArgs),
    /// Calibrate the global scale of recommended factors and write the scaled factors.
    Finetune(FactorArgs),
    /// Run a benchmark experiment.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated method tags, replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Rebuild tables and plot data from a raw runs CSV.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FactorArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Headerless CSV, one point per row.
    #[arg(long)]
    sample: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Pre-training description. `seed` drives the task prior, initialisation and training order.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainFile {
    d: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    train: TrainConfig,
    arch: Option<ArchConfig>,
}

impl PretrainFile {
    fn load(path: &Path, seed: Option<u64>) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut file: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed {
            file.seed = s;
        }
        file.train.seed = file.seed;
        file.train.validate()?;
        let arch = file.arch();
        arch.validate()?;
        if arch.d != file.d {
            return Err(Error::Config(format!("arch.d = {} but d = {}", arch.d, file.d)));
        }
        Ok(file)
    }

    fn arch(&self) -> ArchConfig {
        self.arch.clone().unwrap_or_else(|| ArchConfig::desk(self.d))
    }

    fn source(&self) -> Result<GmdTaskSource, Error> {
        let spec = ScenarioSpec::new(ScenarioFamily::GmdF, self.d, self.seed)?;
        GmdTaskSource::new(spec, &self.train, self.arch().k_nn)
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::BadMagic | Error::VersionMismatch { .. } | Error::Truncated(_))
                | Some(Error::ChecksumMismatch { .. } | Error::MalformedHeader(_) | Error::Io { .. })
        )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start {jobs} worker threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::GenTasks(args) => {
            let file = PretrainFile::load(&args.config, args.seed)?;
            let source = file.source()?;
            let spec = ScenarioSpec::new(ScenarioFamily::GmdF, file.d, file.seed)?;
            write_task_dir(&args.out, &source, &spec, &file.train, file.arch().k_nn)?;
            eprintln!("wrote {} tasks to {}", source.len(), args.out.display());
        }
        Command::Pretrain { common, tasks } => {
            let file = PretrainFile::load(&common.config, common.seed)?;
            let source: Box<dyn TaskSource> = match tasks {
                Some(dir) => {
                    let d = TaskDir::open(&dir)?;
                    let m = d.manifest();
                    if m.spec.d != file.d || m.k_nn != file.arch().k_nn {
                        return Err(Error::Config(format!(
                            "{} holds d = {}, k_nn = {} tasks; config needs d = {}, k_nn = {}",
                            dir.display(),
                            m.spec.d,
                            m.k_nn,
                            file.d,
                            file.arch().k_nn
                        ))
                        .into());
                    }
                    Box::new(d)
                }
                None => Box::new(file.source()?),
            };
            let init = RecommenderParams::init(file.arch(), &mut stream(file.seed, &["init".into()]))?;
            let outcome = train(init, &file.train, source.as_ref(), |s| {
                eprintln!("epoch {:>3}  loss {:.6}  steps {}", s.epoch + 1, s.mean_loss, s.steps);
            })?;
            save_checkpoint(&outcome.params, &common.out)?;
            eprintln!("saved {}", common.out.display());
        }
        Command::Recommend(args) => {
            let params = load_checkpoint(&args.checkpoint)?;
            let sample = read_sample_csv(&args.sample)?;
            write_factors_csv(&recommend_factors(&params, &sample)?, &args.out)?;
        }
        Command::Finetune(args) => {
            let params = load_checkpoint(&args.checkpoint)?;
            let sample = read_sample_csv(&args.sample)?;
            let pre = recommend_factors(&params, &sample)?;
            let result = calibrate(&sample, &pre, &FinetuneConfig::default())?;
            write_factors_csv(&result.factors(&pre)?, &args.out)?;
            println!(
                "gamma* = {}  objective {} (at gamma = 1: {})",
                result.gamma_star, result.objective_at_gamma_star, result.objective_at_one
            );
        }
        Command::Eval { config, out, seed, methods, checkpoint } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(list) = methods {
                cfg.methods = list.iter().map(|m| m.parse::<Method>()).collect::<Result<_, _>>()?;
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            cfg.validate()?;
            let report = run_experiment(&cfg)?;
            emit_report(&report, &out).with_context(|| format!("writing report to {}", out.display()))?;
            let failed = report.failed_runs();
            eprintln!("{} runs, {failed} failed; results in {}", report.runs.len(), out.display());
            return Ok(match failed {
                0 => 0,
                f if f == report.runs.len() => EXIT_RUNTIME,
                _ => EXIT_PARTIAL,
            });
        }
        Command::Report { runs, out } => {
            let records = read_runs_csv(&runs)?;
            emit_report(&EvalReport::from_runs(records, None, None), &out)?;
        }
    }
    Ok(0)
}
