//! `evtplus`: synthetic data generation, tokenization, training,
//! evaluation, profiling and gradient checks from the command line.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use evtplus::nn::Fault;
use thiserror::Error;

use config::{keys_help, RunConfig, TaskKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl From<evtplus::trainer::TrainError> for CliError {
    fn from(e: evtplus::trainer::TrainError) -> Self {
        commands::map_train_error(e)
    }
}

impl From<evtplus::model::ModelError> for CliError {
    fn from(e: evtplus::model::ModelError) -> Self {
        match e {
            evtplus::model::ModelError::Config(m) => Self::Usage(m),
            other => Self::Data(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GenTask {
    Gesture,
    Depth,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Clf,
    Depth,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Clf => TaskKind::Clf,
            TaskArg::Depth => TaskKind::Depth,
        }
    }
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, task: TaskKind) -> Result<RunConfig, CliError> {
        RunConfig::load(task, self.config.as_deref(), &self.set)
    }
}

#[derive(Parser)]
#[command(
    name = "evtplus",
    version,
    about = "Event-camera tokenization and latent-memory transformers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic recordings and an index.
    GenData {
        #[arg(long, value_enum)]
        task: GenTask,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Dump the tokens of one recording as CSV.
    Tokenize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        dump_csv: PathBuf,
        #[arg(long, value_enum, default_value = "clf")]
        task: TaskArg,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and write a checkpoint with metrics.
    Train {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint that holds optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics CSV path (default: `<out>.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Report accuracy or depth error of a checkpoint.
    Eval {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Depth cutoffs in meters.
        #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
        cutoffs: Vec<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// FLOP, sparsity and latency report.
    Profile {
        #[arg(long, value_enum, default_value = "clf")]
        task: TaskArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference gradient checks on tiny models.
    GradCheck {
        /// Overrides `gc_threshold`.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, hide = true)]
        inject_fault: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData {
            task,
            out,
            seed,
            count,
            cfg,
        } => {
            let task = match task {
                GenTask::Gesture => TaskKind::Clf,
                GenTask::Depth => TaskKind::Depth,
            };
            let mut c = cfg.load(task)?;
            c.apply_text(&format!("seed = {seed}"))?;
            data::generate(task, &out, seed, count, &c)
        }
        Cmd::Tokenize {
            input,
            dump_csv,
            task,
            cfg,
        } => commands::tokenize(&input, &dump_csv, &cfg.load(task.into())?),
        Cmd::Train {
            task,
            data,
            out,
            resume,
            metrics,
            cfg,
        } => commands::train(
            commands::TrainArgs {
                data: &data,
                out: &out,
                resume: resume.as_deref(),
                metrics: metrics.as_deref(),
            },
            &cfg.load(task.into())?,
        ),
        Cmd::Eval {
            task,
            ckpt,
            data,
            cutoffs,
            cfg,
        } => {
            let saved = commands::checkpoint_config(&ckpt);
            let file = cfg.config.clone().or(saved);
            let c = RunConfig::load(task.into(), file.as_deref(), &cfg.set)?;
            commands::eval(&ckpt, &data, &cutoffs, &c)
        }
        Cmd::Profile {
            task,
            data,
            csv,
            cfg,
        } => commands::profile(data.as_deref(), csv.as_deref(), &cfg.load(task.into())?),
        Cmd::GradCheck {
            threshold,
            inject_fault,
            cfg,
        } => {
            let c = cfg.load(TaskKind::Clf)?;
            let limit = threshold.unwrap_or(c.float("gc_threshold"));
            let fault = inject_fault.then_some(Fault::ScaleGeluGrad(1.05));
            let results =
                commands::grad_checks(c.int("seed") as u64, c.usize("gc_samples")?, fault)?;
            let mut failed = false;
            for (name, err, worst) in &results {
                let ok = *err < limit;
                failed |= !ok;
                println!(
                    "{name:<22} max rel err {err:.3e} (at {worst}) {}",
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            if failed {
                Err(CliError::Numerical(format!(
                    "gradient error above {limit:e}"
                )))
            } else {
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    let help = keys_help();
    let mut command = Cli::command().after_help(help.clone());
    for name in [
        "gen-data",
        "tokenize",
        "train",
        "eval",
        "profile",
        "grad-check",
    ] {
        command = command.mut_subcommand(name, |s| s.after_help(help.clone()));
    }
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
