//! The `oscifit` command-line tool.
//!
//! Every subcommand resolves a JSON config (defaults, then `--config`, then
//! flags and `--set key=value` overrides), writes the effective config and a
//! run manifest into `--out`, and puts all its artifacts there as well.
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    std::io::Error,
    csv::Error,
    serde_json::Error,
    oscifit::model::ModelError,
    oscifit::lsfit::FitError,
    oscifit::harness::HarnessError,
    oscifit::signalgen::DatasetError,
    oscifit::signalgen::SignalError
);

#[derive(Debug, Parser)]
#[command(name = "oscifit", version, about = "Synthetic oscillation data, network training and least-squares benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving every artifact of the run.
    #[arg(long)]
    pub out: PathBuf,
    /// Extra override, `key=value` with dotted keys (`adam.lr=0.002`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Validate and print the effective config without running.
    #[arg(long)]
    pub check: bool,
}

/// Training flags shared by `train` and `beta-sweep`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    /// `desk` or `full`.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long = "T")]
    pub length: Option<usize>,
    /// Comma-separated process kinds, e.g. `mono,am,fm`.
    #[arg(long)]
    pub kinds: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub sets: Option<usize>,
    #[arg(long)]
    pub samples_per_set: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a dataset file of noisy/clean signal pairs.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        kinds: Option<String>,
        #[arg(long)]
        n: Option<u64>,
        #[arg(long = "T")]
        length: Option<usize>,
    },
    /// Train a network and save it with its loss history.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        beta: Option<f64>,
        /// Balance the two loss terms on the untrained model.
        #[arg(long)]
        auto_beta: bool,
    },
    /// Denoise a dataset and regress its latent parameters.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Least-squares fit every record of a dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// `truth` or `model`.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Network versus true-guess least squares on fresh samples.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        kind: Option<String>,
        /// One AM draw at linearly increasing noise instead of fresh samples.
        #[arg(long)]
        sweep: bool,
        /// Leave σ out of the regression error.
        #[arg(long)]
        no_sigma: bool,
    },
    /// Fits started from network predictions versus from the truth.
    Assisted {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Partial-latent model versus an AM-specialized one.
    Partial {
        #[command(flatten)]
        common: Common,
        /// The partial (latent_dim 5) model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// The AM-specialized (latent_dim 7) model.
        #[arg(long)]
        specialized: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One training run per β with histories and final losses.
    BetaSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Comma-separated β values.
        #[arg(long)]
        betas: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Fit { .. } => "fit",
            Command::Benchmark { .. } => "benchmark",
            Command::Assisted { .. } => "assisted",
            Command::Partial { .. } => "partial",
            Command::BetaSweep { .. } => "beta-sweep",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Generate { common, .. }
            | Command::Train { common, .. }
            | Command::Predict { common, .. }
            | Command::Fit { common, .. }
            | Command::Benchmark { common, .. }
            | Command::Assisted { common, .. }
            | Command::Partial { common, .. }
            | Command::BetaSweep { common, .. } => common,
        }
    }
}

/// Overrides collected from flags, in the order they are applied.
#[derive(Default)]
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn opt<T: serde::Serialize>(&mut self, key: &str, v: &Option<T>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), json!(v)));
        }
    }

    fn list(&mut self, key: &str, v: &Option<String>) -> Result<(), CliError> {
        if let Some(s) = v {
            let items: Vec<Value> = s.split(',').map(|x| Value::String(x.trim().to_string())).collect();
            self.0.push((key.to_string(), Value::Array(items)));
        }
        Ok(())
    }

    fn numbers(&mut self, key: &str, v: &Option<String>) -> Result<(), CliError> {
        if let Some(s) = v {
            let items = s
                .split(',')
                .map(|x| x.trim().parse::<f64>().map(|f| json!(f)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Usage(format!("--{key}: {e}")))?;
            self.0.push((key.to_string(), Value::Array(items)));
        }
        Ok(())
    }

    fn train_flags(&mut self, f: &TrainFlags) -> Result<(), CliError> {
        self.opt("seed", &f.seed);
        self.opt("profile", &f.profile);
        self.opt("latent_dim", &f.latent_dim);
        self.opt("T", &f.length);
        self.list("kinds", &f.kinds)?;
        self.opt("epochs", &f.epochs);
        self.opt("sets", &f.sets);
        self.opt("samples_per_set", &f.samples_per_set);
        self.opt("batch", &f.batch);
        self.opt("adam.lr", &f.lr);
        Ok(())
    }
}

fn collect_overrides(cmd: &Command) -> Result<Vec<(String, Value)>, CliError> {
    let mut o = Overrides::default();
    match cmd {
        Command::Generate { seed, kinds, n, length, .. } => {
            o.opt("seed", seed);
            o.list("kinds", kinds)?;
            o.opt("n", n);
            o.opt("T", length);
        }
        Command::Train { flags, beta, auto_beta, .. } => {
            o.train_flags(flags)?;
            o.opt("beta", beta);
            if *auto_beta {
                o.opt("auto_beta", &Some(true));
            }
        }
        Command::Predict { model, data, .. } => {
            o.opt("model", model);
            o.opt("data", data);
        }
        Command::Fit { data, init, model, .. } => {
            o.opt("data", data);
            o.opt("init", init);
            o.opt("model", model);
        }
        Command::Benchmark {
            model,
            n,
            seed,
            kind,
            sweep,
            no_sigma,
            ..
        } => {
            o.opt("checkpoint", model);
            o.opt("n_samples", n);
            o.opt("seed", seed);
            o.opt("kind", kind);
            if *sweep {
                o.opt("experiment", &Some("benchmark_am_noise_sweep"));
            }
            if *no_sigma {
                o.opt("include_sigma", &Some(false));
            }
        }
        Command::Assisted {
            model,
            n,
            seed,
            kind,
            epsilon,
            ..
        } => {
            o.opt("experiment", &Some("assisted_fit"));
            o.opt("checkpoint", model);
            o.opt("n_samples", n);
            o.opt("seed", seed);
            o.opt("kind", kind);
            o.opt("agreement_epsilon", epsilon);
        }
        Command::Partial {
            model,
            specialized,
            n,
            seed,
            ..
        } => {
            o.opt("experiment", &Some("partial"));
            o.opt("checkpoint", model);
            o.opt("specialized_checkpoint", specialized);
            o.opt("n_samples", n);
            o.opt("seed", seed);
        }
        Command::BetaSweep { flags, betas, .. } => {
            o.train_flags(flags)?;
            o.numbers("betas", betas)?;
        }
    }
    let common = cmd.common();
    for s in &common.set {
        o.0.push(config::parse_override(s)?);
    }
    if matches!(cmd, Command::Benchmark { .. } | Command::Assisted { .. } | Command::Partial { .. }) {
        o.0.push(("out".into(), json!(common.out)));
    }
    Ok(o.0)
}

/// Apply `OSCIFIT_THREADS` to the worker pool.
fn configure_threads() -> Result<Option<usize>, CliError> {
    match std::env::var("OSCIFIT_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| CliError::Usage(format!("OSCIFIT_THREADS = `{v}`: must be a positive integer")))?;
            oscifit::exec::configure_threads(n);
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    let words: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli.command, &words) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: &Command, argv: &[String]) -> Result<(), CliError> {
    let threads = configure_threads()?;
    let overrides = collect_overrides(cmd)?;
    let common = cmd.common();
    let ctx = commands::Context {
        out: common.out.clone(),
        argv: argv.to_vec(),
        command: cmd.name(),
        threads,
        check: common.check,
    };
    let file = common.config.as_deref();
    use config::resolve;
    match cmd {
        Command::Generate { .. } => commands::generate(&ctx, resolve(file, &overrides)?),
        Command::Train { .. } => commands::train(&ctx, resolve(file, &overrides)?),
        Command::Predict { .. } => commands::predict(&ctx, resolve(file, &overrides)?),
        Command::Fit { .. } => commands::fit(&ctx, resolve(file, &overrides)?),
        Command::Benchmark { .. } => commands::benchmark(&ctx, resolve(file, &overrides)?),
        Command::Assisted { .. } => commands::assisted(&ctx, resolve(file, &overrides)?),
        Command::Partial { .. } => commands::partial(&ctx, resolve(file, &overrides)?),
        Command::BetaSweep { .. } => commands::beta_sweep(&ctx, resolve(file, &overrides)?),
    }
}
