//! Subcommand bodies. Each takes a resolved config and writes only below
//! the context's output directory.

use std::fs;
use std::path::{Path, PathBuf};

use oscifit::exec;
use oscifit::harness::{
    assisted_fit, eval_am_noise_sweep, eval_benchmark, eval_partial, export, export_partial, init_from_prediction, svg,
    Experiment, ExperimentConfig,
};
use oscifit::lsfit::{fit_batch, write_fit_csv, FitProblem};
use oscifit::model::{auto_beta, train as train_model, HistoryRow, ModelBundle, TrainOptions};
use oscifit::signalgen::{make_dataset, Dataset, GenerationConfig, LatentRanges};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{BetaSweepCommand, CommandConfig, FitCommand, InitSource, PredictCommand, TrainCommand};
use crate::CliError;

/// Per-invocation facts shared by all subcommands.
#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    pub argv: Vec<String>,
    pub command: &'static str,
    pub threads: Option<usize>,
    pub check: bool,
}

/// Contents of `manifest.json`.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub argv: &'a [String],
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub parallel: bool,
    pub threads: Option<usize>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Print the config in check mode, otherwise create the output directory
/// and write the config echo and manifest. Returns whether to proceed.
fn start<C: CommandConfig>(ctx: &Context, cfg: &C) -> Result<bool, CliError> {
    let pretty = serde_json::to_string_pretty(cfg)? + "\n";
    if ctx.check {
        print!("{pretty}");
        return Ok(false);
    }
    fs::create_dir_all(&ctx.out)?;
    fs::write(ctx.out.join("config.json"), &pretty)?;
    let manifest = Manifest {
        tool: "oscifit",
        version: env!("CARGO_PKG_VERSION"),
        command: ctx.command,
        argv: &ctx.argv,
        config_sha256: hex(&Sha256::digest(serde_json::to_vec(cfg)?)),
        seed: cfg.seed(),
        parallel: exec::is_parallel(),
        threads: ctx.threads,
    };
    fs::write(ctx.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(true)
}

fn load_model(field: &str, path: &Path) -> Result<ModelBundle, CliError> {
    ModelBundle::load(path).map_err(|e| CliError::Runtime(format!("{field} {}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| CliError::Runtime(format!("data {}: {e}", path.display())))
}

/// Reject datasets the model was not trained for.
fn check_compatible(model: &ModelBundle, ds: &Dataset) -> Result<(), CliError> {
    if ds.grid.len() != model.arch.length {
        return Err(CliError::Runtime(format!(
            "data: T = {} but the model expects T = {}",
            ds.grid.len(),
            model.arch.length
        )));
    }
    if let Some(trained) = model.kinds() {
        let missing: Vec<String> = ds.kinds().into_iter().filter(|k| !trained.contains(k)).map(|k| k.to_string()).collect();
        if !missing.is_empty() {
            return Err(CliError::Runtime(format!(
                "data: contains kinds [{}] the model was not trained on",
                missing.join(", ")
            )));
        }
    }
    Ok(())
}

pub fn generate(ctx: &Context, cfg: GenerationConfig) -> Result<(), CliError> {
    if !start(ctx, &cfg)? {
        return Ok(());
    }
    let ds = make_dataset(&cfg)?;
    let path = ctx.out.join("dataset.osc");
    ds.save(&path)?;
    let kinds: Vec<String> = ds.kinds().iter().map(|k| k.to_string()).collect();
    println!("generated {} records (kinds {}, T = {}) -> {}", ds.len(), kinds.join(","), ds.grid.len(), path.display());
    Ok(())
}

fn write_history(model: &ModelBundle, path: &Path) -> Result<(), CliError> {
    model.write_history_csv(fs::File::create(path)?)?;
    Ok(())
}

fn run_training(cfg: &TrainCommand, dir: &Path) -> Result<ModelBundle, CliError> {
    let mut model = ModelBundle::new(&cfg.arch(), cfg.train.seed)?;
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.join("checkpoints")),
    };
    train_model(&mut model, &cfg.train, &opts)?;
    model.save(&dir.join("model.oscm"))?;
    write_history(&model, &dir.join("history.csv"))?;
    Ok(model)
}

fn print_final(model: &ModelBundle) {
    if let (Some(first), Some(last)) = (model.history.first(), model.history.last()) {
        println!(
            "validation mse_dec {:.4e} -> {:.4e}, mse_reg {:.4e} -> {:.4e}",
            first.mse_dec, last.mse_dec, first.mse_reg, last.mse_reg
        );
    }
}

/// Number of samples used to measure the balancing β.
const AUTO_BETA_SAMPLES: u64 = 256;
const AUTO_BETA_STREAM: u64 = 0xbe7a;

pub fn train(ctx: &Context, mut cfg: TrainCommand) -> Result<(), CliError> {
    if cfg.auto_beta && !ctx.check {
        let model = ModelBundle::new(&cfg.arch(), cfg.train.seed)?;
        let gen = GenerationConfig::new(&cfg.train.kinds, AUTO_BETA_SAMPLES, cfg.arch().length, cfg.train.seed ^ AUTO_BETA_STREAM);
        cfg.train.beta = auto_beta(&model, &make_dataset(&gen)?.records)?;
        println!("auto beta = {:.6e}", cfg.train.beta);
    }
    if !start(ctx, &cfg)? {
        return Ok(());
    }
    let model = run_training(&cfg, &ctx.out)?;
    print_final(&model);
    println!("model -> {}", ctx.out.join("model.oscm").display());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    beta: f64,
    mse_reg: f64,
    mse_dec: f64,
    weighted: f64,
}

pub fn beta_sweep(ctx: &Context, cfg: BetaSweepCommand) -> Result<(), CliError> {
    if !start(ctx, &cfg)? {
        return Ok(());
    }
    let mut rows = Vec::new();
    for &beta in &cfg.betas {
        let mut run = cfg.base.clone();
        run.train.beta = beta;
        let dir = ctx.out.join(format!("beta_{beta}"));
        fs::create_dir_all(&dir)?;
        println!("training with beta = {beta}");
        let model = run_training(&run, &dir)?;
        let last: &HistoryRow = model.history.last().expect("training records history");
        println!("beta = {beta}: final mse_reg {:.4e}, mse_dec {:.4e}", last.mse_reg, last.mse_dec);
        rows.push(SweepRow {
            beta,
            mse_reg: last.mse_reg,
            mse_dec: last.mse_dec,
            weighted: last.weighted,
        });
    }
    let mut w = csv::Writer::from_path(ctx.out.join("beta_sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let groups: Vec<(String, Option<f64>, Option<f64>)> =
        rows.iter().map(|r| (format!("β={}", r.beta), Some(r.mse_reg), Some(r.mse_dec))).collect();
    fs::write(
        ctx.out.join("beta_sweep.svg"),
        svg::bar_chart("Final validation losses by β", &groups, ("mse_reg", "mse_dec")),
    )?;
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn predict(ctx: &Context, cfg: PredictCommand) -> Result<(), CliError> {
    if !start(ctx, &cfg)? {
        return Ok(());
    }
    let model = load_model("model", &cfg.model)?;
    let ds = load_data(&cfg.data)?;
    check_compatible(&model, &ds)?;
    let x: Vec<f32> = ds.records.iter().flat_map(|r| r.noisy.iter().copied()).collect();
    let pred = model.predict_batch(&x)?;
    let (t, d) = (model.arch.length, model.arch.latent_dim);
    let layout = model.arch.layout();
    let ranges = LatentRanges::for_grid(ds.grid)?;

    let mut header = vec!["sample_id".to_string(), "kind".to_string()];
    header.extend(layout.names().iter().map(|n| format!("pred_{n}")));
    header.extend(["fc", "phi", "tau", "fm", "im", "sigma", "mse_reg", "mse_dec"].map(String::from));
    let mut lat = csv::Writer::from_path(ctx.out.join("latents.csv"))?;
    lat.write_record(&header)?;
    let mut den = csv::Writer::from_path(ctx.out.join("denoised.csv"))?;
    let mut dh = vec!["sample_id".to_string()];
    dh.extend((0..t).map(|i| format!("y{i}")));
    den.write_record(&dh)?;

    let (mut sum_reg, mut sum_dec) = (0.0, 0.0);
    for (i, rec) in ds.records.iter().enumerate() {
        let kind = rec.latents.kind;
        let enc: Vec<f64> = pred.latents[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
        let sig: Vec<f64> = pred.signals[i * t..(i + 1) * t].iter().map(|&v| v as f64).collect();
        let clean: Vec<f64> = rec.clean.iter().map(|&v| v as f64).collect();
        let p = init_from_prediction(&enc, kind, layout, &ranges)?;
        let reg = mse(&enc, &layout.encode(&rec.latents, &ranges));
        let dec = mse(&sig, &clean);
        sum_reg += reg;
        sum_dec += dec;
        let mut row = vec![i.to_string(), kind.to_string()];
        row.extend(enc.iter().map(|v| v.to_string()));
        row.extend([p.fc, p.phi, p.tau, p.fm, p.im, p.sigma, reg, dec].iter().map(|v| v.to_string()));
        lat.write_record(&row)?;
        let mut drow = vec![i.to_string()];
        drow.extend(sig.iter().map(|v| v.to_string()));
        den.write_record(&drow)?;
    }
    lat.flush()?;
    den.flush()?;
    let n = ds.len() as f64;
    println!(
        "predicted {} records: mean mse_reg {:.4e}, mean mse_dec {:.4e}",
        ds.len(),
        sum_reg / n,
        sum_dec / n
    );
    Ok(())
}

pub fn fit(ctx: &Context, cfg: FitCommand) -> Result<(), CliError> {
    if !start(ctx, &cfg)? {
        return Ok(());
    }
    let ds = load_data(&cfg.data)?;
    let inits = match cfg.init {
        InitSource::Truth => ds.records.iter().map(|r| r.latents).collect::<Vec<_>>(),
        InitSource::Model => {
            let model = load_model("model", cfg.model.as_deref().expect("validated"))?;
            check_compatible(&model, &ds)?;
            let x: Vec<f32> = ds.records.iter().flat_map(|r| r.noisy.iter().copied()).collect();
            let pred = model.predict_batch(&x)?;
            let d = model.arch.latent_dim;
            let ranges = LatentRanges::for_grid(ds.grid)?;
            ds.records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let enc: Vec<f64> = pred.latents[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
                    init_from_prediction(&enc, r.latents.kind, model.arch.layout(), &ranges)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let problems = ds
        .records
        .iter()
        .zip(&inits)
        .map(|(r, init)| {
            let mut p = FitProblem::new(r.latents.kind, r.noisy_physical(), *init)?;
            p.options.max_iter = cfg.max_iter;
            Ok(p)
        })
        .collect::<Result<Vec<_>, oscifit::lsfit::FitError>>()?;
    let results = fit_batch(&problems)
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map(|f| (i as u64, f)))
        .collect::<Result<Vec<_>, _>>()?;
    write_fit_csv(fs::File::create(ctx.out.join("fits.csv"))?, &results)?;
    let converged = results.iter().filter(|(_, r)| r.converged).count();
    let t = ds.grid.len() as f64;
    let mean_sse = results.iter().map(|(_, r)| r.sse / t).sum::<f64>() / results.len() as f64;
    println!("fitted {} records: {converged} converged, mean sse/T {:.4e}", results.len(), mean_sse);
    Ok(())
}

fn print_summary(dir: &Path) -> Result<(), CliError> {
    print!("{}", fs::read_to_string(dir.join("summary.json"))?);
    Ok(())
}

pub fn benchmark(ctx: &Context, cfg: ExperimentConfig) -> Result<(), CliError> {
    if !matches!(cfg.experiment, Experiment::BenchmarkMono | Experiment::BenchmarkAmNoiseSweep) {
        return Err(CliError::Config(vec![format!(
            "experiment: {:?} is not a benchmark; use the matching subcommand",
            cfg.experiment
        )]));
    }
    if !start(ctx, &cfg)? {
        return Ok(());
    }
    let model = load_model("checkpoint", &cfg.checkpoint)?;
    let records = match cfg.experiment {
        Experiment::BenchmarkAmNoiseSweep => eval_am_noise_sweep(&model, cfg.n_samples, cfg.seed, cfg.eval_options())?,
        _ => eval_benchmark(&model, cfg.kind, cfg.n_samples, cfg.seed, cfg.eval_options())?,
    };
    export(&records, &ctx.out, cfg.agreement_epsilon)?;
    print_summary(&ctx.out)
}

pub fn assisted(ctx: &Context, cfg: ExperimentConfig) -> Result<(), CliError> {
    if !start(ctx, &cfg)? {
        return Ok(());
    }
    let model = load_model("checkpoint", &cfg.checkpoint)?;
    let report = assisted_fit(&model, cfg.kind, cfg.n_samples, cfg.seed, cfg.agreement_epsilon, cfg.eval_options())?;
    export(&report.records, &ctx.out, cfg.agreement_epsilon)?;
    println!(
        "assisted fits agree with true-guess fits on {}/{} samples ({:.1}%)",
        report.agreed,
        report.n,
        100.0 * report.fraction
    );
    print_summary(&ctx.out)
}

pub fn partial(ctx: &Context, cfg: ExperimentConfig) -> Result<(), CliError> {
    if !start(ctx, &cfg)? {
        return Ok(());
    }
    let partial = load_model("checkpoint", &cfg.checkpoint)?;
    let spec_path = cfg.specialized_checkpoint.as_deref().expect("validated");
    let specialized = load_model("specialized_checkpoint", spec_path)?;
    let report = eval_partial(&partial, &specialized, cfg.n_samples, cfg.seed)?;
    export_partial(&report, &ctx.out)?;
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
    println!("{:<8} {:>12} {:>12}", "", "partial", "specialized");
    for r in &report.rows {
        println!("{:<8} {:>12} {:>12}", r.name, cell(r.partial), cell(r.specialized));
    }
    Ok(())
}
