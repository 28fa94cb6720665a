//! Experiments comparing the network with least-squares fits.
//!
//! Everything is scored in normalized space: signals under the noisy
//! series' min-max map, latents under [`LatentLayout::encode`]. A
//! [`Predictor`] abstracts the network so the harness can be checked with a
//! [`TruthStub`] that returns the exact answers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::lsfit::{fit_to_clean, lm_fit, FitError, FitProblem, FitResult};
use crate::model::{ModelBundle, ModelError};
use crate::rng::{self, NoiseStream};
use crate::signalgen::{
    generate, sample_latents, DatasetError, GenerationConfig, LatentLayout, LatentParams, LatentRanges, ProcessKind, Record,
    SignalError, SignalPair, TimeGrid, WaveOptions, CLAMP_BAND,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("export i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("export csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("export json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid experiment configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("model was trained on {trained:?}, cannot evaluate {requested}")]
    KindMismatch {
        trained: Vec<ProcessKind>,
        requested: ProcessKind,
    },
    #[error("{role} model has latent_dim {got}, expected {expected}")]
    LatentDim {
        role: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("nothing to export")]
    Empty,
}

/// Default relative SSE tolerance of the assisted-fit agreement rule.
pub const AGREEMENT_EPSILON: f64 = 0.01;
/// Absolute floor of the agreement rule.
pub const AGREEMENT_FLOOR: f64 = 1e-9;

/// A test sample with its network input and scoring targets.
#[derive(Debug, Clone)]
pub struct TestSample {
    pub id: u64,
    pub pair: SignalPair,
    /// Normalized noisy series at storage precision (network input).
    pub input: Vec<f32>,
    /// Normalized clean series (scoring target).
    pub clean: Vec<f64>,
}

impl TestSample {
    pub fn new(id: u64, pair: SignalPair) -> Self {
        let rec = Record::from_pair(&pair);
        let clean = pair.clean_normalized();
        Self {
            id,
            pair,
            input: rec.noisy,
            clean,
        }
    }
}

/// Output for one sample, in normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    pub signal: Vec<f64>,
    pub latents: Vec<f64>,
}

/// Something that maps noisy samples to denoised signals and latents.
pub trait Predictor: Sync {
    fn length(&self) -> usize;
    fn latent_dim(&self) -> usize;
    /// Kinds the predictor is valid for; `None` means any.
    fn kinds(&self) -> Option<Vec<ProcessKind>>;
    fn predict(&self, samples: &[TestSample]) -> Result<Vec<PredictorOutput>, HarnessError>;
}

impl Predictor for ModelBundle {
    fn length(&self) -> usize {
        self.arch.length
    }

    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn kinds(&self) -> Option<Vec<ProcessKind>> {
        ModelBundle::kinds(self).map(|k| k.to_vec())
    }

    fn predict(&self, samples: &[TestSample]) -> Result<Vec<PredictorOutput>, HarnessError> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let x: Vec<f32> = samples.iter().flat_map(|s| s.input.iter().copied()).collect();
        let p = self.predict_batch(&x)?;
        let (t, d) = (self.arch.length, self.arch.latent_dim);
        Ok((0..samples.len())
            .map(|i| PredictorOutput {
                signal: p.signals[i * t..(i + 1) * t].iter().map(|&v| v as f64).collect(),
                latents: p.latents[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect(),
            })
            .collect())
    }
}

/// Oracle returning the true clean signal and encoded latents.
#[derive(Debug, Clone, Copy)]
pub struct TruthStub {
    pub length: usize,
    pub layout: LatentLayout,
}

impl Predictor for TruthStub {
    fn length(&self) -> usize {
        self.length
    }

    fn latent_dim(&self) -> usize {
        self.layout.dim()
    }

    fn kinds(&self) -> Option<Vec<ProcessKind>> {
        None
    }

    fn predict(&self, samples: &[TestSample]) -> Result<Vec<PredictorOutput>, HarnessError> {
        let ranges = LatentRanges::for_grid(TimeGrid::new(self.length)?)?;
        Ok(samples
            .iter()
            .map(|s| PredictorOutput {
                signal: s.clean.clone(),
                latents: self.layout.encode(&s.pair.latents, &ranges),
            })
            .collect())
    }
}

/// Per-sample benchmark metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: u64,
    pub kind: ProcessKind,
    pub sigma_true: f64,
    pub dnn_mse_reg: f64,
    pub dnn_mse_dec: f64,
    pub fit_mse_reg: f64,
    pub fit_mse_dec: f64,
    pub true_guess_sse: f64,
    pub true_guess_converged: bool,
    pub assisted_sse: Option<f64>,
    pub assisted_converged: Option<bool>,
}

impl EvalRecord {
    /// The agreement rule `|assisted − true| ≤ ε·max(true, floor)`; `None`
    /// without an assisted fit.
    pub fn agrees(&self, epsilon: f64) -> Option<bool> {
        self.assisted_sse
            .map(|a| (a - self.true_guess_sse).abs() <= epsilon * self.true_guess_sse.max(AGREEMENT_FLOOR))
    }
}

/// Scoring switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Include σ (and the fit's `sigma_hat`) in the regression MSE.
    pub include_sigma: bool,
    pub wave: WaveOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            include_sigma: true,
            wave: WaveOptions::default(),
        }
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Squared errors of the latent vector, optionally without σ (the last
/// component in both layouts).
fn latent_mse(pred: &[f64], truth: &[f64], include_sigma: bool) -> f64 {
    let k = if include_sigma { truth.len() } else { truth.len() - 1 };
    mse(&pred[..k], &truth[..k])
}

fn check_predictor(pred: &dyn Predictor, kind: ProcessKind) -> Result<(), HarnessError> {
    if let Some(trained) = pred.kinds() {
        if !trained.contains(&kind) {
            return Err(HarnessError::KindMismatch { trained, requested: kind });
        }
    }
    Ok(())
}

/// Fresh test samples of one kind; sample `i` is sample `i` of the
/// generation config `(kind, n, T, seed)`.
pub fn test_samples(kind: ProcessKind, n: usize, length: usize, seed: u64) -> Result<Vec<TestSample>, HarnessError> {
    if n == 0 {
        return Err(HarnessError::Config(vec!["n_samples must be at least 1".into()]));
    }
    let cfg = GenerationConfig::new(&[kind], n as u64, length, seed);
    let pairs = cfg.samples()?;
    Ok(pairs.into_iter().enumerate().map(|(i, p)| TestSample::new(i as u64, p)).collect())
}

fn true_guess_fit(s: &TestSample, wave: WaveOptions) -> Result<FitResult, HarnessError> {
    let mut problem = FitProblem::new(s.pair.latents.kind, s.pair.noisy.clone(), s.pair.latents)?;
    problem.options.wave = wave;
    Ok(lm_fit(&problem)?)
}

/// Score predictions and true-guess fits of prepared samples; records are
/// sorted by σ.
pub fn score_samples(pred: &dyn Predictor, samples: &[TestSample], opts: EvalOptions) -> Result<Vec<EvalRecord>, HarnessError> {
    let length = pred.length();
    let grid = TimeGrid::new(length)?;
    let ranges = LatentRanges::for_grid(grid)?;
    let layout = LatentLayout::from_dim(pred.latent_dim()).ok_or(HarnessError::LatentDim {
        role: "evaluated",
        expected: 7,
        got: pred.latent_dim(),
    })?;
    let outputs = pred.predict(samples)?;
    let scored = exec::map_indexed(samples.len(), |i| -> Result<EvalRecord, HarnessError> {
        let s = &samples[i];
        let out = &outputs[i];
        let truth = layout.encode(&s.pair.latents, &ranges);
        let fit = true_guess_fit(s, opts.wave)?;
        let fit_clean = s.pair.norm.apply_all(&fit_to_clean(&fit, grid));
        let fit_latents = layout.encode(&fit.params, &ranges);
        Ok(EvalRecord {
            sample_id: s.id,
            kind: s.pair.latents.kind,
            sigma_true: s.pair.latents.sigma,
            dnn_mse_reg: latent_mse(&out.latents, &truth, opts.include_sigma),
            dnn_mse_dec: mse(&out.signal, &s.clean),
            fit_mse_reg: latent_mse(&fit_latents, &truth, opts.include_sigma),
            fit_mse_dec: mse(&fit_clean, &s.clean),
            true_guess_sse: fit.sse,
            true_guess_converged: fit.converged,
            assisted_sse: None,
            assisted_converged: None,
        })
    });
    let mut records = scored.into_iter().collect::<Result<Vec<_>, _>>()?;
    sort_by_sigma(&mut records);
    Ok(records)
}

/// Stable sort by `sigma_true`, ties by `sample_id`.
pub fn sort_by_sigma(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| a.sigma_true.total_cmp(&b.sigma_true).then(a.sample_id.cmp(&b.sample_id)));
}

/// Network versus true-guess least squares on `n` fresh samples of `kind`.
pub fn eval_benchmark(pred: &dyn Predictor, kind: ProcessKind, n: usize, seed: u64, opts: EvalOptions) -> Result<Vec<EvalRecord>, HarnessError> {
    check_predictor(pred, kind)?;
    let samples = test_samples(kind, n, pred.length(), seed)?;
    score_samples(pred, &samples, opts)
}

/// One AM latent draw observed at `n` noise levels spaced linearly over
/// `[0, 2]`.
pub fn am_sweep_samples(n: usize, length: usize, seed: u64) -> Result<Vec<TestSample>, HarnessError> {
    if n == 0 {
        return Err(HarnessError::Config(vec!["n_samples must be at least 1".into()]));
    }
    let grid = TimeGrid::new(length)?;
    let ranges = LatentRanges::for_grid(grid)?;
    let base = sample_latents(ProcessKind::Am, &ranges, &mut rng::stream(seed, 0));
    (0..n)
        .map(|i| {
            let mut p = base;
            p.sigma = if n == 1 { 0.0 } else { 2.0 * i as f64 / (n - 1) as f64 };
            let mut noise = NoiseStream::new(rng::sub_seed(seed, i as u64 + 1));
            let pair = generate(grid, &p, Some(&mut noise), WaveOptions::default(), &ranges)?;
            Ok(TestSample::new(i as u64, pair))
        })
        .collect()
}

pub fn eval_am_noise_sweep(pred: &dyn Predictor, n: usize, seed: u64, opts: EvalOptions) -> Result<Vec<EvalRecord>, HarnessError> {
    check_predictor(pred, ProcessKind::Am)?;
    let samples = am_sweep_samples(n, pred.length(), seed)?;
    score_samples(pred, &samples, opts)
}

/// Outcome of the assisted-fit experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n: usize,
    pub agreed: usize,
    pub fraction: f64,
    pub epsilon: f64,
    pub records: Vec<EvalRecord>,
}

/// Initial guess from a predicted encoded latent vector. Components beyond
/// the decode band are first pulled back into it.
pub fn init_from_prediction(latents: &[f64], kind: ProcessKind, layout: LatentLayout, ranges: &LatentRanges) -> Result<LatentParams, HarnessError> {
    let v: Vec<f64> = latents.iter().map(|x| x.clamp(-CLAMP_BAND, 1.0 + CLAMP_BAND)).collect();
    Ok(layout.decode(&v, kind, ranges)?)
}

/// Fit every sample twice, from the network's decoded prediction and from
/// the truth, and count agreeing final SSEs.
pub fn assisted_fit(pred: &dyn Predictor, kind: ProcessKind, n: usize, seed: u64, epsilon: f64, opts: EvalOptions) -> Result<AgreementReport, HarnessError> {
    if !(epsilon > 0.0) {
        return Err(HarnessError::Config(vec![format!("agreement_epsilon = {epsilon}: must be positive")]));
    }
    check_predictor(pred, kind)?;
    let samples = test_samples(kind, n, pred.length(), seed)?;
    assisted_on(pred, &samples, epsilon, opts)
}

/// [`assisted_fit`] on prepared samples.
pub fn assisted_on(pred: &dyn Predictor, samples: &[TestSample], epsilon: f64, opts: EvalOptions) -> Result<AgreementReport, HarnessError> {
    let mut records = score_samples(pred, samples, opts)?;
    let grid = TimeGrid::new(pred.length())?;
    let ranges = LatentRanges::for_grid(grid)?;
    let layout = LatentLayout::from_dim(pred.latent_dim()).unwrap_or(LatentLayout::Full);
    let outputs = pred.predict(samples)?;
    let assisted = exec::map_indexed(samples.len(), |i| -> Result<(u64, FitResult), HarnessError> {
        let s = &samples[i];
        let init = init_from_prediction(&outputs[i].latents, s.pair.latents.kind, layout, &ranges)?;
        let mut problem = FitProblem::new(s.pair.latents.kind, s.pair.noisy.clone(), init)?;
        problem.options.wave = opts.wave;
        Ok((s.id, lm_fit(&problem)?))
    });
    let assisted = assisted.into_iter().collect::<Result<Vec<_>, _>>()?;
    for r in records.iter_mut() {
        let (_, fit) = assisted.iter().find(|(id, _)| *id == r.sample_id).expect("every sample fitted");
        r.assisted_sse = Some(fit.sse);
        r.assisted_converged = Some(fit.converged);
    }
    let agreed = records.iter().filter(|r| r.agrees(epsilon) == Some(true)).count();
    Ok(AgreementReport {
        n: records.len(),
        agreed,
        fraction: agreed as f64 / records.len() as f64,
        epsilon,
        records,
    })
}

/// One row of the partial-information table: RMSE of one quantity for the
/// partial and the specialized model (absent where a model has no such
/// output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub name: String,
    pub partial: Option<f64>,
    pub specialized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialReport {
    pub n: usize,
    pub rows: Vec<RmseRow>,
}

impl PartialReport {
    pub fn row(&self, name: &str) -> Option<&RmseRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Per-component RMSE of predicted against true encoded latents, plus the
/// combined phase row `√((mse_sin + mse_cos)/2)` and the signal row.
fn rmse_table(pred: &dyn Predictor, samples: &[TestSample]) -> Result<Vec<(String, f64)>, HarnessError> {
    let ranges = LatentRanges::for_grid(TimeGrid::new(pred.length())?)?;
    let layout = LatentLayout::from_dim(pred.latent_dim()).unwrap_or(LatentLayout::Full);
    let outputs = pred.predict(samples)?;
    let names = layout.names();
    let mut sums = vec![0.0; names.len()];
    let mut signal = 0.0;
    for (s, out) in samples.iter().zip(&outputs) {
        let truth = layout.encode(&s.pair.latents, &ranges);
        for (k, (p, t)) in out.latents.iter().zip(&truth).enumerate() {
            sums[k] += (p - t).powi(2);
        }
        signal += mse(&out.signal, &s.clean);
    }
    let n = samples.len() as f64;
    let mut rows: Vec<(String, f64)> = names.iter().zip(&sums).map(|(nm, s)| (nm.to_string(), (s / n).sqrt())).collect();
    let phase = ((sums[1] + sums[2]) / (2.0 * n)).sqrt();
    rows.push(("phase".into(), phase));
    rows.push(("signal".into(), (signal / n).sqrt()));
    Ok(rows)
}

/// Compare a partial model (latent_dim 5, mixed kinds) with an
/// AM-specialized one (latent_dim 7) on `n` fresh AM samples.
pub fn eval_partial(partial: &dyn Predictor, specialized: &dyn Predictor, n: usize, seed: u64) -> Result<PartialReport, HarnessError> {
    if partial.latent_dim() != 5 {
        return Err(HarnessError::LatentDim {
            role: "partial",
            expected: 5,
            got: partial.latent_dim(),
        });
    }
    if specialized.latent_dim() != 7 {
        return Err(HarnessError::LatentDim {
            role: "specialized",
            expected: 7,
            got: specialized.latent_dim(),
        });
    }
    if partial.length() != specialized.length() {
        return Err(HarnessError::Config(vec![format!(
            "models disagree on T: {} vs {}",
            partial.length(),
            specialized.length()
        )]));
    }
    check_predictor(partial, ProcessKind::Am)?;
    check_predictor(specialized, ProcessKind::Am)?;
    let samples = test_samples(ProcessKind::Am, n, partial.length(), seed)?;
    let p = rmse_table(partial, &samples)?;
    let s = rmse_table(specialized, &samples)?;
    let order = ["fc", "sin_phi", "cos_phi", "phase", "tau", "fm", "im", "sigma", "signal"];
    let find = |t: &[(String, f64)], name: &str| t.iter().find(|(k, _)| k == name).map(|(_, v)| *v);
    let rows = order
        .iter()
        .map(|name| RmseRow {
            name: name.to_string(),
            partial: find(&p, name),
            specialized: find(&s, name),
        })
        .collect();
    Ok(PartialReport { n, rows })
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Mean and median of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    fn of(v: &[f64]) -> Self {
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: median(v),
        }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub dnn_mse_reg: Stat,
    pub dnn_mse_dec: Stat,
    pub fit_mse_reg: Stat,
    pub fit_mse_dec: Stat,
    /// Fraction of true-guess fits that converged.
    pub true_guess_converged: f64,
    /// Assisted-fit agreement fraction, when assisted fits were run.
    pub agreement: Option<f64>,
    pub agreement_epsilon: f64,
}

pub fn summarize(records: &[EvalRecord], epsilon: f64) -> Result<Summary, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Empty);
    }
    let col = |f: fn(&EvalRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let flags: Vec<bool> = records.iter().filter_map(|r| r.agrees(epsilon)).collect();
    Ok(Summary {
        n: records.len(),
        dnn_mse_reg: Stat::of(&col(|r| r.dnn_mse_reg)),
        dnn_mse_dec: Stat::of(&col(|r| r.dnn_mse_dec)),
        fit_mse_reg: Stat::of(&col(|r| r.fit_mse_reg)),
        fit_mse_dec: Stat::of(&col(|r| r.fit_mse_dec)),
        true_guess_converged: records.iter().filter(|r| r.true_guess_converged).count() as f64 / records.len() as f64,
        agreement: (!flags.is_empty()).then(|| flags.iter().filter(|&&a| a).count() as f64 / flags.len() as f64),
        agreement_epsilon: epsilon,
    })
}

pub fn write_records_csv<W: Write>(w: W, records: &[EvalRecord]) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(r: R) -> Result<Vec<EvalRecord>, HarnessError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<Vec<_>, _>>()?)
}

/// Files written by [`export`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub charts: Vec<PathBuf>,
}

/// Write `records.csv`, `summary.json` and SVG charts of the decoder and
/// regression losses against noise rank.
pub fn export(records: &[EvalRecord], dir: &Path, epsilon: f64) -> Result<ExportPaths, HarnessError> {
    let summary = summarize(records, epsilon)?;
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("records.csv");
    write_records_csv(fs::File::create(&csv_path)?, records)?;
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;

    let series = |f: fn(&EvalRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let dec = dir.join("mse_dec.svg");
    fs::write(
        &dec,
        svg::line_chart(
            "Denoising MSE by noise rank",
            "noise rank",
            "MSE (log)",
            &[("network", series(|r| r.dnn_mse_dec)), ("least squares", series(|r| r.fit_mse_dec))],
        ),
    )?;
    let reg = dir.join("mse_reg.svg");
    fs::write(
        &reg,
        svg::line_chart(
            "Regression MSE by noise rank",
            "noise rank",
            "MSE (log)",
            &[("network", series(|r| r.dnn_mse_reg)), ("least squares", series(|r| r.fit_mse_reg))],
        ),
    )?;
    Ok(ExportPaths {
        csv: csv_path,
        summary: summary_path,
        charts: vec![dec, reg],
    })
}

/// Write `partial.csv`, `partial.json` and an RMSE bar chart.
pub fn export_partial(report: &PartialReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("partial.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let json = dir.join("partial.json");
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n")?;
    let chart = dir.join("partial_rmse.svg");
    let groups: Vec<(String, Option<f64>, Option<f64>)> =
        report.rows.iter().map(|r| (r.name.clone(), r.partial, r.specialized)).collect();
    fs::write(&chart, svg::bar_chart("RMSE on the AM test set", &groups, ("partial", "specialized")))?;
    Ok(vec![csv_path, json, chart])
}

/// Which experiment to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    BenchmarkMono,
    BenchmarkAmNoiseSweep,
    AssistedFit,
    Partial,
}

/// Experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub n_samples: usize,
    pub seed: u64,
    pub checkpoint: PathBuf,
    /// Second model of the partial experiment (the AM-specialized one).
    pub specialized_checkpoint: Option<PathBuf>,
    pub kind: ProcessKind,
    pub agreement_epsilon: f64,
    pub include_sigma: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::BenchmarkMono,
            n_samples: 300,
            seed: 0,
            checkpoint: PathBuf::from("model.oscm"),
            specialized_checkpoint: None,
            kind: ProcessKind::Mono,
            agreement_epsilon: AGREEMENT_EPSILON,
            include_sigma: true,
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_samples == 0 {
            out.push("n_samples must be at least 1".into());
        }
        if !(self.agreement_epsilon > 0.0 && self.agreement_epsilon.is_finite()) {
            out.push(format!("agreement_epsilon = {}: must be positive", self.agreement_epsilon));
        }
        if self.experiment == Experiment::Partial && self.specialized_checkpoint.is_none() {
            out.push("specialized_checkpoint is required for the partial experiment".into());
        }
        out
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            include_sigma: self.include_sigma,
            ..EvalOptions::default()
        }
    }
}

/// Self-contained SVG charts.
pub mod svg {
    use std::fmt::Write;

    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 150.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

    fn escape(s: &str) -> String {
        s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
    }

    fn header(title: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
"#,
            W / 2.0,
            escape(title)
        );
        s
    }

    /// Lines of each series against its index, on a log10 y axis.
    pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<f64>)]) -> String {
        let mut s = header(title);
        let floor = 1e-16;
        let logs: Vec<Vec<f64>> = series.iter().map(|(_, v)| v.iter().map(|&x| x.max(floor).log10()).collect()).collect();
        let all = logs.iter().flatten().copied();
        let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            lo = -1.0;
            hi = 0.0;
        }
        let (lo, hi) = (lo.floor(), hi.ceil().max(lo.floor() + 1.0));
        let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let px = |i: usize| LEFT + pw * i as f64 / (n - 1) as f64;
        let py = |v: f64| TOP + ph * (1.0 - (v - lo) / (hi - lo));
        let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        let mut e = lo as i32;
        while e as f64 <= hi {
            let y = py(e as f64);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                y + 4.0
            );
            e += 1;
        }
        for (k, ((name, _), l)) in series.iter().zip(&logs).enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<String> = l.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
            let ly = TOP + 20.0 * k as f64 + 10.0;
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                W - RIGHT + 10.0,
                W - RIGHT + 30.0,
                W - RIGHT + 35.0,
                ly + 4.0,
                escape(name)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 15.0,
            escape(x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(y_label)
        );
        s.push_str("</svg>\n");
        s
    }

    /// Grouped bars, two per group; missing values are left out.
    pub fn bar_chart(title: &str, groups: &[(String, Option<f64>, Option<f64>)], names: (&str, &str)) -> String {
        let mut s = header(title);
        let max = groups
            .iter()
            .flat_map(|(_, a, b)| [a, b])
            .filter_map(|v| *v)
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let gw = pw / groups.len().max(1) as f64;
        let bw = gw * 0.35;
        let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        for t in 0..=4 {
            let v = max * t as f64 / 4.0;
            let y = TOP + ph * (1.0 - t as f64 / 4.0);
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
                LEFT - 6.0,
                y + 4.0
            );
        }
        for (g, (label, a, b)) in groups.iter().enumerate() {
            let x0 = LEFT + gw * g as f64 + gw * 0.15;
            for (k, v) in [a, b].into_iter().enumerate() {
                if let Some(v) = v {
                    let h = ph * v / max;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{h:.2}" fill="{}"/>"#,
                        x0 + bw * k as f64,
                        TOP + ph - h,
                        COLORS[k]
                    );
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                x0 + bw,
                H - BOTTOM + 16.0,
                escape(label)
            );
        }
        for (k, name) in [names.0, names.1].into_iter().enumerate() {
            let ly = TOP + 20.0 * k as f64 + 10.0;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="14" height="10" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                W - RIGHT + 10.0,
                ly - 5.0,
                COLORS[k],
                W - RIGHT + 30.0,
                ly + 4.0,
                escape(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub() -> TruthStub {
        TruthStub {
            length: 256,
            layout: LatentLayout::Full,
        }
    }

    #[test]
    fn truth_stub_has_zero_regression_error() {
        let recs = eval_benchmark(&stub(), ProcessKind::Mono, 30, 4, EvalOptions::default()).unwrap();
        assert_eq!(recs.len(), 30);
        for r in &recs {
            assert_eq!(r.dnn_mse_reg, 0.0);
            assert_eq!(r.dnn_mse_dec, 0.0);
            assert!(r.fit_mse_dec >= 0.0 && r.fit_mse_reg >= 0.0);
        }
        assert!(recs.windows(2).all(|w| w[0].sigma_true <= w[1].sigma_true));
    }

    #[test]
    fn noiseless_fit_is_perfect() {
        let samples = am_sweep_samples(5, 256, 3).unwrap();
        let recs = score_samples(&stub(), &samples[..1], EvalOptions::default()).unwrap();
        assert_eq!(recs[0].sigma_true, 0.0);
        assert!(recs[0].fit_mse_dec <= 1e-10);
    }

    #[test]
    fn sweep_construction_and_trend() {
        let samples = am_sweep_samples(40, 256, 12).unwrap();
        let first = samples[0].pair.latents;
        for w in samples.windows(2) {
            assert!(w[1].pair.latents.sigma > w[0].pair.latents.sigma);
        }
        for s in &samples {
            let p = s.pair.latents;
            assert_eq!((p.fc, p.phi, p.tau, p.fm, p.im), (first.fc, first.phi, first.tau, first.fm, first.im));
        }
        assert_eq!(samples.last().unwrap().pair.latents.sigma, 2.0);
        // The fit's noise floor grows like σ² in physical units. Per-sample
        // normalization divides by a range that itself grows with σ, which
        // flattens the normalized trend, so the rank test runs on the
        // de-normalized error and the normalized one only has to rise.
        let recs = eval_am_noise_sweep(&stub(), 40, 12, EvalOptions::default()).unwrap();
        let sig: Vec<f64> = recs.iter().map(|r| r.sigma_true).collect();
        let fit: Vec<f64> = recs.iter().map(|r| r.fit_mse_dec).collect();
        let physical: Vec<f64> = recs
            .iter()
            .map(|r| r.fit_mse_dec * samples[r.sample_id as usize].pair.norm.scale.powi(2))
            .collect();
        assert!(spearman(&sig, &physical) > 0.8, "{}", spearman(&sig, &physical));
        assert!(spearman(&sig, &fit) > 0.0, "{}", spearman(&sig, &fit));
    }

    #[test]
    fn truth_stub_full_agreement() {
        let rep = assisted_fit(&stub(), ProcessKind::Mono, 25, 1, AGREEMENT_EPSILON, EvalOptions::default()).unwrap();
        assert_eq!(rep.agreed, 25);
        assert_eq!(rep.fraction, 1.0);
    }

    #[test]
    fn partial_rows_and_bookkeeping() {
        let partial = TruthStub {
            length: 256,
            layout: LatentLayout::Partial,
        };
        let rep = eval_partial(&partial, &stub(), 20, 2).unwrap();
        let names: Vec<&str> = rep.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["fc", "sin_phi", "cos_phi", "phase", "tau", "fm", "im", "sigma", "signal"]);
        for r in &rep.rows {
            assert!(r.specialized.is_some());
            assert_eq!(r.partial.is_some(), !matches!(r.name.as_str(), "fm" | "im"));
        }
        assert_eq!(rep.row("fc").unwrap().partial, Some(0.0));
        assert!(matches!(eval_partial(&stub(), &stub(), 5, 0), Err(HarnessError::LatentDim { role: "partial", .. })));
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let arch = crate::model::ArchConfig {
            length: 128,
            bottleneck_dim: 8,
            latent_dim: 7,
            profile: crate::model::ScaleProfile::Desk,
        };
        let mut m = ModelBundle::new(&arch, 0).unwrap();
        m.train = Some(crate::model::TrainConfig::desk(&[ProcessKind::Am]));
        let err = eval_benchmark(&m, ProcessKind::Mono, 3, 0, EvalOptions::default()).unwrap_err();
        assert!(matches!(err, HarnessError::KindMismatch { .. }));
    }

    #[test]
    fn sigma_exclusion_drops_last_component() {
        assert_eq!(latent_mse(&[0.0, 1.0], &[0.0, 0.0], false), 0.0);
        assert_eq!(latent_mse(&[0.0, 1.0], &[0.0, 0.0], true), 0.5);
    }

    #[test]
    fn statistics_helpers() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn agreement_rule() {
        let mut r = EvalRecord {
            sample_id: 0,
            kind: ProcessKind::Mono,
            sigma_true: 1.0,
            dnn_mse_reg: 0.0,
            dnn_mse_dec: 0.0,
            fit_mse_reg: 0.0,
            fit_mse_dec: 0.0,
            true_guess_sse: 100.0,
            true_guess_converged: true,
            assisted_sse: Some(100.9),
            assisted_converged: Some(true),
        };
        assert_eq!(r.agrees(0.01), Some(true));
        r.assisted_sse = Some(101.5);
        assert_eq!(r.agrees(0.01), Some(false));
        r.true_guess_sse = 0.0;
        r.assisted_sse = Some(5e-12);
        assert_eq!(r.agrees(0.01), Some(true));
        r.assisted_sse = None;
        assert_eq!(r.agrees(0.01), None);
    }

    #[test]
    fn experiment_config_issues() {
        let c = ExperimentConfig {
            n_samples: 0,
            agreement_epsilon: 0.0,
            experiment: Experiment::Partial,
            ..ExperimentConfig::default()
        };
        let issues = c.issues();
        assert_eq!(issues.len(), 3);
        assert!(issues[0].contains("n_samples"));
        assert!(issues[1].contains("agreement_epsilon"));
    }
}
