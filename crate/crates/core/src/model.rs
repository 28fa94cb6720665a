//! The unified Encoder / Regressor / Decoder network.
//!
//! ```text
//! noisy ─▶ Encoder ─▶ z (bottleneck) ─▶ Regressor ─▶ latents
//!                      └──────── concat(z, latents) ─▶ Decoder ─▶ denoised
//! ```
//!
//! Training minimises `β·MSE_reg + (1−β)·MSE_dec`. The decoder loss flows
//! back through the concatenation into both the regressor and the encoder.
//!
//! Gradients of a mini-batch are computed in fixed shards of
//! [`SHARD`] samples (in parallel when enabled) and summed in shard order,
//! so a run is reproducible regardless of thread count.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::ndnet::{
    adam_step, concat_features, read_stack, split_features, write_stack, AdamConfig, AdamState, Grads, Init, Layer, NetError,
    Sequential, Tensor,
};
use crate::rng::{self, StreamRng};
use crate::signalgen::{
    make_dataset, Dataset, DatasetError, GenerationConfig, LatentLayout, LatentRanges, ProcessKind, Record, SignalError,
    TimeGrid,
};

/// Samples per gradient shard.
pub const SHARD: usize = 16;

const MAGIC: &[u8; 4] = b"OSCM";
const VERSION: u16 = 1;
/// Stream index of the weight-initialisation generator under a seed.
const INIT_STREAM: u64 = 0x1417;
const DATA_STREAM: u64 = 0xda7a;
const SHUFFLE_STREAM: u64 = 0x5f1e;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("input has {got} values, expected a multiple of T = {expected}")]
    Length { expected: usize, got: usize },
    #[error("model i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed model checkpoint: {0}")]
    Format(String),
    #[error("training diverged in set {set}, epoch {epoch}: {source}; weights restored to the last good state{}",
        .checkpoint.as_ref().map(|p| format!(" ({})", p.display())).unwrap_or_default())]
    Diverged {
        set: usize,
        epoch: usize,
        source: NetError,
        checkpoint: Option<PathBuf>,
    },
}

/// Size preset. `Full` is the reference architecture; `Desk` keeps the
/// topology but halves channels, kernels and dense widths so it trains on a
/// CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleProfile {
    Full,
    Desk,
}

impl ScaleProfile {
    fn dims(self) -> Dims {
        match self {
            ScaleProfile::Full => Dims {
                channels: 64,
                k_wide: 64,
                k_narrow: 32,
                enc_hidden: 128,
                reg_hidden: [256, 128, 64],
            },
            ScaleProfile::Desk => Dims {
                channels: 32,
                k_wide: 32,
                k_narrow: 16,
                enc_hidden: 64,
                reg_hidden: [128, 64, 32],
            },
        }
    }

    pub fn default_length(self) -> usize {
        match self {
            ScaleProfile::Full => 512,
            ScaleProfile::Desk => 256,
        }
    }
}

impl std::str::FromStr for ScaleProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(ScaleProfile::Full),
            "desk" => Ok(ScaleProfile::Desk),
            other => Err(format!("unknown profile `{other}` (expected full or desk)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    channels: usize,
    k_wide: usize,
    k_narrow: usize,
    enc_hidden: usize,
    reg_hidden: [usize; 3],
}

/// Shape of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    #[serde(rename = "T")]
    pub length: usize,
    pub bottleneck_dim: usize,
    /// 7 for the full latent vector, 5 for the partial one.
    pub latent_dim: usize,
    pub profile: ScaleProfile,
}

impl ArchConfig {
    pub fn new(profile: ScaleProfile, latent_dim: usize) -> Self {
        Self {
            length: profile.default_length(),
            bottleneck_dim: 64,
            latent_dim,
            profile,
        }
    }

    pub fn layout(&self) -> LatentLayout {
        LatentLayout::from_dim(self.latent_dim).unwrap_or(LatentLayout::Full)
    }

    pub fn grid(&self) -> Result<TimeGrid, SignalError> {
        TimeGrid::new(self.length)
    }

    /// Field-named consistency problems; empty when valid.
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.length < 32 || !self.length.is_multiple_of(8) {
            out.push(format!("T = {}: must be a multiple of 8 and at least 32", self.length));
        }
        if self.bottleneck_dim == 0 {
            out.push("bottleneck_dim must be at least 1".into());
        }
        if LatentLayout::from_dim(self.latent_dim).is_none() {
            out.push(format!("latent_dim = {}: must be 7 (full) or 5 (partial)", self.latent_dim));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(issues))
        }
    }

    /// Width of the decoder's input: bottleneck plus latents.
    pub fn decoder_input_dim(&self) -> usize {
        self.bottleneck_dim + self.latent_dim
    }
}

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub epochs: usize,
    pub sets: usize,
    pub samples_per_set: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub kinds: Vec<ProcessKind>,
    /// Fraction of each set held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(&[ProcessKind::Mono])
    }
}

impl TrainConfig {
    /// Reference schedule: 12 sets of 100 000 samples, 17 epochs each.
    pub fn full(kinds: &[ProcessKind]) -> Self {
        Self {
            beta: 0.001,
            epochs: 17,
            sets: 12,
            samples_per_set: 100_000,
            batch: 64,
            seed: 0,
            adam: AdamConfig::default(),
            kinds: kinds.to_vec(),
            validation_fraction: 0.05,
        }
    }

    /// CPU schedule: one set of 20 000 samples, 3 epochs.
    pub fn desk(kinds: &[ProcessKind]) -> Self {
        Self {
            epochs: 3,
            sets: 1,
            samples_per_set: 20_000,
            ..Self::full(kinds)
        }
    }

    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.beta) {
            out.push(format!("beta = {}: must lie in [0, 1]", self.beta));
        }
        if self.epochs == 0 {
            out.push("epochs must be at least 1".into());
        }
        if self.sets == 0 {
            out.push("sets must be at least 1".into());
        }
        if self.batch == 0 {
            out.push("batch must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            out.push(format!("validation_fraction = {}: must lie in (0, 1)", self.validation_fraction));
        }
        if self.samples_per_set < 2 {
            out.push(format!("samples_per_set = {}: must be at least 2", self.samples_per_set));
        }
        if self.kinds.is_empty() {
            out.push("kinds must not be empty".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            out.push(format!("adam.lr = {}: must be positive", a.lr));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            out.push("adam.beta1 and adam.beta2 must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) {
            out.push(format!("adam.eps = {}: must be positive", a.eps));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(issues))
        }
    }

    /// Generation settings of training set `set`.
    pub fn generation(&self, set: usize, length: usize) -> GenerationConfig {
        GenerationConfig::new(
            &self.kinds,
            self.samples_per_set as u64,
            length,
            rng::sub_seed(self.seed ^ DATA_STREAM, set as u64),
        )
    }
}

/// Per-evaluation losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse_reg: f64,
    pub mse_dec: f64,
    pub weighted: f64,
}

impl LossReport {
    pub fn new(mse_reg: f64, mse_dec: f64, beta: f64) -> Self {
        Self {
            mse_reg,
            mse_dec,
            weighted: beta * mse_reg + (1.0 - beta) * mse_dec,
        }
    }
}

/// One validation evaluation. `set_index` 0 is the untrained model,
/// `k ≥ 1` follows training set `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub set_index: usize,
    pub mse_reg: f64,
    pub mse_dec: f64,
    pub weighted: f64,
}

impl HistoryRow {
    pub fn report(&self) -> LossReport {
        LossReport {
            mse_reg: self.mse_reg,
            mse_dec: self.mse_dec,
            weighted: self.weighted,
        }
    }
}

/// `β·mse_reg + (1−β)·mse_dec` for flat prediction and target buffers.
pub fn weighted_loss<S: crate::ndnet::Scalar>(
    pred_signal: &[S],
    pred_latent: &[S],
    target_signal: &[S],
    target_latent: &[S],
    beta: f64,
) -> Result<LossReport, ModelError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(ModelError::Config(vec![format!("beta = {beta}: must lie in [0, 1]")]));
    }
    let mean_sq = |a: &[S], b: &[S], what: &str| -> Result<f64, ModelError> {
        if a.len() != b.len() || a.is_empty() {
            return Err(NetError::Shape(format!("{what}: {} predictions vs {} targets", a.len(), b.len())).into());
        }
        Ok(a.iter().zip(b).map(|(&p, &t)| (p.to_f64() - t.to_f64()).powi(2)).sum::<f64>() / a.len() as f64)
    };
    let mse_reg = mean_sq(pred_latent, target_latent, "latents")?;
    let mse_dec = mean_sq(pred_signal, target_signal, "signal")?;
    Ok(LossReport::new(mse_reg, mse_dec, beta))
}

/// β that balances the two weighted terms: `β·mse_reg = (1−β)·mse_dec`.
/// Both zero is undefined; 0.5 is returned with a warning.
pub fn beta_from_losses(mse_reg: f64, mse_dec: f64) -> f64 {
    let total = mse_reg + mse_dec;
    if total == 0.0 {
        log::warn!("auto_beta: both losses are zero, falling back to beta = 0.5");
        return 0.5;
    }
    mse_dec / total
}

/// Inputs and targets in network layout.
#[derive(Debug, Clone)]
pub struct Prepared {
    n: usize,
    t: usize,
    d: usize,
    x: Vec<f32>,
    clean: Vec<f32>,
    latents: Vec<f32>,
}

impl Prepared {
    pub fn from_records(records: &[Record], arch: &ArchConfig) -> Result<Self, ModelError> {
        let grid = arch.grid()?;
        let ranges = LatentRanges::for_grid(grid)?;
        let layout = arch.layout();
        let (t, d) = (arch.length, arch.latent_dim);
        let mut x = Vec::with_capacity(records.len() * t);
        let mut clean = Vec::with_capacity(records.len() * t);
        let mut latents = Vec::with_capacity(records.len() * d);
        for r in records {
            if r.noisy.len() != t || r.clean.len() != t {
                return Err(ModelError::Length {
                    expected: t,
                    got: r.noisy.len(),
                });
            }
            x.extend_from_slice(&r.noisy);
            clean.extend_from_slice(&r.clean);
            latents.extend(layout.encode(&r.latents, &ranges).into_iter().map(|v| v as f32));
        }
        Ok(Self {
            n: records.len(),
            t,
            d,
            x,
            clean,
            latents,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let (t, d) = (self.t, self.d);
        let mut x = Vec::with_capacity(idx.len() * t);
        let mut c = Vec::with_capacity(idx.len() * t);
        let mut l = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(&self.x[i * t..(i + 1) * t]);
            c.extend_from_slice(&self.clean[i * t..(i + 1) * t]);
            l.extend_from_slice(&self.latents[i * d..(i + 1) * d]);
        }
        (x, c, l)
    }
}

/// Network outputs for a batch, flat row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `N × T` denoised signals in (0, 1).
    pub signals: Vec<f32>,
    /// `N × latent_dim` normalized latents (unbounded linear head).
    pub latents: Vec<f32>,
}

/// Header stored in the model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    train: Option<TrainConfig>,
    history: Vec<HistoryRow>,
}

struct ShardOut {
    grads: [Grads<f32>; 3],
    sse_reg: f64,
    sse_dec: f64,
}

/// The three sub-networks plus their configuration and training history.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub train: Option<TrainConfig>,
    pub encoder: Sequential<f32>,
    pub regressor: Sequential<f32>,
    pub decoder: Sequential<f32>,
    pub history: Vec<HistoryRow>,
}

/// Build an untrained model. Convolutions use Glorot-uniform kernels, hidden
/// dense layers He-uniform, the linear regressor head Glorot-uniform; all
/// biases start at zero.
pub fn build_model(cfg: &ArchConfig, rng: &mut StreamRng) -> Result<ModelBundle, ModelError> {
    cfg.validate()?;
    let d = cfg.profile.dims();
    let (t, b, ch) = (cfg.length, cfg.bottleneck_dim, d.channels);
    let conv = |k, cin, cout, rng: &mut StreamRng| Layer::conv1d(k, cin, cout, Init::GlorotUniform, rng);
    let dense = |fin, fout, rng: &mut StreamRng| Layer::dense(fin, fout, Init::HeUniform, rng);
    let relu = || Layer::Act(crate::ndnet::Activation::Relu);
    let pool = |w| Layer::MaxPool1d { width: w };
    let up = |f| Layer::UpSample1d { factor: f };

    let enc_flat = t.div_ceil(4).div_ceil(4) * ch;
    let encoder = Sequential::new(vec![
        conv(d.k_wide, 1, ch, rng),
        relu(),
        pool(4),
        conv(d.k_narrow, ch, ch, rng),
        relu(),
        pool(4),
        Layer::Flatten,
        dense(enc_flat, d.enc_hidden, rng),
        relu(),
        dense(d.enc_hidden, b, rng),
        relu(),
    ]);

    let reg_flat = b.div_ceil(4).div_ceil(4) * ch;
    let [h0, h1, h2] = d.reg_hidden;
    let regressor = Sequential::new(vec![
        Layer::Reshape { dims: vec![b, 1] },
        conv(d.k_wide, 1, ch, rng),
        relu(),
        pool(4),
        conv(d.k_narrow, ch, ch, rng),
        relu(),
        pool(4),
        conv(d.k_narrow, ch, ch, rng),
        relu(),
        Layer::Flatten,
        dense(reg_flat, h0, rng),
        relu(),
        dense(h0, h1, rng),
        relu(),
        dense(h1, h2, rng),
        relu(),
        Layer::dense(h2, cfg.latent_dim, Init::GlorotUniform, rng),
    ]);

    let q = t / 4;
    let decoder = Sequential::new(vec![
        dense(cfg.decoder_input_dim(), q, rng),
        relu(),
        Layer::Reshape { dims: vec![q, 1] },
        conv(d.k_narrow, 1, ch, rng),
        relu(),
        pool(2),
        up(4),
        conv(d.k_narrow, ch, ch, rng),
        relu(),
        pool(2),
        up(4),
        conv(d.k_narrow, ch, ch, rng),
        relu(),
        pool(2),
        up(2),
        conv(d.k_narrow, ch, 1, rng),
        Layer::Act(crate::ndnet::Activation::Sigmoid),
    ]);

    let bundle = ModelBundle {
        arch: *cfg,
        train: None,
        encoder,
        regressor,
        decoder,
        history: Vec::new(),
    };
    bundle.check_shapes()?;
    Ok(bundle)
}

impl ModelBundle {
    /// Untrained model with weights drawn from the initialisation stream of
    /// `seed`.
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self, ModelError> {
        build_model(arch, &mut rng::stream(seed, INIT_STREAM))
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        let a = &self.arch;
        let z = self.encoder.output_shape(&[1, a.length, 1])?;
        let r = self.regressor.output_shape(&z)?;
        let y = self.decoder.output_shape(&[1, z[1] + r[1]])?;
        if z != [1, a.bottleneck_dim] || r != [1, a.latent_dim] || y != [1, a.length, 1] {
            return Err(ModelError::Config(vec![format!(
                "inconsistent dims: encoder {z:?}, regressor {r:?}, decoder {y:?}"
            )]));
        }
        Ok(())
    }

    /// Trainable parameters of `(encoder, regressor, decoder)`.
    pub fn param_counts(&self) -> (usize, usize, usize) {
        (self.encoder.param_count(), self.regressor.param_count(), self.decoder.param_count())
    }

    pub fn param_count(&self) -> usize {
        let (e, r, d) = self.param_counts();
        e + r + d
    }

    /// Process kinds the model was trained on, if known.
    pub fn kinds(&self) -> Option<&[ProcessKind]> {
        self.train.as_ref().map(|t| t.kinds.as_slice())
    }

    fn forward_batch(&self, x: Vec<f32>, n: usize) -> Result<(Tensor<f32>, Tensor<f32>), ModelError> {
        let x = Tensor::new(&[n, self.arch.length, 1], x)?;
        let z = self.encoder.forward(x)?;
        let r = self.regressor.forward(z.clone())?;
        let y = self.decoder.forward(concat_features(&z, &r)?)?;
        Ok((y, r))
    }

    /// Run the network on `N` concatenated normalized series of length T.
    pub fn predict_batch(&self, x: &[f32]) -> Result<Prediction, ModelError> {
        let t = self.arch.length;
        if x.is_empty() || !x.len().is_multiple_of(t) {
            return Err(ModelError::Length {
                expected: t,
                got: x.len(),
            });
        }
        let n = x.len() / t;
        let chunks = n.div_ceil(64);
        let outs = exec::map_indexed(chunks, |c| {
            let (lo, hi) = (c * 64, ((c + 1) * 64).min(n));
            self.forward_batch(x[lo * t..hi * t].to_vec(), hi - lo)
        });
        let mut signals = Vec::with_capacity(n * t);
        let mut latents = Vec::with_capacity(n * self.arch.latent_dim);
        for o in outs {
            let (y, r) = o?;
            signals.extend_from_slice(y.data());
            latents.extend_from_slice(r.data());
        }
        Ok(Prediction { signals, latents })
    }

    /// Denoised series and normalized latents for one normalized series.
    pub fn predict(&self, noisy_normalized: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if noisy_normalized.len() != self.arch.length {
            return Err(ModelError::Length {
                expected: self.arch.length,
                got: noisy_normalized.len(),
            });
        }
        let x: Vec<f32> = noisy_normalized.iter().map(|&v| v as f32).collect();
        let p = self.predict_batch(&x)?;
        Ok((
            p.signals.iter().map(|&v| v as f64).collect(),
            p.latents.iter().map(|&v| v as f64).collect(),
        ))
    }

    /// Validation losses on prepared data at weight `beta`.
    pub fn evaluate(&self, data: &Prepared, beta: f64) -> Result<LossReport, ModelError> {
        let chunks = data.n.div_ceil(64);
        let parts = exec::map_indexed(chunks, |c| -> Result<(f64, f64), ModelError> {
            let idx: Vec<usize> = (c * 64..((c + 1) * 64).min(data.n)).collect();
            let (x, clean, lat) = data.gather(&idx);
            let (y, r) = self.forward_batch(x, idx.len())?;
            Ok((sse(r.data(), &lat), sse(y.data(), &clean)))
        });
        let (mut reg, mut dec) = (0.0, 0.0);
        for p in parts {
            let (a, b) = p?;
            reg += a;
            dec += b;
        }
        Ok(LossReport::new(
            reg / (data.n * data.d) as f64,
            dec / (data.n * data.t) as f64,
            beta,
        ))
    }

    /// Gradients of the weighted loss for one shard, scaled as part of a
    /// batch of `batch_n` samples.
    fn shard_gradients(&self, x: Vec<f32>, clean: &[f32], lat: &[f32], n: usize, batch_n: usize, beta: f64) -> Result<ShardOut, ModelError> {
        let (t, d, b) = (self.arch.length, self.arch.latent_dim, self.arch.bottleneck_dim);
        let x = Tensor::new(&[n, t, 1], x)?;
        let (z, tr_e) = self.encoder.forward_train(x)?;
        let (r, tr_r) = self.regressor.forward_train(z.clone())?;
        let (y, tr_d) = self.decoder.forward_train(concat_features(&z, &r)?)?;

        let k_dec = (2.0 * (1.0 - beta) / (batch_n * t) as f64) as f32;
        let k_reg = (2.0 * beta / (batch_n * d) as f64) as f32;
        let dy: Vec<f32> = y.data().iter().zip(clean).map(|(&p, &c)| k_dec * (p - c)).collect();
        let mut ge = self.encoder.zero_grads();
        let mut gr = self.regressor.zero_grads();
        let mut gd = self.decoder.zero_grads();

        let dc = self
            .decoder
            .backward(tr_d, Tensor::new(y.shape(), dy)?, &mut gd, true)?
            .expect("decoder input gradient");
        let (mut dz, mut dr) = split_features(&dc, b)?;
        dr.data_mut()
            .iter_mut()
            .zip(r.data().iter().zip(lat))
            .for_each(|(g, (&p, &q))| *g += k_reg * (p - q));
        let dz_reg = self.regressor.backward(tr_r, dr, &mut gr, true)?.expect("regressor input gradient");
        dz.add_assign(&dz_reg)?;
        self.encoder.backward(tr_e, dz, &mut ge, false)?;

        Ok(ShardOut {
            grads: [ge, gr, gd],
            sse_reg: sse(r.data(), lat),
            sse_dec: sse(y.data(), clean),
        })
    }

    /// Summed batch gradients of `(encoder, regressor, decoder)` and the
    /// batch's weighted loss.
    pub fn batch_gradients(&self, data: &Prepared, idx: &[usize], beta: f64) -> Result<([Grads<f32>; 3], LossReport), ModelError> {
        let shards: Vec<&[usize]> = idx.chunks(SHARD).collect();
        let outs = exec::map_indexed(shards.len(), |s| {
            let (x, c, l) = data.gather(shards[s]);
            self.shard_gradients(x, &c, &l, shards[s].len(), idx.len(), beta)
        });
        let mut iter = outs.into_iter();
        let mut acc = iter.next().expect("non-empty batch")?;
        for o in iter {
            let o = o?;
            for (a, g) in acc.grads.iter_mut().zip(&o.grads) {
                a.accumulate(g)?;
            }
            acc.sse_reg += o.sse_reg;
            acc.sse_dec += o.sse_dec;
        }
        let n = idx.len();
        let report = LossReport::new(acc.sse_reg / (n * data.d) as f64, acc.sse_dec / (n * data.t) as f64, beta);
        Ok((acc.grads, report))
    }

    fn all_params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.regressor.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    fn all_params(&self) -> Vec<&Tensor<f32>> {
        let mut p = self.encoder.params();
        p.extend(self.regressor.params());
        p.extend(self.decoder.params());
        p
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let header = serde_json::to_vec(&Header {
            arch: self.arch,
            train: self.train.clone(),
            history: self.history.clone(),
        })
        .map_err(|e| ModelError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for s in [&self.encoder, &self.regressor, &self.decoder] {
            write_stack(&mut w, s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut head = [0u8; 10];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(ModelError::Format(format!("bad magic {:?}", &head[..4])));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes([head[6], head[7], head[8], head[9]]) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| ModelError::Format(format!("header: {e}")))?;
        header.arch.validate()?;
        let encoder = read_stack(&mut r)?;
        let regressor = read_stack(&mut r)?;
        let decoder = read_stack(&mut r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(ModelError::Format(format!("{} trailing bytes", rest.len())));
        }
        let bundle = ModelBundle {
            arch: header.arch,
            train: header.train,
            encoder,
            regressor,
            decoder,
            history: header.history,
        };
        bundle.check_shapes()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// History as CSV with columns `set_index,mse_reg,mse_dec,weighted`.
    pub fn write_history_csv<W: Write>(&self, w: W) -> Result<(), ModelError> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.history {
            out.serialize(row).map_err(|e| ModelError::Format(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn sse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum()
}

/// β balancing the two loss terms of the model on `batch` (one forward
/// pass, at least 32 samples).
pub fn auto_beta(model: &ModelBundle, batch: &[Record]) -> Result<f64, ModelError> {
    if batch.len() < 32 {
        return Err(ModelError::Config(vec![format!(
            "auto_beta batch has {} samples, needs at least 32",
            batch.len()
        )]));
    }
    let data = Prepared::from_records(batch, &model.arch)?;
    let r = model.evaluate(&data, 0.5)?;
    Ok(beta_from_losses(r.mse_reg, r.mse_dec))
}

/// Split a set into `(train, validation)`; the last `fraction` of records
/// (at least one) is held out.
pub fn split_validation(records: &[Record], fraction: f64) -> (&[Record], &[Record]) {
    let n = records.len();
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    records.split_at(n - n_val)
}

/// Where and whether to write per-set checkpoints.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainOptions {
    fn checkpoint_path(&self, set: usize) -> Option<PathBuf> {
        self.checkpoint_dir.as_ref().map(|d| d.join(format!("set_{set:02}.oscm")))
    }
}

/// Train on `cfg.sets` freshly generated sets (seeded from `cfg.seed`).
pub fn train(model: &mut ModelBundle, cfg: &TrainConfig, opts: &TrainOptions) -> Result<(), ModelError> {
    cfg.validate()?;
    let length = model.arch.length;
    train_with(model, cfg, opts, |set| Ok(make_dataset(&cfg.generation(set, length))?))
}

/// Train on caller-provided sets, one per `cfg.sets` entry.
pub fn train_on(model: &mut ModelBundle, cfg: &TrainConfig, sets: &[Dataset], opts: &TrainOptions) -> Result<(), ModelError> {
    cfg.validate()?;
    if sets.len() != cfg.sets {
        return Err(ModelError::Config(vec![format!(
            "sets = {} but {} datasets were provided",
            cfg.sets,
            sets.len()
        )]));
    }
    train_with(model, cfg, opts, |set| Ok(sets[set].clone()))
}

fn train_with<F>(model: &mut ModelBundle, cfg: &TrainConfig, opts: &TrainOptions, mut data_for: F) -> Result<(), ModelError>
where
    F: FnMut(usize) -> Result<Dataset, ModelError>,
{
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    model.train = Some(cfg.clone());
    model.history.clear();
    let mut adam = AdamState::new(cfg.adam, &model.all_params());
    let mut last_checkpoint = None;

    for set in 0..cfg.sets {
        let ds = data_for(set)?;
        if ds.grid.len() != model.arch.length {
            return Err(ModelError::Length {
                expected: model.arch.length,
                got: ds.grid.len(),
            });
        }
        let (train_rec, val_rec) = split_validation(&ds.records, cfg.validation_fraction);
        let train_data = Prepared::from_records(train_rec, &model.arch)?;
        let val_data = Prepared::from_records(val_rec, &model.arch)?;
        if set == 0 {
            let r = model.evaluate(&val_data, cfg.beta)?;
            log::info!("initial validation: mse_reg {:.6e} mse_dec {:.6e}", r.mse_reg, r.mse_dec);
            model.history.push(row(0, r));
        }

        let snapshot = (model.encoder.clone(), model.regressor.clone(), model.decoder.clone());
        let mut idx: Vec<usize> = (0..train_data.len()).collect();
        for epoch in 0..cfg.epochs {
            let mut g = rng::stream(rng::sub_seed(cfg.seed ^ SHUFFLE_STREAM, set as u64), epoch as u64);
            idx.shuffle(&mut g);
            let (mut sum, mut steps) = (0.0, 0usize);
            for batch in idx.chunks(cfg.batch) {
                let step = model
                    .batch_gradients(&train_data, batch, cfg.beta)
                    .and_then(|(grads, report)| {
                        if !report.weighted.is_finite() {
                            return Err(NetError::NonFinite(format!("batch loss {}", report.weighted)).into());
                        }
                        let flat: Vec<&Tensor<f32>> = grads.iter().flat_map(|g| g.tensors.iter()).collect();
                        adam_step(&mut model.all_params_mut(), &flat, &mut adam)?;
                        Ok(report)
                    });
                match step {
                    Ok(report) => {
                        sum += report.weighted;
                        steps += 1;
                    }
                    Err(ModelError::Net(e @ NetError::NonFinite(_))) => {
                        (model.encoder, model.regressor, model.decoder) = snapshot;
                        return Err(ModelError::Diverged {
                            set,
                            epoch,
                            source: e,
                            checkpoint: last_checkpoint,
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
            log::info!("set {} epoch {}: mean training loss {:.6e}", set + 1, epoch + 1, sum / steps as f64);
        }

        let r = model.evaluate(&val_data, cfg.beta)?;
        log::info!("set {} validation: mse_reg {:.6e} mse_dec {:.6e}", set + 1, r.mse_reg, r.mse_dec);
        model.history.push(row(set + 1, r));
        if let Some(path) = opts.checkpoint_path(set + 1) {
            model.save(&path)?;
            last_checkpoint = Some(path);
        }
    }
    Ok(())
}

fn row(set_index: usize, r: LossReport) -> HistoryRow {
    HistoryRow {
        set_index,
        mse_reg: r.mse_reg,
        mse_dec: r.mse_dec,
        weighted: r.weighted,
    }
}
