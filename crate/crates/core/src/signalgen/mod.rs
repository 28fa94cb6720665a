//! Synthetic decaying oscillations.
//!
//! Three generating processes share a decaying carrier
//! `sin(2π·Fc·t + φ)·exp(−t/τ)`:
//!
//! - **Mono**: the bare carrier.
//! - **AM**: carrier times `1 + Im·sin(2π·Fm·t)`.
//! - **FM**: narrowband expansion `J0(Im)·carrier + J1(Im)·[upper − lower]`
//!   with sidebands at `Fc ± Fm`.
//!
//! Gaussian noise of standard deviation σ is added per sample point. Time is
//! sampled once per unit, `t = 0, 1, …, T−1`.

mod dataset;
mod latent;

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::NoiseStream;

pub use dataset::{make_dataset, Dataset, DatasetError, GenerationConfig, Record};
pub use latent::{
    decode_latents, encode_latents, sample_latents, LatentLayout, LatentRanges, CLAMP_BAND,
};

/// Smallest record length accepted by [`TimeGrid`].
pub const MIN_LENGTH: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("latent `{field}` = {value} outside [{lo}, {hi}]")]
    Range {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("process kind mismatch: expected {expected}, got {got}")]
    KindMismatch {
        expected: ProcessKind,
        got: ProcessKind,
    },
    #[error("record length {0} below minimum {MIN_LENGTH}")]
    ShortGrid(usize),
    #[error("carrier range [10/T, 0.1] is empty for T = {0}")]
    EmptyCarrierRange(usize),
    #[error("invalid range override for `{field}`: [{lo}, {hi}]")]
    BadRange { field: &'static str, lo: f64, hi: f64 },
    #[error("bessel J{order}({x}) outside supported domain (order 0|1, 0 <= x <= 2)")]
    BesselDomain { order: u32, x: f64 },
    #[error("degenerate signal: constant vector cannot be normalized")]
    Degenerate,
    #[error("latent vector has length {got}, expected {expected}")]
    LatentLength { expected: usize, got: usize },
    #[error("encoded latent `{field}` = {value} outside decode band [-{band}, 1+{band}]")]
    Decode {
        field: &'static str,
        value: f64,
        band: f64,
    },
    #[error("unknown process kind tag {0}")]
    UnknownKind(u8),
}

/// Generating process of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum ProcessKind {
    Mono = 0,
    Am = 1,
    Fm = 2,
}

impl ProcessKind {
    pub const ALL: [ProcessKind; 3] = [ProcessKind::Mono, ProcessKind::Am, ProcessKind::Fm];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self, SignalError> {
        match tag {
            0 => Ok(ProcessKind::Mono),
            1 => Ok(ProcessKind::Am),
            2 => Ok(ProcessKind::Fm),
            other => Err(SignalError::UnknownKind(other)),
        }
    }

    /// Whether the process carries modulation parameters.
    pub fn is_modulated(self) -> bool {
        self != ProcessKind::Mono
    }

    pub fn name(self) -> &'static str {
        match self {
            ProcessKind::Mono => "mono",
            ProcessKind::Am => "am",
            ProcessKind::Fm => "fm",
        }
    }
}

impl fmt::Display for ProcessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProcessKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mono" => Ok(ProcessKind::Mono),
            "am" => Ok(ProcessKind::Am),
            "fm" => Ok(ProcessKind::Fm),
            other => Err(format!("unknown process kind `{other}` (expected mono, am or fm)")),
        }
    }
}

/// Physical parameters of one sample. Frequencies are in cycles per
/// sample, τ in samples. Mono samples carry `fm = im = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    pub fc: f64,
    pub phi: f64,
    pub tau: f64,
    pub fm: f64,
    pub im: f64,
    pub sigma: f64,
    pub kind: ProcessKind,
}

impl LatentParams {
    pub fn mono(fc: f64, phi: f64, tau: f64, sigma: f64) -> Self {
        Self {
            fc,
            phi,
            tau,
            fm: 0.0,
            im: 0.0,
            sigma,
            kind: ProcessKind::Mono,
        }
    }

    pub fn modulated(kind: ProcessKind, fc: f64, phi: f64, tau: f64, fm: f64, im: f64, sigma: f64) -> Self {
        Self {
            fc,
            phi,
            tau,
            fm,
            im,
            sigma,
            kind,
        }
    }

    /// Same parameters under another process kind; modulation is zeroed when
    /// the target is Mono.
    pub fn with_kind(mut self, kind: ProcessKind) -> Self {
        self.kind = kind;
        if kind == ProcessKind::Mono {
            self.fm = 0.0;
            self.im = 0.0;
        }
        self
    }

    /// `[fc, phi, tau, fm, im, sigma]`, the on-disk order.
    pub fn to_array(&self) -> [f64; 6] {
        [self.fc, self.phi, self.tau, self.fm, self.im, self.sigma]
    }

    pub fn from_array(kind: ProcessKind, a: [f64; 6]) -> Self {
        Self {
            fc: a[0],
            phi: a[1],
            tau: a[2],
            fm: a[3],
            im: a[4],
            sigma: a[5],
            kind,
        }
    }
}

/// Uniform unit-step sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    len: usize,
}

impl TimeGrid {
    pub fn new(len: usize) -> Result<Self, SignalError> {
        if len < MIN_LENGTH {
            return Err(SignalError::ShortGrid(len));
        }
        Ok(Self { len })
    }

    /// Record length T.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sampling interval, fixed at one.
    pub fn dt(&self) -> f64 {
        1.0
    }

    pub fn times(&self) -> impl Iterator<Item = f64> {
        (0..self.len).map(|t| t as f64)
    }
}

/// Affine map `(x − offset) / scale` used to bring a sample into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormMeta {
    pub offset: f64,
    pub scale: f64,
}

impl NormMeta {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.scale + self.offset
    }

    pub fn apply_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }

    pub fn invert_all(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.invert(y)).collect()
    }
}

/// Per-sample min-max normalization. The returned meta maps `min → 0` and
/// `max → 1`.
pub fn normalize_signal(x: &[f64]) -> Result<(Vec<f64>, NormMeta), SignalError> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) || !(hi - lo).is_finite() {
        return Err(SignalError::Degenerate);
    }
    let meta = NormMeta {
        offset: lo,
        scale: hi - lo,
    };
    Ok((meta.apply_all(x), meta))
}

/// One generated sample in physical units, with the normalization derived
/// from its noisy series.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPair {
    pub latents: LatentParams,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub norm: NormMeta,
}

impl SignalPair {
    fn assemble(latents: LatentParams, clean: Vec<f64>, noisy: Vec<f64>) -> Self {
        // A noiseless sample of a fully decayed carrier could in principle be
        // constant; the carrier is never flat on the grids we accept, but fall
        // back to the identity map rather than fail.
        let norm = normalize_signal(&noisy)
            .map(|(_, m)| m)
            .unwrap_or(NormMeta { offset: 0.0, scale: 1.0 });
        Self {
            latents,
            clean,
            noisy,
            norm,
        }
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Noisy series mapped into `[0, 1]`.
    pub fn noisy_normalized(&self) -> Vec<f64> {
        self.norm.apply_all(&self.noisy)
    }

    /// Clean series under the noisy series' map (the denoising target).
    pub fn clean_normalized(&self) -> Vec<f64> {
        self.norm.apply_all(&self.clean)
    }
}

/// Waveform switches that are not latent parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveOptions {
    /// Apply the decay envelope to the FM sidebands as well as the carrier.
    pub envelope_sidebands: bool,
}

impl Default for WaveOptions {
    fn default() -> Self {
        Self {
            envelope_sidebands: true,
        }
    }
}

/// Bessel function of the first kind, orders 0 and 1, for `0 <= x <= 2`,
/// by its ascending power series.
pub fn bessel_j(order: u32, x: f64) -> Result<f64, SignalError> {
    if order > 1 || !(0.0..=2.0).contains(&x) {
        return Err(SignalError::BesselDomain { order, x });
    }
    Ok(bessel_series(order, x))
}

fn bessel_series(order: u32, x: f64) -> f64 {
    let half = 0.5 * x;
    let q = -half * half;
    // k = 0 term: (x/2)^order / order!
    let mut term = if order == 0 { 1.0 } else { half };
    let mut sum = term;
    let mut k = 1.0_f64;
    while term.abs() >= 1e-16 && k < 60.0 {
        term *= q / (k * (k + order as f64));
        sum += term;
        k += 1.0;
    }
    sum
}

/// Noiseless waveform of `kind` under `p`, without range validation. This is
/// the model the least-squares fits evaluate. For FM, `p.im` must lie in the
/// Bessel domain `[0, 2]`; values outside are clamped.
pub fn waveform(kind: ProcessKind, p: &LatentParams, grid: TimeGrid, opts: WaveOptions) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    waveform_into(kind, p, opts, &mut out);
    out
}

/// [`waveform`] into a caller-provided buffer whose length is T.
pub fn waveform_into(kind: ProcessKind, p: &LatentParams, opts: WaveOptions, out: &mut [f64]) {
    let w_c = TAU * p.fc;
    match kind {
        ProcessKind::Mono => {
            for (t, y) in out.iter_mut().enumerate() {
                let t = t as f64;
                *y = (w_c * t + p.phi).sin() * (-t / p.tau).exp();
            }
        }
        ProcessKind::Am => {
            let w_m = TAU * p.fm;
            for (t, y) in out.iter_mut().enumerate() {
                let t = t as f64;
                let carrier = (w_c * t + p.phi).sin() * (-t / p.tau).exp();
                *y = carrier * (1.0 + p.im * (w_m * t).sin());
            }
        }
        ProcessKind::Fm => {
            let im = p.im.clamp(0.0, 2.0);
            let j0 = bessel_series(0, im);
            let j1 = bessel_series(1, im);
            let w_m = TAU * p.fm;
            for (t, y) in out.iter_mut().enumerate() {
                let t = t as f64;
                let envelope = (-t / p.tau).exp();
                let side_env = if opts.envelope_sidebands { envelope } else { 1.0 };
                let carrier = (w_c * t + p.phi).sin() * envelope;
                let upper = ((w_c + w_m) * t + p.phi).sin() * side_env;
                let lower = ((w_c - w_m) * t + p.phi).sin() * side_env;
                *y = j0 * carrier + j1 * upper - j1 * lower;
            }
        }
    }
}

fn check_kind(p: &LatentParams, expected: ProcessKind) -> Result<(), SignalError> {
    if p.kind != expected {
        return Err(SignalError::KindMismatch {
            expected,
            got: p.kind,
        });
    }
    Ok(())
}

fn synthesize(
    grid: TimeGrid,
    p: &LatentParams,
    noise: Option<&mut NoiseStream>,
    opts: WaveOptions,
    ranges: &LatentRanges,
) -> Result<SignalPair, SignalError> {
    ranges.validate(p)?;
    let clean = waveform(p.kind, p, grid, opts);
    let noisy = match noise {
        Some(stream) => clean.iter().map(|&c| c + stream.normal(p.sigma)).collect(),
        None => clean.clone(),
    };
    Ok(SignalPair::assemble(*p, clean, noisy))
}

/// Decaying monochromatic sine wave. Without a noise stream the noisy
/// series equals the clean one.
pub fn gen_mono(grid: TimeGrid, p: &LatentParams, noise: Option<&mut NoiseStream>) -> Result<SignalPair, SignalError> {
    check_kind(p, ProcessKind::Mono)?;
    synthesize(grid, p, noise, WaveOptions::default(), &LatentRanges::for_grid(grid)?)
}

/// Amplitude-modulated decaying sine wave.
pub fn gen_am(grid: TimeGrid, p: &LatentParams, noise: Option<&mut NoiseStream>) -> Result<SignalPair, SignalError> {
    check_kind(p, ProcessKind::Am)?;
    synthesize(grid, p, noise, WaveOptions::default(), &LatentRanges::for_grid(grid)?)
}

/// Frequency-modulated decaying sine wave (first-order Bessel expansion).
pub fn gen_fm(
    grid: TimeGrid,
    p: &LatentParams,
    noise: Option<&mut NoiseStream>,
    envelope_sidebands: bool,
) -> Result<SignalPair, SignalError> {
    check_kind(p, ProcessKind::Fm)?;
    let opts = WaveOptions { envelope_sidebands };
    synthesize(grid, p, noise, opts, &LatentRanges::for_grid(grid)?)
}

/// Generate a sample of kind `p.kind`, validating against custom ranges.
pub fn generate(
    grid: TimeGrid,
    p: &LatentParams,
    noise: Option<&mut NoiseStream>,
    opts: WaveOptions,
    ranges: &LatentRanges,
) -> Result<SignalPair, SignalError> {
    synthesize(grid, p, noise, opts, ranges)
}

/// Wrap an angle into `[0, 2π)`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if w >= TAU {
        0.0
    } else {
        w
    }
}
