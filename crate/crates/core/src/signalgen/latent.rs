//! Latent-parameter ranges, sampling, and the normalized encoding the
//! network regresses.
//!
//! Encoded order (full layout): `[Fc', sinφ', cosφ', τ', Fm', Im', σ']`.
//! Every primed value is a linear map of the parameter's sampling range onto
//! `[0, 1]`; the phase becomes `((sin φ + 1)/2, (cos φ + 1)/2)` so that the
//! loss sees its periodicity. The partial layout drops the modulation pair.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{wrap_phase, LatentParams, ProcessKind, SignalError, TimeGrid};

/// How far outside `[0, 1]` an encoded component may stray and still be
/// clamped rather than rejected by [`decode_latents`].
pub const CLAMP_BAND: f64 = 0.05;

/// Closed sampling interval of each latent parameter for one record length.
/// The phase always spans `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentRanges {
    pub fc: (f64, f64),
    pub tau: (f64, f64),
    pub fm: (f64, f64),
    pub im: (f64, f64),
    pub sigma: (f64, f64),
}

impl LatentRanges {
    /// Default ranges for record length T: `Fc ∈ [10/T, 0.1]`,
    /// `τ ∈ [0.2T, 8T]`, `Fm ∈ [1/T, 0.01]`, `Im ∈ [0, 1]`, `σ ∈ [0, 2]`.
    pub fn for_grid(grid: TimeGrid) -> Result<Self, SignalError> {
        let t = grid.len() as f64;
        let fc = (10.0 / t, 0.1);
        if fc.0 >= fc.1 {
            return Err(SignalError::EmptyCarrierRange(grid.len()));
        }
        Ok(Self {
            fc,
            tau: (0.2 * t, 8.0 * t),
            fm: (1.0 / t, 0.01),
            im: (0.0, 1.0),
            sigma: (0.0, 2.0),
        })
    }

    /// Replace the modulation-frequency range.
    pub fn with_fm_range(mut self, lo: f64, hi: f64) -> Result<Self, SignalError> {
        if !(lo > 0.0 && hi > lo && hi < 0.5) {
            return Err(SignalError::BadRange { field: "fm", lo, hi });
        }
        self.fm = (lo, hi);
        Ok(self)
    }

    fn check(field: &'static str, value: f64, (lo, hi): (f64, f64)) -> Result<(), SignalError> {
        if value >= lo && value <= hi {
            Ok(())
        } else {
            Err(SignalError::Range { field, value, lo, hi })
        }
    }

    /// Check every field of `p` against these ranges. Mono parameters must
    /// be in canonical form (`fm = im = 0`).
    pub fn validate(&self, p: &LatentParams) -> Result<(), SignalError> {
        Self::check("fc", p.fc, self.fc)?;
        if !(p.phi >= 0.0 && p.phi < TAU) {
            return Err(SignalError::Range {
                field: "phi",
                value: p.phi,
                lo: 0.0,
                hi: TAU,
            });
        }
        Self::check("tau", p.tau, self.tau)?;
        if p.kind.is_modulated() {
            Self::check("fm", p.fm, self.fm)?;
            Self::check("im", p.im, self.im)?;
        } else {
            Self::check("fm", p.fm, (0.0, 0.0))?;
            Self::check("im", p.im, (0.0, 0.0))?;
        }
        Self::check("sigma", p.sigma, self.sigma)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

/// Draw every latent uniformly from its range. Mono draws are canonical.
pub fn sample_latents<R: Rng + ?Sized>(kind: ProcessKind, ranges: &LatentRanges, rng: &mut R) -> LatentParams {
    let fc = uniform(rng, ranges.fc);
    let phi = rng.random_range(0.0..TAU);
    let tau = uniform(rng, ranges.tau);
    let (fm, im) = if kind.is_modulated() {
        (uniform(rng, ranges.fm), uniform(rng, ranges.im))
    } else {
        (0.0, 0.0)
    };
    let sigma = uniform(rng, ranges.sigma);
    LatentParams {
        fc,
        phi,
        tau,
        fm,
        im,
        sigma,
        kind,
    }
}

fn to_unit(x: f64, (lo, hi): (f64, f64)) -> f64 {
    (x - lo) / (hi - lo)
}

fn from_unit(u: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + u * (hi - lo)
}

/// Which latents the regressor is asked to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentLayout {
    /// All seven encoded latents.
    Full,
    /// Only the latents every process shares: `[Fc', sinφ', cosφ', τ', σ']`.
    Partial,
}

impl LatentLayout {
    pub fn dim(self) -> usize {
        match self {
            LatentLayout::Full => 7,
            LatentLayout::Partial => 5,
        }
    }

    pub fn from_dim(dim: usize) -> Option<Self> {
        match dim {
            7 => Some(LatentLayout::Full),
            5 => Some(LatentLayout::Partial),
            _ => None,
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        match self {
            LatentLayout::Full => &["fc", "sin_phi", "cos_phi", "tau", "fm", "im", "sigma"],
            LatentLayout::Partial => &["fc", "sin_phi", "cos_phi", "tau", "sigma"],
        }
    }

    /// Linear encoding without range checks. Values outside the sampling
    /// ranges map outside `[0, 1]`; this is what scoring uses, since fitted
    /// parameters may legitimately leave the sampling box. Mono parameters
    /// encode their modulation pair as zero.
    pub fn encode(self, p: &LatentParams, ranges: &LatentRanges) -> Vec<f64> {
        let fc = to_unit(p.fc, ranges.fc);
        let s = 0.5 * (p.phi.sin() + 1.0);
        let c = 0.5 * (p.phi.cos() + 1.0);
        let tau = to_unit(p.tau, ranges.tau);
        let sigma = to_unit(p.sigma, ranges.sigma);
        match self {
            LatentLayout::Full => {
                let (fm, im) = if p.kind.is_modulated() {
                    (to_unit(p.fm, ranges.fm), to_unit(p.im, ranges.im))
                } else {
                    (0.0, 0.0)
                };
                vec![fc, s, c, tau, fm, im, sigma]
            }
            LatentLayout::Partial => vec![fc, s, c, tau, sigma],
        }
    }

    /// Inverse of [`LatentLayout::encode`], clamping components that are at
    /// most [`CLAMP_BAND`] outside `[0, 1]`. The partial layout yields zero
    /// modulation. Mono decodes canonically.
    pub fn decode(self, v: &[f64], kind: ProcessKind, ranges: &LatentRanges) -> Result<LatentParams, SignalError> {
        if v.len() != self.dim() {
            return Err(SignalError::LatentLength {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let names = self.names();
        let mut u = [0.0; 7];
        for (i, (&x, &field)) in v.iter().zip(names).enumerate() {
            if !(x >= -CLAMP_BAND && x <= 1.0 + CLAMP_BAND) {
                return Err(SignalError::Decode {
                    field,
                    value: x,
                    band: CLAMP_BAND,
                });
            }
            if !(0.0..=1.0).contains(&x) {
                log::warn!("clamping encoded latent `{field}` = {x} into [0, 1]");
            }
            u[i] = x.clamp(0.0, 1.0);
        }
        let (fc, s, c, tau) = (u[0], u[1], u[2], u[3]);
        let (fm, im, sigma) = match self {
            LatentLayout::Full => (u[4], u[5], u[6]),
            LatentLayout::Partial => (0.0, 0.0, u[4]),
        };
        let (ys, yc) = (2.0 * s - 1.0, 2.0 * c - 1.0);
        let phi = if ys == 0.0 && yc == 0.0 {
            0.0
        } else {
            wrap_phase(ys.atan2(yc))
        };
        let modulated = kind.is_modulated() && self == LatentLayout::Full;
        Ok(LatentParams {
            fc: from_unit(fc, ranges.fc),
            phi,
            tau: from_unit(tau, ranges.tau),
            fm: if modulated { from_unit(fm, ranges.fm) } else { 0.0 },
            im: if modulated { from_unit(im, ranges.im) } else { 0.0 },
            sigma: from_unit(sigma, ranges.sigma),
            kind,
        })
    }
}

/// Range-checked seven-component encoding.
pub fn encode_latents(p: &LatentParams, ranges: &LatentRanges) -> Result<[f64; 7], SignalError> {
    ranges.validate(p)?;
    let v = LatentLayout::Full.encode(p, ranges);
    let mut out = [0.0; 7];
    out.copy_from_slice(&v);
    Ok(out)
}

/// Inverse of [`encode_latents`]; the process kind is not part of the
/// encoding and must be supplied.
pub fn decode_latents(v: &[f64], kind: ProcessKind, ranges: &LatentRanges) -> Result<LatentParams, SignalError> {
    LatentLayout::Full.decode(v, kind, ranges)
}
