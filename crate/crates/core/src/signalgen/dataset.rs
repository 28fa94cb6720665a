//! Seeded dataset generation and the `OSC1` binary file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! header : "OSC1" | version u16 | T u32 | count u64 | kind-mask u8
//! record : kind u8 | Fc φ τ Fm Im σ (f64 ×6) | offset scale (f64 ×2)
//!          | noisy f32 ×T | clean f32 ×T
//! ```
//!
//! Stored series are normalized: both are mapped with the record's
//! `(offset, scale)`, which was derived from the noisy series. Physical
//! values are recovered with [`NormMeta::invert`].

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{generate, sample_latents, LatentParams, LatentRanges, NormMeta, ProcessKind, SignalError, SignalPair, TimeGrid, WaveOptions};
use crate::exec;
use crate::rng::{self, NoiseStream};

const MAGIC: &[u8; 4] = b"OSC1";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("kinds set is empty")]
    EmptyKinds,
    #[error("sample count must be at least 1")]
    Empty,
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub kinds: Vec<ProcessKind>,
    pub n: u64,
    #[serde(rename = "T")]
    pub length: usize,
    pub seed: u64,
    #[serde(default)]
    pub fm_range_override: Option<[f64; 2]>,
    #[serde(default = "default_true")]
    pub envelope_sidebands: bool,
}

fn default_true() -> bool {
    true
}

impl GenerationConfig {
    pub fn new(kinds: &[ProcessKind], n: u64, length: usize, seed: u64) -> Self {
        Self {
            kinds: kinds.to_vec(),
            n,
            length,
            seed,
            fm_range_override: None,
            envelope_sidebands: true,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid, SignalError> {
        TimeGrid::new(self.length)
    }

    pub fn ranges(&self) -> Result<LatentRanges, SignalError> {
        let r = LatentRanges::for_grid(self.grid()?)?;
        match self.fm_range_override {
            Some([lo, hi]) => r.with_fm_range(lo, hi),
            None => Ok(r),
        }
    }

    pub fn wave_options(&self) -> WaveOptions {
        WaveOptions {
            envelope_sidebands: self.envelope_sidebands,
        }
    }

    fn sorted_kinds(&self) -> Result<Vec<ProcessKind>, DatasetError> {
        let mut kinds = self.kinds.clone();
        kinds.sort_unstable();
        kinds.dedup();
        if kinds.is_empty() {
            return Err(DatasetError::EmptyKinds);
        }
        Ok(kinds)
    }

    /// Sample `index` of this configuration in physical units. Depends only
    /// on `(seed, index)` and the configuration, never on other samples.
    pub fn sample(&self, index: u64) -> Result<SignalPair, DatasetError> {
        let kinds = self.sorted_kinds()?;
        self.sample_with(&kinds, &self.ranges()?, index)
    }

    fn sample_with(&self, kinds: &[ProcessKind], ranges: &LatentRanges, index: u64) -> Result<SignalPair, DatasetError> {
        use rand::Rng;
        let mut g = rng::stream(self.seed, index);
        let kind = kinds[g.random_range(0..kinds.len())];
        let latents = sample_latents(kind, ranges, &mut g);
        let mut noise = NoiseStream::from_rng(g);
        Ok(generate(self.grid()?, &latents, Some(&mut noise), self.wave_options(), ranges)?)
    }

    /// Generate all `n` samples in physical units.
    pub fn samples(&self) -> Result<Vec<SignalPair>, DatasetError> {
        if self.n == 0 {
            return Err(DatasetError::Empty);
        }
        let kinds = self.sorted_kinds()?;
        let ranges = self.ranges()?;
        exec::map_indexed(self.n as usize, |i| self.sample_with(&kinds, &ranges, i as u64))
            .into_iter()
            .collect()
    }

    fn kind_mask(&self) -> u8 {
        self.kinds.iter().fold(0u8, |m, k| m | (1 << k.tag()))
    }
}

/// One stored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub latents: LatentParams,
    pub norm: NormMeta,
    /// Normalized noisy series (network input).
    pub noisy: Vec<f32>,
    /// Normalized clean series (denoising target).
    pub clean: Vec<f32>,
}

impl Record {
    pub fn from_pair(pair: &SignalPair) -> Self {
        Self {
            latents: pair.latents,
            norm: pair.norm,
            noisy: pair.noisy.iter().map(|&x| pair.norm.apply(x) as f32).collect(),
            clean: pair.clean.iter().map(|&x| pair.norm.apply(x) as f32).collect(),
        }
    }

    /// Noisy series back in physical units (f32 storage precision).
    pub fn noisy_physical(&self) -> Vec<f64> {
        self.noisy.iter().map(|&y| self.norm.invert(y as f64)).collect()
    }
}

/// An in-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: TimeGrid,
    pub kind_mask: u8,
    pub records: Vec<Record>,
}

/// Generate `cfg.n` samples with kinds drawn uniformly from `cfg.kinds`.
pub fn make_dataset(cfg: &GenerationConfig) -> Result<Dataset, DatasetError> {
    let pairs = cfg.samples()?;
    Ok(Dataset {
        grid: cfg.grid()?,
        kind_mask: cfg.kind_mask(),
        records: pairs.iter().map(Record::from_pair).collect(),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn kinds(&self) -> Vec<ProcessKind> {
        ProcessKind::ALL
            .into_iter()
            .filter(|k| self.kind_mask & (1 << k.tag()) != 0)
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let t = self.grid.len();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(t as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&[self.kind_mask])?;
        for r in &self.records {
            w.write_all(&[r.latents.kind.tag()])?;
            for v in r.latents.to_array() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&r.norm.offset.to_le_bytes())?;
            w.write_all(&r.norm.scale.to_le_bytes())?;
            for v in r.noisy.iter().chain(&r.clean) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DatasetError::Format(format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(DatasetError::Format(format!("unsupported version {version}")));
        }
        let t = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let grid = TimeGrid::new(t)?;
        let count = u64::from_le_bytes(read_array(&mut r)?);
        let [kind_mask] = read_array::<_, 1>(&mut r)?;
        let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
        for i in 0..count {
            let [tag] = read_array::<_, 1>(&mut r)?;
            let kind = ProcessKind::from_tag(tag)
                .map_err(|e| DatasetError::Format(format!("record {i}: {e}")))?;
            let mut vals = [0.0; 6];
            for v in &mut vals {
                *v = f64::from_le_bytes(read_array(&mut r)?);
            }
            let offset = f64::from_le_bytes(read_array(&mut r)?);
            let scale = f64::from_le_bytes(read_array(&mut r)?);
            let series = |r: &mut R| -> Result<Vec<f32>, DatasetError> {
                (0..t).map(|_| Ok(f32::from_le_bytes(read_array(r)?))).collect()
            };
            let noisy = series(&mut r)?;
            let clean = series(&mut r)?;
            records.push(Record {
                latents: LatentParams::from_array(kind, vals),
                norm: NormMeta { offset, scale },
                noisy,
                clean,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(DatasetError::Format("trailing bytes after last record".into()));
        }
        Ok(Self {
            grid,
            kind_mask,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        self.write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bytes() {
        let cfg = GenerationConfig::new(&ProcessKind::ALL, 50, 128, 7);
        let mut a = Vec::new();
        let mut b = Vec::new();
        make_dataset(&cfg).unwrap().write_to(&mut a).unwrap();
        make_dataset(&cfg).unwrap().write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4 + 2 + 4 + 8 + 1 + 50 * (1 + 64 + 8 * 128));
    }

    #[test]
    fn single_record_roundtrip() {
        let cfg = GenerationConfig::new(&[ProcessKind::Fm], 1, 256, 3);
        let ds = make_dataset(&cfg).unwrap();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let back = Dataset::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.len(), 1);
        assert_eq!(back.kinds(), vec![ProcessKind::Fm]);
    }

    #[test]
    fn kind_balance_within_three_sigma() {
        let cfg = GenerationConfig::new(&ProcessKind::ALL, 9999, 128, 11);
        let ds = make_dataset(&cfg).unwrap();
        let n = ds.len() as f64;
        let sd = (n * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for kind in ProcessKind::ALL {
            let c = ds.records.iter().filter(|r| r.latents.kind == kind).count() as f64;
            assert!((c - n / 3.0).abs() < 3.0 * sd, "{kind}: {c}");
        }
    }

    #[test]
    fn sample_independent_of_dataset_size() {
        let small = GenerationConfig::new(&ProcessKind::ALL, 5, 128, 99);
        let large = GenerationConfig { n: 500, ..small.clone() };
        let a = small.samples().unwrap();
        let b = large.samples().unwrap();
        assert_eq!(a[..], b[..5]);
        assert_eq!(large.sample(4).unwrap(), a[4]);
    }

    #[test]
    fn stored_series_are_normalized() {
        let cfg = GenerationConfig::new(&[ProcessKind::Am], 20, 128, 5);
        for r in make_dataset(&cfg).unwrap().records {
            let max = r.noisy.iter().cloned().fold(f32::MIN, f32::max);
            let min = r.noisy.iter().cloned().fold(f32::MAX, f32::min);
            assert!((max - 1.0).abs() < 1e-6 && min.abs() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        let mut cfg = GenerationConfig::new(&[], 10, 128, 1);
        assert!(matches!(make_dataset(&cfg), Err(DatasetError::EmptyKinds)));
        cfg.kinds = vec![ProcessKind::Mono];
        cfg.n = 0;
        assert!(matches!(make_dataset(&cfg), Err(DatasetError::Empty)));
        assert!(matches!(Dataset::read_from(&b"OSC2"[..]), Err(DatasetError::Format(_))));
        let mut bytes = Vec::new();
        cfg.n = 2;
        make_dataset(&cfg).unwrap().write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Dataset::read_from(bytes.as_slice()), Err(DatasetError::Io(_))));
    }
}
