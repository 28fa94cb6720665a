//! Desk-scale trained models shared by the acceptance suite and the
//! training tests.
//!
//! Trained models are cached under the cargo target temp directory, keyed by
//! their full training recipe, and reused by later runs. Set
//! `OSCIFIT_ACCEPTANCE_RETRAIN=1` to ignore the cache.

#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Instant;

use oscifit::model::{train, ArchConfig, ModelBundle, ScaleProfile, TrainConfig, TrainOptions};
use oscifit::signalgen::ProcessKind;

/// Mini-batch size of the 50 000-sample runs.
pub const TRAIN_BATCH: usize = 16;

pub fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// A training recipe.
#[derive(Debug, Clone, Copy)]
pub struct Recipe {
    pub name: &'static str,
    pub kinds: &'static [ProcessKind],
    pub latent_dim: usize,
    pub beta: f64,
    pub samples: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

/// Desk schedule with the default β.
pub const DESK: Recipe = Recipe {
    name: "desk",
    kinds: &[ProcessKind::Mono],
    latent_dim: 7,
    beta: 0.001,
    samples: 20_000,
    epochs: 3,
    batch: 64,
    seed: 21,
};
pub const BETA0: Recipe = Recipe { name: "beta0", beta: 0.0, ..DESK };
pub const BETA_HALF: Recipe = Recipe { name: "beta_half", beta: 0.5, ..DESK };
pub const BETA1: Recipe = Recipe { name: "beta1", beta: 1.0, ..DESK };

pub const MONO: Recipe = Recipe {
    name: "mono",
    kinds: &[ProcessKind::Mono],
    latent_dim: 7,
    beta: 0.001,
    samples: 50_000,
    epochs: 5,
    batch: TRAIN_BATCH,
    seed: 11,
};
pub const PARTIAL: Recipe = Recipe {
    name: "partial",
    kinds: &ProcessKind::ALL,
    latent_dim: 5,
    seed: 12,
    ..MONO
};
pub const AM: Recipe = Recipe {
    name: "am",
    kinds: &[ProcessKind::Am],
    seed: 13,
    ..MONO
};

impl Recipe {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            beta: self.beta,
            epochs: self.epochs,
            samples_per_set: self.samples,
            batch: self.batch,
            seed: self.seed,
            ..TrainConfig::desk(self.kinds)
        }
    }

    fn file(&self) -> PathBuf {
        let kinds: Vec<&str> = self.kinds.iter().map(|k| k.name()).collect();
        let name = format!(
            "{}-v{}-{}-ld{}-b{}-n{}-e{}-bs{}-s{}.oscm",
            self.name,
            env!("CARGO_PKG_VERSION"),
            kinds.join("+"),
            self.latent_dim,
            self.beta,
            self.samples,
            self.epochs,
            self.batch,
            self.seed
        );
        PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
    }

    /// Load the cached model or train (and cache) it.
    pub fn model(&self) -> Result<ModelBundle, String> {
        let path = self.file();
        let retrain = std::env::var_os("OSCIFIT_ACCEPTANCE_RETRAIN").is_some_and(|v| v != "0");
        if !retrain && path.is_file() {
            eprintln!("  using cached {} model {}", self.name, path.display());
            return ModelBundle::load(&path).map_err(err);
        }
        eprintln!(
            "  training {} model: {} samples x {} epochs, batch {}",
            self.name, self.samples, self.epochs, self.batch
        );
        let t0 = Instant::now();
        let mut model = ModelBundle::new(&ArchConfig::new(ScaleProfile::Desk, self.latent_dim), self.seed).map_err(err)?;
        train(&mut model, &self.train_config(), &TrainOptions::default()).map_err(err)?;
        eprintln!("  trained {} in {:.0?}", self.name, t0.elapsed());
        let dir = path.parent().expect("cache dir");
        std::fs::create_dir_all(dir).map_err(err)?;
        // Write then rename so an interrupted run leaves no partial file.
        let tmp = path.with_extension("partial");
        model.save(&tmp).map_err(err)?;
        std::fs::rename(&tmp, &path).map_err(err)?;
        Ok(model)
    }
}
