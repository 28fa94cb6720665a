//! Synthetic decaying oscillations, a unified encoder/regressor/decoder
//! network that denoises them and regresses their latent parameters, and a
//! Levenberg-Marquardt backend to benchmark and assist it.
//!
//! The crate is organised bottom-up:
//!
//! - [`signalgen`]: monochromatic, AM and FM decaying sine waves with
//!   Gaussian noise, latent-parameter sampling and encoding, dataset files.
//! - [`ndnet`]: a small neural-network stack (1-D convolutions, pooling,
//!   upsampling, dense layers, Adam) with hand-written backpropagation.
//! - [`model`]: the unified network, its weighted dual loss and training.
//! - [`lsfit`]: Levenberg-Marquardt least-squares fits of the noiseless
//!   generating processes.
//! - [`harness`]: the benchmark, assisted-fit and partial-information
//!   experiments plus CSV/JSON/SVG export.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is on and plain iteration otherwise. Results are
//! identical either way.

pub mod exec;
pub mod harness;
pub mod lsfit;
pub mod model;
pub mod ndnet;
pub mod rng;
pub mod signalgen;

pub use model::{ArchConfig, LossReport, ModelBundle, ScaleProfile, TrainConfig};
pub use signalgen::{LatentParams, NormMeta, ProcessKind, SignalPair, TimeGrid};
