//! Desk-scale training runs with fixed seeds. These share the model cache
//! with the acceptance suite.

mod common;

use common::{BETA0, BETA_HALF, DESK, MONO};
use oscifit::harness::{test_samples, Predictor, TestSample};
use oscifit::model::ModelBundle;
use oscifit::rng::NoiseStream;
use oscifit::signalgen::{gen_mono, ProcessKind, TimeGrid};

fn last(m: &ModelBundle) -> oscifit::model::HistoryRow {
    *m.history.last().expect("trained model has history")
}

#[test]
fn desk_run_lowers_weighted_validation_loss() {
    let m = DESK.model().unwrap();
    let (first, end) = (m.history[0], last(&m));
    assert!(end.weighted < first.weighted, "{first:?} -> {end:?}");
}

#[test]
fn beta_zero_improves_denoising_but_not_regression() {
    let b0 = BETA0.model().unwrap();
    let half = BETA_HALF.model().unwrap();
    let (first, end) = (b0.history[0], last(&b0));
    assert!(end.mse_dec < first.mse_dec, "{first:?} -> {end:?}");
    assert!(end.mse_reg > 0.5 * last(&half).mse_reg, "beta 0: {end:?}, beta 0.5: {:?}", last(&half));
}

#[test]
fn trained_model_denoises_noiseless_mono() {
    let m = MONO.model().unwrap();
    let grid = TimeGrid::new(256).unwrap();
    // Noiseless versions of a fresh test set.
    let samples: Vec<_> = test_samples(ProcessKind::Mono, 100, 256, 4242)
        .unwrap()
        .into_iter()
        .map(|s| {
            let mut p = s.pair.latents;
            p.sigma = 0.0;
            let pair = gen_mono(grid, &p, None::<&mut NoiseStream>).unwrap();
            TestSample::new(s.id, pair)
        })
        .collect();
    let out = Predictor::predict(&m, &samples).unwrap();
    let mse: Vec<f64> = samples
        .iter()
        .zip(&out)
        .map(|(s, o)| s.clean.iter().zip(&o.signal).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 256.0)
        .collect();
    let mean = mse.iter().sum::<f64>() / mse.len() as f64;
    assert!(mean <= 5e-3, "mean denoising MSE at sigma 0: {mean:.3e}");
}
