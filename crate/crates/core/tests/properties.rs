use std::f64::consts::TAU;

use oscifit::harness::{eval_benchmark, write_records_csv, EvalOptions, TruthStub};
use oscifit::lsfit::{fit_to_clean, lm_fit, Bounds, FitProblem};
use oscifit::model::{weighted_loss, ArchConfig, ModelBundle, ScaleProfile};
use oscifit::ndnet::gradcheck::{check_gradients, random_input, GradCheckOptions};
use oscifit::ndnet::{Init, Layer, Sequential};
use oscifit::rng::{self, NoiseStream};
use oscifit::signalgen::{
    gen_am, gen_fm, gen_mono, make_dataset, normalize_signal, sample_latents, GenerationConfig, LatentLayout, LatentParams,
    LatentRanges, ProcessKind, TimeGrid,
};
use proptest::prelude::*;

fn grid(t: usize) -> TimeGrid {
    TimeGrid::new(t).unwrap()
}

fn ranges(t: usize) -> LatentRanges {
    LatentRanges::for_grid(grid(t)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn am_and_fm_reduce_to_mono(seed in any::<u64>()) {
        let r = ranges(256);
        let m = sample_latents(ProcessKind::Mono, &r, &mut rng::seeded(seed));
        let mono = gen_mono(grid(256), &m, Some(&mut NoiseStream::new(seed))).unwrap();
        let am_p = LatentParams::modulated(ProcessKind::Am, m.fc, m.phi, m.tau, 0.005, 0.0, m.sigma);
        let am = gen_am(grid(256), &am_p, Some(&mut NoiseStream::new(seed))).unwrap();
        prop_assert_eq!(&am.clean, &mono.clean);
        prop_assert_eq!(&am.noisy, &mono.noisy);
        let fm_p = LatentParams { kind: ProcessKind::Fm, ..am_p };
        let fm = gen_fm(grid(256), &fm_p, Some(&mut NoiseStream::new(seed)), true).unwrap();
        for (a, b) in fm.noisy.iter().zip(&mono.noisy) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalization_roundtrip(x in prop::collection::vec(-1e6f64..1e6, 2..200)) {
        prop_assume!(x.iter().any(|v| *v != x[0]));
        let (y, meta) = normalize_signal(&x).unwrap();
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in meta.invert_all(&y).iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn noise_mean_within_four_standard_errors(seed in any::<u64>(), sigma in 0.05f64..2.0) {
        let r = ranges(512);
        let mut p = sample_latents(ProcessKind::Mono, &r, &mut rng::seeded(seed));
        p.sigma = sigma;
        let s = gen_mono(grid(512), &p, Some(&mut NoiseStream::new(seed ^ 1))).unwrap();
        let mean = s.noisy.iter().zip(&s.clean).map(|(a, b)| a - b).sum::<f64>() / 512.0;
        prop_assert!(mean.abs() <= 4.0 * sigma / 512f64.sqrt());
    }

    #[test]
    fn weighted_loss_identity(
        sig in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 8..64),
        lat in prop::collection::vec((-0.2f64..1.2, 0.0f64..1.0), 7),
        beta in 0.0f64..=1.0,
    ) {
        let (ps, ts): (Vec<f64>, Vec<f64>) = sig.into_iter().unzip();
        let (pl, tl): (Vec<f64>, Vec<f64>) = lat.into_iter().unzip();
        let r = weighted_loss(&ps, &pl, &ts, &tl, beta).unwrap();
        prop_assert!((r.weighted - (beta * r.mse_reg + (1.0 - beta) * r.mse_dec)).abs() <= 1e-12);
        prop_assert!(r.mse_reg >= 0.0 && r.mse_dec >= 0.0);
    }

    #[test]
    fn fits_stay_in_bounds_with_wrapped_phase(seed in any::<u64>(), k in 0u8..3) {
        let kind = ProcessKind::from_tag(k).unwrap();
        let r = ranges(256);
        let p = sample_latents(kind, &r, &mut rng::seeded(seed));
        let truth = oscifit::signalgen::generate(grid(256), &p, Some(&mut NoiseStream::new(seed)), Default::default(), &r).unwrap();
        // Start from a different draw of the same kind.
        let init = sample_latents(kind, &r, &mut rng::seeded(seed.wrapping_add(1)));
        let fit = lm_fit(&FitProblem::new(kind, truth.noisy.clone(), init).unwrap()).unwrap();
        prop_assert!(Bounds::for_grid(grid(256)).unwrap().check(&fit.params).is_ok());
        prop_assert!((0.0..TAU).contains(&fit.params.phi));
        prop_assert!(fit.sse.is_finite() && fit.sse >= 0.0);
        // Shifting φ by a full turn leaves the reconstruction unchanged.
        let mut shifted = fit;
        shifted.params.phi += TAU;
        let (a, b) = (fit_to_clean(&fit, grid(256)), fit_to_clean(&shifted, grid(256)));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_conv_and_dense_stacks_pass_gradient_check(
        seed in any::<u64>(),
        k in 1usize..7,
        cin in 1usize..4,
        cout in 1usize..4,
        len in 4usize..12,
        pool in 1usize..4,
    ) {
        let mut r = rng::seeded(seed);
        let pooled = len.div_ceil(pool);
        let net = Sequential::new(vec![
            Layer::conv1d(k, cin, cout, Init::GlorotUniform, &mut r),
            Layer::MaxPool1d { width: pool },
            Layer::Flatten,
            Layer::dense(pooled * cout, 3, Init::HeUniform, &mut r),
        ]);
        let x = random_input(&[2, len, cin], 0.0, seed);
        let rep = check_gradients(&net, &x, GradCheckOptions { seed, ..Default::default() }).unwrap();
        prop_assert!(rep.max_rel_error <= 1e-4, "{:?}", rep);
    }

    #[test]
    fn forward_is_finite_on_in_range_data(seed in any::<u64>()) {
        let arch = ArchConfig { length: 128, bottleneck_dim: 16, latent_dim: 7, profile: ScaleProfile::Desk };
        let m = ModelBundle::new(&arch, seed).unwrap();
        let ds = make_dataset(&GenerationConfig::new(&ProcessKind::ALL, 4, 128, seed)).unwrap();
        let x: Vec<f32> = ds.records.iter().flat_map(|r| r.noisy.iter().copied()).collect();
        let p = m.predict_batch(&x).unwrap();
        prop_assert!(p.signals.iter().chain(&p.latents).all(|v| v.is_finite()));
    }

    #[test]
    fn benchmarks_sorted_and_reproducible(seed in any::<u64>()) {
        let stub = TruthStub { length: 128, layout: LatentLayout::Full };
        let a = eval_benchmark(&stub, ProcessKind::Am, 6, seed, EvalOptions::default()).unwrap();
        prop_assert!(a.windows(2).all(|w| w[0].sigma_true <= w[1].sigma_true));
        let b = eval_benchmark(&stub, ProcessKind::Am, 6, seed, EvalOptions::default()).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_records_csv(&mut ca, &a).unwrap();
        write_records_csv(&mut cb, &b).unwrap();
        prop_assert_eq!(ca, cb);
    }
}

#[test]
fn datasets_are_byte_identical_for_equal_seeds() {
    let cfg = GenerationConfig::new(&ProcessKind::ALL, 50, 128, 99);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    make_dataset(&cfg).unwrap().write_to(&mut a).unwrap();
    make_dataset(&cfg).unwrap().write_to(&mut b).unwrap();
    assert_eq!(a, b);
    let other = GenerationConfig { seed: 100, ..cfg };
    let mut c = Vec::new();
    make_dataset(&other).unwrap().write_to(&mut c).unwrap();
    assert_ne!(a, c);
}
