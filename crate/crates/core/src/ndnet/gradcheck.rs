//! Finite-difference gradient checks for `f64` stacks.
//!
//! The scalar probed is `L = Σ c·y` for a fixed random projection `c`, so
//! `dL/dy = c` seeds the backward pass. Central differences are taken at
//! randomly chosen input and parameter coordinates. A coordinate whose
//! difference quotient changes between steps `h` and `h/2` straddles a kink
//! (ReLU at zero, a max-pool tie) and is resampled.

use rand::Rng;

use super::sequential::Sequential;
use super::tensor::Tensor;
use super::NetError;
use crate::rng;

/// Check settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub points: usize,
    pub step: f64,
    /// Relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            points: 50,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// Where a probed coordinate lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coord {
    Input(usize),
    Param { tensor: usize, index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub resampled: usize,
    pub max_rel_error: f64,
    pub worst: Option<Coord>,
}

fn objective(net: &Sequential<f64>, x: &Tensor<f64>, c: &[f64]) -> Result<f64, NetError> {
    let y = net.forward(x.clone())?;
    Ok(y.data().iter().zip(c).map(|(a, b)| a * b).sum())
}

fn perturbed(net: &mut Sequential<f64>, x: &mut Tensor<f64>, at: Coord, delta: f64) {
    match at {
        Coord::Input(i) => x.data_mut()[i] += delta,
        Coord::Param { tensor, index } => net.params_mut()[tensor].data_mut()[index] += delta,
    }
}

fn central(net: &mut Sequential<f64>, x: &mut Tensor<f64>, c: &[f64], at: Coord, h: f64) -> Result<f64, NetError> {
    perturbed(net, x, at, h);
    let up = objective(net, x, c);
    perturbed(net, x, at, -2.0 * h);
    let down = objective(net, x, c);
    perturbed(net, x, at, h);
    Ok((up? - down?) / (2.0 * h))
}

/// Compare analytic and central-difference gradients of `net` at input `x`.
/// Half of the points go to parameters when the stack has any.
pub fn check_gradients(net: &Sequential<f64>, x: &Tensor<f64>, opts: GradCheckOptions) -> Result<GradCheckReport, NetError> {
    let mut rng = rng::stream(opts.seed, 0x9c);
    let out_shape = net.output_shape(x.shape())?;
    let c: Vec<f64> = (0..out_shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect();

    let (_, trace) = net.forward_train(x.clone())?;
    let mut grads = net.zero_grads();
    let dx = net
        .backward(trace, Tensor::new(&out_shape, c.clone())?, &mut grads, true)?
        .expect("input gradient requested");

    let sizes: Vec<usize> = grads.tensors.iter().map(|t| t.len()).collect();
    let n_params: usize = sizes.iter().sum();
    let mut work = net.clone();
    let mut xw = x.clone();
    let mut report = GradCheckReport {
        checked: 0,
        resampled: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let max_tries = opts.points * 20;
    let mut tries = 0;
    while report.checked < opts.points {
        tries += 1;
        if tries > max_tries {
            return Err(NetError::Hyper(format!(
                "gradient check found only {} kink-free points in {max_tries} tries",
                report.checked
            )));
        }
        let at = if n_params > 0 && report.checked % 2 == 1 {
            let mut k = rng.random_range(0..n_params);
            let mut tensor = 0;
            while k >= sizes[tensor] {
                k -= sizes[tensor];
                tensor += 1;
            }
            Coord::Param { tensor, index: k }
        } else {
            Coord::Input(rng.random_range(0..x.len()))
        };
        let analytic = match at {
            Coord::Input(i) => dx.data()[i],
            Coord::Param { tensor, index } => grads.tensors[tensor].data()[index],
        };
        let fd = central(&mut work, &mut xw, &c, at, opts.step)?;
        let fd_half = central(&mut work, &mut xw, &c, at, opts.step / 2.0)?;
        if (fd - fd_half).abs() > 1e-6 * fd.abs().max(1.0) {
            report.resampled += 1;
            continue;
        }
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(opts.floor);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(at);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Uniform input tensor in `[-1, 1)`, with entries pushed at least
/// `margin` away from zero.
pub fn random_input(shape: &[usize], margin: f64, seed: u64) -> Tensor<f64> {
    let mut rng = rng::stream(seed, 0x1a);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() < margin {
                margin.copysign(v)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndnet::{Activation, Init, Layer};

    fn one(layer: Layer<f64>, shape: &[usize], seed: u64) -> GradCheckReport {
        let net = Sequential::new(vec![layer]);
        let x = random_input(shape, 0.05, seed);
        check_gradients(&net, &x, GradCheckOptions { seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn each_layer_passes() {
        let mut r = rng::seeded(3);
        let cases: Vec<(Layer<f64>, Vec<usize>)> = vec![
            (Layer::conv1d(5, 2, 3, Init::GlorotUniform, &mut r), vec![2, 11, 2]),
            (Layer::conv1d(4, 3, 2, Init::HeUniform, &mut r), vec![2, 9, 3]),
            (Layer::dense(7, 4, Init::HeUniform, &mut r), vec![3, 7]),
            (Layer::MaxPool1d { width: 4 }, vec![2, 10, 3]),
            (Layer::UpSample1d { factor: 3 }, vec![2, 5, 2]),
            (Layer::Act(Activation::Relu), vec![3, 8]),
            (Layer::Act(Activation::Sigmoid), vec![3, 8]),
            (Layer::Act(Activation::Linear), vec![3, 8]),
            (Layer::Flatten, vec![2, 4, 3]),
            (Layer::Reshape { dims: vec![6, 2] }, vec![2, 12]),
        ];
        for (i, (layer, shape)) in cases.into_iter().enumerate() {
            let name = layer.name();
            let rep = one(layer, &shape, i as u64);
            assert_eq!(rep.checked, 50);
            assert!(rep.max_rel_error <= 1e-4, "{name}: {rep:?}");
        }
    }

    #[test]
    fn composed_stack_passes() {
        let mut r = rng::seeded(9);
        let net = Sequential::new(vec![
            Layer::conv1d(3, 1, 4, Init::GlorotUniform, &mut r),
            Layer::Act(Activation::Relu),
            Layer::MaxPool1d { width: 2 },
            Layer::UpSample1d { factor: 2 },
            Layer::Flatten,
            Layer::dense(48, 5, Init::HeUniform, &mut r),
            Layer::Act(Activation::Sigmoid),
        ]);
        let x = random_input(&[2, 12, 1], 0.0, 4);
        let rep = check_gradients(&net, &x, GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // Flip the sign of the seed direction: analytic and numeric disagree.
        let net = Sequential::new(vec![Layer::<f64>::Act(Activation::Sigmoid)]);
        let x = random_input(&[1, 4], 0.0, 1);
        let (_, trace) = net.forward_train(x.clone()).unwrap();
        let mut g = net.zero_grads();
        let dx = net.backward(trace, Tensor::new(&[1, 4], vec![-1.0; 4]).unwrap(), &mut g, true).unwrap().unwrap();
        let fd = {
            let mut w = net.clone();
            let mut xw = x.clone();
            central(&mut w, &mut xw, &[1.0; 4], Coord::Input(0), 1e-5).unwrap()
        };
        assert!((dx.data()[0] - fd).abs() > 1e-3);
    }
}
