use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use super::NetError;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub config: AdamConfig,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, params: &[&Tensor<S>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            config,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any parameter.
pub fn adam_step<S: Scalar>(params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>], state: &mut AdamState<S>) -> Result<(), NetError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NetError::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(NetError::Shape(format!("adam: tensor {i} shape {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        g.ensure_finite(&format!("gradient of parameter tensor {i}"))?;
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
    let (one_b1, one_b2) = (S::from_f64(1.0 - c.beta1), S::from_f64(1.0 - c.beta2));
    let (inv_bc1, inv_bc2) = (S::from_f64(1.0 / bc1), S::from_f64(1.0 / bc2));
    let (lr, eps) = (S::from_f64(c.lr), S::from_f64(c.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &gi), (mi, vi)) in it {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi * inv_bc1;
            let v_hat = *vi * inv_bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[x]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        for g in [0.3, -7.0, 1e-3] {
            let mut w = scalar(1.0);
            let mut st = AdamState::new(AdamConfig::default(), &[&w]);
            adam_step(&mut [&mut w], &[&scalar(g)], &mut st).unwrap();
            assert!((w.data()[0] - (1.0 - 1e-3 * f64::signum(g))).abs() < 1e-6);
            assert_eq!(st.step, 1);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut w = scalar(2.5);
        let mut st = AdamState::new(AdamConfig::default(), &[&w]);
        for _ in 0..5 {
            adam_step(&mut [&mut w], &[&scalar(0.0)], &mut st).unwrap();
        }
        assert_eq!(w.data()[0], 2.5);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn scalar_quadratic_descent() {
        // f(w) = (w - 3)^2 from w = 0 with lr 0.1 (the 1e-3 default moves
        // at most 0.2 in 200 steps).
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut w = scalar(0.0);
        let mut st = AdamState::new(cfg, &[&w]);
        for _ in 0..200 {
            let g = scalar(2.0 * (w.data()[0] - 3.0));
            adam_step(&mut [&mut w], &[&g], &mut st).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 0.5, "w = {}", w.data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut w = scalar(1.0);
        let mut st = AdamState::new(AdamConfig::default(), &[&w]);
        let r = adam_step(&mut [&mut w], &[&scalar(f64::NAN)], &mut st);
        assert!(matches!(r, Err(NetError::NonFinite(_))));
        assert_eq!((w.data()[0], st.step), (1.0, 0));
    }
}
