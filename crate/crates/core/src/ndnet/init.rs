use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::rng::StreamRng;

fn uniform_tensor<S: Scalar>(limit: f64, shape: &[usize], rng: &mut StreamRng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.random_range(-limit..=limit))).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// I.i.d. uniform on `±sqrt(6 / fan_in)`.
pub fn he_uniform<S: Scalar>(fan_in: usize, shape: &[usize], rng: &mut StreamRng) -> Tensor<S> {
    assert!(fan_in >= 1, "fan_in must be positive");
    uniform_tensor((6.0 / fan_in as f64).sqrt(), shape, rng)
}

/// I.i.d. uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<S: Scalar>(fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut StreamRng) -> Tensor<S> {
    assert!(fan_in + fan_out >= 1, "fans must be positive");
    uniform_tensor((6.0 / (fan_in + fan_out) as f64).sqrt(), shape, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn he_bounds_and_variance() {
        let fan_in = 24;
        let bound = (6.0 / fan_in as f64).sqrt();
        let t: Tensor<f64> = he_uniform(fan_in, &[1000, 1000], &mut rng::seeded(8));
        assert!(t.data().iter().all(|x| x.abs() <= bound));
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let want = bound * bound / 3.0;
        assert!((var - want).abs() < 0.05 * want, "var {var} want {want}");
    }

    #[test]
    fn fixed_seed_reproducible() {
        let a: Tensor<f32> = he_uniform(5, &[4, 7], &mut rng::seeded(1));
        let b: Tensor<f32> = he_uniform(5, &[4, 7], &mut rng::seeded(1));
        assert_eq!(a, b);
        let c: Tensor<f32> = glorot_uniform(5, 3, &[4, 7], &mut rng::seeded(1));
        assert!(c.data().iter().all(|x| x.abs() <= (6.0f32 / 8.0).sqrt()));
    }
}
