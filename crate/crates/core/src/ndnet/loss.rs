use super::tensor::{Scalar, Tensor};
use super::NetError;

fn check<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<(), NetError> {
    if pred.shape() != target.shape() {
        return Err(NetError::Shape(format!("mse {:?} vs {:?}", pred.shape(), target.shape())));
    }
    Ok(())
}

/// Mean of squared differences over all elements, accumulated in f64.
pub fn mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64, NetError> {
    check(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p.to_f64() - t.to_f64()).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `scale · 2(pred − target)/N`, the gradient of `scale · mse`.
pub fn mse_grad<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, scale: f64) -> Result<Tensor<S>, NetError> {
    check(pred, target)?;
    let k = S::from_f64(2.0 * scale / pred.len() as f64);
    let data = pred.data().iter().zip(target.data()).map(|(&p, &t)| k * (p - t)).collect();
    Tensor::new(pred.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values() {
        let a = Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2], &[1.0, 1.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        let c = Tensor::<f64>::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap();
        assert!(mse(&a, &c).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = [0.3, -1.2, 2.0, 0.7];
        let t = [0.1, 0.4, -0.5, 0.7];
        let target = Tensor::<f64>::from_f64(&[2, 2], &t).unwrap();
        let g = mse_grad(&Tensor::from_f64(&[2, 2], &p).unwrap(), &target, 1.0).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            let mut up = p;
            let mut dn = p;
            up[i] += h;
            dn[i] -= h;
            let fu = mse(&Tensor::from_f64(&[2, 2], &up).unwrap(), &target).unwrap();
            let fd = mse(&Tensor::from_f64(&[2, 2], &dn).unwrap(), &target).unwrap();
            let num = (fu - fd) / (2.0 * h);
            assert!((num - g.data()[i]).abs() <= 1e-8 * (1.0 + num.abs()));
        }
    }
}
