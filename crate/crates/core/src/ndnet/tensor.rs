use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub};

use super::NetError;

/// Element type of a [`Tensor`]: `f32` for training, `f64` for gradient
/// checks.
pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    /// `C = op(A)·op(B) (+ C)` with row-major `A: m×k`, `B: k×n`, `C: m×n`.
    /// A transposed operand is stored in its untransposed row-major shape.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool);
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // Logical operand is rows×cols; storage is cols×rows when transposed.
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds checked above; strides address only the
                // m×k, k×n and m×n row-major regions of the slices.
                unsafe {
                    $gemm(
                        m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self, NetError> {
        if shape.contains(&0) {
            return Err(NetError::Shape(format!("zero dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NetError::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::ZERO; shape.iter().product()],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, NetError> {
        Self::new(shape, data.iter().map(|&x| S::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data, new shape of equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NetError> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(NetError::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<(), NetError> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(NetError::NonFinite(format!("{what}: element {i} of {:?} is {:?}", self.shape, self.data[i]))),
        }
    }

    /// Rows `[start, end)` along the leading (batch) axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Self {
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        }
    }

    /// Element-wise sum into `self`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), NetError> {
        if self.shape != other.shape {
            return Err(NetError::Shape(format!("add {:?} += {:?}", self.shape, other.shape)));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = S::ZERO);
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Concatenate two `[N, a]` and `[N, b]` tensors into `[N, a + b]`.
pub fn concat_features<S: Scalar>(left: &Tensor<S>, right: &Tensor<S>) -> Result<Tensor<S>, NetError> {
    let (ls, rs) = (left.shape(), right.shape());
    if ls.len() != 2 || rs.len() != 2 || ls[0] != rs[0] {
        return Err(NetError::Shape(format!("concat {ls:?} with {rs:?}")));
    }
    let (n, a, b) = (ls[0], ls[1], rs[1]);
    let mut data = Vec::with_capacity(n * (a + b));
    for i in 0..n {
        data.extend_from_slice(&left.data()[i * a..(i + 1) * a]);
        data.extend_from_slice(&right.data()[i * b..(i + 1) * b]);
    }
    Tensor::new(&[n, a + b], data)
}

/// Backward of [`concat_features`]: split `[N, a + b]` into `[N, a]` and
/// `[N, b]`.
pub fn split_features<S: Scalar>(joined: &Tensor<S>, a: usize) -> Result<(Tensor<S>, Tensor<S>), NetError> {
    let s = joined.shape();
    if s.len() != 2 || a == 0 || a >= s[1] {
        return Err(NetError::Shape(format!("split {s:?} at {a}")));
    }
    let (n, w) = (s[0], s[1]);
    let b = w - a;
    let mut left = Vec::with_capacity(n * a);
    let mut right = Vec::with_capacity(n * b);
    for row in joined.data().chunks(w) {
        left.extend_from_slice(&row[..a]);
        right.extend_from_slice(&row[a..]);
    }
    Ok((Tensor::new(&[n, a], left)?, Tensor::new(&[n, b], right)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.clone().reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn gemm_transpose_variants() {
        // A = [[1,2,3],[4,5,6]], B = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // Aᵀ stored as 3×2 gives the same product.
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut d = [1.0f64; 4];
        f64::gemm(2, 3, 2, &at, true, &bt, true, &mut d, true);
        assert_eq!(d, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn concat_split_inverse() {
        let l = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = Tensor::<f64>::from_f64(&[2, 1], &[9.0, 8.0]).unwrap();
        let j = concat_features(&l, &r).unwrap();
        assert_eq!(j.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let (a, b) = split_features(&j, 2).unwrap();
        assert_eq!((a, b), (l, r));
    }

    #[test]
    fn finiteness() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.ensure_finite("x"), Err(NetError::NonFinite(_))));
    }
}
