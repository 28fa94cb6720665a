//! Layer kernels. Every activation tensor carries a leading batch axis:
//! sequence layers see `[N, L, C]` (channels last), dense layers `[N, F]`.

use super::init::{glorot_uniform, he_uniform};
use super::tensor::{Scalar, Tensor};
use super::NetError;
use crate::rng::StreamRng;

/// Weight initialization scheme for parameterized layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    HeUniform,
    GlorotUniform,
}

/// Pointwise activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

/// One layer of a [`super::Sequential`] stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S> {
    /// "Same"-padded stride-1 convolution; `w: [K, Cin, Cout]`, `b: [Cout]`.
    Conv1d { w: Tensor<S>, b: Tensor<S> },
    /// Non-overlapping max pooling; the last window may be partial.
    MaxPool1d { width: usize },
    /// Nearest-neighbour repetition along the sequence axis.
    UpSample1d { factor: usize },
    /// `w: [in, out]`, `b: [out]`.
    Dense { w: Tensor<S>, b: Tensor<S> },
    Act(Activation),
    /// `[N, L, C] → [N, L·C]`.
    Flatten,
    /// `[N, …] → [N, dims…]`.
    Reshape { dims: Vec<usize> },
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Saved<S> {
    /// im2col matrix `[N·L, K·Cin]` plus the input shape.
    Cols { cols: Vec<S>, in_shape: Vec<usize> },
    Input(Tensor<S>),
    Output(Tensor<S>),
    Argmax { index: Vec<u32>, in_shape: Vec<usize> },
    Shape(Vec<usize>),
    Nothing,
}

fn pad_left(k: usize) -> usize {
    (k - 1) / 2
}

fn expect_rank<S: Scalar>(x: &Tensor<S>, rank: usize, what: &str) -> Result<(), NetError> {
    if x.shape().len() != rank {
        return Err(NetError::Shape(format!("{what} expects rank {rank}, got {:?}", x.shape())));
    }
    Ok(())
}

/// Build the im2col matrix of `x: [N, L, Cin]` for kernel size `k`:
/// row `n·L + l` holds `x[n, l + j − pad, :]` for `j in 0..k`, zero outside.
fn im2col<S: Scalar>(x: &[S], n: usize, l: usize, cin: usize, k: usize) -> Vec<S> {
    let row = k * cin;
    let pad = pad_left(k) as isize;
    let mut cols = vec![S::ZERO; n * l * row];
    for b in 0..n {
        let xs = &x[b * l * cin..(b + 1) * l * cin];
        for pos in 0..l {
            let start = pos as isize - pad;
            let lo = start.max(0) as usize;
            let hi = ((start + k as isize).min(l as isize)).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let dst_off = (lo as isize - start) as usize * cin;
            let dst = &mut cols[(b * l + pos) * row..(b * l + pos + 1) * row];
            dst[dst_off..dst_off + (hi - lo) * cin].copy_from_slice(&xs[lo * cin..hi * cin]);
        }
    }
    cols
}

/// Scatter-add of im2col gradients back onto `[N, L, Cin]`.
fn col2im<S: Scalar>(dcols: &[S], n: usize, l: usize, cin: usize, k: usize) -> Vec<S> {
    let row = k * cin;
    let pad = pad_left(k) as isize;
    let mut dx = vec![S::ZERO; n * l * cin];
    for b in 0..n {
        let dxs = &mut dx[b * l * cin..(b + 1) * l * cin];
        for pos in 0..l {
            let start = pos as isize - pad;
            let lo = start.max(0) as usize;
            let hi = ((start + k as isize).min(l as isize)).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src_off = (lo as isize - start) as usize * cin;
            let src = &dcols[(b * l + pos) * row + src_off..(b * l + pos) * row + src_off + (hi - lo) * cin];
            dxs[lo * cin..hi * cin].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
    }
    dx
}

fn add_bias<S: Scalar>(y: &mut [S], b: &[S]) {
    for row in y.chunks_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
    }
}

fn bias_grad<S: Scalar>(dy: &[S], db: &mut [S]) {
    for row in dy.chunks(db.len()) {
        db.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
    }
}

fn conv_dims<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<(usize, usize, usize, usize, usize), NetError> {
    expect_rank(x, 3, "conv1d")?;
    let (n, l, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ws = w.shape();
    if ws.len() != 3 || ws[1] != cin || b.shape() != [ws[2]] {
        return Err(NetError::Shape(format!(
            "conv1d input {:?} with kernel {ws:?} and bias {:?}",
            x.shape(),
            b.shape()
        )));
    }
    Ok((n, l, cin, ws[0], ws[2]))
}

/// "Same" convolution: `y[l, co] = b[co] + Σ_{k,ci} x[l + k − ⌊(K−1)/2⌋, ci]·w[k, ci, co]`.
pub fn conv1d_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NetError> {
    Ok(conv1d_forward_saving(x, w, b)?.0)
}

fn conv1d_forward_saving<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>), NetError> {
    let (n, l, cin, k, cout) = conv_dims(x, w, b)?;
    let cols = im2col(x.data(), n, l, cin, k);
    let mut y = vec![S::ZERO; n * l * cout];
    S::gemm(n * l, k * cin, cout, &cols, false, w.data(), false, &mut y, false);
    add_bias(&mut y, b.data());
    Ok((Tensor::new(&[n, l, cout], y)?, cols))
}

/// Gradients of a convolution given its im2col matrix. Accumulates into
/// `dw`/`db`; returns the input gradient when requested.
#[allow(clippy::too_many_arguments)]
fn conv1d_backward_cols<S: Scalar>(
    cols: &[S],
    in_shape: &[usize],
    w: &Tensor<S>,
    dy: &Tensor<S>,
    dw: &mut [S],
    db: &mut [S],
    need_dx: bool,
) -> Option<Tensor<S>> {
    let (n, l, cin) = (in_shape[0], in_shape[1], in_shape[2]);
    let (k, cout) = (w.shape()[0], w.shape()[2]);
    S::gemm(k * cin, n * l, cout, cols, true, dy.data(), false, dw, true);
    bias_grad(dy.data(), db);
    if !need_dx {
        return None;
    }
    let mut dcols = vec![S::ZERO; n * l * k * cin];
    S::gemm(n * l, cout, k * cin, dy.data(), false, w.data(), true, &mut dcols, false);
    Some(Tensor::new(in_shape, col2im(&dcols, n, l, cin, k)).expect("input shape"))
}

/// Convolution backward from the forward input. Returns `(dx, dw, db)`.
pub fn conv1d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), NetError> {
    let (n, l, cin, k, cout) = conv_dims(x, w, b)?;
    if dy.shape() != [n, l, cout] {
        return Err(NetError::Shape(format!("conv1d grad {:?} for output [{n}, {l}, {cout}]", dy.shape())));
    }
    let cols = im2col(x.data(), n, l, cin, k);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(b.shape());
    let dx = conv1d_backward_cols(&cols, x.shape(), w, dy, dw.data_mut(), db.data_mut(), true).expect("dx requested");
    Ok((dx, dw, db))
}

fn maxpool_forward<S: Scalar>(x: &Tensor<S>, width: usize) -> Result<(Tensor<S>, Vec<u32>), NetError> {
    expect_rank(x, 3, "maxpool1d")?;
    if width == 0 {
        return Err(NetError::Hyper("pool width must be at least 1".into()));
    }
    let (n, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let lo = l.div_ceil(width);
    let xd = x.data();
    let mut y = Vec::with_capacity(n * lo * c);
    let mut arg = Vec::with_capacity(n * lo * c);
    for b in 0..n {
        for o in 0..lo {
            let start = o * width;
            let end = (start + width).min(l);
            for ch in 0..c {
                let mut best = (b * l + start) * c + ch;
                for pos in start + 1..end {
                    let idx = (b * l + pos) * c + ch;
                    // Strict comparison keeps the first maximum on ties.
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                y.push(xd[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[n, lo, c], y)?, arg))
}

/// Max pooling over windows `[i·width, (i+1)·width)`.
pub fn maxpool1d<S: Scalar>(x: &Tensor<S>, width: usize) -> Result<Tensor<S>, NetError> {
    Ok(maxpool_forward(x, width)?.0)
}

fn maxpool_backward<S: Scalar>(dy: &Tensor<S>, index: &[u32], in_shape: &[usize]) -> Tensor<S> {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&i, &g) in index.iter().zip(dy.data()) {
        d[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour upsampling along the sequence axis.
pub fn upsample1d<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>, NetError> {
    expect_rank(x, 3, "upsample1d")?;
    if factor == 0 {
        return Err(NetError::Hyper("upsample factor must be at least 1".into()));
    }
    let (n, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Vec::with_capacity(n * l * factor * c);
    for row in x.data().chunks(c) {
        for _ in 0..factor {
            y.extend_from_slice(row);
        }
    }
    Tensor::new(&[n, l * factor, c], y)
}

fn upsample_backward<S: Scalar>(dy: &Tensor<S>, factor: usize) -> Tensor<S> {
    let s = dy.shape();
    let (n, lf, c) = (s[0], s[1], s[2]);
    let l = lf / factor;
    let mut dx = vec![S::ZERO; n * l * c];
    for (i, group) in dy.data().chunks(factor * c).enumerate() {
        let out = &mut dx[i * c..(i + 1) * c];
        for rep in group.chunks(c) {
            out.iter_mut().zip(rep).for_each(|(o, &g)| *o += g);
        }
    }
    Tensor::new(&[n, l, c], dx).expect("upsample shape")
}

fn dense_dims<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<(usize, usize, usize), NetError> {
    expect_rank(x, 2, "dense")?;
    let ws = w.shape();
    if ws.len() != 2 || ws[0] != x.shape()[1] || b.shape() != [ws[1]] {
        return Err(NetError::Shape(format!(
            "dense input {:?} with weights {ws:?} and bias {:?}",
            x.shape(),
            b.shape()
        )));
    }
    Ok((x.shape()[0], ws[0], ws[1]))
}

/// `y = x·w + b` row-wise.
pub fn dense<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NetError> {
    let (n, fin, fout) = dense_dims(x, w, b)?;
    let mut y = vec![S::ZERO; n * fout];
    S::gemm(n, fin, fout, x.data(), false, w.data(), false, &mut y, false);
    add_bias(&mut y, b.data());
    Tensor::new(&[n, fout], y)
}

fn dense_backward_into<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    dw: &mut [S],
    db: &mut [S],
    need_dx: bool,
) -> Option<Tensor<S>> {
    let (n, fin, fout) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    S::gemm(fin, n, fout, x.data(), true, dy.data(), false, dw, true);
    bias_grad(dy.data(), db);
    if !need_dx {
        return None;
    }
    let mut dx = vec![S::ZERO; n * fin];
    S::gemm(n, fout, fin, dy.data(), false, w.data(), true, &mut dx, false);
    Some(Tensor::new(&[n, fin], dx).expect("dense input shape"))
}

/// Dense backward. Returns `(dx, dw, db)`.
pub fn dense_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), NetError> {
    let (n, _, fout) = dense_dims(x, w, b)?;
    if dy.shape() != [n, fout] {
        return Err(NetError::Shape(format!("dense grad {:?} for output [{n}, {fout}]", dy.shape())));
    }
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(b.shape());
    let dx = dense_backward_into(x, w, dy, dw.data_mut(), db.data_mut(), true).expect("dx requested");
    Ok((dx, dw, db))
}

pub fn relu<S: Scalar>(x: S) -> S {
    if x > S::ZERO {
        x
    } else {
        S::ZERO
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::ONE / (S::ONE + (-x).exp())
}

pub fn linear<S: Scalar>(x: S) -> S {
    x
}

fn activate<S: Scalar>(act: Activation, x: Tensor<S>) -> Tensor<S> {
    let mut y = x;
    match act {
        Activation::Relu => y.data_mut().iter_mut().for_each(|v| *v = relu(*v)),
        Activation::Sigmoid => y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Linear => {}
    }
    y
}

fn activation_backward<S: Scalar>(act: Activation, out: &Tensor<S>, dy: Tensor<S>) -> Tensor<S> {
    let mut dx = dy;
    match act {
        Activation::Relu => dx
            .data_mut()
            .iter_mut()
            .zip(out.data())
            .for_each(|(g, &y)| {
                if y <= S::ZERO {
                    *g = S::ZERO
                }
            }),
        Activation::Sigmoid => dx
            .data_mut()
            .iter_mut()
            .zip(out.data())
            .for_each(|(g, &y)| *g *= y * (S::ONE - y)),
        Activation::Linear => {}
    }
    dx
}

impl<S: Scalar> Layer<S> {
    pub fn conv1d(kernel: usize, c_in: usize, c_out: usize, init: Init, rng: &mut StreamRng) -> Self {
        let shape = [kernel, c_in, c_out];
        let w = match init {
            Init::HeUniform => he_uniform(kernel * c_in, &shape, rng),
            Init::GlorotUniform => glorot_uniform(kernel * c_in, kernel * c_out, &shape, rng),
        };
        Layer::Conv1d {
            w,
            b: Tensor::zeros(&[c_out]),
        }
    }

    pub fn dense(f_in: usize, f_out: usize, init: Init, rng: &mut StreamRng) -> Self {
        let shape = [f_in, f_out];
        let w = match init {
            Init::HeUniform => he_uniform(f_in, &shape, rng),
            Init::GlorotUniform => glorot_uniform(f_in, f_out, &shape, rng),
        };
        Layer::Dense {
            w,
            b: Tensor::zeros(&[f_out]),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv1d { .. } => "Conv1D",
            Layer::MaxPool1d { .. } => "MaxPool1D",
            Layer::UpSample1d { .. } => "UpSample1D",
            Layer::Dense { .. } => "Dense",
            Layer::Act(Activation::Relu) => "ReLU",
            Layer::Act(Activation::Sigmoid) => "Sigmoid",
            Layer::Act(Activation::Linear) => "Linear",
            Layer::Flatten => "Flatten",
            Layer::Reshape { .. } => "Reshape",
        }
    }

    /// Trainable tensors in a fixed order (weights, then bias).
    pub fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            Layer::Conv1d { w, b } | Layer::Dense { w, b } => vec![w, b],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::Conv1d { w, b } | Layer::Dense { w, b } => vec![w, b],
            _ => Vec::new(),
        }
    }

    /// Output shape for an input of shape `input` (batch axis included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NetError> {
        let bad = || NetError::Shape(format!("{} cannot take input {input:?}", self.name()));
        match self {
            Layer::Conv1d { w, .. } => {
                if input.len() != 3 || input[2] != w.shape()[1] {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1], w.shape()[2]])
            }
            Layer::MaxPool1d { width } => {
                if input.len() != 3 || *width == 0 {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1].div_ceil(*width), input[2]])
            }
            Layer::UpSample1d { factor } => {
                if input.len() != 3 || *factor == 0 {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1] * factor, input[2]])
            }
            Layer::Dense { w, .. } => {
                if input.len() != 2 || input[1] != w.shape()[0] {
                    return Err(bad());
                }
                Ok(vec![input[0], w.shape()[1]])
            }
            Layer::Act(_) => Ok(input.to_vec()),
            Layer::Flatten => {
                if input.len() < 2 {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            Layer::Reshape { dims } => {
                if input.is_empty() || input[1..].iter().product::<usize>() != dims.iter().product::<usize>() {
                    return Err(bad());
                }
                let mut out = vec![input[0]];
                out.extend_from_slice(dims);
                Ok(out)
            }
        }
    }

    /// Inference forward pass.
    pub fn forward(&self, x: Tensor<S>) -> Result<Tensor<S>, NetError> {
        Ok(self.forward_saving(x, false)?.0)
    }

    pub(crate) fn forward_saving(&self, x: Tensor<S>, keep: bool) -> Result<(Tensor<S>, Saved<S>), NetError> {
        match self {
            Layer::Conv1d { w, b } => {
                let (y, cols) = conv1d_forward_saving(&x, w, b)?;
                let saved = if keep {
                    Saved::Cols {
                        cols,
                        in_shape: x.shape().to_vec(),
                    }
                } else {
                    Saved::Nothing
                };
                Ok((y, saved))
            }
            Layer::MaxPool1d { width } => {
                let (y, index) = maxpool_forward(&x, *width)?;
                let saved = if keep {
                    Saved::Argmax {
                        index,
                        in_shape: x.shape().to_vec(),
                    }
                } else {
                    Saved::Nothing
                };
                Ok((y, saved))
            }
            Layer::UpSample1d { factor } => Ok((upsample1d(&x, *factor)?, Saved::Nothing)),
            Layer::Dense { w, b } => {
                let y = dense(&x, w, b)?;
                Ok((y, if keep { Saved::Input(x) } else { Saved::Nothing }))
            }
            Layer::Act(act) => {
                let y = activate(*act, x);
                let saved = if keep && *act != Activation::Linear {
                    Saved::Output(y.clone())
                } else {
                    Saved::Nothing
                };
                Ok((y, saved))
            }
            Layer::Flatten | Layer::Reshape { .. } => {
                let in_shape = x.shape().to_vec();
                let out = self.output_shape(&in_shape)?;
                Ok((x.reshape(&out)?, Saved::Shape(in_shape)))
            }
        }
    }

    /// Backward pass. `grads` holds this layer's parameter gradients (same
    /// order as [`Layer::params`]) and is accumulated into.
    pub(crate) fn backward(
        &self,
        saved: Saved<S>,
        dy: Tensor<S>,
        grads: &mut [Tensor<S>],
        need_dx: bool,
    ) -> Result<Option<Tensor<S>>, NetError> {
        let missing = || NetError::Shape(format!("{} backward without saved forward state", self.name()));
        match (self, saved) {
            (Layer::Conv1d { w, .. }, Saved::Cols { cols, in_shape }) => {
                let (gw, gb) = split_two(grads);
                Ok(conv1d_backward_cols(&cols, &in_shape, w, &dy, gw, gb, need_dx))
            }
            (Layer::Dense { w, .. }, Saved::Input(x)) => {
                let (gw, gb) = split_two(grads);
                Ok(dense_backward_into(&x, w, &dy, gw, gb, need_dx))
            }
            (Layer::MaxPool1d { .. }, Saved::Argmax { index, in_shape }) => Ok(Some(maxpool_backward(&dy, &index, &in_shape))),
            (Layer::UpSample1d { factor }, _) => Ok(Some(upsample_backward(&dy, *factor))),
            (Layer::Act(Activation::Linear), _) => Ok(Some(dy)),
            (Layer::Act(act), Saved::Output(y)) => Ok(Some(activation_backward(*act, &y, dy))),
            (Layer::Flatten | Layer::Reshape { .. }, Saved::Shape(s)) => Ok(Some(dy.reshape(&s)?)),
            _ => Err(missing()),
        }
    }
}

fn split_two<S: Scalar>(grads: &mut [Tensor<S>]) -> (&mut [S], &mut [S]) {
    let (w, b) = grads.split_at_mut(1);
    (w[0].data_mut(), b[0].data_mut())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    /// Direct nested-loop "same" convolution.
    fn conv_naive(x: &[f64], l: usize, cin: usize, w: &[f64], k: usize, cout: usize, b: &[f64]) -> Vec<f64> {
        let pad = (k - 1) / 2;
        let mut y = vec![0.0; l * cout];
        for pos in 0..l {
            for co in 0..cout {
                let mut acc = b[co];
                for j in 0..k {
                    let src = pos as isize + j as isize - pad as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        acc += x[src as usize * cin + ci] * w[(j * cin + ci) * cout + co];
                    }
                }
                y[pos * cout + co] = acc;
            }
        }
        y
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 4, 1], &[1.0, -2.0, 3.0, 0.5]);
        let y = conv1d_forward(&x, &t(&[1, 1, 1], &[1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_three_tap_sum() {
        let y = conv1d_forward(&t(&[1, 3, 1], &[1.0, 2.0, 3.0]), &t(&[3, 1, 1], &[1.0, 1.0, 1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut g = crate::rng::seeded(4);
        use rand::Rng;
        for &(n, l, cin, k, cout) in &[(2, 9, 3, 4, 2), (1, 5, 2, 7, 3), (3, 8, 1, 1, 4), (1, 6, 2, 6, 1)] {
            let xs: Vec<f64> = (0..n * l * cin).map(|_| g.random_range(-1.0..1.0)).collect();
            let ws: Vec<f64> = (0..k * cin * cout).map(|_| g.random_range(-1.0..1.0)).collect();
            let bs: Vec<f64> = (0..cout).map(|_| g.random_range(-1.0..1.0)).collect();
            let y = conv1d_forward(&t(&[n, l, cin], &xs), &t(&[k, cin, cout], &ws), &t(&[cout], &bs)).unwrap();
            for b in 0..n {
                let want = conv_naive(&xs[b * l * cin..(b + 1) * l * cin], l, cin, &ws, k, cout, &bs);
                for (a, w) in y.data()[b * l * cout..(b + 1) * l * cout].iter().zip(&want) {
                    assert!((a - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn even_kernel_left_bias_padding() {
        // K = 4 pads 1 on the left and 2 on the right.
        let y = conv1d_forward(
            &t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]),
            &t(&[4, 1, 1], &[1.0, 0.0, 0.0, 0.0]),
            &t(&[1], &[0.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_shape_mismatch() {
        let r = conv1d_forward(&t(&[1, 3, 2], &[0.0; 6]), &t(&[3, 1, 1], &[0.0; 3]), &t(&[1], &[0.0]));
        assert!(matches!(r, Err(NetError::Shape(_))));
    }

    #[test]
    fn pooling_examples() {
        let y = maxpool1d(&t(&[1, 4, 1], &[1.0, 3.0, 2.0, 5.0]), 2).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
        let y = maxpool1d(&t(&[1, 3, 1], &[1.0, 2.0, 3.0]), 2).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
        assert!(matches!(maxpool1d(&t(&[1, 3, 1], &[1.0, 2.0, 3.0]), 0), Err(NetError::Hyper(_))));
    }

    #[test]
    fn pooling_tie_routes_to_first() {
        let layer = Layer::<f64>::MaxPool1d { width: 3 };
        let (_, saved) = layer.forward_saving(t(&[1, 3, 1], &[2.0, 2.0, 1.0]), true).unwrap();
        let dx = layer.backward(saved, t(&[1, 1, 1], &[1.0]), &mut [], true).unwrap().unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_examples() {
        let x = t(&[1, 2, 1], &[1.0, 2.0]);
        assert_eq!(upsample1d(&x, 2).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(upsample1d(&x, 1).unwrap(), x);
        assert!(upsample1d(&x, 0).is_err());
        let x = t(&[2, 3, 2], &[1.0, -1.0, 4.0, 0.0, 2.0, 7.0, 3.0, 3.0, -2.0, 5.0, 6.0, 1.0]);
        for f in 1..5 {
            assert_eq!(maxpool1d(&upsample1d(&x, f).unwrap(), f).unwrap(), x);
        }
    }

    #[test]
    fn upsample_backward_sums_groups() {
        let layer = Layer::<f64>::UpSample1d { factor: 2 };
        let dx = layer.backward(Saved::Nothing, t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]), &mut [], true).unwrap().unwrap();
        assert_eq!(dx.data(), &[3.0, 7.0]);
    }

    #[test]
    fn dense_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense(&x, &id, &t(&[2], &[0.0, 0.0])).unwrap(), x);
        let y = dense(&x, &t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]), &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[2.0, 5.0]);
        assert!(dense(&x, &t(&[3, 2], &[0.0; 6]), &t(&[2], &[0.0; 2])).is_err());
    }

    #[test]
    fn activation_values() {
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(2.0), 2.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(linear(-3.5), -3.5);
    }

    #[test]
    fn output_shapes() {
        let mut g = crate::rng::seeded(0);
        let c = Layer::<f32>::conv1d(5, 2, 4, Init::HeUniform, &mut g);
        assert_eq!(c.output_shape(&[3, 10, 2]).unwrap(), vec![3, 10, 4]);
        assert!(c.output_shape(&[3, 10, 3]).is_err());
        assert_eq!(Layer::<f32>::MaxPool1d { width: 4 }.output_shape(&[1, 10, 2]).unwrap(), vec![1, 3, 2]);
        assert_eq!(Layer::<f32>::Flatten.output_shape(&[2, 4, 3]).unwrap(), vec![2, 12]);
        let r = Layer::<f32>::Reshape { dims: vec![6, 2] };
        assert_eq!(r.output_shape(&[2, 12]).unwrap(), vec![2, 6, 2]);
        assert!(r.output_shape(&[2, 11]).is_err());
    }
}
