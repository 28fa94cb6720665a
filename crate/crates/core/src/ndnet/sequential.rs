use super::layers::{Layer, Saved};
use super::tensor::{Scalar, Tensor};
use super::NetError;

/// A linear stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<S> {
    layers: Vec<Layer<S>>,
}

/// Forward-pass state needed by [`Sequential::backward`].
#[derive(Debug)]
pub struct Trace<S> {
    saved: Vec<Saved<S>>,
}

/// Parameter gradients of a stack, in [`Sequential::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S> {
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    /// Element-wise accumulate another gradient set of the same layout.
    pub fn accumulate(&mut self, other: &Grads<S>) -> Result<(), NetError> {
        if self.tensors.len() != other.tensors.len() {
            return Err(NetError::Shape("gradient sets differ in length".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<(), NetError> {
        self.tensors.iter().try_for_each(|t| t.ensure_finite(what))
    }
}

impl<S: Scalar> Sequential<S> {
    pub fn new(layers: Vec<Layer<S>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<S> {
        Grads {
            tensors: self.params().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Shape produced for an input of shape `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NetError> {
        self.layers.iter().try_fold(input.to_vec(), |s, l| l.output_shape(&s))
    }

    pub fn forward(&self, x: Tensor<S>) -> Result<Tensor<S>, NetError> {
        let y = self.layers.iter().try_fold(x, |x, l| l.forward(x))?;
        y.ensure_finite("forward output")?;
        Ok(y)
    }

    pub fn forward_train(&self, x: Tensor<S>) -> Result<(Tensor<S>, Trace<S>), NetError> {
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let (y, s) = layer.forward_saving(h, true)?;
            saved.push(s);
            h = y;
        }
        h.ensure_finite("forward output")?;
        Ok((h, Trace { saved }))
    }

    /// Backpropagate `dy` through the stack, accumulating parameter
    /// gradients into `grads`. Returns the input gradient if `need_dx`.
    pub fn backward(&self, trace: Trace<S>, dy: Tensor<S>, grads: &mut Grads<S>, need_dx: bool) -> Result<Option<Tensor<S>>, NetError> {
        if trace.saved.len() != self.layers.len() {
            return Err(NetError::Shape("trace does not belong to this stack".into()));
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.params().len();
        }
        if grads.tensors.len() != off {
            return Err(NetError::Shape("gradient set does not match stack".into()));
        }
        let mut g = dy;
        for (i, (layer, saved)) in self.layers.iter().zip(trace.saved).enumerate().rev() {
            let np = layer.params().len();
            let slot = &mut grads.tensors[offsets[i]..offsets[i] + np];
            let want_dx = need_dx || i > 0;
            match layer.backward(saved, g, slot, want_dx)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        g.ensure_finite("input gradient")?;
        Ok(Some(g))
    }
}
