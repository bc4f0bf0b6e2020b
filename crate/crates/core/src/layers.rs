//! Parameterised building blocks: convolution, transposed convolution and
//! batch normalisation layers backed by a [`ParamStore`].

use rand::Rng;

use crate::autograd::{BnMode, BnState, Graph, Padding, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel).max(1) as f64;
        let w = Tensor::normal(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        let weight = store.trainable(format!("{name}.weight"), w);
        let bias = bias.then(|| store.trainable(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, Padding::Same)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_ch } else { 0 }
    }
}

/// Transposed convolution with `(in_ch, out_ch, k, k)` weights (the layout
/// of the convolution it is the adjoint of) and an optional output bias.
#[derive(Clone, Debug)]
pub struct TransposedConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl TransposedConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel).max(1) as f64 / (stride * stride) as f64;
        let w = Tensor::normal(&[in_ch, out_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        let weight = store.trainable(format!("{name}.weight"), w);
        let bias = bias.then(|| store.trainable(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        out_hw: Option<(usize, usize)>,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.transposed_conv2d(x, w, self.stride, out_hw)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_ch } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            scale: store.trainable(format!("{name}.scale"), Tensor::ones(&[channels])),
            shift: store.trainable(format!("{name}.shift"), Tensor::zeros(&[channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: BnMode) -> Result<Var> {
        let scale = g.param(store, self.scale);
        let shift = g.param(store, self.shift);
        let mut mean = store.get(self.running_mean).clone();
        let mut var = store.get(self.running_var).clone();
        let y = g.batchnorm(
            x,
            scale,
            shift,
            BnState {
                running_mean: &mut mean,
                running_var: &mut var,
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
            mode,
        )?;
        *store.get_mut(self.running_mean) = mean;
        *store.get_mut(self.running_var) = var;
        Ok(y)
    }

    /// Trainable scalars (scale and shift).
    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}
