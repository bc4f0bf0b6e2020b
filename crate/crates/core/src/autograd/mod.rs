//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in execution order. Nodes are addressed by
//! the copyable [`Var`] handle; [`Graph::backward`] walks the tape in exact
//! reverse order and accumulates gradients additively, so a value consumed
//! twice receives the sum of both contributions.

pub mod kernels;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use kernels::{ConvGeom, InvGeom, PoolGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics and hyper-parameters of one batch-norm layer.
pub struct BnState<'a> {
    pub running_mean: &'a mut Tensor,
    pub running_var: &'a mut Tensor,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum(Var, Tensor),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    TransposedConv2d {
        y: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        dims: [usize; 4],
        factor: usize,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Involution {
        x: Var,
        kernels: Var,
        weights: Option<Tensor>,
        geom: InvGeom,
    },
    Modulate {
        w: Var,
        enc: Tensor,
    },
    BroadcastTaps {
        x: Var,
        taps: usize,
    },
    External {
        x: Var,
        grad: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::TransposedConv2d { .. } => "transposed_conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Involution { .. } => "involution",
            Op::Modulate { .. } => "modulate",
            Op::BroadcastTaps { .. } => "broadcast_taps",
            Op::External { .. } => "external",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<String>,
}

fn check_finite(name: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} produced NaN/Inf")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: scales the first input gradient of every op named `op`
    /// by 1.1 during backward, making its gradient deliberately wrong.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf bound to a stored parameter. Its gradient is handed back by
    /// [`Graph::write_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.variable(store.get(id).clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap_or(&1);
        if self.value(bias).shape() != [c] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {c} channels",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (v, bb) in chunk.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// `sum(x * weights)` with constant `weights`; a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).dot(&weights)?);
        let rg = self.rg(x);
        Ok(self.push(out, Op::WeightedSum(x, weights), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<ConvGeom> {
        let [n, h, wd, c] = self.value(x).dims4()?;
        let ws = self.value(w).shape();
        let [oc, ic, kh, kw] = match ws {
            [a, b, c2, d] => [*a, *b, *c2, *d],
            _ => return Err(Error::Shape(format!("conv weights must be rank-4, got {ws:?}"))),
        };
        if ic != c {
            return Err(Error::ChannelMismatch {
                expected: ic,
                got: c,
            });
        }
        if kh != kw {
            return Err(Error::Shape(format!("conv kernel must be square, got {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::EvenKernel(kh));
        }
        if stride < 1 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        Ok(match padding {
            Padding::Same => ConvGeom::same(n, h, wd, c, oc, kh, stride),
            Padding::Valid => {
                if kh > h || kh > wd {
                    return Err(Error::Shape(format!(
                        "kernel {kh} larger than input {h}x{wd} with valid padding"
                    )));
                }
                ConvGeom::valid(n, h, wd, c, oc, kh, stride)
            }
        })
    }

    /// 2-D cross-correlation of an NHWC input with `(out, in, F, F)`
    /// weights, `F` odd.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = self.conv_geom(x, w, stride, padding)?;
        let data = kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let out = Tensor::new(&[geom.n, geom.oh, geom.ow, geom.oc], data)?;
        let rg = self.rg(x) || self.rg(w);
        let y = self.push(out, Op::Conv2d { x, w, geom }, rg);
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Adjoint of a same-padded strided [`Graph::conv2d`] using the same
    /// `(c_y, c_out, k, k)` weights: maps `(n, h, w, c_y)` to
    /// `(n, out_h, out_w, c_out)`. `out_hw` defaults to `(h*stride, w*stride)`
    /// and must satisfy `ceil(out / stride) == in`.
    pub fn transposed_conv2d(
        &mut self,
        y: Var,
        w: Var,
        stride: usize,
        out_hw: Option<(usize, usize)>,
    ) -> Result<Var> {
        if stride < 1 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let [n, h, wd, cy] = self.value(y).dims4()?;
        let ws = self.value(w).shape();
        let [wo, wi, kh, kw] = match ws {
            [a, b, c2, d] => [*a, *b, *c2, *d],
            _ => return Err(Error::Shape(format!("weights must be rank-4, got {ws:?}"))),
        };
        if wo != cy {
            return Err(Error::ChannelMismatch {
                expected: wo,
                got: cy,
            });
        }
        if kh != kw || kh == 0 {
            return Err(Error::Shape(format!("kernel must be square, got {kh}x{kw}")));
        }
        let (oh, ow) = out_hw.unwrap_or((h * stride, wd * stride));
        if oh.div_ceil(stride) != h || ow.div_ceil(stride) != wd {
            return Err(Error::Shape(format!(
                "output {oh}x{ow} incompatible with input {h}x{wd} at stride {stride}"
            )));
        }
        let geom = ConvGeom::same(n, oh, ow, wi, wo, kh, stride);
        let data = kernels::conv_backward_input(&geom, self.value(y).data(), self.value(w).data());
        let out = Tensor::new(&[n, oh, ow, wi], data)?;
        let rg = self.rg(y) || self.rg(w);
        Ok(self.push(out, Op::TransposedConv2d { y, w, geom }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        if window < 1 || stride < 1 {
            return Err(Error::InvalidArgument("window and stride must be >= 1".into()));
        }
        let [n, h, w, c] = self.value(x).dims4()?;
        if window > h || window > w {
            return Err(Error::Shape(format!(
                "pool window {window} exceeds spatial extent {h}x{w}"
            )));
        }
        let geom = PoolGeom::new(n, h, w, c, window, stride);
        let (data, argmax) = kernels::maxpool_forward(&geom, self.value(x).data());
        let out = Tensor::new(&[n, geom.oh, geom.ow, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let dims = self.value(x).dims4()?;
        let [n, h, w, c] = dims;
        let data = kernels::upsample_forward(self.value(x).data(), n, h, w, c, factor);
        let out = Tensor::new(&[n, h * factor, w * factor, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample { x, dims, factor }, rg))
    }

    /// Per-channel normalization over every axis but the last.
    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        state: BnState<'_>,
        mode: BnMode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("batchnorm on a scalar".into()))?;
        let m = xv.numel() / c.max(1);
        if m == 0 {
            return Err(Error::InvalidArgument("batchnorm on an empty batch".into()));
        }
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(Error::Shape(format!("batchnorm affine params must have {c} entries")));
        }
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    for (acc, v) in mean.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                let mom = state.momentum;
                for ((rm, rv), (mu, s2)) in state
                    .running_mean
                    .data_mut()
                    .iter_mut()
                    .zip(state.running_var.data_mut().iter_mut())
                    .zip(mean.iter().zip(&var))
                {
                    *rm = mom * *rm + (1.0 - mom) * mu;
                    *rv = mom * *rv + (1.0 - mom) * s2;
                }
                (mean, var)
            }
            BnMode::Eval => (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for (i, v) in xv.data().iter().enumerate() {
            let ch = i % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = sc[ch] * h + sh[ch];
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                mode,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// `x` for `x > 0`, `slope * x` otherwise (the derivative at 0 is `slope`).
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        check_finite("exp", &out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Exp(x), rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    /// Applies a per-position kernel field. `kernels` is
    /// `(n, h, w, F*F*groups)` indexed `tap * groups + group`; the optional
    /// constant `weights` `(n, h, w, F*F)` scales each tap.
    pub fn involution(
        &mut self,
        x: Var,
        kernels: Var,
        weights: Option<Tensor>,
        f: usize,
        groups: usize,
    ) -> Result<Var> {
        let [n, h, w, c] = self.value(x).dims4()?;
        if f.is_multiple_of(2) {
            return Err(Error::EvenKernel(f));
        }
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        let want = [n, h, w, f * f * groups];
        if self.value(kernels).shape() != want {
            return Err(Error::Shape(format!(
                "kernel field shape {:?} does not match {:?}",
                self.value(kernels).shape(),
                want
            )));
        }
        if let Some(wt) = &weights {
            if wt.shape() != [n, h, w, f * f] {
                return Err(Error::Shape(format!(
                    "depth weight field shape {:?} does not match {:?}",
                    wt.shape(),
                    [n, h, w, f * f]
                )));
            }
        }
        let geom = InvGeom {
            n,
            h,
            w,
            c,
            f,
            groups,
        };
        let data = kernels::involution_forward(
            &geom,
            self.value(x).data(),
            self.value(kernels).data(),
            weights.as_ref().map(|t| t.data()),
        );
        let out = Tensor::new(&[n, h, w, c], data)?;
        let rg = self.rg(x) || self.rg(kernels);
        Ok(self.push(
            out,
            Op::Involution {
                x,
                kernels,
                weights,
                geom,
            },
            rg,
        ))
    }

    /// Modulates `(g, d, 1, 1)` pointwise weights by each row of a constant
    /// `(taps, d)` code, giving `(taps * g, d, 1, 1)` weights whose output
    /// channel `t * g + j` is `w[j] * code[t]`.
    pub fn modulate(&mut self, w: Var, enc: Tensor) -> Result<Var> {
        let (gch, d) = match self.value(w).shape() {
            [gch, d, 1, 1] => (*gch, *d),
            s => return Err(Error::Shape(format!("modulate expects (g, d, 1, 1) weights, got {s:?}"))),
        };
        let taps = match enc.shape() {
            [t, dd] if *dd == d => *t,
            s => return Err(Error::Shape(format!("encoding shape {s:?} incompatible with {d}"))),
        };
        let wv = self.value(w).data();
        let mut out = Vec::with_capacity(taps * gch * d);
        for code in enc.data().chunks(d) {
            for row in wv.chunks(d) {
                out.extend(row.iter().zip(code).map(|(a, b)| a * b));
            }
        }
        let out = Tensor::new(&[taps * gch, d, 1, 1], out)?;
        let rg = self.rg(w);
        Ok(self.push(out, Op::Modulate { w, enc }, rg))
    }

    /// Repeats each `(n, h, w, g)` vector `taps` times: `(n, h, w, taps * g)`.
    pub fn broadcast_taps(&mut self, x: Var, taps: usize) -> Result<Var> {
        let [n, h, w, g] = self.value(x).dims4()?;
        let mut out = Vec::with_capacity(n * h * w * taps * g);
        for px in self.value(x).data().chunks(g) {
            for _ in 0..taps {
                out.extend_from_slice(px);
            }
        }
        let out = Tensor::new(&[n, h, w, taps * g], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::BroadcastTaps { x, taps }, rg))
    }

    /// A scalar computed outside the graph whose gradient with respect to
    /// `x` is known.
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        self.value(x).expect_same_shape(&grad)?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }, rg))
    }

    /// Populates gradients of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            let mut contributions = self.local_grads(idx, &gout)?;
            if self.fault.as_deref() == Some(self.nodes[idx].op.name()) {
                if let Some((_, g)) = contributions.first_mut() {
                    *g = g.scale(1.1);
                }
            }
            self.nodes[idx].grad = Some(gout);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, gout: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape(), data);
        let g = gout.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, gout.clone()), (*b, gout.clone())],
            Op::AddBias(x, b) => {
                let c = val(*b).numel();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, gout.clone()), (*b, like(*b, gb)?)]
            }
            Op::Mul(a, b) => {
                let ga = gout.zip_map(val(*b), |u, v| u * v)?;
                let gb = gout.zip_map(val(*a), |u, v| u * v)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, gout.scale(*s))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g[0]))],
            Op::WeightedSum(x, w) => vec![(*x, w.scale(g[0]))],
            Op::Reshape(x) => vec![(*x, gout.clone().reshape(val(*x).shape())?)],
            Op::Conv2d { x, w, geom } => {
                let mut out = Vec::with_capacity(2);
                if self.rg(*x) {
                    let dx = kernels::conv_backward_input(geom, g, val(*w).data());
                    out.push((*x, like(*x, dx)?));
                }
                if self.rg(*w) {
                    let dw = kernels::conv_backward_weight(geom, val(*x).data(), g);
                    out.push((*w, like(*w, dw)?));
                }
                out
            }
            Op::TransposedConv2d { y, w, geom } => {
                let mut out = Vec::with_capacity(2);
                if self.rg(*y) {
                    let dy = kernels::conv_forward(geom, g, val(*w).data());
                    out.push((*y, like(*y, dy)?));
                }
                if self.rg(*w) {
                    let dw = kernels::conv_backward_weight(geom, g, val(*y).data());
                    out.push((*w, like(*w, dw)?));
                }
                out
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(*x).numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] += gi;
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Upsample { x, dims, factor } => {
                let [n, h, w, c] = *dims;
                let dx = kernels::upsample_backward(g, n, h, w, c, *factor);
                vec![(*x, like(*x, dx)?)]
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                mode,
            } => {
                let c = inv_std.len();
                let m = (xhat.len() / c) as f64;
                let sc = val(*scale).data();
                let mut gscale = vec![0.0; c];
                let mut gshift = vec![0.0; c];
                for (i, (gi, h)) in g.iter().zip(xhat).enumerate() {
                    gscale[i % c] += gi * h;
                    gshift[i % c] += gi;
                }
                let dx: Vec<f64> = match mode {
                    BnMode::Eval => g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * sc[i % c] * inv_std[i % c])
                        .collect(),
                    BnMode::Train => {
                        // dxhat = g * scale; sums over the batch per channel.
                        let sum_dxhat: Vec<f64> =
                            gshift.iter().zip(sc).map(|(s, k)| s * k).collect();
                        let sum_dxhat_xhat: Vec<f64> =
                            gscale.iter().zip(sc).map(|(s, k)| s * k).collect();
                        g.iter()
                            .zip(xhat)
                            .enumerate()
                            .map(|(i, (gi, h))| {
                                let ch = i % c;
                                let dxhat = gi * sc[ch];
                                inv_std[ch] / m
                                    * (m * dxhat - sum_dxhat[ch] - h * sum_dxhat_xhat[ch])
                            })
                            .collect()
                    }
                };
                vec![
                    (*x, like(*x, dx)?),
                    (*scale, like(*scale, gscale)?),
                    (*shift, like(*shift, gshift)?),
                ]
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 })
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::LeakyRelu(x, slope) => {
                let dx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gi, v)| if *v > 0.0 { *gi } else { gi * slope })
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gi, s)| gi * s * (1.0 - s))
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Exp(x) => {
                let dx = g.iter().zip(node.value.data()).map(|(gi, e)| gi * e).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Square(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gi, v)| 2.0 * gi * v)
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Involution {
                x,
                kernels: k,
                weights,
                geom,
            } => {
                let (dx, dk) = kernels::involution_backward(
                    geom,
                    val(*x).data(),
                    val(*k).data(),
                    weights.as_ref().map(|t| t.data()),
                    g,
                );
                vec![(*x, like(*x, dx)?), (*k, like(*k, dk)?)]
            }
            Op::Modulate { w, enc } => {
                let d = enc.shape()[1];
                let mut dw = vec![0.0; val(*w).numel()];
                for (code, gt) in enc.data().chunks(d).zip(g.chunks(dw.len())) {
                    for ((acc, gi), cv) in dw.iter_mut().zip(gt).zip(code.iter().cycle()) {
                        *acc += gi * cv;
                    }
                }
                vec![(*w, like(*w, dw)?)]
            }
            Op::BroadcastTaps { x, taps } => {
                let gch = *val(*x).shape().last().unwrap();
                let mut dx = vec![0.0; val(*x).numel()];
                for (p, dp) in dx.chunks_mut(gch).enumerate() {
                    for t in 0..*taps {
                        let go = &g[(p * taps + t) * gch..(p * taps + t + 1) * gch];
                        for (acc, gi) in dp.iter_mut().zip(go) {
                            *acc += gi;
                        }
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::External { x, grad } => vec![(*x, grad.scale(g[0]))],
        })
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, &node.grad) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nhwc(h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(&[1, h, w, c], data).unwrap()
    }

    #[test]
    fn conv_sum_of_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3, 3, 1]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let input = Tensor::from_fn(&[2, 4, 3, 1], |i| i as f64 * 0.5 - 3.0);
        let x = g.constant(input.clone());
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, Padding::Same).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 4, 4, 2]));
        let even = g.constant(Tensor::ones(&[1, 2, 2, 2]));
        assert!(matches!(
            g.conv2d(x, even, None, 1, Padding::Same),
            Err(Error::EvenKernel(2))
        ));
        let wrong = g.constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(
            g.conv2d(x, wrong, None, 1, Padding::Same),
            Err(Error::ChannelMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn same_padding_extents_with_stride() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 7, 8, 1]));
        let w = g.constant(Tensor::ones(&[2, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 2, Padding::Same).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 4, 4, 2]);
    }

    #[test]
    fn transposed_conv_spreads_single_pixel() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let w = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let out = g.transposed_conv2d(y, w, 2, None).unwrap();
        assert_eq!(g.value(out), &Tensor::ones(&[1, 2, 2, 1]));

        let z = g.constant(Tensor::zeros(&[1, 3, 3, 2]));
        let w3 = g.constant(Tensor::ones(&[2, 4, 3, 3]));
        let out = g.transposed_conv2d(z, w3, 2, None).unwrap();
        assert_eq!(g.value(out), &Tensor::zeros(&[1, 6, 6, 4]));
    }

    #[test]
    fn transposed_conv_rejects_zero_stride() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::ones(&[1, 2, 2, 1]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(g.transposed_conv2d(y, w, 0, None).is_err());
    }

    #[test]
    fn maxpool_basic_and_errors() {
        let mut g = Graph::new();
        let x = g.variable(nhwc(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).item(), 4.0);
        assert!(g.maxpool2d(x, 3, 1).is_err());

        let c = g.constant(Tensor::full(&[1, 4, 4, 2], 7.0));
        let y = g.maxpool2d(c, 2, 2).unwrap();
        assert_eq!(g.value(y), &Tensor::full(&[1, 2, 2, 2], 7.0));
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut g = Graph::new();
        let x = g.variable(nhwc(2, 2, 1, vec![5.0, 5.0, 5.0, 5.0]));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1], 5.0));
        let y = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.value(y), &Tensor::full(&[1, 2, 2, 1], 5.0));
        let r = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64);
        let x = g.constant(r.clone());
        let y = g.upsample_nearest(x, 1).unwrap();
        assert_eq!(g.value(y), &r);
        assert!(g.upsample_nearest(x, 0).is_err());
    }

    #[test]
    fn activations_pointwise() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, -2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data()[0], 0.0);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
        let l = g.leaky_relu(x, 0.1);
        assert!((g.value(l).data()[2] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn backward_simple_sums() {
        let mut g = Graph::new();
        let xt = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let x = g.variable(xt.clone());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::ones(&[2, 3]));

        let mut g = Graph::new();
        let x = g.variable(xt.clone());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &xt.scale(2.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn batchnorm_scale_zero_gives_shift() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| (i * i) as f64));
        let sc = g.constant(Tensor::zeros(&[2]));
        let sh = g.constant(Tensor::new(&[2], vec![0.5, -1.5]).unwrap());
        let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::ones(&[2]));
        let st = BnState {
            running_mean: &mut rm,
            running_var: &mut rv,
            eps: 1e-5,
            momentum: 0.9,
        };
        let y = g.batchnorm(x, sc, sh, st, BnMode::Train).unwrap();
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.5 } else { -1.5 });
        }
    }

    #[test]
    fn batchnorm_rejects_empty_batch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[0, 2, 2, 1]));
        let sc = g.constant(Tensor::ones(&[1]));
        let sh = g.constant(Tensor::zeros(&[1]));
        let (mut rm, mut rv) = (Tensor::zeros(&[1]), Tensor::ones(&[1]));
        let st = BnState {
            running_mean: &mut rm,
            running_var: &mut rv,
            eps: 1e-5,
            momentum: 0.9,
        };
        assert!(g.batchnorm(x, sc, sh, st, BnMode::Train).is_err());
    }

    #[test]
    fn shared_input_accumulates_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[2], vec![1.0, -3.0]).unwrap());
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 5.0);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0, 7.0]);
    }
}
