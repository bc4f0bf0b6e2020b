//! Sliding-window operators: standard convolution, involution,
//! hyper-involution and depth-aware hyper-involution, plus the shared
//! filter-generating hyper-network.
//!
//! Involution-family operators preserve the channel count. Channel `k` of
//! `C` uses kernel group `floor(k * G / C)` (zero-based), i.e. contiguous
//! blocks of `C / G` channels share one kernel per position.
//!
//! # Hyper-network layout
//!
//! ```text
//! x (C) -> 1x1 conv 8 -> BN -> leaky
//!       -> 1x1 conv 8 -> BN -> leaky
//!       -> 1x1 conv 6 -> BN -> leaky        (the 6-channel embedding)
//!       -> N2: 1x1 conv G
//! ```
//!
//! Every pointwise layer carries a bias. In [`GeneratorMode::LiteralBroadcast`]
//! N2 runs once per position and its output is broadcast over the `F x F`
//! window. In [`GeneratorMode::CoordinateModulated`] the embedding is first
//! multiplied elementwise by a fixed 6-dimensional sinusoidal code of each
//! window offset, and N2 runs once per (position, offset); this is computed
//! as one pointwise convolution whose weights are N2's scaled by each code.
//! Neither mode has a parameter that depends on `F`, `H` or `W`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{BnMode, Graph, Padding, Var};
use crate::depth::{batch_weight_field, DepthMap, DepthWeighting};
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, ConvLayer};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Filter counts of the three N1 layers.
pub const N1_FILTERS: [usize; 3] = [8, 8, 6];
/// Width of the embedding N2 reads.
pub const EMBED_DIM: usize = 6;
pub const HYPER_SLOPE: f64 = 0.1;
/// Reduction width of the involution kernel generator.
pub const INVOLUTION_REDUCTION: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    groups: usize,
    channels: usize,
}

impl GroupSpec {
    pub fn new(groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels are not divisible into {groups} groups"
            )));
        }
        Ok(Self { groups, channels })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Zero-based kernel group used by zero-based channel `k`.
    pub fn group_of(&self, k: usize) -> usize {
        k * self.groups / self.channels
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeneratorMode {
    LiteralBroadcast,
    #[default]
    CoordinateModulated,
}

impl FromStr for GeneratorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "broadcast" | "literal-broadcast" => Ok(GeneratorMode::LiteralBroadcast),
            "modulated" | "coordinate-modulated" => Ok(GeneratorMode::CoordinateModulated),
            other => Err(Error::InvalidArgument(format!(
                "unknown generator mode `{other}` (expected broadcast or modulated)"
            ))),
        }
    }
}

impl fmt::Display for GeneratorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorMode::LiteralBroadcast => "broadcast",
            GeneratorMode::CoordinateModulated => "modulated",
        })
    }
}

/// The `(F*F, 6)` code multiplied into the embedding for each window tap.
pub fn offset_encoding(f: usize) -> Tensor {
    let r = (f / 2) as isize;
    let denom = (r + 1) as f64;
    let mut data = Vec::with_capacity(f * f * EMBED_DIM);
    for m in -r..=r {
        for n in -r..=r {
            let (u, v) = (m as f64 / denom, n as f64 / denom);
            data.extend_from_slice(&[
                (PI * u).cos(),
                (PI * u).sin(),
                (PI * v).cos(),
                (PI * v).sin(),
                (PI * (u + v)).cos(),
                (PI * (u - v)).sin(),
            ]);
        }
    }
    Tensor::new(&[f * f, EMBED_DIM], data).expect("encoding extents")
}

/// A per-position kernel bank living on a graph: `(n, h, w, F*F*G)`.
#[derive(Clone, Copy, Debug)]
pub struct KernelField {
    pub var: Var,
    pub kernel_size: usize,
    pub groups: usize,
}

/// Filter-generating hyper-network shared by hyper-involution and its
/// depth-aware variant.
#[derive(Clone, Debug)]
pub struct HyperNetwork {
    pub n1: [ConvLayer; 3],
    pub norms: [BatchNormLayer; 3],
    pub n2: ConvLayer,
    pub mode: GeneratorMode,
    pub in_channels: usize,
    pub groups: usize,
}

impl HyperNetwork {
    /// `kernel_size` only sets the initial N2 bias (`1 / F^2`, a box filter).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        groups: usize,
        kernel_size: usize,
        mode: GeneratorMode,
        rng: &mut R,
    ) -> Self {
        let [a, b, c] = N1_FILTERS;
        let n1 = [
            ConvLayer::new(store, &format!("{name}.n1.0"), in_channels, a, 1, 1, true, rng),
            ConvLayer::new(store, &format!("{name}.n1.1"), a, b, 1, 1, true, rng),
            ConvLayer::new(store, &format!("{name}.n1.2"), b, c, 1, 1, true, rng),
        ];
        let norms = [
            BatchNormLayer::new(store, &format!("{name}.bn.0"), a),
            BatchNormLayer::new(store, &format!("{name}.bn.1"), b),
            BatchNormLayer::new(store, &format!("{name}.lambda"), c),
        ];
        let n2 = ConvLayer::new(store, &format!("{name}.n2"), c, groups, 1, 1, true, rng);
        let bias = n2.bias.expect("n2 has a bias");
        *store.get_mut(bias) = Tensor::full(&[groups], 1.0 / (kernel_size * kernel_size) as f64);
        Self {
            n1,
            norms,
            n2,
            mode,
            in_channels,
            groups,
        }
    }

    /// Exact trainable scalar count; independent of kernel size and spatial
    /// extents.
    pub fn param_count(in_channels: usize, groups: usize) -> usize {
        let [a, b, c] = N1_FILTERS;
        let pointwise = |i: usize, o: usize| i * o + o;
        pointwise(in_channels, a)
            + pointwise(a, b)
            + pointwise(b, c)
            + 2 * (a + b + c)
            + pointwise(c, groups)
    }

    /// Batch-norm channels whose running statistics are stored alongside
    /// the trainable parameters.
    pub fn bn_channels() -> usize {
        N1_FILTERS.iter().sum()
    }

    /// The 6-channel embedding `lambda(N1 x)`.
    pub fn embed(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: BnMode) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in self.n1.iter().zip(&self.norms) {
            h = conv.forward(g, store, h)?;
            h = bn.forward(g, store, h, mode)?;
            h = g.leaky_relu(h, HYPER_SLOPE);
        }
        Ok(h)
    }

    pub fn generate_kernels(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        kernel_size: usize,
        mode: BnMode,
    ) -> Result<KernelField> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::EvenKernel(kernel_size));
        }
        let [.., c] = g.value(x).dims4()?;
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels,
                got: c,
            });
        }
        let taps = kernel_size * kernel_size;
        let emb = self.embed(g, store, x, mode)?;
        let var = match self.mode {
            GeneratorMode::LiteralBroadcast => {
                let k = self.n2.forward(g, store, emb)?;
                g.broadcast_taps(k, taps)?
            }
            GeneratorMode::CoordinateModulated => {
                // sum_c w[j,c] (e[c] code[t,c]) regrouped as a pointwise conv
                // with per-tap weights w[j,c] code[t,c].
                let w = g.param(store, self.n2.weight);
                let w = g.modulate(w, offset_encoding(kernel_size))?;
                let b = g.param(store, self.n2.bias.expect("n2 has a bias"));
                let b = g.reshape(b, &[1, 1, 1, self.groups])?;
                let b = g.broadcast_taps(b, taps)?;
                let b = g.reshape(b, &[taps * self.groups])?;
                g.conv2d(emb, w, Some(b), 1, Padding::Same)?
            }
        };
        Ok(KernelField {
            var,
            kernel_size,
            groups: self.groups,
        })
    }
}

/// Applies a kernel field to `x`. Channel count is preserved.
pub fn involution_forward(
    g: &mut Graph,
    x: Var,
    kernels: &KernelField,
    groups: GroupSpec,
) -> Result<Var> {
    check_groups(g, x, kernels, groups)?;
    g.involution(x, kernels.var, None, kernels.kernel_size, kernels.groups)
}

fn check_groups(g: &Graph, x: Var, kernels: &KernelField, groups: GroupSpec) -> Result<()> {
    let [.., c] = g.value(x).dims4()?;
    if c != groups.channels() || kernels.groups != groups.groups() {
        return Err(Error::InvalidArgument(format!(
            "group spec {groups:?} does not match input with {c} channels and a {}-group kernel field",
            kernels.groups
        )));
    }
    Ok(())
}

pub fn hyper_involution_forward(
    g: &mut Graph,
    store: &mut ParamStore,
    net: &HyperNetwork,
    x: Var,
    kernel_size: usize,
    groups: GroupSpec,
    mode: BnMode,
) -> Result<Var> {
    let k = net.generate_kernels(g, store, x, kernel_size, mode)?;
    involution_forward(g, x, &k, groups)
}

/// Hyper-involution whose generated kernels are scaled tap-by-tap by the
/// depth-similarity field of each sample's depth map.
#[allow(clippy::too_many_arguments)]
pub fn depth_aware_hyper_involution_forward(
    g: &mut Graph,
    store: &mut ParamStore,
    net: &HyperNetwork,
    x: Var,
    depths: &[DepthMap],
    weighting: &DepthWeighting,
    kernel_size: usize,
    groups: GroupSpec,
    mode: BnMode,
) -> Result<Var> {
    let [n, h, w, _] = g.value(x).dims4()?;
    if depths.len() != n {
        return Err(Error::InvalidArgument(format!(
            "expected {n} depth maps, got {}",
            depths.len()
        )));
    }
    if let Some(d) = depths.iter().find(|d| d.height() != h || d.width() != w) {
        return Err(Error::Shape(format!(
            "depth map {}x{} not aligned with {h}x{w} input",
            d.height(),
            d.width()
        )));
    }
    let field = batch_weight_field(depths, kernel_size, weighting)?;
    let k = net.generate_kernels(g, store, x, kernel_size, mode)?;
    check_groups(g, x, &k, groups)?;
    g.involution(x, k.var, Some(field), kernel_size, k.groups)
}

/// Kernel generator of plain involution: `1x1 conv (C -> R) -> BN -> ReLU
/// -> 1x1 conv (R -> F*F*G)`, both convolutions with bias.
#[derive(Clone, Debug)]
pub struct InvolutionGenerator {
    pub reduce: ConvLayer,
    pub norm: BatchNormLayer,
    pub span: ConvLayer,
    pub kernel_size: usize,
    pub groups: usize,
}

impl InvolutionGenerator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        kernel_size: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::EvenKernel(kernel_size));
        }
        let r = INVOLUTION_REDUCTION;
        let taps = kernel_size * kernel_size;
        Ok(Self {
            reduce: ConvLayer::new(store, &format!("{name}.reduce"), in_channels, r, 1, 1, true, rng),
            norm: BatchNormLayer::new(store, &format!("{name}.bn"), r),
            span: ConvLayer::new(store, &format!("{name}.span"), r, taps * groups, 1, 1, true, rng),
            kernel_size,
            groups,
        })
    }

    pub fn param_count(in_channels: usize, kernel_size: usize, groups: usize) -> usize {
        let r = INVOLUTION_REDUCTION;
        let out = kernel_size * kernel_size * groups;
        in_channels * r + r + 2 * r + r * out + out
    }

    pub fn generate(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: BnMode) -> Result<KernelField> {
        let h = self.reduce.forward(g, store, x)?;
        let h = self.norm.forward(g, store, h, mode)?;
        let h = g.relu(h);
        let var = self.span.forward(g, store, h)?;
        Ok(KernelField {
            var,
            kernel_size: self.kernel_size,
            groups: self.groups,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperatorKind {
    Convolution,
    Involution,
    HyperInvolution,
    DepthAwareHyperInvolution,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::Convolution,
        OperatorKind::Involution,
        OperatorKind::HyperInvolution,
        OperatorKind::DepthAwareHyperInvolution,
    ];

    pub fn label(self) -> &'static str {
        match self {
            OperatorKind::Convolution => "standard_convolution",
            OperatorKind::Involution => "involution",
            OperatorKind::HyperInvolution => "hyper_involution",
            OperatorKind::DepthAwareHyperInvolution => "depth_aware_hyper_involution",
        }
    }
}

/// Configuration whose parameter count [`count_params`] reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OperatorConfig {
    pub kind: OperatorKind,
    pub in_channels: usize,
    /// Output filters of the standard convolution.
    pub filters: usize,
    pub kernel_size: usize,
    pub groups: usize,
}

impl OperatorConfig {
    /// 3 input channels and 8 filters, the setting of the published
    /// kernel-size comparison.
    pub fn comparison(kind: OperatorKind, kernel_size: usize) -> Self {
        Self {
            kind,
            in_channels: 3,
            filters: 8,
            kernel_size,
            groups: 1,
        }
    }
}

/// Exact trainable scalar count of one operator.
///
/// * convolution: `in * F^2 * filters`, no bias.
/// * involution: see [`InvolutionGenerator::param_count`].
/// * (depth-aware) hyper-involution: see [`HyperNetwork::param_count`];
///   the depth weighting adds nothing.
pub fn count_params(cfg: &OperatorConfig) -> usize {
    match cfg.kind {
        OperatorKind::Convolution => cfg.in_channels * cfg.kernel_size * cfg.kernel_size * cfg.filters,
        OperatorKind::Involution => {
            InvolutionGenerator::param_count(cfg.in_channels, cfg.kernel_size, cfg.groups)
        }
        OperatorKind::HyperInvolution | OperatorKind::DepthAwareHyperInvolution => {
            HyperNetwork::param_count(cfg.in_channels, cfg.groups)
        }
    }
}

/// [`count_params`] plus batch-norm running statistics (two per channel),
/// i.e. the total a framework that lists non-trainable state would print.
pub fn count_params_with_bn_stats(cfg: &OperatorConfig) -> usize {
    count_params(cfg)
        + match cfg.kind {
            OperatorKind::Convolution => 0,
            OperatorKind::Involution => 2 * INVOLUTION_REDUCTION,
            OperatorKind::HyperInvolution | OperatorKind::DepthAwareHyperInvolution => {
                2 * HyperNetwork::bn_channels()
            }
        }
}
