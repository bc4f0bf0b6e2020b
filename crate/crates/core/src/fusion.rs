//! Trainable fusion of RGB-stream and depth-stream feature maps.
//!
//! ```text
//! s = rgb + (depth + leaky(conv3x3(depth)))       residual mapping + add
//! e = leaky(conv3x3_s2(upsample(s)))              encoder, back at s's extent
//! b = leaky(conv3x3_s2(e))                        bottleneck, half extent
//! d = tconv3x3_s2(b)                              decoder, e's extent
//! out = d + e                                     skip connection
//! ```
//!
//! The output keeps the spatial extents of the inputs and has `width`
//! channels.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, TransposedConvLayer};
use crate::params::ParamStore;

pub const FUSION_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    /// Channels of each incoming stream.
    pub in_channels: usize,
    /// Channels of the encoder/decoder convolutions and of the output.
    pub width: usize,
    pub upsample: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            width: 3,
            upsample: 2,
            kernel: 3,
            stride: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("fusion channel counts must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::EvenKernel(self.kernel));
        }
        if self.upsample != self.stride || self.stride < 1 {
            return Err(Error::InvalidArgument(format!(
                "fusion upsample factor ({}) must equal the encoder stride ({}) to preserve extents",
                self.upsample, self.stride
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub residual: ConvLayer,
    pub encode: ConvLayer,
    pub bottleneck: ConvLayer,
    pub decode: TransposedConvLayer,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, w, k, s) = (cfg.in_channels, cfg.width, cfg.kernel, cfg.stride);
        Ok(Self {
            cfg,
            residual: ConvLayer::new(store, &format!("{name}.residual"), c, c, k, 1, true, rng),
            encode: ConvLayer::new(store, &format!("{name}.encode"), c, w, k, s, true, rng),
            bottleneck: ConvLayer::new(store, &format!("{name}.bottleneck"), w, w, k, s, true, rng),
            decode: TransposedConvLayer::new(store, &format!("{name}.decode"), w, w, k, s, true, rng),
        })
    }

    pub fn param_count(&self) -> usize {
        self.residual.param_count()
            + self.encode.param_count()
            + self.bottleneck.param_count()
            + self.decode.param_count()
    }

    /// `depth + leaky(conv3x3(depth) + bias)`.
    pub fn residual_map(&self, g: &mut Graph, store: &ParamStore, depth_feat: Var) -> Result<Var> {
        let r = self.residual.forward(g, store, depth_feat)?;
        let r = g.leaky_relu(r, FUSION_SLOPE);
        g.add(depth_feat, r)
    }

    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, rgb_feat: Var, depth_feat: Var) -> Result<Var> {
        let (rs, ds) = (g.value(rgb_feat).dims4()?, g.value(depth_feat).dims4()?);
        if rs != ds {
            return Err(Error::Shape(format!(
                "fusion streams differ in shape: rgb {rs:?} vs depth {ds:?}"
            )));
        }
        let mapped = self.residual_map(g, store, depth_feat)?;
        let s = g.add(rgb_feat, mapped)?;
        let u = g.upsample_nearest(s, self.cfg.upsample)?;
        let e = self.encode.forward(g, store, u)?;
        let e = g.leaky_relu(e, FUSION_SLOPE);
        let b = self.bottleneck.forward(g, store, e)?;
        let b = g.leaky_relu(b, FUSION_SLOPE);
        let [_, eh, ew, _] = g.value(e).dims4()?;
        let d = self.decode.forward(g, store, b, Some((eh, ew)))?;
        g.add(d, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: FusionConfig, seed: u64) -> (ParamStore, Fusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "fusion", cfg, &mut rng).unwrap();
        (store, f)
    }

    fn zero_params(store: &mut ParamStore) {
        for e in store.entries_mut() {
            e.value = Tensor::zeros(e.value.shape());
        }
    }

    #[test]
    fn zero_weights_make_residual_identity() {
        let (mut store, f) = build(FusionConfig::default(), 1);
        zero_params(&mut store);
        let input = Tensor::from_fn(&[1, 5, 4, 3], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = f.residual_map(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn zero_input_gives_bias_driven_constant() {
        let (mut store, f) = build(FusionConfig::default(), 2);
        *store.get_mut(f.residual.bias.unwrap()) = Tensor::new(&[3], vec![0.5, -2.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 4, 3]));
        let y = f.residual_map(&mut g, &store, x).unwrap();
        for px in g.value(y).data().chunks(3) {
            assert_eq!(px, &[0.5, -0.2, 1.0]);
        }
    }

    #[test]
    fn residual_matches_composed_oracle() {
        let (store, f) = build(FusionConfig::default(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = Tensor::uniform(&[2, 5, 6, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = f.residual_map(&mut g, &store, x).unwrap();

        // Oracle: direct nested-loop 3x3 same conv, leaky, then add.
        let w = store.get(f.residual.weight);
        let b = store.get(f.residual.bias.unwrap());
        let [n, h, wd, c] = input.dims4().unwrap();
        let at = |bn: usize, i: isize, j: isize, ch: usize| {
            if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
                0.0
            } else {
                input.data()[((bn * h + i as usize) * wd + j as usize) * c + ch]
            }
        };
        for bn in 0..n {
            for i in 0..h {
                for j in 0..wd {
                    for o in 0..c {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            for m in 0..3 {
                                for q in 0..3 {
                                    acc += w.data()[((o * c + ci) * 3 + m) * 3 + q]
                                        * at(bn, i as isize + m as isize - 1, j as isize + q as isize - 1, ci);
                                }
                            }
                        }
                        let act = if acc > 0.0 { acc } else { FUSION_SLOPE * acc };
                        let expect = at(bn, i as isize, j as isize, o) + act;
                        let got = g.value(y).data()[((bn * h + i) * wd + j) * c + o];
                        assert!((got - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_inputs_and_biases_give_zero() {
        let (mut store, f) = build(FusionConfig::default(), 4);
        for e in store.entries_mut() {
            if e.name.ends_with(".bias") {
                e.value = Tensor::zeros(e.value.shape());
            }
        }
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 6, 6, 3]));
        let b = g.constant(Tensor::zeros(&[1, 6, 6, 3]));
        let y = f.fuse(&mut g, &store, a, b).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_is_preserved() {
        for (h, w) in [(16, 16), (7, 9), (1, 1)] {
            let (store, f) = build(FusionConfig::default(), 5);
            let mut g = Graph::new();
            let a = g.constant(Tensor::ones(&[2, h, w, 3]));
            let b = g.constant(Tensor::ones(&[2, h, w, 3]));
            let y = f.fuse(&mut g, &store, a, b).unwrap();
            assert_eq!(g.value(y).shape(), &[2, h, w, 3]);
        }
    }

    #[test]
    fn mismatched_streams_rejected() {
        let (store, f) = build(FusionConfig::default(), 6);
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[1, 4, 4, 3]));
        let b = g.constant(Tensor::ones(&[1, 4, 6, 3]));
        assert!(f.fuse(&mut g, &store, a, b).is_err());
    }

    #[test]
    fn has_trainable_parameters() {
        let (store, f) = build(FusionConfig::default(), 7);
        assert!(f.param_count() > 0);
        assert_eq!(store.trainable_scalars(), f.param_count());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = FusionConfig {
            upsample: 3,
            ..FusionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
