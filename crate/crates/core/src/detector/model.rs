//! The two-stream detector: depth-aware hyper-involution on RGB,
//! hyper-involution on depth, fusion, a 13-convolution backbone and a 1x1
//! detection head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::head::{decode, slot_detections, Detection, HeadLayout};
use super::nms::nms;
use crate::autograd::{BnMode, Graph, Var};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::layers::{BatchNormLayer, ConvLayer};
use crate::operators::{
    depth_aware_hyper_involution_forward, hyper_involution_forward, GroupSpec, HyperNetwork,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::weights_io;

pub const BACKBONE_SLOPE: f64 = 0.1;
pub const HEAD_INIT_STD: f64 = 0.01;
const ANCHOR_TENSOR: &str = "meta.anchors";

/// Inference thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostProcess {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self {
            score_threshold: 0.005,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackboneBlock {
    pub conv: ConvLayer,
    pub norm: BatchNormLayer,
    pub pool_after: bool,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub rgb_net: HyperNetwork,
    pub depth_net: HyperNetwork,
    pub fusion: Fusion,
    pub backbone: Vec<BackboneBlock>,
    pub head: ConvLayer,
}

impl Detector {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, f, g) = (cfg.in_channels, cfg.kernel_size, cfg.groups);
        let rgb_net = HyperNetwork::new(&mut store, "rgb.hyper", c, g, f, cfg.generator, &mut rng);
        let depth_net = HyperNetwork::new(&mut store, "depth.hyper", c, g, f, cfg.generator, &mut rng);
        let fusion = Fusion::new(&mut store, "fusion", cfg.fusion(), &mut rng)?;
        let mut backbone = Vec::with_capacity(cfg.backbone.len());
        let mut prev = cfg.fusion_width;
        for (i, &ch) in cfg.backbone.iter().enumerate() {
            let name = format!("backbone.{i}");
            backbone.push(BackboneBlock {
                conv: ConvLayer::new(&mut store, &format!("{name}.conv"), prev, ch, 3, 1, false, &mut rng),
                norm: BatchNormLayer::new(&mut store, &format!("{name}.bn"), ch),
                pool_after: cfg.pool_after.contains(&(i + 1)),
            });
            prev = ch;
        }
        let head_out = cfg.num_anchors() * cfg.slot_len();
        let head = ConvLayer::new(&mut store, "head", prev, head_out, 1, 1, true, &mut rng);
        *store.get_mut(head.weight) = Tensor::normal(&[head_out, prev, 1, 1], HEAD_INIT_STD, &mut rng);
        Ok(Self {
            cfg,
            store,
            rgb_net,
            depth_net,
            fusion,
            backbone,
            head,
        })
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            grid: self.cfg.grid_size(),
            anchors: self.cfg.anchors.clone(),
            classes: self.cfg.classes,
        }
    }

    /// Raw head output `(n, S, S, A, 5 + K)`. `rgb` is `(n, H, W, C)` with
    /// `H = W = input_size`, paired with one depth map per image.
    pub fn forward(&mut self, g: &mut Graph, rgb: &Tensor, depths: &[DepthMap], mode: BnMode) -> Result<Var> {
        let [n, h, w, c] = rgb.dims4()?;
        let size = self.cfg.input_size;
        if h != size || w != size {
            return Err(Error::Shape(format!("input is {h}x{w}, model expects {size}x{size}")));
        }
        if c != self.cfg.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.in_channels,
                got: c,
            });
        }
        if depths.len() != n {
            return Err(Error::Shape(format!("{n} images but {} depth maps", depths.len())));
        }
        if let Some(d) = depths.iter().find(|d| d.height() != h || d.width() != w) {
            return Err(Error::Shape(format!(
                "depth map {}x{} does not match {h}x{w} image",
                d.height(),
                d.width()
            )));
        }
        let groups = GroupSpec::new(self.cfg.groups, c)?;
        let (f, weighting) = (self.cfg.kernel_size, self.cfg.weighting());
        let Self {
            store,
            rgb_net,
            depth_net,
            fusion,
            backbone,
            head,
            ..
        } = self;

        let x = g.constant(rgb.clone());
        let rgb_feat = depth_aware_hyper_involution_forward(
            g, store, rgb_net, x, depths, &weighting, f, groups, mode,
        )?;
        let rgb_feat = g.maxpool2d(rgb_feat, 2, 2)?;

        let depth_in = Tensor::stack_batch(&depths.iter().map(|d| d.to_tensor(c)).collect::<Vec<_>>())?;
        let dx = g.constant(depth_in);
        let depth_feat = hyper_involution_forward(g, store, depth_net, dx, f, groups, mode)?;
        let depth_feat = g.maxpool2d(depth_feat, 2, 2)?;

        let mut z = fusion.fuse(g, store, rgb_feat, depth_feat)?;
        for block in backbone.iter() {
            z = block.conv.forward(g, store, z)?;
            z = block.norm.forward(g, store, z, mode)?;
            z = g.leaky_relu(z, BACKBONE_SLOPE);
            if block.pool_after {
                z = g.maxpool2d(z, 2, 2)?;
            }
        }
        let out = head.forward(g, store, z)?;
        let s = self.cfg.grid_size();
        g.reshape(out, &[n, s, s, self.cfg.num_anchors(), self.cfg.slot_len()])
    }

    /// Eval-mode forward, decoding, score filtering and per-class NMS.
    pub fn predict(&mut self, rgb: &Tensor, depths: &[DepthMap], post: &PostProcess) -> Result<Vec<Vec<Detection>>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, rgb, depths, BnMode::Eval)?;
        let layout = self.layout();
        let raw = g.value(out);
        let n = raw.shape()[0];
        (0..n)
            .map(|i| {
                let preds = decode(&raw.data()[i * layout.len()..(i + 1) * layout.len()], &layout)?;
                let mut dets = nms(&slot_detections(&preds, post.score_threshold), post.nms_iou);
                dets.truncate(post.max_detections);
                Ok(dets)
            })
            .collect()
    }

    /// Trainable parameters of the depth-stream hyper-network.
    pub fn depth_net_param_ids(&self) -> Vec<crate::params::ParamId> {
        self.store
            .ids()
            .filter(|&id| {
                let e = self.store.entry(id);
                e.kind == crate::params::ParamKind::Trainable && e.name.starts_with("depth.hyper.")
            })
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.store.to_named();
        let a: Vec<f64> = self.cfg.anchors.iter().flat_map(|&(w, h)| [w, h]).collect();
        out.push((
            ANCHOR_TENSOR.to_string(),
            Tensor::new(&[self.cfg.num_anchors(), 2], a).expect("anchor extents"),
        ));
        out
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        weights_io::save(path, &self.named_tensors())
    }

    /// Loads parameters and anchors written by [`Detector::save_weights`].
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let mut tensors = weights_io::load(path)?;
        let pos = tensors
            .iter()
            .position(|(n, _)| n == ANCHOR_TENSOR)
            .ok_or_else(|| Error::Data(format!("{} has no `{ANCHOR_TENSOR}` tensor", path.display())))?;
        let (_, anchors) = tensors.remove(pos);
        if anchors.shape() != [self.cfg.num_anchors(), 2] {
            return Err(Error::Data(format!(
                "weights hold {:?} anchors, config expects {}",
                anchors.shape(),
                self.cfg.num_anchors()
            )));
        }
        self.store.load_named(&tensors)?;
        self.cfg.anchors = anchors.data().chunks(2).map(|p| (p[0], p[1])).collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            backbone: vec![4; 13],
            classes: 2,
            anchors: vec![(0.2, 0.2), (0.5, 0.4)],
            ..ModelConfig::default()
        }
    }

    fn inputs(n: usize, size: usize) -> (Tensor, Vec<DepthMap>) {
        let rgb = Tensor::from_fn(&[n, size, size, 3], |i| ((i * 31) % 17) as f64 / 17.0);
        let depths = (0..n)
            .map(|k| {
                DepthMap::new(size, size, (0..size * size).map(|i| 2.0 + ((i + k) % 5) as f64).collect()).unwrap()
            })
            .collect();
        (rgb, depths)
    }

    #[test]
    fn output_shape_matches_config() {
        let mut m = Detector::new(tiny(), 0).unwrap();
        let (rgb, depths) = inputs(2, 32);
        let mut g = Graph::new();
        let y = m.forward(&mut g, &rgb, &depths, BnMode::Train).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1, 1, 2, 7]);
    }

    #[test]
    fn zero_head_gives_half_confidence() {
        let mut m = Detector::new(tiny(), 0).unwrap();
        let head = m.head.clone();
        *m.store.get_mut(head.weight) = Tensor::zeros(m.store.get(head.weight).shape());
        let (rgb, depths) = inputs(1, 32);
        let mut g = Graph::new();
        let y = m.forward(&mut g, &rgb, &depths, BnMode::Eval).unwrap();
        let preds = decode(g.value(y).data(), &m.layout()).unwrap();
        assert!(preds.iter().all(|p| p.conf == 0.5));
    }

    #[test]
    fn mismatched_depth_rejected() {
        let mut m = Detector::new(tiny(), 0).unwrap();
        let (rgb, _) = inputs(1, 32);
        let bad = vec![DepthMap::constant(16, 32, 1.0).unwrap()];
        let mut g = Graph::new();
        assert!(m.forward(&mut g, &rgb, &bad, BnMode::Eval).is_err());
    }

    #[test]
    fn weights_roundtrip() {
        let m = Detector::new(tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.dhi");
        m.save_weights(&p).unwrap();
        let mut other = Detector::new(tiny(), 4).unwrap();
        other.cfg.anchors = vec![(0.9, 0.9), (0.1, 0.1)];
        other.load_weights(&p).unwrap();
        assert_eq!(other.named_tensors(), m.named_tensors());
    }
}
