//! Mini-batch training with Adam and model evaluation on a sample set.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnMode, Graph};
use crate::data::{load_split, Sample, Split};
use crate::depth::DepthMap;
use crate::detector::head::decode;
use crate::detector::{kmeans_anchors, Detector, ModelConfig, PostProcess};
use crate::error::{Error, Result};
use crate::loss::{assign_targets, loss_and_grad, GroundTruth, LossParts, LossWeights};
use crate::metrics::{evaluate, pr_curve_csv, Evaluation, GtBox, ScoredBox};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 5e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub augment: Augment,
}

/// Random geometric augmentation applied per training image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    None,
    /// Horizontal mirror with probability 1/2.
    HorizontalFlip,
    /// One of the 8 symmetries of the square, uniformly.
    Dihedral,
}

impl std::str::FromStr for Augment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "hflip" => Ok(Augment::HorizontalFlip),
            "dihedral" => Ok(Augment::Dihedral),
            other => Err(Error::InvalidArgument(format!(
                "unknown augmentation `{other}` (expected none, hflip, dihedral)"
            ))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: DEFAULT_LR,
            batch_size: 8,
            seed: 0,
            weights: LossWeights::default(),
            augment: Augment::Dihedral,
        }
    }
}

/// Mean per-image loss components over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub parts: LossParts,
}

pub fn loss_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,class,local,conf,total\n");
    for r in records {
        let p = r.parts;
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, p.class, p.local, p.conf, p.total());
    }
    s
}

/// Replaces the model's anchors with k-means centroids of the training
/// box shapes.
pub fn fit_anchors(model: &mut Detector, samples: &[Sample], seed: u64) -> Result<()> {
    let shapes: Vec<(f64, f64)> = samples
        .iter()
        .flat_map(|s| s.annotations.iter().map(|a| (a.bbox.w, a.bbox.h)))
        .collect();
    let a = kmeans_anchors(&shapes, model.cfg.num_anchors(), seed)?;
    model.cfg.anchors = a.shapes().to_vec();
    Ok(())
}

/// Bit flags of a square symmetry, applied in the order transpose,
/// horizontal mirror, vertical mirror.
pub const TRANSPOSE: u8 = 1;
pub const MIRROR_X: u8 = 2;
pub const MIRROR_Y: u8 = 4;

/// Applies the symmetry `t` to a square image, its depth map and boxes.
pub fn transform_sample(s: &Sample, t: u8) -> Result<Sample> {
    let [_, h, w, c] = s.rgb.dims4()?;
    if t & TRANSPOSE != 0 && h != w {
        return Err(Error::Shape(format!("cannot transpose a {h}x{w} image")));
    }
    let mut rgb = vec![0.0; h * w * c];
    let mut depth = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let xs = if t & MIRROR_X != 0 { w - 1 - x } else { x };
            let ys = if t & MIRROR_Y != 0 { h - 1 - y } else { y };
            let src = if t & TRANSPOSE != 0 { xs * w + ys } else { ys * w + xs };
            let dst = y * w + x;
            rgb[dst * c..(dst + 1) * c].copy_from_slice(&s.rgb.data()[src * c..(src + 1) * c]);
            depth[dst] = s.depth.values()[src];
        }
    }
    let mut annotations = s.annotations.clone();
    for a in &mut annotations {
        let b = &mut a.bbox;
        if t & TRANSPOSE != 0 {
            std::mem::swap(&mut b.cx, &mut b.cy);
            std::mem::swap(&mut b.w, &mut b.h);
        }
        if t & MIRROR_X != 0 {
            b.cx = 1.0 - b.cx;
        }
        if t & MIRROR_Y != 0 {
            b.cy = 1.0 - b.cy;
        }
    }
    Ok(Sample {
        rgb: Tensor::new(&[1, h, w, c], rgb)?,
        depth: DepthMap::new(h, w, depth)?,
        annotations,
    })
}

fn draw_transform(aug: Augment, rng: &mut ChaCha8Rng) -> u8 {
    match aug {
        Augment::None => 0,
        Augment::HorizontalFlip => {
            if rng.gen::<bool>() {
                MIRROR_X
            } else {
                0
            }
        }
        Augment::Dihedral => rng.gen_range(0..8),
    }
}

fn stack(samples: &[&Sample]) -> Result<(Tensor, Vec<DepthMap>)> {
    let rgb = Tensor::stack_batch(&samples.iter().map(|s| s.rgb.clone()).collect::<Vec<_>>())?;
    Ok((rgb, samples.iter().map(|s| s.depth.clone()).collect()))
}

/// One optimisation step on a batch; returns the summed loss parts.
pub fn train_step(model: &mut Detector, opt: &mut Adam, batch: &[&Sample], weights: &LossWeights) -> Result<LossParts> {
    let (rgb, depths) = stack(batch)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &rgb, &depths, BnMode::Train)?;
    let layout = model.layout();
    let raw = g.value(out).data().to_vec();
    let mut sum = LossParts::default();
    let mut grad = Vec::with_capacity(raw.len());
    for (i, s) in batch.iter().enumerate() {
        let r = &raw[i * layout.len()..(i + 1) * layout.len()];
        let gts: Vec<GroundTruth> = s.annotations.iter().map(|&a| a.into()).collect();
        let targets = assign_targets(&gts, &layout, Some(&decode(r, &layout)?))?;
        let (parts, gi) = loss_and_grad(r, &layout, &targets, weights)?;
        sum += parts;
        grad.extend(gi);
    }
    let n = batch.len() as f64;
    let mean = sum.total() / n;
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {mean}")));
    }
    let grad = Tensor::new(g.value(out).shape(), grad.into_iter().map(|v| v / n).collect())?;
    let loss = g.external_scalar(out, mean, grad)?;
    g.backward(loss)?;
    model.store.zero_grads();
    g.write_param_grads(&mut model.store);
    opt.step(&mut model.store)?;
    Ok(sum)
}

/// Trains for `cfg.epochs` epochs over `samples` in seeded shuffled
/// order, calling `on_epoch` after each.
pub fn train(
    model: &mut Detector,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let mut owned = Vec::new();
            let mut picks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                match draw_transform(cfg.augment, &mut rng) {
                    0 => picks.push(None),
                    t => {
                        picks.push(Some(owned.len()));
                        owned.push(transform_sample(&samples[i], t)?);
                    }
                }
            }
            let batch: Vec<&Sample> = chunk
                .iter()
                .zip(&picks)
                .map(|(&i, p)| p.map_or(&samples[i], |k| &owned[k]))
                .collect();
            sum += train_step(model, &mut opt, &batch, &cfg.weights)?;
        }
        let n = samples.len() as f64;
        let rec = EpochRecord {
            epoch,
            parts: LossParts {
                class: sum.class / n,
                local: sum.local / n,
                conf: sum.conf / n,
            },
        };
        info!("epoch {epoch}: loss {:.5}", rec.parts.total());
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Runs inference over `samples` and scores it VOC-style.
pub fn evaluate_model(
    model: &mut Detector,
    samples: &[Sample],
    post: &PostProcess,
    iou_threshold: f64,
) -> Result<Evaluation> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (chunk_idx, chunk) in samples.chunks(8).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (rgb, depths) = stack(&refs)?;
        let preds = model.predict(&rgb, &depths, post)?;
        for (j, (s, p)) in chunk.iter().zip(preds).enumerate() {
            let image = chunk_idx * 8 + j;
            gts.extend(s.annotations.iter().map(|a| GtBox {
                image,
                class: a.class,
                bbox: a.bbox,
            }));
            dets.extend(p.into_iter().map(|d| ScoredBox {
                image,
                class: d.class,
                confidence: d.confidence,
                bbox: d.bbox,
            }));
        }
    }
    Ok(evaluate(&dets, &gts, model.cfg.classes, iou_threshold))
}

pub const WEIGHTS_FILE: &str = "weights.dhi";
pub const CONFIG_FILE: &str = "model.cfg";
pub const LOSS_FILE: &str = "loss.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the training split of `data`, fits anchors, trains, and writes
/// `weights.dhi`, `model.cfg` and `loss.csv` into `out`. The loss file is
/// rewritten after every epoch.
pub fn train_to_dir(data: &Path, out: &Path, cfg: ModelConfig, tc: &TrainConfig) -> Result<(Detector, Vec<EpochRecord>)> {
    let samples = load_split(data, Split::Train, Some(cfg.input_size))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut model = Detector::new(cfg, tc.seed)?;
    fit_anchors(&mut model, &samples, tc.seed)?;
    let loss_path = out.join(LOSS_FILE);
    let mut seen = Vec::new();
    let mut io_err = None;
    let history = train(&mut model, &samples, tc, |r| {
        seen.push(*r);
        if let Err(e) = write(&loss_path, &loss_csv(&seen)) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    model.save_weights(&out.join(WEIGHTS_FILE))?;
    model.cfg.save(&out.join(CONFIG_FILE))?;
    Ok((model, history))
}

/// Evaluates saved weights on one split of `data` and writes
/// `ap_table.csv`, `ap_table.txt` and `pr_class_<k>.csv` into `out`.
pub fn eval_to_dir(
    weights: &Path,
    cfg: ModelConfig,
    data: &Path,
    split: Split,
    out: &Path,
    post: &PostProcess,
    iou_threshold: f64,
) -> Result<Evaluation> {
    let mut model = Detector::new(cfg, 0)?;
    model.load_weights(weights)?;
    let samples = load_split(data, split, Some(model.cfg.input_size))?;
    let eval = evaluate_model(&mut model, &samples, post, iou_threshold)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("ap_table.csv"), &eval.table_csv())?;
    write(&out.join("ap_table.txt"), &eval.table_text())?;
    for c in &eval.classes {
        write(&out.join(format!("pr_class_{}.csv", c.class)), &pr_curve_csv(&c.curve))?;
    }
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{random_scene, render};

    #[test]
    fn mirrors_are_involutions() {
        let s = render(&random_scene(16, 3, 1, 0)).unwrap();
        for t in [TRANSPOSE, MIRROR_X, MIRROR_Y, MIRROR_X | MIRROR_Y] {
            assert_eq!(transform_sample(&transform_sample(&s, t).unwrap(), t).unwrap(), s);
        }
        let f = transform_sample(&s, MIRROR_X).unwrap();
        assert_eq!(f.depth.at(3, 0), s.depth.at(3, 15));
        let tr = transform_sample(&s, TRANSPOSE).unwrap();
        assert_eq!(tr.depth.at(2, 9), s.depth.at(9, 2));
    }

    #[test]
    fn transformed_boxes_track_pixels() {
        // Single-object scene: the foreground mask's extent is the box.
        let s = (0..)
            .map(|k| render(&random_scene(32, 3, 4, k)).unwrap())
            .find(|s| s.annotations.len() == 1 && s.depth.values().iter().filter(|&&d| d < 7.0).count() > 0)
            .unwrap();
        for t in 0..8 {
            let ts = transform_sample(&s, t).unwrap();
            let (mut x0, mut y0, mut x1, mut y1) = (32, 32, 0, 0);
            for r in 0..32 {
                for c in 0..32 {
                    if ts.depth.at(r, c) < 7.0 {
                        (x0, y0, x1, y1) = (x0.min(c), y0.min(r), x1.max(c + 1), y1.max(r + 1));
                    }
                }
            }
            let (ax0, ay0, ax1, ay1) = ts.annotations[0].bbox.corners();
            let got = [x0, y0, x1, y1].map(|v| v as f64 / 32.0);
            let want = [ax0, ay0, ax1, ay1];
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-12, "t={t}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn smoke_training_reduces_loss() {
        let cfg = ModelConfig {
            input_size: 32,
            backbone: vec![4; 13],
            ..ModelConfig::default()
        };
        let samples: Vec<Sample> = (0..4).map(|i| render(&random_scene(32, 3, 5, i)).unwrap()).collect();
        let mut model = Detector::new(cfg, 1).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            lr: 1e-2,
            batch_size: 4,
            augment: Augment::None,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &samples, &tc, |_| {}).unwrap();
        assert!(h[2].parts.total() < h[0].parts.total());
        assert!(loss_csv(&h).lines().count() == 4);
    }
}
