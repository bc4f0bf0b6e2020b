//! Anchor priors by k-means over box shapes with a `1 - IoU` distance.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::shape_iou;
use crate::error::{Error, Result};

pub const KMEANS_MAX_ITERS: usize = 100;

/// Prior `(w, h)` shapes, sorted by area ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    shapes: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn new(mut shapes: Vec<(f64, f64)>) -> Result<Self> {
        if shapes.is_empty() || shapes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
            return Err(Error::InvalidArgument(
                "anchors must be a non-empty list of positive finite shapes".into(),
            ));
        }
        shapes.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
        Ok(Self { shapes })
    }

    pub fn shapes(&self) -> &[(f64, f64)] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    1.0 - shape_iou(a, b)
}

fn nearest(b: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, distance(b, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// k-means++ seeding followed by Lloyd iterations until assignments stop
/// changing or [`KMEANS_MAX_ITERS`] is reached. Empty clusters keep their
/// previous centroid.
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
    if k == 0 || boxes.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least {k} boxes (and k >= 1), got {}",
            boxes.len()
        )));
    }
    if boxes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
        return Err(Error::InvalidArgument("box shapes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![boxes[rng.gen_range(0..boxes.len())]];
    while centroids.len() < k {
        let d2: Vec<f64> = boxes.iter().map(|&b| nearest(b, &centroids).1.powi(2)).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut idx = boxes.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && t < d {
                    idx = i;
                    break;
                }
                t -= d;
            }
            idx
        } else {
            rng.gen_range(0..boxes.len())
        };
        centroids.push(boxes[pick]);
    }

    let mut assign = vec![usize::MAX; boxes.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let next: Vec<usize> = boxes.iter().map(|&b| nearest(b, &centroids).0).collect();
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&b, &a) in boxes.iter().zip(&assign) {
            sums[a].0 += b.0;
            sums[a].1 += b.1;
            sums[a].2 += 1;
        }
        for (c, (sw, sh, n)) in centroids.iter_mut().zip(sums) {
            if n > 0 {
                *c = (sw / n as f64, sh / n as f64);
            }
        }
    }
    AnchorSet::new(centroids)
}
