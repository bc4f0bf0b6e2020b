//! Decoding of the raw `(S, S, A, 5 + K)` head tensor.

use crate::autograd::sigmoid;
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Width/height log-scale offsets are clamped to this magnitude before the
/// exponential.
pub const SCALE_CLAMP: f64 = 8.0;

/// Slot geometry of one image's head output. Slots are ordered
/// `(row, col, anchor)`; each slot holds `tx, ty, tw, th, tc, logits[K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLayout {
    pub grid: usize,
    pub anchors: Vec<(f64, f64)>,
    pub classes: usize,
}

impl HeadLayout {
    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn slot_len(&self) -> usize {
        5 + self.classes
    }

    pub fn num_slots(&self) -> usize {
        self.grid * self.grid * self.num_anchors()
    }

    pub fn len(&self) -> usize {
        self.num_slots() * self.slot_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot_index(&self, row: usize, col: usize, anchor: usize) -> usize {
        (row * self.grid + col) * self.num_anchors() + anchor
    }

    /// `(row, col, anchor)` of a slot index.
    pub fn slot_coords(&self, slot: usize) -> (usize, usize, usize) {
        let a = self.num_anchors();
        let cell = slot / a;
        (cell / self.grid, cell % self.grid, slot % a)
    }

    /// Grid cell containing a normalised point; points on the far edge fall
    /// into the last cell.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let s = self.grid as f64;
        let clamp = |v: f64| ((v * s).floor().max(0.0) as usize).min(self.grid - 1);
        (clamp(y), clamp(x))
    }

    fn check(&self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.len() {
            return Err(Error::Shape(format!(
                "head output has {} values, layout expects {}",
                raw.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotPred {
    pub bbox: BBox,
    pub conf: f64,
    pub probs: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `cx = (col + sigmoid(tx)) / S`, `w = anchor_w * exp(tw)`, confidence
/// `sigmoid(tc)`, class probabilities `softmax(logits)`.
pub fn decode(raw: &[f64], layout: &HeadLayout) -> Result<Vec<SlotPred>> {
    layout.check(raw)?;
    let s = layout.grid as f64;
    let out = raw
        .chunks(layout.slot_len())
        .enumerate()
        .map(|(slot, v)| {
            let (row, col, a) = layout.slot_coords(slot);
            let (aw, ah) = layout.anchors[a];
            SlotPred {
                bbox: BBox::new(
                    (col as f64 + sigmoid(v[0])) / s,
                    (row as f64 + sigmoid(v[1])) / s,
                    aw * v[2].clamp(-SCALE_CLAMP, SCALE_CLAMP).exp(),
                    ah * v[3].clamp(-SCALE_CLAMP, SCALE_CLAMP).exp(),
                ),
                conf: sigmoid(v[4]),
                probs: softmax(&v[5..]),
            }
        })
        .collect::<Vec<_>>();
    if out
        .iter()
        .any(|p| !(p.bbox.w.is_finite() && p.bbox.h.is_finite() && p.conf.is_finite()))
    {
        return Err(Error::NonFinite("decoded head output".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

/// Scores each slot as `conf * max class probability` and keeps those at
/// or above `score_threshold`.
pub fn slot_detections(preds: &[SlotPred], score_threshold: f64) -> Vec<Detection> {
    preds
        .iter()
        .filter_map(|p| {
            let (class, pmax) = p
                .probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
            let confidence = p.conf * pmax;
            (confidence >= score_threshold).then_some(Detection {
                class,
                confidence,
                bbox: p.bbox,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> HeadLayout {
        HeadLayout {
            grid: 3,
            anchors: vec![(0.2, 0.3), (0.5, 0.4)],
            classes: 2,
        }
    }

    #[test]
    fn zero_head_decodes_to_anchor_centres() {
        let l = layout();
        let preds = decode(&vec![0.0; l.len()], &l).unwrap();
        assert_eq!(preds.len(), 18);
        for (slot, p) in preds.iter().enumerate() {
            let (row, col, a) = l.slot_coords(slot);
            assert_eq!(p.conf, 0.5);
            assert_eq!(p.probs, vec![0.5, 0.5]);
            assert!((p.bbox.cx - (col as f64 + 0.5) / 3.0).abs() < 1e-15);
            assert!((p.bbox.cy - (row as f64 + 0.5) / 3.0).abs() < 1e-15);
            assert_eq!((p.bbox.w, p.bbox.h), l.anchors[a]);
        }
    }

    #[test]
    fn centres_stay_in_their_cell() {
        let l = layout();
        let raw: Vec<f64> = (0..l.len()).map(|i| ((i * 7919) % 41) as f64 - 20.0).collect();
        for (slot, p) in decode(&raw, &l).unwrap().iter().enumerate() {
            let (row, col, _) = l.slot_coords(slot);
            assert!(p.bbox.cx >= col as f64 / 3.0 && p.bbox.cx <= (col + 1) as f64 / 3.0);
            assert!(p.bbox.cy >= row as f64 / 3.0 && p.bbox.cy <= (row + 1) as f64 / 3.0);
            assert!(p.conf >= 0.0 && p.conf <= 1.0);
        }
    }

    #[test]
    fn slot_index_roundtrip_and_cells() {
        let l = layout();
        for s in 0..l.num_slots() {
            let (r, c, a) = l.slot_coords(s);
            assert_eq!(l.slot_index(r, c, a), s);
        }
        assert_eq!(l.cell_of(1.0, 1.0), (2, 2));
        assert_eq!(l.cell_of(0.34, 0.0), (0, 1));
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(decode(&[0.0; 3], &layout()).is_err());
    }
}
