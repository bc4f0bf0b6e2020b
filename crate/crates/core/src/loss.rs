//! Single-stage detection loss: classification, localisation and confidence
//! terms summed into a total.
//!
//! ```text
//! class = sum_resp sum_k (p_k - onehot_k)^2
//! local = coord * sum_resp [(x - x^)^2 + (y - y^)^2 + (sqrt w - sqrt w^)^2 + (sqrt h - sqrt h^)^2]
//! conf  = sum_resp (c - c^)^2 + noobj * sum_other c^2
//! ```
//!
//! `resp` are the slots responsible for a ground-truth box: the best
//! shape-IoU anchor of the cell containing the box centre. The confidence
//! target `c^` is the IoU between the slot's decoded box and its ground
//! truth, computed once by [`assign_targets`] and then held constant.

use std::cmp::Ordering;

use crate::autograd::sigmoid;
use crate::boxes::{iou, shape_iou, BBox};
use crate::detector::head::{decode, HeadLayout, SlotPred, SCALE_CLAMP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub coord: f64,
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coord: 5.0,
            noobj: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotTarget {
    pub class: usize,
    pub bbox: BBox,
    /// Confidence target.
    pub conf: f64,
}

/// One optional target per head slot, in [`HeadLayout`] slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub classes: usize,
    pub slots: Vec<Option<SlotTarget>>,
}

impl TargetAssignment {
    pub fn empty(layout: &HeadLayout) -> Self {
        Self {
            classes: layout.classes,
            slots: vec![None; layout.num_slots()],
        }
    }

    pub fn responsible(&self) -> impl Iterator<Item = (usize, &SlotTarget)> {
        self.slots.iter().enumerate().filter_map(|(i, t)| t.as_ref().map(|t| (i, t)))
    }
}

/// Orders ground truths competing for one slot: larger area wins, then the
/// lexicographically smaller `(cx, cy, w, h, class)`.
fn precedence(a: &GroundTruth, b: &GroundTruth) -> Ordering {
    b.bbox
        .area()
        .total_cmp(&a.bbox.area())
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.class.cmp(&b.class))
}

/// Assigns each ground truth to one slot. With `preds`, confidence targets
/// are IoU(decoded box, ground truth); without, they are 1. When two boxes
/// land on the same slot the one ranked first by area (then coordinates)
/// keeps it, so the result does not depend on input order.
pub fn assign_targets(
    gts: &[GroundTruth],
    layout: &HeadLayout,
    preds: Option<&[SlotPred]>,
) -> Result<TargetAssignment> {
    if let Some(p) = preds {
        if p.len() != layout.num_slots() {
            return Err(Error::Shape(format!(
                "{} predictions for {} slots",
                p.len(),
                layout.num_slots()
            )));
        }
    }
    let mut winners: Vec<Option<GroundTruth>> = vec![None; layout.num_slots()];
    for gt in gts {
        let b = gt.bbox;
        let ok = [b.cx, b.cy, b.w, b.h].iter().all(|v| v.is_finite()) && b.w > 0.0 && b.h > 0.0;
        if !ok || gt.class >= layout.classes {
            return Err(Error::Data(format!("invalid ground truth {gt:?}")));
        }
        let (row, col) = layout.cell_of(b.cx, b.cy);
        let anchor = layout
            .anchors
            .iter()
            .enumerate()
            .map(|(i, &a)| (i, shape_iou((b.w, b.h), a)))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        let slot = layout.slot_index(row, col, anchor);
        let replace = match &winners[slot] {
            None => true,
            Some(cur) => precedence(gt, cur) == Ordering::Less,
        };
        if replace {
            winners[slot] = Some(*gt);
        }
    }
    let slots = winners
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            w.map(|gt| SlotTarget {
                class: gt.class,
                bbox: gt.bbox,
                conf: preds.map_or(1.0, |p| iou(&p[i].bbox, &gt.bbox)),
            })
        })
        .collect();
    Ok(TargetAssignment {
        classes: layout.classes,
        slots,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub class: f64,
    pub local: f64,
    pub conf: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.class + self.local + self.conf
    }
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.class += o.class;
        self.local += o.local;
        self.conf += o.conf;
    }
}

pub fn classification_loss(preds: &[SlotPred], t: &TargetAssignment) -> f64 {
    t.responsible()
        .map(|(i, tg)| {
            preds[i]
                .probs
                .iter()
                .enumerate()
                .map(|(k, p)| (p - if k == tg.class { 1.0 } else { 0.0 }).powi(2))
                .sum::<f64>()
        })
        .sum()
}

pub fn localization_loss(preds: &[SlotPred], t: &TargetAssignment, w: &LossWeights) -> Result<f64> {
    let mut sum = 0.0;
    for (i, tg) in t.responsible() {
        let (p, g) = (preds[i].bbox, tg.bbox);
        if p.w < 0.0 || p.h < 0.0 {
            return Err(Error::NonFinite(format!("negative predicted extent {p:?}")));
        }
        sum += (p.cx - g.cx).powi(2)
            + (p.cy - g.cy).powi(2)
            + (p.w.sqrt() - g.w.sqrt()).powi(2)
            + (p.h.sqrt() - g.h.sqrt()).powi(2);
    }
    Ok(w.coord * sum)
}

pub fn confidence_loss(preds: &[SlotPred], t: &TargetAssignment, w: &LossWeights) -> f64 {
    let (mut obj, mut noobj) = (0.0, 0.0);
    for (p, tg) in preds.iter().zip(&t.slots) {
        match tg {
            Some(tg) => obj += (p.conf - tg.conf).powi(2),
            None => noobj += p.conf.powi(2),
        }
    }
    obj + w.noobj * noobj
}

pub fn total_loss(preds: &[SlotPred], t: &TargetAssignment, w: &LossWeights) -> Result<LossParts> {
    if preds.len() != t.slots.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            t.slots.len()
        )));
    }
    Ok(LossParts {
        class: classification_loss(preds, t),
        local: localization_loss(preds, t, w)?,
        conf: confidence_loss(preds, t, w),
    })
}

/// Loss of one image's raw head values and its analytic gradient with
/// respect to those values.
pub fn loss_and_grad(
    raw: &[f64],
    layout: &HeadLayout,
    t: &TargetAssignment,
    w: &LossWeights,
) -> Result<(LossParts, Vec<f64>)> {
    let preds = decode(raw, layout)?;
    let parts = total_loss(&preds, t, w)?;
    let s = layout.grid as f64;
    let mut grad = vec![0.0; raw.len()];
    for (slot, (p, tg)) in preds.iter().zip(&t.slots).enumerate() {
        let r = &raw[slot * layout.slot_len()..(slot + 1) * layout.slot_len()];
        let g = &mut grad[slot * layout.slot_len()..(slot + 1) * layout.slot_len()];
        let dconf = p.conf * (1.0 - p.conf);
        let Some(tg) = tg else {
            g[4] = 2.0 * w.noobj * p.conf * dconf;
            continue;
        };
        g[4] = 2.0 * (p.conf - tg.conf) * dconf;

        let (sx, sy) = (sigmoid(r[0]), sigmoid(r[1]));
        g[0] = w.coord * 2.0 * (p.bbox.cx - tg.bbox.cx) * sx * (1.0 - sx) / s;
        g[1] = w.coord * 2.0 * (p.bbox.cy - tg.bbox.cy) * sy * (1.0 - sy) / s;
        // d/dw (sqrt w - sqrt g)^2 = (sqrt w - sqrt g) / sqrt w, and dw/dtw = w.
        let scale_grad = |pv: f64, gv: f64, t: f64| {
            if t.abs() > SCALE_CLAMP {
                0.0
            } else {
                w.coord * (pv.sqrt() - gv.sqrt()) * pv.sqrt()
            }
        };
        g[2] = scale_grad(p.bbox.w, tg.bbox.w, r[2]);
        g[3] = scale_grad(p.bbox.h, tg.bbox.h, r[3]);

        let dp: Vec<f64> = p
            .probs
            .iter()
            .enumerate()
            .map(|(k, pk)| 2.0 * (pk - if k == tg.class { 1.0 } else { 0.0 }))
            .collect();
        let inner: f64 = dp.iter().zip(&p.probs).map(|(d, pk)| d * pk).sum();
        for (k, pk) in p.probs.iter().enumerate() {
            g[5 + k] = pk * (dp[k] - inner);
        }
    }
    Ok((parts, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> HeadLayout {
        HeadLayout {
            grid: 2,
            anchors: vec![(0.2, 0.2), (0.6, 0.4)],
            classes: 2,
        }
    }

    fn single(pred: SlotPred, target: SlotTarget) -> (Vec<SlotPred>, TargetAssignment) {
        (
            vec![pred],
            TargetAssignment {
                classes: 2,
                slots: vec![Some(target)],
            },
        )
    }

    #[test]
    fn hand_cases() {
        let w = LossWeights::default();
        let gt = BBox::new(0.5, 0.5, 0.16, 0.09);
        let (p, t) = single(
            SlotPred {
                bbox: gt,
                conf: 1.0,
                probs: vec![0.6, 0.4],
            },
            SlotTarget {
                class: 0,
                bbox: gt,
                conf: 1.0,
            },
        );
        assert!((classification_loss(&p, &t) - 0.32).abs() < 1e-12);

        let mut shifted = p.clone();
        shifted[0].bbox.cx += 0.1;
        assert!((localization_loss(&shifted, &t, &w).unwrap() - 0.05).abs() < 1e-12);

        let mut wide = p.clone();
        wide[0].bbox.w = 0.25;
        assert!((localization_loss(&wide, &t, &w).unwrap() - 0.05).abs() < 1e-12);

        let empty = TargetAssignment {
            classes: 2,
            slots: vec![None],
        };
        let mut c = p.clone();
        c[0].conf = 0.4;
        assert!((confidence_loss(&c, &empty, &w) - 0.08).abs() < 1e-12);
        c[0].conf = 0.0;
        assert_eq!(confidence_loss(&c, &t, &w), 1.0);
    }

    #[test]
    fn assignment_is_order_invariant_and_unique() {
        let l = layout();
        let a = GroundTruth {
            class: 0,
            bbox: BBox::new(0.2, 0.2, 0.2, 0.2),
        };
        let b = GroundTruth {
            class: 1,
            bbox: BBox::new(0.3, 0.25, 0.15, 0.2),
        };
        let c = GroundTruth {
            class: 1,
            bbox: BBox::new(0.8, 0.7, 0.5, 0.45),
        };
        let x = assign_targets(&[a, b, c], &l, None).unwrap();
        let y = assign_targets(&[c, b, a], &l, None).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.responsible().count(), 2);
        assert_eq!(x.slots[l.slot_index(0, 0, 0)].unwrap().class, 0);
        assert_eq!(x.slots[l.slot_index(1, 1, 1)].unwrap().class, 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let l = layout();
        let raw: Vec<f64> = (0..l.len()).map(|i| ((i * 37 % 23) as f64 - 11.0) / 9.0).collect();
        let gts = [
            GroundTruth {
                class: 1,
                bbox: BBox::new(0.3, 0.6, 0.25, 0.3),
            },
            GroundTruth {
                class: 0,
                bbox: BBox::new(0.7, 0.2, 0.5, 0.35),
            },
        ];
        let preds = decode(&raw, &l).unwrap();
        let t = assign_targets(&gts, &l, Some(&preds)).unwrap();
        let w = LossWeights::default();
        let (_, grad) = loss_and_grad(&raw, &l, &t, &w).unwrap();
        let f = |v: &[f64]| total_loss(&decode(v, &l).unwrap(), &t, &w).unwrap().total();
        let h = 1e-5;
        let mut num = vec![0.0; raw.len()];
        for i in 0..raw.len() {
            let mut p = raw.clone();
            p[i] += h;
            let mut m = raw.clone();
            m[i] -= h;
            num[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        let diff: f64 = num.iter().zip(&grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-6, "rel {}", diff / norm);
    }

    #[test]
    fn invalid_ground_truth_rejected() {
        let gt = GroundTruth {
            class: 5,
            bbox: BBox::new(0.5, 0.5, 0.1, 0.1),
        };
        assert!(assign_targets(&[gt], &layout(), None).is_err());
    }
}
