//! PASCAL VOC 2007 evaluation: greedy IoU matching, 11-point interpolated
//! average precision, per-class tables and precision/recall curves.

use std::fmt::Write as _;

pub use crate::boxes::iou;
use crate::boxes::BBox;

pub const VOC_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub class: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

/// `(recall, precision)` after each ranked detection.
pub type PrCurve = Vec<(f64, f64)>;

/// Ranks detections by confidence (ties by input order) and matches each
/// against the highest-IoU ground truth of its image. A detection is a
/// true positive when that IoU exceeds `iou_threshold` and the ground truth
/// is still unmatched; repeats of a matched box are false positives.
/// Classes are not checked; pass one class at a time.
pub fn pr_curve(dets: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> PrCurve {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut matched = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.image == d.image)
            .map(|(j, g)| (j, iou(&d.bbox, &g.bbox)))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        match best {
            Some((j, o)) if o > iou_threshold && !matched[j] => {
                matched[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        let recall = if gts.is_empty() { 0.0 } else { tp as f64 / gts.len() as f64 };
        curve.push((recall, tp as f64 / (tp + fp) as f64));
    }
    curve
}

/// Mean over recall levels `0, 0.1, ..., 1` of the best precision at or
/// beyond each level.
pub fn eleven_point_ap(curve: &[(f64, f64)]) -> f64 {
    (0..=10)
        .map(|t| {
            let r = t as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// AP of one class; `None` when there are no ground truths to find.
pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    Some(eleven_point_ap(&pr_curve(dets, gts, iou_threshold)))
}

/// Mean of the defined APs; `None` if no class has ground truth.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassResult {
    pub class: usize,
    pub num_gt: usize,
    pub num_det: usize,
    pub ap: Option<f64>,
    pub curve: PrCurve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub classes: Vec<ClassResult>,
    pub map: Option<f64>,
}

pub fn evaluate(dets: &[ScoredBox], gts: &[GtBox], classes: usize, iou_threshold: f64) -> Evaluation {
    let classes: Vec<ClassResult> = (0..classes)
        .map(|k| {
            let d: Vec<ScoredBox> = dets.iter().filter(|d| d.class == k).copied().collect();
            let g: Vec<GtBox> = gts.iter().filter(|g| g.class == k).copied().collect();
            let curve = pr_curve(&d, &g, iou_threshold);
            ClassResult {
                class: k,
                num_gt: g.len(),
                num_det: d.len(),
                ap: (!g.is_empty()).then(|| eleven_point_ap(&curve)),
                curve,
            }
        })
        .collect();
    let map = mean_ap(&classes.iter().map(|c| c.ap).collect::<Vec<_>>());
    Evaluation { classes, map }
}

pub fn pr_curve_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("recall,precision\n");
    for (r, p) in curve {
        let _ = writeln!(s, "{r},{p}");
    }
    s
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

impl Evaluation {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("class,gt,detections,ap\n");
        for c in &self.classes {
            let ap = c.ap.map_or_else(String::new, |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{}", c.class, c.num_gt, c.num_det, ap);
        }
        let _ = writeln!(s, "mAP,,,{}", self.map.map_or_else(String::new, |v| v.to_string()));
        s
    }

    pub fn table_text(&self) -> String {
        let mut s = format!("{:<8}{:>8}{:>12}{:>12}\n", "class", "gt", "detections", "AP");
        for c in &self.classes {
            let _ = writeln!(s, "{:<8}{:>8}{:>12}{:>12}", c.class, c.num_gt, c.num_det, fmt_ap(c.ap));
        }
        let _ = writeln!(s, "{:<8}{:>32}", "mAP", fmt_ap(self.map));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image: usize, cx: f64) -> GtBox {
        GtBox {
            image,
            class: 0,
            bbox: BBox::new(cx, 0.5, 0.2, 0.2),
        }
    }

    fn det(image: usize, confidence: f64, cx: f64) -> ScoredBox {
        ScoredBox {
            image,
            class: 0,
            confidence,
            bbox: BBox::new(cx, 0.5, 0.2, 0.2),
        }
    }

    #[test]
    fn perfect_and_empty() {
        let gts = [gt(0, 0.3), gt(1, 0.6)];
        let dets = [det(0, 0.9, 0.3), det(1, 0.8, 0.6)];
        assert_eq!(average_precision(&dets, &gts, VOC_IOU), Some(1.0));
        assert_eq!(average_precision(&[], &gts, VOC_IOU), Some(0.0));
        assert_eq!(average_precision(&dets, &[], VOC_IOU), None);
    }

    #[test]
    fn miss_then_hit_is_half() {
        let gts = [gt(0, 0.5)];
        // IoU of equal squares offset by d along x: (0.2-d)/(0.2+d).
        let miss = det(0, 0.9, 0.5 + 0.2 * (1.0 - 0.3) / 1.3);
        let hit = det(0, 0.8, 0.5 + 0.2 * (1.0 - 0.7) / 1.7);
        assert!((iou(&miss.bbox, &gts[0].bbox) - 0.3).abs() < 1e-12);
        let curve = pr_curve(&[miss, hit], &gts, VOC_IOU);
        assert_eq!(curve, vec![(0.0, 0.0), (1.0, 0.5)]);
        assert!((eleven_point_ap(&curve) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn duplicates_are_false_positives() {
        let gts = [gt(0, 0.5)];
        let curve = pr_curve(&[det(0, 0.9, 0.5), det(0, 0.8, 0.5)], &gts, VOC_IOU);
        assert_eq!(curve, vec![(1.0, 1.0), (1.0, 0.5)]);
    }

    #[test]
    fn map_cases() {
        assert_eq!(mean_ap(&[Some(0.7)]), Some(0.7));
        assert_eq!(mean_ap(&[Some(1.0), Some(0.0), None]), Some(0.5));
        assert_eq!(mean_ap(&[None]), None);
    }

    #[test]
    fn csv_output() {
        assert_eq!(pr_curve_csv(&[(0.5, 1.0)]), "recall,precision\n0.5,1\n");
        let e = evaluate(&[det(0, 0.9, 0.3)], &[gt(0, 0.3)], 2, VOC_IOU);
        assert_eq!(e.map, Some(1.0));
        assert!(e.table_csv().contains("1,0,0,\n"));
        assert!(e.table_text().contains("undefined"));
    }
}
