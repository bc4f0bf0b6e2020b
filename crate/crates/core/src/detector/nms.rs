//! Per-class greedy non-maximum suppression.

use super::head::Detection;
use crate::boxes::iou;

/// Keeps, per class, the highest-confidence detection and suppresses later
/// ones overlapping a kept box with IoU above `iou_threshold`. Output is
/// ordered by confidence descending, then by input index.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class == dets[i].class && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn det(class: usize, confidence: f64, cx: f64) -> Detection {
        Detection {
            class,
            confidence,
            bbox: BBox::new(cx, 0.5, 0.2, 0.2),
        }
    }

    #[test]
    fn basic_cases() {
        let one = vec![det(0, 0.3, 0.5)];
        assert_eq!(nms(&one, 0.5), one);
        let two = vec![det(0, 0.8, 0.5), det(0, 0.9, 0.5)];
        assert_eq!(nms(&two, 0.5), vec![det(0, 0.9, 0.5)]);
        let classes = vec![det(0, 0.8, 0.5), det(1, 0.9, 0.5)];
        assert_eq!(nms(&classes, 0.5).len(), 2);
        assert!(nms(&[], 0.5).is_empty());
    }
}
