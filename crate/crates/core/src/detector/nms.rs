use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{iou, BoxSet, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub iou_threshold: f32,
    pub score_threshold: f32,
    pub top_k: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.45,
            score_threshold: 0.01,
            top_k: 200,
        }
    }
}

/// Descending score, ties broken by lower original index.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Greedy per-class suppression. Boxes with `score <= score_threshold` are
/// dropped first; a box is suppressed when its IoU with a kept box of the same
/// class exceeds `iou_threshold`. At most `top_k` boxes are returned, in
/// descending score order.
pub fn nms(dets: &BoxSet, cfg: &NmsConfig) -> BoxSet {
    nms_indices(&dets.detections, cfg)
        .into_iter()
        .map(|i| dets.detections[i])
        .collect::<Vec<_>>()
        .into()
}

/// Indices into `dets` of the kept boxes.
pub fn nms_indices(dets: &[Detection], cfg: &NmsConfig) -> Vec<usize> {
    let order: Vec<usize> = score_order(dets)
        .into_iter()
        .filter(|&i| dets[i].score > cfg.score_threshold)
        .collect();
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for a in 0..order.len() {
        if suppressed[a] {
            continue;
        }
        let i = order[a];
        kept.push(i);
        if kept.len() == cfg.top_k {
            break;
        }
        for b in a + 1..order.len() {
            let j = order[b];
            if !suppressed[b]
                && dets[j].label == dets[i].label
                && iou(&dets[i].bbox, &dets[j].bbox) > cfg.iou_threshold
            {
                suppressed[b] = true;
            }
        }
    }
    kept
}

impl From<Vec<Detection>> for BoxSet {
    fn from(detections: Vec<Detection>) -> Self {
        BoxSet { detections }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;

    fn det(b: [f32; 4], label: usize, score: f32) -> Detection {
        Detection { bbox: BBox::new(b[0], b[1], b[2], b[3]), label, score }
    }

    #[test]
    fn single_box_kept() {
        let set = BoxSet::new(vec![det([0.1, 0.1, 0.3, 0.3], 1, 0.5)]);
        assert_eq!(nms(&set, &NmsConfig::default()).len(), 1);
    }

    #[test]
    fn duplicate_suppressed() {
        let b = [0.1, 0.1, 0.4, 0.4];
        let set = BoxSet::new(vec![det(b, 1, 0.8), det(b, 1, 0.9)]);
        let cfg = NmsConfig { iou_threshold: 0.5, ..NmsConfig::default() };
        let out = nms(&set, &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out.detections[0].score, 0.9);
    }

    #[test]
    fn other_class_survives() {
        let b = [0.1, 0.1, 0.4, 0.4];
        let set = BoxSet::new(vec![det(b, 1, 0.9), det(b, 2, 0.8)]);
        assert_eq!(nms(&set, &NmsConfig::default()).len(), 2);
    }

    #[test]
    fn score_threshold_and_top_k() {
        let set = BoxSet::new(
            (0..10)
                .map(|i| det([i as f32 * 0.1, 0.0, i as f32 * 0.1 + 0.05, 0.05], 1, 0.1 * i as f32))
                .collect(),
        );
        let cfg = NmsConfig { iou_threshold: 0.5, score_threshold: 0.35, top_k: 3 };
        let out = nms(&set, &cfg);
        let scores: Vec<f32> = out.detections.iter().map(|d| d.score).collect();
        assert_eq!(scores.len(), 3);
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        assert!(scores.iter().all(|&s| s > 0.35));
    }

    #[test]
    fn equal_scores_prefer_lower_index() {
        let b = [0.1, 0.1, 0.4, 0.4];
        let dets = vec![det(b, 1, 0.7), det(b, 1, 0.7)];
        assert_eq!(nms_indices(&dets, &NmsConfig::default()), vec![0]);
    }

    #[test]
    fn empty_input() {
        assert!(nms(&BoxSet::default(), &NmsConfig::default()).is_empty());
    }
}
