use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{iou, BoxSet, GroundTruth};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    /// `None` when the class has no ground truth; such classes are left out
    /// of the mean.
    pub ap: Option<f64>,
    pub num_truth: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub iou_threshold: f32,
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

/// Area under the monotone precision envelope, summed at every recall step.
pub fn average_precision(tp: &[bool], num_truth: usize) -> f64 {
    if num_truth == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_truth as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Per-class AP and their unweighted mean over classes `1..num_classes`.
///
/// Detections of a class are ranked by descending score, ties broken by image
/// index then position within the image. Each is matched to the unclaimed
/// same-class object of highest IoU in its image; a match needs IoU at least
/// `iou_threshold`.
pub fn evaluate_map(
    detections: &[BoxSet],
    truth: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_threshold: f32,
) -> Result<MapReport> {
    if detections.len() != truth.len() {
        return Err(Error::InvalidConfig(format!(
            "{} detection sets for {} images",
            detections.len(),
            truth.len()
        )));
    }
    let mut per_class = Vec::new();
    for class in 1..num_classes {
        let num_truth = truth.iter().flatten().filter(|t| t.label == class).count();
        let mut ranked: Vec<(f32, usize, usize)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, set)| {
                set.detections
                    .iter()
                    .enumerate()
                    .filter(move |(_, d)| d.label == class)
                    .map(move |(k, d)| (d.score, img, k))
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut claimed: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.len()]).collect();
        let tp: Vec<bool> = ranked
            .iter()
            .map(|&(_, img, k)| {
                let d = &detections[img].detections[k];
                let mut best: Option<(f32, usize)> = None;
                for (g, t) in truth[img].iter().enumerate() {
                    if t.label != class {
                        continue;
                    }
                    let v = iou(&d.bbox, &t.bbox);
                    if best.map_or(true, |(bv, _)| v > bv) {
                        best = Some((v, g));
                    }
                }
                match best {
                    Some((v, g)) if v >= iou_threshold && !claimed[img][g] => {
                        claimed[img][g] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_class.push(ClassAp {
            class,
            ap: (num_truth > 0).then(|| average_precision(&tp, num_truth)),
            num_truth,
            num_detections: ranked.len(),
        });
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(MapReport {
        iou_threshold,
        per_class,
        map,
    })
}

/// One exported detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub class: usize,
    pub score: f32,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
}

/// JSON lines, one detection per line, images in index order.
pub fn detections_to_jsonl(detections: &[BoxSet]) -> String {
    let mut out = String::new();
    for (image_id, set) in detections.iter().enumerate() {
        for d in &set.detections {
            let rec = DetectionRecord {
                image_id,
                class: d.label,
                score: d.score,
                bbox: d.bbox.to_array(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain record serialises"));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{BBox, Detection};
    use proptest::prelude::*;

    fn gt(b: [f32; 4], label: usize) -> GroundTruth {
        GroundTruth { bbox: BBox::new(b[0], b[1], b[2], b[3]), label }
    }

    fn det(b: [f32; 4], label: usize, score: f32) -> Detection {
        Detection { bbox: BBox::new(b[0], b[1], b[2], b[3]), label, score }
    }

    #[test]
    fn perfect_predictions() {
        let truth = vec![
            vec![gt([0.1, 0.1, 0.3, 0.3], 1), gt([0.5, 0.5, 0.9, 0.9], 2)],
            vec![gt([0.2, 0.2, 0.6, 0.7], 1)],
        ];
        let dets: Vec<BoxSet> = truth
            .iter()
            .map(|t| BoxSet::new(t.iter().map(|g| Detection { bbox: g.bbox, label: g.label, score: 1.0 }).collect()))
            .collect();
        assert_eq!(evaluate_map(&dets, &truth, 3, 0.5).unwrap().map, 1.0);
    }

    #[test]
    fn no_detections() {
        let truth = vec![vec![gt([0.1, 0.1, 0.3, 0.3], 1)]];
        let r = evaluate_map(&[BoxSet::default()], &truth, 3, 0.5).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.per_class[1].ap, None);
    }

    #[test]
    fn tp_fp_tp_by_hand() {
        // precision 1, 1/2, 2/3 at recall 0.5, 0.5, 1.0 -> 0.5*1 + 0.5*(2/3)
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let truth = vec![vec![gt([0.1, 0.1, 0.3, 0.3], 1)]];
        let dets = vec![BoxSet::new(vec![det([0.1, 0.1, 0.3, 0.3], 1, 0.9), det([0.1, 0.1, 0.3, 0.3], 1, 0.8)])];
        let r = evaluate_map(&dets, &truth, 2, 0.5).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class[0].num_detections, 2);
    }

    #[test]
    fn jsonl_export() {
        let dets = vec![BoxSet::default(), BoxSet::new(vec![det([0.1, 0.2, 0.3, 0.4], 2, 0.5)])];
        let s = detections_to_jsonl(&dets);
        assert_eq!(s.lines().count(), 1);
        let r: DetectionRecord = serde_json::from_str(s.trim()).unwrap();
        assert_eq!((r.image_id, r.class, r.bbox), (1, 2, [0.1, 0.2, 0.3, 0.4]));
        assert!(s.contains("\"box\""));
    }

    #[test]
    fn mismatched_lengths() {
        assert!(evaluate_map(&[], &[vec![]], 2, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn invariant_to_image_and_detection_order(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, Rng};
            let mut rng = crate::seeded_rng(seed);
            let rb = |rng: &mut crate::DetRng| {
                let x: f32 = rng.gen_range(0.0..0.7);
                let y: f32 = rng.gen_range(0.0..0.7);
                [x, y, x + rng.gen_range(0.05..0.3), y + rng.gen_range(0.05..0.3)]
            };
            let mut truth = Vec::new();
            let mut dets = Vec::new();
            let mut score = 1.0f32;
            for _ in 0..5 {
                let t: Vec<GroundTruth> = (0..rng.gen_range(0..4)).map(|_| gt(rb(&mut rng), rng.gen_range(1..3))).collect();
                let d: Vec<Detection> = (0..rng.gen_range(0..6)).map(|_| {
                    score -= 0.01;
                    det(rb(&mut rng), rng.gen_range(1..3), score)
                }).collect();
                truth.push(t);
                dets.push(BoxSet::new(d));
            }
            let base = evaluate_map(&dets, &truth, 3, 0.5).unwrap().map;
            let mut order: Vec<usize> = (0..5).collect();
            order.shuffle(&mut rng);
            let t2: Vec<_> = order.iter().map(|&i| truth[i].clone()).collect();
            let d2: Vec<_> = order.iter().map(|&i| {
                let mut s = dets[i].clone();
                s.detections.shuffle(&mut rng);
                s
            }).collect();
            prop_assert_eq!(base, evaluate_map(&d2, &t2, 3, 0.5).unwrap().map);
        }
    }
}
