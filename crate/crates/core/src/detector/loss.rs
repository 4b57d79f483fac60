use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{encode_boxes, iou, BBox};
use crate::{Element, Error, Result, Tensor};

/// Labelled object; label 0 is reserved for background.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiboxConfig {
    pub match_iou: f32,
    pub neg_pos_ratio: f32,
    pub variances: [f32; 2],
}

impl Default for MultiboxConfig {
    fn default() -> Self {
        MultiboxConfig {
            match_iou: 0.5,
            neg_pos_ratio: 3.0,
            variances: [0.1, 0.2],
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiboxLoss<T: Element = f32> {
    /// Smooth-L1 over matched priors, divided by the positive count.
    pub loc: f64,
    /// Cross-entropy over positives and mined negatives, same normalisation.
    pub conf: f64,
    pub total: f64,
    pub num_pos: usize,
    /// Per image, per prior: index of the matched ground truth.
    pub matches: Vec<Vec<Option<usize>>>,
    /// Per image: mined negative priors, hardest first.
    pub negatives: Vec<Vec<usize>>,
    pub grad_loc: Tensor<T>,
    pub grad_conf: Tensor<T>,
}

/// Prior-to-truth assignment: IoU >= `threshold`, plus each object's best
/// prior forced to it (later objects win a contested prior).
pub fn match_priors(priors: &[BBox], truth: &[GroundTruth], threshold: f32) -> Vec<Option<usize>> {
    if truth.is_empty() {
        return vec![None; priors.len()];
    }
    let mut best: Vec<(f32, usize)> = priors
        .iter()
        .map(|p| {
            truth
                .iter()
                .enumerate()
                .map(|(g, t)| (iou(p, &t.bbox), g))
                .fold((-1.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc })
        })
        .collect();
    for (g, t) in truth.iter().enumerate() {
        let mut bp = 0;
        let mut bv = -1.0f32;
        for (p, prior) in priors.iter().enumerate() {
            let v = iou(prior, &t.bbox);
            if v > bv {
                bv = v;
                bp = p;
            }
        }
        if !priors.is_empty() {
            best[bp] = (2.0, g);
        }
    }
    best.into_iter()
        .map(|(v, g)| (v >= threshold).then_some(g))
        .collect()
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// SSD multibox objective for a batch.
///
/// `loc` is `(B, 1, P, 4)` offsets and `conf` is `(B, 1, P, C)` logits. Hard
/// negatives are the background priors with the largest background
/// cross-entropy, `floor(neg_pos_ratio * max(positives, 1))` per image, so
/// background-only images still contribute.
pub fn multibox_loss<T: Element>(
    loc: &Tensor<T>,
    conf: &Tensor<T>,
    priors: &[BBox],
    truth: &[Vec<GroundTruth>],
    cfg: &MultiboxConfig,
) -> Result<MultiboxLoss<T>> {
    let p = priors.len();
    if p == 0 {
        return Err(Error::Empty("multibox loss needs at least one prior"));
    }
    let ls = loc.shape();
    let cs = conf.shape();
    let b = ls.batch;
    let c = cs.width;
    if ls.dims() != [b, 1, p, 4] || cs.dims() != [b, 1, p, c] || truth.len() != b || c < 2 {
        return Err(Error::ShapeMismatch {
            op: "multibox_loss",
            expected: [truth.len(), 1, p, 4],
            actual: ls.dims(),
        });
    }
    if let Some(t) = truth.iter().flatten().find(|t| t.label == 0 || t.label >= c) {
        return Err(Error::InvalidConfig(format!(
            "ground-truth label {} outside 1..{c}",
            t.label
        )));
    }

    let mut matches = Vec::with_capacity(b);
    let mut negatives = Vec::with_capacity(b);
    let mut loc_sum = 0.0;
    let mut conf_sum = 0.0;
    let mut num_pos = 0;
    let mut g_loc = vec![0.0f64; loc.len()];
    let mut g_conf = vec![0.0f64; conf.len()];

    for (n, objects) in truth.iter().enumerate() {
        let m = match_priors(priors, objects, cfg.match_iou);
        let logits = |i: usize| &conf.data()[(n * p + i) * c..(n * p + i + 1) * c];
        let softmax = |i: usize| -> Vec<f64> {
            let z = logits(i);
            let mx = z.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v.to_f64() - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        };
        let cross_entropy = |i: usize, target: usize| -> f64 {
            let z = logits(i);
            let mx = z.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v.to_f64() - mx).exp()).sum::<f64>().ln();
            lse - z[target].to_f64()
        };

        let mut pos = 0;
        for (i, g) in m.iter().enumerate() {
            let Some(g) = g else { continue };
            pos += 1;
            let obj = &objects[*g];
            let target = encode_boxes(&priors[i..i + 1], &[obj.bbox], cfg.variances)?[0];
            for k in 0..4 {
                let j = (n * p + i) * 4 + k;
                let (l, d) = smooth_l1(loc.data()[j].to_f64() - target[k] as f64);
                loc_sum += l;
                g_loc[j] = d;
            }
            conf_sum += cross_entropy(i, obj.label);
            let s = softmax(i);
            for (k, sv) in s.iter().enumerate() {
                g_conf[(n * p + i) * c + k] = sv - (k == obj.label) as u8 as f64;
            }
        }
        num_pos += pos;

        let mut bg: Vec<(f64, usize)> = (0..p)
            .filter(|&i| m[i].is_none())
            .map(|i| (cross_entropy(i, 0), i))
            .collect();
        bg.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        let want = (cfg.neg_pos_ratio.max(0.0) as f64 * pos.max(1) as f64).floor() as usize;
        bg.truncate(want);
        for &(l, i) in &bg {
            conf_sum += l;
            let s = softmax(i);
            for (k, sv) in s.iter().enumerate() {
                g_conf[(n * p + i) * c + k] = sv - (k == 0) as u8 as f64;
            }
        }
        negatives.push(bg.into_iter().map(|(_, i)| i).collect());
        matches.push(m);
    }

    let norm = num_pos.max(1) as f64;
    let to_t = |v: Vec<f64>| -> Vec<T> { v.into_iter().map(|x| T::from_f64(x / norm)).collect() };
    Ok(MultiboxLoss {
        loc: loc_sum / norm,
        conf: conf_sum / norm,
        total: (loc_sum + conf_sum) / norm,
        num_pos,
        matches,
        negatives,
        grad_loc: Tensor::from_vec(ls, to_t(g_loc))?,
        grad_conf: Tensor::from_vec(cs, to_t(g_conf))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{generate_priors, PriorBoxSpec, PriorMap};
    use crate::gradcheck::{check_case, MultiboxCase, Tolerance};

    fn priors() -> Vec<BBox> {
        generate_priors(&PriorBoxSpec {
            maps: vec![PriorMap { grid_h: 4, grid_w: 4, scale: 0.3, aspect_ratios: vec![1.0, 2.0] }],
        })
        .unwrap()
    }

    #[test]
    fn near_zero_at_optimum() {
        let pr = priors();
        let truth = vec![vec![
            GroundTruth { bbox: BBox::new(0.05, 0.05, 0.4, 0.35), label: 1 },
            GroundTruth { bbox: BBox::new(0.5, 0.55, 0.95, 0.9), label: 2 },
        ]];
        let cfg = MultiboxConfig::default();
        let m = match_priors(&pr, &truth[0], cfg.match_iou);
        let c = 3;
        let mut loc = Tensor::<f32>::zeros((1, 1, pr.len(), 4));
        let mut conf = Tensor::<f32>::zeros((1, 1, pr.len(), c));
        for (i, g) in m.iter().enumerate() {
            let label = match g {
                Some(g) => {
                    let t = encode_boxes(&pr[i..i + 1], &[truth[0][*g].bbox], cfg.variances).unwrap()[0];
                    loc.data_mut()[i * 4..i * 4 + 4].copy_from_slice(&t);
                    truth[0][*g].label
                }
                None => 0,
            };
            conf.data_mut()[i * c + label] = 12.0;
        }
        let out = multibox_loss(&loc, &conf, &pr, &truth, &cfg).unwrap();
        assert!(out.num_pos >= 2);
        assert!(out.total < 0.01, "{}", out.total);
    }

    #[test]
    fn more_negatives_never_lower_conf_term() {
        let pr = priors();
        let truth = vec![
            vec![GroundTruth { bbox: BBox::new(0.1, 0.1, 0.4, 0.4), label: 1 }],
            vec![],
        ];
        let mut rng = crate::seeded_rng(5);
        let loc = crate::rng::uniform_tensor::<f32>(&mut rng, (2, 1, pr.len(), 4), -1.0, 1.0);
        let conf = crate::rng::uniform_tensor::<f32>(&mut rng, (2, 1, pr.len(), 3), -2.0, 2.0);
        let mut prev = -1.0;
        for ratio in [0.5f32, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let cfg = MultiboxConfig { neg_pos_ratio: ratio, ..MultiboxConfig::default() };
            let out = multibox_loss(&loc, &conf, &pr, &truth, &cfg).unwrap();
            assert!(out.conf >= prev);
            prev = out.conf;
        }
    }

    #[test]
    fn finite_differences_ten_priors() {
        let rep = check_case(&MultiboxCase::<f32>::new(1, 10, 3, 21), Tolerance::f32_default(), 0).unwrap();
        assert!(rep.passed, "{rep:?}");
        let rep = check_case(&MultiboxCase::<f64>::new(1, 10, 3, 21), Tolerance::f64_default(), 0).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn every_object_gets_a_prior() {
        let pr = priors();
        // tiny object overlapping nothing above threshold
        let truth = [GroundTruth { bbox: BBox::new(0.0, 0.0, 0.02, 0.02), label: 1 }];
        let m = match_priors(&pr, &truth, 0.5);
        assert_eq!(m.iter().filter(|g| g.is_some()).count(), 1);
    }

    #[test]
    fn errors() {
        let t = Tensor::<f32>::zeros((1, 1, 0, 4));
        assert!(multibox_loss(&t, &Tensor::zeros((1, 1, 0, 3)), &[], &[vec![]], &MultiboxConfig::default()).is_err());
        let pr = priors();
        let loc = Tensor::<f32>::zeros((1, 1, pr.len(), 4));
        let conf = Tensor::<f32>::zeros((1, 1, pr.len(), 3));
        let bad = vec![vec![GroundTruth { bbox: BBox::new(0.1, 0.1, 0.2, 0.2), label: 3 }]];
        assert!(multibox_loss(&loc, &conf, &pr, &bad, &MultiboxConfig::default()).is_err());
        assert!(multibox_loss(&loc, &conf, &pr, &[], &MultiboxConfig::default()).is_err());
    }
}
