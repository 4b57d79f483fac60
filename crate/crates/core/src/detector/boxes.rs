use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Corner-form box in normalized image coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub const fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f32 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f32 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn clamped(&self) -> Self {
        let c = |v: f32| v.clamp(0.0, 1.0);
        BBox::new(c(self.x_min), c(self.y_min), c(self.x_max), c(self.y_max))
    }

    pub fn is_valid(&self) -> bool {
        self.x_min <= self.x_max
            && self.y_min <= self.y_max
            && [self.x_min, self.y_min, self.x_max, self.y_max]
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
    }

    pub fn flip_horizontal(&self) -> Self {
        BBox::new(1.0 - self.x_max, self.y_min, 1.0 - self.x_min, self.y_max)
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: usize,
    pub score: f32,
}

/// Decoded detections for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub detections: Vec<Detection>,
}

impl BoxSet {
    pub fn new(detections: Vec<Detection>) -> Self {
        BoxSet { detections }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Center-size offsets scaled by `variances` (SSD parameterisation).
pub fn encode_boxes(priors: &[BBox], targets: &[BBox], variances: [f32; 2]) -> Result<Vec<[f32; 4]>> {
    if priors.len() != targets.len() {
        return Err(Error::InvalidConfig(format!(
            "encode: {} priors vs {} targets",
            priors.len(),
            targets.len()
        )));
    }
    Ok(priors
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let (pcx, pcy) = p.center();
            let (pw, ph) = (p.width(), p.height());
            let (tcx, tcy) = t.center();
            [
                (tcx - pcx) / (pw * variances[0]),
                (tcy - pcy) / (ph * variances[0]),
                (t.width() / pw).ln() / variances[1],
                (t.height() / ph).ln() / variances[1],
            ]
        })
        .collect())
}

pub fn decode_boxes(priors: &[BBox], offsets: &[[f32; 4]], variances: [f32; 2]) -> Result<Vec<BBox>> {
    if priors.len() != offsets.len() {
        return Err(Error::InvalidConfig(format!(
            "decode: {} priors vs {} offsets",
            priors.len(),
            offsets.len()
        )));
    }
    Ok(priors
        .iter()
        .zip(offsets)
        .map(|(p, o)| {
            let (pcx, pcy) = p.center();
            let (pw, ph) = (p.width(), p.height());
            let cx = pcx + o[0] * variances[0] * pw;
            let cy = pcy + o[1] * variances[0] * ph;
            let w = pw * (o[2] * variances[1]).exp();
            let h = ph * (o[3] * variances[1]).exp();
            BBox::from_center(cx, cy, w, h)
        })
        .collect())
}
