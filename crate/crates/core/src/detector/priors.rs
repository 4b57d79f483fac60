use serde::{Deserialize, Serialize};

use super::BBox;
use crate::{Error, Result};

/// Priors tiled over one feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorMap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Box side as a fraction of the image, for aspect ratio 1.
    pub scale: f32,
    pub aspect_ratios: Vec<f32>,
}

impl PriorMap {
    pub fn per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn count(&self) -> usize {
        self.grid_h * self.grid_w * self.per_cell()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBoxSpec {
    pub maps: Vec<PriorMap>,
}

impl PriorBoxSpec {
    pub fn count(&self) -> usize {
        self.maps.iter().map(PriorMap::count).sum()
    }
}

/// Priors ordered map, row, column, aspect ratio; clamped to the unit square.
/// Ratio `a` gives width `s * sqrt(a)` and height `s / sqrt(a)`.
pub fn generate_priors(spec: &PriorBoxSpec) -> Result<Vec<BBox>> {
    if spec.maps.is_empty() || spec.count() == 0 {
        return Err(Error::Empty("prior spec has no boxes"));
    }
    let mut out = Vec::with_capacity(spec.count());
    for m in &spec.maps {
        if m.scale <= 0.0 || m.aspect_ratios.iter().any(|&a| a <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "prior scale {} and aspect ratios {:?} must be positive",
                m.scale, m.aspect_ratios
            )));
        }
        for i in 0..m.grid_h {
            for j in 0..m.grid_w {
                let cx = (j as f32 + 0.5) / m.grid_w as f32;
                let cy = (i as f32 + 0.5) / m.grid_h as f32;
                for &a in &m.aspect_ratios {
                    let r = a.sqrt();
                    out.push(BBox::from_center(cx, cy, m.scale * r, m.scale / r).clamped());
                }
            }
        }
    }
    Ok(out)
}
