//! Synthetic multi-scale detection scenes: squares, discs and triangles on a
//! noisy background, every object annotated with the tight bounding box of
//! its rasterised mask.
//!
//! Scale classes use box area thresholds 32^2 and 96^2 at a 300 px reference,
//! scaled to the image size.
//!
//! On disk a dataset is `images/NNNNNN.tns` (one `(1, C, S, S)` tensor per
//! image) plus `annotations.jsonl` with one line per image.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{BBox, GroundTruth};
use crate::rng::{derive_seed, seeded_rng, DetRng};
use crate::tensor_file::{read_tensor, write_tensor};
use crate::{Error, Result, Tensor};

pub const REFERENCE_SIZE: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleClass {
    Small,
    Medium,
    Large,
}

fn default_classes() -> Vec<ShapeKind> {
    vec![ShapeKind::Square, ShapeKind::Disc, ShapeKind::Triangle]
}

fn default_mixture() -> [f64; 3] {
    [0.415, 0.343, 0.242]
}

fn default_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Small, medium and large fractions.
    #[serde(default = "default_mixture")]
    pub mixture: [f64; 3],
    /// Label `i + 1` is `classes[i]`; 0 is background.
    #[serde(default = "default_classes")]
    pub classes: Vec<ShapeKind>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(image_size: usize, seed: u64) -> Self {
        SceneSpec {
            image_size,
            channels: 3,
            min_objects: 1,
            max_objects: 3,
            mixture: default_mixture(),
            classes: default_classes(),
            seed,
        }
    }

    /// Box-area upper bounds of the small and medium classes.
    pub fn area_thresholds(&self) -> (f64, f64) {
        let f = self.image_size as f64 / REFERENCE_SIZE;
        ((32.0 * f).powi(2), (96.0 * f).powi(2))
    }

    pub fn scale_of(&self, area: f64) -> ScaleClass {
        let (s, m) = self.area_thresholds();
        if area < s {
            ScaleClass::Small
        } else if area < m {
            ScaleClass::Medium
        } else {
            ScaleClass::Large
        }
    }

    /// Inclusive range of target sides for a scale class; `None` when empty.
    fn side_range(&self, scale: ScaleClass) -> Option<(usize, usize)> {
        let (s, m) = self.area_thresholds();
        let largest_below = |a: f64| (1..=self.image_size).take_while(|&k| ((k * k) as f64) < a).last();
        let smallest_from = |a: f64| (1..=self.image_size).find(|&k| (k * k) as f64 >= a);
        let (lo, hi) = match scale {
            ScaleClass::Small => (Some(2), largest_below(s)),
            ScaleClass::Medium => (smallest_from(s).map(|k| k.max(2)), largest_below(m)),
            ScaleClass::Large => {
                let lo = smallest_from(m);
                (lo, lo.map(|l| l.max(self.image_size / 2)))
            }
        };
        match (lo, hi) {
            (Some(lo), Some(hi)) if lo <= hi && hi < self.image_size => Some((lo, hi)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.mixture.iter().sum();
        if self.mixture.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "scale mixture {:?} must be non-negative and sum to 1",
                self.mixture
            )));
        }
        if self.classes.is_empty() || self.channels == 0 {
            return Err(Error::InvalidConfig("scene needs at least one class and one channel".into()));
        }
        if self.min_objects > self.max_objects || self.max_objects == 0 {
            return Err(Error::InvalidConfig(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        for (scale, w) in [ScaleClass::Small, ScaleClass::Medium, ScaleClass::Large].into_iter().zip(self.mixture) {
            if w > 0.0 && self.side_range(scale).is_none() {
                return Err(Error::Unsatisfiable(format!(
                    "no {scale:?} object fits a {0}x{0} image",
                    self.image_size
                )));
            }
        }
        // every object needs its own footprint plus a one-pixel gap
        let worst = [ScaleClass::Small, ScaleClass::Medium, ScaleClass::Large]
            .into_iter()
            .zip(self.mixture)
            .filter(|(_, w)| *w > 0.0)
            .filter_map(|(s, _)| self.side_range(s))
            .map(|(lo, _)| (lo + 1) * (lo + 1))
            .max()
            .unwrap_or(0);
        if self.min_objects * worst > self.image_size * self.image_size {
            return Err(Error::Unsatisfiable(format!(
                "{} objects cannot fit a {1}x{1} image",
                self.min_objects,
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub label: usize,
    pub shape: ShapeKind,
    pub scale: ScaleClass,
    /// Normalised `[x_min, y_min, x_max, y_max]`.
    pub bbox: [f32; 4],
    /// Pixel edges of the mask, max exclusive.
    pub pixel_box: [usize; 4],
}

impl ObjectAnnotation {
    pub fn ground_truth(&self) -> GroundTruth {
        let [a, b, c, d] = self.bbox;
        GroundTruth {
            bbox: BBox::new(a, b, c, d),
            label: self.label,
        }
    }

    pub fn pixel_area(&self) -> usize {
        let [x0, y0, x1, y1] = self.pixel_box;
        (x1 - x0) * (y1 - y0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image_id: usize,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub annotations: Vec<ImageAnnotation>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ground_truth(&self) -> Vec<Vec<GroundTruth>> {
        self.annotations
            .iter()
            .map(|a| a.objects.iter().map(ObjectAnnotation::ground_truth).collect())
            .collect()
    }
}

/// Pixel-centre membership test for one shape inside `[x, x+s) x [y, y+s)`.
fn covers(shape: ShapeKind, x: f64, y: f64, s: f64, px: f64, py: f64) -> bool {
    match shape {
        ShapeKind::Square => px >= x && px < x + s && py >= y && py < y + s,
        ShapeKind::Disc => {
            let r = s / 2.0;
            let (dx, dy) = (px - (x + r), py - (y + r));
            dx * dx + dy * dy <= r * r
        }
        ShapeKind::Triangle => {
            // apex at the top centre, base along the bottom edge
            if py < y || py > y + s {
                return false;
            }
            let half = (py - y) / s * (s / 2.0);
            let cx = x + s / 2.0;
            px >= cx - half && px <= cx + half
        }
    }
}

fn rasterize(shape: ShapeKind, x: f64, y: f64, s: f64, size: usize) -> Vec<(usize, usize)> {
    let x0 = x.floor().max(0.0) as usize;
    let y0 = y.floor().max(0.0) as usize;
    let x1 = ((x + s).ceil() as usize + 1).min(size);
    let y1 = ((y + s).ceil() as usize + 1).min(size);
    let mut px = Vec::new();
    for j in y0..y1 {
        for i in x0..x1 {
            if covers(shape, x, y, s, i as f64 + 0.5, j as f64 + 0.5) {
                px.push((i, j));
            }
        }
    }
    px
}

fn mask_box(mask: &[(usize, usize)]) -> [usize; 4] {
    let x0 = mask.iter().map(|p| p.0).min().unwrap_or(0);
    let y0 = mask.iter().map(|p| p.1).min().unwrap_or(0);
    let x1 = mask.iter().map(|p| p.0 + 1).max().unwrap_or(0);
    let y1 = mask.iter().map(|p| p.1 + 1).max().unwrap_or(0);
    [x0, y0, x1, y1]
}

fn separated(a: &[usize; 4], b: &[usize; 4]) -> bool {
    a[2] < b[0] || b[2] < a[0] || a[3] < b[1] || b[3] < a[1]
}

fn pick_scale(rng: &mut DetRng, mixture: &[f64; 3]) -> ScaleClass {
    const ALL: [ScaleClass; 3] = [ScaleClass::Small, ScaleClass::Medium, ScaleClass::Large];
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (s, &w) in ALL.iter().zip(mixture) {
        acc += w;
        if w > 0.0 && u < acc {
            return *s;
        }
    }
    // rounding left u past the last cumulative bound
    ALL.into_iter().zip(mixture).filter(|(_, w)| **w > 0.0).last().map_or(ScaleClass::Small, |(s, _)| s)
}

const PLACEMENT_TRIES: usize = 200;
const SCENE_TRIES: usize = 50;

/// Tries to place one object of the given scale away from `taken`.
fn place(
    rng: &mut DetRng,
    spec: &SceneSpec,
    scale: ScaleClass,
    taken: &[[usize; 4]],
) -> Option<(ShapeKind, usize, Vec<(usize, usize)>, [usize; 4])> {
    let (lo, hi) = spec.side_range(scale)?;
    let n = spec.image_size;
    for _ in 0..PLACEMENT_TRIES {
        let label = rng.gen_range(0..spec.classes.len());
        let shape = spec.classes[label];
        let s = rng.gen_range(lo..=hi) as f64 + rng.gen_range(0.0..1.0);
        if s > n as f64 {
            continue;
        }
        let x = rng.gen_range(0.0..=(n as f64 - s));
        let y = rng.gen_range(0.0..=(n as f64 - s));
        let mask = rasterize(shape, x, y, s, n);
        let b = mask_box(&mask);
        let area = (b[2] - b[0]) * (b[3] - b[1]);
        if mask.is_empty() || area < 4 || spec.scale_of(area as f64) != scale {
            continue;
        }
        if taken.iter().all(|t| separated(t, &b)) {
            return Some((shape, label + 1, mask, b));
        }
    }
    None
}

/// One image; `None` when no attempt met the minimum object count.
fn generate_image(spec: &SceneSpec, index: usize) -> Option<(Tensor<f32>, Vec<ObjectAnnotation>)> {
    let mut rng = seeded_rng(derive_seed(spec.seed, index as u64));
    let n = spec.image_size;
    for _ in 0..SCENE_TRIES {
        let count = rng.gen_range(spec.min_objects..=spec.max_objects);
        let mut taken = Vec::new();
        let mut objects = Vec::new();
        for _ in 0..count {
            let scale = pick_scale(&mut rng, &spec.mixture);
            if let Some(obj) = place(&mut rng, spec, scale, &taken) {
                taken.push(obj.3);
                objects.push((scale, obj));
            }
        }
        if objects.len() < spec.min_objects {
            continue;
        }
        let mut img = Tensor::from_fn((1, spec.channels, n, n), |_| rng.gen_range(0.0..0.25f32));
        let mut anns = Vec::new();
        for (scale, (shape, label, mask, b)) in objects {
            let color: Vec<f32> = (0..spec.channels).map(|_| rng.gen_range(0.55..1.0f32)).collect();
            for &(i, j) in &mask {
                for (c, &v) in color.iter().enumerate() {
                    let k = img.index(0, c, j, i);
                    img.data_mut()[k] = v;
                }
            }
            let f = n as f32;
            anns.push(ObjectAnnotation {
                label,
                shape,
                scale,
                bbox: [b[0] as f32 / f, b[1] as f32 / f, b[2] as f32 / f, b[3] as f32 / f],
                pixel_box: b,
            });
        }
        return Some((img, anns));
    }
    None
}

pub fn image_file_name(index: usize) -> String {
    format!("images/{index:06}.tns")
}

/// Deterministic in `spec.seed`: image `i` depends only on `seed ^ i`.
pub fn generate_dataset(spec: &SceneSpec, n_images: usize) -> Result<Dataset> {
    if n_images == 0 {
        return Err(Error::Empty("dataset needs at least one image"));
    }
    spec.validate()?;
    let made: Vec<_> = (0..n_images)
        .into_par_iter()
        .map(|i| generate_image(spec, i).ok_or(i))
        .collect();
    let mut images = Vec::with_capacity(n_images);
    let mut annotations = Vec::with_capacity(n_images);
    for (i, m) in made.into_iter().enumerate() {
        let (img, objects) = m.map_err(|i| {
            Error::Unsatisfiable(format!("image {i}: could not place {} objects", spec.min_objects))
        })?;
        images.push(img);
        annotations.push(ImageAnnotation {
            image_id: i,
            file: image_file_name(i),
            width: spec.image_size,
            height: spec.image_size,
            objects,
        });
    }
    Ok(Dataset { images, annotations })
}

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (img, ann) in ds.images.iter().zip(&ds.annotations) {
        write_tensor(&dir.join(&ann.file), img)?;
    }
    let path = dir.join(ANNOTATIONS_FILE);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for ann in &ds.annotations {
        let line = serde_json::to_string(ann).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_annotations(dir: &Path) -> Result<Vec<ImageAnnotation>> {
    let path = dir.join(ANNOTATIONS_FILE);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: ImageAnnotation = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidConfig(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(ann);
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let annotations = read_annotations(dir)?;
    let images = annotations
        .iter()
        .map(|a| read_tensor(&dir.join(&a.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { images, annotations })
}

/// Mirrors an image and its boxes left to right.
pub fn flip_horizontal(img: &Tensor<f32>, truth: &[GroundTruth]) -> (Tensor<f32>, Vec<GroundTruth>) {
    let s = img.shape();
    let flipped = Tensor::from_fn(s, |i| {
        let x = i % s.width;
        img.data()[i - x + (s.width - 1 - x)]
    });
    let boxes = truth
        .iter()
        .map(|g| GroundTruth {
            bbox: g.bbox.flip_horizontal(),
            label: g.label,
        })
        .collect();
    (flipped, boxes)
}
