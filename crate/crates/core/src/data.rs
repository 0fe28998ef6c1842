//! Synthetic detection scenes, crop sampling, and the on-disk dataset format.
//!
//! Scenes are bright discs and rectangles on a dim textured background.
//! Class 1 is `disc`, class 2 is `box`; class 0 stays reserved for
//! background.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::{BBox, GroundTruthBox};
use crate::error::{config_err, Error, Result};
use crate::image::{clip_boxes, GrayImage, PixelBox, Rect};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Smallest object edge the detector is expected to resolve.
pub const MIN_OBJECT_PX: usize = 8;
/// Attempts allowed for each rejection-sampled placement or crop.
pub const MAX_ATTEMPTS: usize = 100;
/// Area fraction bounds of object-free crops.
pub const NEG_CROP_AREA: (f64, f64) = (0.40, 0.70);
/// Gap kept between rendered objects, in pixels.
const OBJECT_GAP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object edge range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    pub empty_fraction: f64,
    pub background_range: [u8; 2],
    pub object_range: [u8; 2],
    pub texture_amplitude: f64,
    pub noise_std: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 96,
            width: 128,
            classes: vec!["disc".into(), "box".into()],
            min_objects: 1,
            max_objects: 3,
            min_size: 14,
            max_size: 34,
            empty_fraction: 0.4,
            background_range: [30, 110],
            object_range: [170, 245],
            texture_amplitude: 14.0,
            noise_std: 5.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return config_err(format!(
                "empty_fraction {} outside [0, 1]",
                self.empty_fraction
            ));
        }
        if self.classes.len() != 2 {
            return config_err("scenes render exactly two classes (disc, box)");
        }
        if self.min_size < MIN_OBJECT_PX || self.min_size > self.max_size {
            return config_err(format!(
                "object sizes {}..{} must satisfy {MIN_OBJECT_PX} <= min <= max",
                self.min_size, self.max_size
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return config_err("object count range must be 1 <= min <= max");
        }
        if self.background_range[0] > self.background_range[1]
            || self.object_range[0] > self.object_range[1]
        {
            return config_err("intensity ranges must be ordered");
        }
        if self.max_size > self.height.min(self.width) {
            return Err(Error::Placement(format!(
                "objects up to {} px do not fit a {}x{} canvas",
                self.max_size, self.height, self.width
            )));
        }
        let footprint = (self.max_size as f64 + OBJECT_GAP).powi(2) * self.max_objects as f64;
        if footprint > 0.5 * (self.height * self.width) as f64 {
            return Err(Error::Placement(format!(
                "{} objects of {} px cannot be placed apart on a {}x{} canvas",
                self.max_objects, self.max_size, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub file: String,
    pub image: GrayImage,
    pub boxes: Vec<PixelBox>,
}

impl Sample {
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Boxes in normalized coordinates.
    pub fn gt_boxes(&self) -> Vec<GroundTruthBox> {
        normalize_boxes(&self.boxes, self.image.height, self.image.width)
    }
}

pub fn normalize_boxes(boxes: &[PixelBox], height: usize, width: usize) -> Vec<GroundTruthBox> {
    let (h, w) = (height as f64, width as f64);
    boxes
        .iter()
        .map(|b| GroundTruthBox {
            class_id: b.class,
            bbox: BBox::new(b.xmin / w, b.ymin / h, b.xmax / w, b.ymax / h),
        })
        .collect()
}

fn render_background(spec: &SceneSpec, rng: &mut Rng) -> GrayImage {
    let base = rng.random_range(spec.background_range[0] as f64..=spec.background_range[1] as f64);
    let (gx, gy) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let (fx, fy, phase) = (
        rng.random_range(0.05..0.25),
        rng.random_range(0.05..0.25),
        rng.random_range(0.0..6.3),
    );
    let noise = Normal::new(0.0, spec.noise_std.max(1e-9)).expect("finite std");
    let mut img = GrayImage::new(spec.height, spec.width, 0);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let tex =
                spec.texture_amplitude * (fx * x as f64 + phase).sin() * (fy * y as f64).cos();
            let v = base + gx * x as f64 + gy * y as f64 + tex + noise.sample(rng);
            img.set(y, x, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    img
}

/// Candidate object: class, float center, half extents.
struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Shape {
    fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if self.class == 1 {
            (px - self.cx).powi(2) + (py - self.cy).powi(2) <= self.rx * self.rx
        } else {
            (px - self.cx).abs() <= self.rx && (py - self.cy).abs() <= self.ry
        }
    }

    fn overlaps(&self, o: &Shape) -> bool {
        (self.cx - o.cx).abs() < self.rx + o.rx + OBJECT_GAP
            && (self.cy - o.cy).abs() < self.ry + o.ry + OBJECT_GAP
    }
}

/// Paints the shape and returns the tight box around the painted pixels.
fn paint(img: &mut GrayImage, s: &Shape, value: u8) -> Option<PixelBox> {
    let x0 = (s.cx - s.rx).floor().max(0.0) as usize;
    let y0 = (s.cy - s.ry).floor().max(0.0) as usize;
    let x1 = ((s.cx + s.rx).ceil() as usize).min(img.width);
    let y1 = ((s.cy + s.ry).ceil() as usize).min(img.height);
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for y in y0..y1 {
        for x in x0..x1 {
            if s.covers(x, y) {
                img.set(y, x, value);
                ext = Some(match ext {
                    None => (x, y, x, y),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                });
            }
        }
    }
    ext.map(|(a, b, c, d)| PixelBox {
        class: s.class,
        xmin: a as f64,
        ymin: b as f64,
        xmax: (c + 1) as f64,
        ymax: (d + 1) as f64,
    })
}

/// One scene; `empty` scenes carry background only.
pub fn render_scene(
    spec: &SceneSpec,
    empty: bool,
    rng: &mut Rng,
) -> Result<(GrayImage, Vec<PixelBox>)> {
    let mut img = render_background(spec, rng);
    if empty {
        return Ok((img, vec![]));
    }
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..=2);
        let size = rng.random_range(spec.min_size as f64..=spec.max_size as f64);
        let (rx, ry) = if class == 1 {
            (size / 2.0, size / 2.0)
        } else {
            let aspect: f64 = rng.random_range(0.6..1.0);
            let short = (size * aspect).max(MIN_OBJECT_PX as f64);
            if rng.random_bool(0.5) {
                (size / 2.0, short / 2.0)
            } else {
                (short / 2.0, size / 2.0)
            }
        };
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let cand = Shape {
                class,
                cx: rng.random_range(rx..=spec.width as f64 - rx),
                cy: rng.random_range(ry..=spec.height as f64 - ry),
                rx,
                ry,
            };
            if shapes.iter().all(|s| !s.overlaps(&cand)) {
                shapes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "no free spot for object {} of {count} after {MAX_ATTEMPTS} attempts",
                shapes.len() + 1
            )));
        }
    }
    let mut boxes = Vec::with_capacity(count);
    for s in &shapes {
        let v = rng.random_range(spec.object_range[0]..=spec.object_range[1]);
        if let Some(b) = paint(&mut img, s, v) {
            boxes.push(b);
        }
    }
    Ok((img, boxes))
}

/// `n` scenes of which exactly `round(n * empty_fraction)` are empty.
pub fn generate_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return config_err("dataset must contain at least one image");
    }
    let n_empty = (n as f64 * spec.empty_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, "data/empty"));
    let mut empty = vec![false; n];
    for &i in &order[..n_empty] {
        empty[i] = true;
    }
    (0..n)
        .map(|i| {
            let mut r = rng::indexed(seed, "data", i as u64);
            let (image, boxes) = render_scene(spec, empty[i], &mut r)?;
            Ok(Sample {
                file: format!("img_{i:05}.png"),
                image,
                boxes,
            })
        })
        .collect()
}

fn zero_intersection(r: &Rect, boxes: &[PixelBox]) -> bool {
    boxes.iter().all(|b| b.intersect(r).is_none())
}

/// Random region covering 40-70% of the image and touching no box.
pub fn sample_negative_crop(
    height: usize,
    width: usize,
    boxes: &[PixelBox],
    rng: &mut Rng,
) -> Result<Rect> {
    let total = (height * width) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let frac = rng.random_range(NEG_CROP_AREA.0..=NEG_CROP_AREA.1);
        let aspect: f64 = rng.random_range(0.5f64..2.0).sqrt();
        let w = (frac * total).sqrt() * aspect;
        let h = (frac * total).sqrt() / aspect;
        let (w, h) = (w.round() as usize, h.round() as usize);
        if w == 0 || h == 0 || w > width || h > height {
            continue;
        }
        let area = (w * h) as f64 / total;
        if !(NEG_CROP_AREA.0..=NEG_CROP_AREA.1).contains(&area) {
            continue;
        }
        let r = Rect {
            x: rng.random_range(0..=width - w),
            y: rng.random_range(0..=height - h),
            width: w,
            height: h,
        };
        if zero_intersection(&r, boxes) {
            return Ok(r);
        }
    }
    Err(Error::CropFailed(MAX_ATTEMPTS))
}

/// Crop with the image's aspect ratio, scaled by a factor drawn from
/// `scale`, that fully contains one randomly chosen box. Returns the region
/// and the surviving boxes in its coordinates.
pub fn sample_positive_crop(
    height: usize,
    width: usize,
    boxes: &[PixelBox],
    scale: (f64, f64),
    rng: &mut Rng,
) -> Result<(Rect, Vec<PixelBox>)> {
    if boxes.is_empty() {
        return config_err("positive crop needs at least one box");
    }
    let b = boxes[rng.random_range(0..boxes.len())];
    let s = rng.random_range(scale.0..=scale.1);
    let bx0 = b.xmin.floor().max(0.0) as usize;
    let by0 = b.ymin.floor().max(0.0) as usize;
    let bx1 = (b.xmax.ceil() as usize).min(width);
    let by1 = (b.ymax.ceil() as usize).min(height);
    let cw = ((width as f64 * s).round() as usize).clamp(bx1 - bx0, width);
    let ch = ((height as f64 * s).round() as usize).clamp(by1 - by0, height);
    let x = rng.random_range(bx1.saturating_sub(cw)..=bx0.min(width - cw));
    let y = rng.random_range(by1.saturating_sub(ch)..=by0.min(height - ch));
    let r = Rect {
        x,
        y,
        width: cw,
        height: ch,
    };
    Ok((r, clip_boxes(boxes, &r)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub file: String,
    pub boxes: Vec<PixelBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub count: usize,
    pub empty: usize,
    pub empty_fraction: f64,
}

impl SplitSummary {
    pub fn of(samples: &[Sample]) -> Self {
        let empty = samples.iter().filter(|s| s.is_empty()).count();
        Self {
            count: samples.len(),
            empty,
            empty_fraction: empty as f64 / samples.len().max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scene: SceneSpec,
    pub train: SplitSummary,
    pub test: SplitSummary,
}

/// Writes `<dir>/<split>/*.png` and `<dir>/<split>.json`.
pub fn save_split(dir: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let img_dir = dir.join(split);
    fs::create_dir_all(&img_dir)?;
    for s in samples {
        s.image.save_png(&img_dir.join(&s.file))?;
    }
    let entries: Vec<AnnotationEntry> = samples
        .iter()
        .map(|s| AnnotationEntry {
            file: s.file.clone(),
            boxes: s.boxes.clone(),
        })
        .collect();
    fs::write(
        dir.join(format!("{split}.json")),
        serde_json::to_string_pretty(&entries)?,
    )?;
    Ok(())
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let entries: Vec<AnnotationEntry> =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{split}.json")))?)?;
    entries
        .into_iter()
        .map(|e| {
            let image = GrayImage::load_png(&dir.join(split).join(&e.file))?;
            Ok(Sample {
                file: e.file,
                image,
                boxes: e.boxes,
            })
        })
        .collect()
}

/// Generates and writes both splits plus `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    spec: &SceneSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Manifest> {
    let train = generate_dataset(spec, n_train, seed)?;
    let test = generate_dataset(spec, n_test, seed ^ rng::name_hash("data/test"))?;
    save_split(dir, "train", &train)?;
    save_split(dir, "test", &test)?;
    let manifest = Manifest {
        seed,
        scene: spec.clone(),
        train: SplitSummary::of(&train),
        test: SplitSummary::of(&test),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Stacked `[N, 1, H, W]` input tensor.
pub fn batch_tensor(samples: &[&GrayImage]) -> Result<Tensor> {
    let ts: Vec<Tensor> = samples.iter().map(|s| s.to_tensor()).collect();
    Tensor::stack_batch(&ts.iter().collect::<Vec<_>>())
}

/// SHA-256 over file names, annotations and pixels.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.file.as_bytes());
        h.update(serde_json::to_vec(&s.boxes).unwrap_or_default());
        h.update((s.image.height as u64).to_le_bytes());
        h.update((s.image.width as u64).to_le_bytes());
        h.update(&s.image.pixels);
    }
    hex::encode(h.finalize())
}

/// `1` for images without boxes, else `0`.
pub fn empty_labels(samples: &[Sample]) -> Vec<u8> {
    samples.iter().map(|s| u8::from(s.is_empty())).collect()
}
