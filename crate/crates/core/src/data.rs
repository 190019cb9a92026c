//! Datasets: COCO-style ingestion, a synthetic-shapes generator, image
//! degradation and deterministic batching.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::head::{iou, DetectionTargets};
use crate::ops::{resize, Interpolation, ResizeSpec};
use crate::pyramid::Image;

/// Smallest side a degraded image may have.
pub const MIN_DEGRADED_SIDE: usize = 16;

pub const SYNTHETIC_CLASSES: [&str; 3] = ["rectangle", "ellipse", "triangle"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub targets: DetectionTargets,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: Vec<String>,
    pub split: String,
    /// Boxes clamped to image bounds while loading.
    pub clamped_boxes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.samples.iter().map(|s| s.targets.len()).sum()
    }

    /// First `n` samples and the rest, as two datasets.
    pub fn split_at(&self, n: usize, first: &str, second: &str) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let make = |samples: &[Sample], split: &str| Dataset {
            samples: samples.to_vec(),
            classes: self.classes.clone(),
            split: split.to_string(),
            clamped_boxes: 0,
        };
        (make(&self.samples[..n], first), make(&self.samples[n..], second))
    }

    pub fn images(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.image).collect()
    }
}

/// Round to the nearest 8-bit level so PNG round trips are exact.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
}

fn inside(shape: Shape, px: f64, py: f64, b: [f64; 4]) -> bool {
    let (x0, y0, w, h) = (b[0], b[1], b[2], b[3]);
    match shape {
        Shape::Rect => px >= x0 && px < x0 + w && py >= y0 && py < y0 + h,
        Shape::Ellipse => {
            let (dx, dy) = ((px - x0 - w / 2.0) / (w / 2.0), (py - y0 - h / 2.0) / (h / 2.0));
            dx * dx + dy * dy <= 1.0
        }
        Shape::Triangle => {
            // Apex at top center, base along the bottom edge.
            if py < y0 || py >= y0 + h {
                return false;
            }
            let half = (py - y0) / h * w / 2.0;
            let cx = x0 + w / 2.0;
            px >= cx - half && px <= cx + half
        }
    }
}

/// Colored shapes on smoothly textured backgrounds, with exact tight boxes.
pub fn generate_synthetic(num_images: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if image_size < 32 {
        return Err(Error::invalid(format!("synthetic image size {image_size} < 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = image_size;
    let mut samples = Vec::with_capacity(num_images);
    for i in 0..num_images {
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
        let grad: [f64; 2] = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
        let freq: [f64; 2] = [rng.random_range(0.2..0.9), rng.random_range(0.2..0.9)];
        let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let mut data = vec![0f32; 3 * size * size];
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = (x as f64 / size as f64 - 0.5, y as f64 / size as f64 - 0.5);
                    let tex = 0.06 * (freq[0] * x as f64 + freq[1] * y as f64 + phase[c]).sin();
                    data[(c * size + y) * size + x] = (base[c] + grad[0] * u + grad[1] * v + tex) as f32;
                }
            }
        }

        let count = rng.random_range(1..=3);
        let mut targets = DetectionTargets::empty(size, size);
        let (min_side, max_side) = (size / 8, size / 2);
        for _ in 0..count {
            let class = rng.random_range(0..SYNTHETIC_CLASSES.len());
            let shape = [Shape::Rect, Shape::Ellipse, Shape::Triangle][class];
            let color: [f64; 3] = loop {
                let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                if c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f64>() > 0.6 {
                    break c;
                }
            };
            let mut placed = None;
            for _ in 0..20 {
                let w = rng.random_range(min_side..=max_side) as f64;
                let h = rng.random_range(min_side..=max_side) as f64;
                let x = rng.random_range(0.0..(size as f64 - w));
                let y = rng.random_range(0.0..(size as f64 - h));
                let b = [x, y, w, h];
                if targets.boxes.iter().all(|o| iou(o, &b) < 0.3) {
                    placed = Some(b);
                    break;
                }
            }
            let Some(b) = placed else { continue };
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..size {
                for x in 0..size {
                    if inside(shape, x as f64 + 0.5, y as f64 + 0.5, b) {
                        for c in 0..3 {
                            data[(c * size + y) * size + x] = color[c] as f32;
                        }
                        (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
                    }
                }
            }
            if x1 > x0 && y1 > y0 {
                targets.boxes.push([x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64]);
                targets.labels.push(class);
            }
        }
        for v in &mut data {
            *v = quantize(*v);
        }
        let image = Image::new(size, size, data)?.with_id(format!("synthetic_{seed}_{i:05}"));
        samples.push(Sample { image, targets });
    }
    Ok(Dataset {
        samples,
        classes: SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
        split: "synthetic".into(),
        clamped_boxes: 0,
    })
}

/// Resize by `s` with the named kernel, flooring dims and clamping to `[0, 1]`.
pub fn degrade_image(img: &Image, s: f64, method: Interpolation) -> Result<Image> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::invalid(format!("degradation scale {s} outside (0, 1]")));
    }
    let spec = ResizeSpec::by_factor(img.height, img.width, s);
    if spec.out_h < MIN_DEGRADED_SIDE || spec.out_w < MIN_DEGRADED_SIDE {
        return Err(Error::invalid(format!(
            "degrading {}x{} by {s} gives {}x{}, below {MIN_DEGRADED_SIDE}",
            img.height, img.width, spec.out_h, spec.out_w
        )));
    }
    let out = resize(&img.tensor(), spec, method)?;
    let data = out.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mut degraded = Image::new(spec.out_h, spec.out_w, data)?;
    degraded.id = img.id.clone();
    Ok(degraded)
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    bbox: [f64; 4],
    category_id: u64,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

fn parse_records<R: for<'de> Deserialize<'de>>(root: &Value, key: &str, source: &str) -> Result<Vec<R>> {
    let Some(arr) = root.get(key).and_then(Value::as_array) else {
        return Err(Error::Parse { source_name: source.into(), record: 0, reason: format!("missing array '{key}'") });
    };
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            R::deserialize(v).map_err(|e| Error::Parse {
                source_name: source.into(),
                record: i,
                reason: format!("{key}[{i}]: {e}"),
            })
        })
        .collect()
}

/// Load a COCO-style subset: `images`, `annotations` and `categories` arrays.
/// Boxes extending past the image are clamped (and counted).
pub fn load_dataset(root: &Path, annotation_file: &Path) -> Result<Dataset> {
    let source = annotation_file.display().to_string();
    let text = fs::read_to_string(annotation_file).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(annotation_file.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let json: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { source_name: source.clone(), record: 0, reason: e.to_string() })?;
    let images: Vec<CocoImage> = parse_records(&json, "images", &source)?;
    let anns: Vec<CocoAnnotation> = parse_records(&json, "annotations", &source)?;
    let mut cats: Vec<CocoCategory> = parse_records(&json, "categories", &source)?;
    cats.sort_by_key(|c| c.id);
    let cat_index: HashMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

    let mut samples = Vec::with_capacity(images.len());
    let mut by_id = HashMap::new();
    for (i, rec) in images.iter().enumerate() {
        let path: PathBuf = root.join(&rec.file_name);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let img = image::open(&path)?.to_rgb8();
        if (img.width() as usize, img.height() as usize) != (rec.width, rec.height) {
            return Err(Error::Parse {
                source_name: source.clone(),
                record: i,
                reason: format!(
                    "{} is {}x{}, annotation says {}x{}",
                    rec.file_name,
                    img.width(),
                    img.height(),
                    rec.width,
                    rec.height
                ),
            });
        }
        let image = image_from_rgb8(&img)?.with_id(rec.file_name.clone());
        by_id.insert(rec.id, samples.len());
        samples.push(Sample { image, targets: DetectionTargets::empty(rec.width, rec.height) });
    }

    let mut clamped = 0;
    for (i, a) in anns.iter().enumerate() {
        let parse_err = |reason: String| Error::Parse { source_name: source.clone(), record: i, reason };
        let &si = by_id
            .get(&a.image_id)
            .ok_or_else(|| parse_err(format!("annotation {i} references unknown image {}", a.image_id)))?;
        let &class = cat_index
            .get(&a.category_id)
            .ok_or_else(|| parse_err(format!("annotation {i} has unknown category {}", a.category_id)))?;
        let t = &mut samples[si].targets;
        let (iw, ih) = (t.width as f64, t.height as f64);
        let [x, y, w, h] = a.bbox;
        let (x0, y0) = (x.clamp(0.0, iw), y.clamp(0.0, ih));
        let (x1, y1) = ((x + w).clamp(0.0, iw), (y + h).clamp(0.0, ih));
        if (x0, y0, x1, y1) != (x, y, x + w, y + h) {
            clamped += 1;
        }
        if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
            return Err(parse_err(format!("annotation {i} has an empty box {:?} after clamping", a.bbox)));
        }
        t.boxes.push([x0, y0, x1 - x0, y1 - y0]);
        t.labels.push(class);
    }
    Ok(Dataset {
        samples,
        classes: cats.into_iter().map(|c| c.name).collect(),
        split: annotation_file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        clamped_boxes: clamped,
    })
}

pub fn image_from_rgb8(img: &image::RgbImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    Image::new(h, w, data)
}

pub fn image_to_rgb8(img: &Image) -> image::RgbImage {
    let (w, h) = (img.width, img.height);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img.data[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Write PNG images plus `annotations.json` loadable by [`load_dataset`].
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut images = Vec::new();
    let mut anns = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let file_name = format!("{:05}.png", i);
        image_to_rgb8(&s.image).save(dir.join(&file_name))?;
        images.push(CocoImage { id: i as u64, file_name, width: s.image.width, height: s.image.height });
        for (b, &l) in s.targets.boxes.iter().zip(&s.targets.labels) {
            anns.push(CocoAnnotation { image_id: i as u64, bbox: *b, category_id: l as u64 });
        }
    }
    let cats: Vec<CocoCategory> =
        ds.classes.iter().enumerate().map(|(i, n)| CocoCategory { id: i as u64, name: n.clone() }).collect();
    let mut root = BTreeMap::new();
    root.insert("images", serde_json::to_value(images)?);
    root.insert("annotations", serde_json::to_value(anns)?);
    root.insert("categories", serde_json::to_value(cats)?);
    let path = dir.join("annotations.json");
    fs::write(&path, serde_json::to_string_pretty(&root)?)?;
    Ok(path)
}

/// Seeded epoch-wise shuffling; batch `k` is a pure function of `(seed, k)`.
#[derive(Clone, Debug)]
pub struct Batcher {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("cannot batch an empty dataset"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(Batcher { len, batch_size: batch_size.min(len), seed })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut perm: Vec<usize> = (0..self.len).collect();
        perm.shuffle(&mut rng);
        perm
    }

    /// Indices of the `iteration`-th batch; the tail of each epoch is dropped.
    pub fn batch(&self, iteration: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, k) = (iteration / per, iteration % per);
        self.permutation(epoch)[k * self.batch_size..(k + 1) * self.batch_size].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degradation_of_checkerboard_is_mean() {
        let mut data = Vec::new();
        for _ in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    data.push(((x + y) % 2) as f32);
                }
            }
        }
        let img = Image::new(16, 16, data).unwrap();
        assert!(degrade_image(&img, 0.5, Interpolation::Bilinear).is_err());
        let same = degrade_image(&img, 1.0, Interpolation::Bicubic).unwrap();
        assert_eq!(same.data, img.data);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let b = Batcher::new(10, 3, 4).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|k| b.batch(k)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(b.batch(5), Batcher::new(10, 3, 4).unwrap().batch(5));
    }
}
