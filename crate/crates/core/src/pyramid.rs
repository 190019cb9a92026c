//! Feature maps, pyramids, images and the resolution-change primitives on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{resize, Interpolation, ResizeSpec};
use crate::tensor::{Float, Tensor};

/// First top-down pyramid level.
pub const N_S: usize = 2;
/// Last top-down pyramid level.
pub const N_E: usize = 5;
/// Number of pyramid levels.
pub const NUM_LEVELS: usize = N_E - N_S + 1;

/// Input-image stride of pyramid level `level`.
pub fn level_stride(level: usize) -> usize {
    1 << level
}

/// One `C x H x W` activation at a pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Float = f32> {
    data: Tensor<T>,
    level: usize,
}

impl<T: Float> FeatureMap<T> {
    pub fn new(data: Tensor<T>, level: usize) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::Shape(format!("feature map must be C x H x W, got {:?}", data.shape())));
        }
        if data.shape().contains(&0) {
            return Err(Error::Pyramid { level, reason: format!("empty dimension in {:?}", data.shape()) });
        }
        if !data.all_finite() {
            return Err(Error::Pyramid { level, reason: "non-finite entries".into() });
        }
        Ok(FeatureMap { data, level })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<T> {
        self.data
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Bilinear resize to `floor(s*H) x floor(s*W)`.
pub fn downsample_feature<T: Float>(fm: &FeatureMap<T>, s: f64) -> Result<FeatureMap<T>> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::invalid(format!("level {}: scale {s} outside (0, 1)", fm.level)));
    }
    let spec = ResizeSpec::by_factor(fm.height(), fm.width(), s);
    if spec.out_h == 0 || spec.out_w == 0 {
        return Err(Error::invalid(format!(
            "level {}: scale {s} shrinks {}x{} to zero size",
            fm.level,
            fm.height(),
            fm.width()
        )));
    }
    Ok(FeatureMap { data: resize(&fm.data, spec, Interpolation::Bilinear)?, level: fm.level })
}

/// Exact 2x enlargement with a fixed interpolation kernel.
pub fn upsample_naive<T: Float>(fm: &FeatureMap<T>, method: Interpolation) -> FeatureMap<T> {
    let spec = ResizeSpec::double(fm.height(), fm.width());
    FeatureMap { data: resize(&fm.data, spec, method).expect("doubling a valid map"), level: fm.level }
}

/// Contiguous levels `n_s..=n_e`, sharing one channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Float = f32> {
    n_s: usize,
    levels: Vec<FeatureMap<T>>,
}

impl<T: Float> FeaturePyramid<T> {
    /// Build from maps in any order; fails unless [`validate_pyramid`] would pass.
    pub fn new(mut levels: Vec<FeatureMap<T>>) -> Result<Self> {
        levels.sort_by_key(|m| m.level);
        let n_s = levels.first().map(|m| m.level).ok_or_else(|| Error::invalid("empty pyramid"))?;
        let pyr = FeaturePyramid { n_s, levels };
        validate_pyramid(&pyr)?;
        Ok(pyr)
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn n_e(&self) -> usize {
        self.n_s + self.levels.len() - 1
    }

    pub fn get(&self, level: usize) -> Option<&FeatureMap<T>> {
        level.checked_sub(self.n_s).and_then(|i| self.levels.get(i))
    }

    pub fn levels(&self) -> &[FeatureMap<T>] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    /// Split per-level `[N, C, H, W]` tensors into one pyramid per batch item.
    pub fn from_batch(n_s: usize, maps: &[Tensor<T>]) -> Result<Vec<Self>> {
        let n = maps.first().map(|t| t.dims4().0).unwrap_or(0);
        (0..n)
            .map(|b| {
                let levels = maps
                    .iter()
                    .enumerate()
                    .map(|(i, t)| FeatureMap::new(t.batch_item(b), n_s + i))
                    .collect::<Result<Vec<_>>>()?;
                FeaturePyramid::new(levels)
            })
            .collect()
    }
}

/// Check contiguity, shared channel count and the halving law (within +-1).
pub fn validate_pyramid<T: Float>(pyr: &FeaturePyramid<T>) -> Result<()> {
    let first = pyr.levels.first().ok_or_else(|| Error::invalid("empty pyramid"))?;
    let c = first.channels();
    for (i, m) in pyr.levels.iter().enumerate() {
        let expected = pyr.n_s + i;
        if m.level != expected {
            return Err(Error::Pyramid {
                level: expected,
                reason: format!("levels not contiguous: found level {} where {expected} belongs", m.level),
            });
        }
        if m.channels() != c {
            return Err(Error::Pyramid {
                level: m.level,
                reason: format!("{} channels, expected {c}", m.channels()),
            });
        }
        if !m.data.all_finite() {
            return Err(Error::Pyramid { level: m.level, reason: "non-finite entries".into() });
        }
        if i > 0 {
            let finer = &pyr.levels[i - 1];
            for (axis, fine, coarse) in [("height", finer.height(), m.height()), ("width", finer.width(), m.width())] {
                if fine.abs_diff(2 * coarse) > 1 {
                    return Err(Error::Pyramid {
                        level: m.level,
                        reason: format!("{axis} {coarse} is not half of level {}'s {fine}", finer.level),
                    });
                }
            }
        }
    }
    Ok(())
}

/// An RGB image, `3 x H x W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub id: Option<String>,
    pub height: usize,
    pub width: usize,
    /// Channel-major samples.
    pub data: Vec<f32>,
}

impl Image {
    pub const MIN_SIDE: usize = 8;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < Self::MIN_SIDE || width < Self::MIN_SIDE {
            return Err(Error::invalid(format!(
                "image {height}x{width} smaller than {0}x{0}",
                Self::MIN_SIDE
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} samples, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image samples must lie in [0, 1]"));
        }
        Ok(Image { id: None, height, width, data })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[3, self.height, self.width], self.data.clone()).unwrap()
    }
}

/// Stack same-sized images into an `[N, 3, H, W]` tensor.
pub fn image_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.height, img.width) != (first.height, first.width) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{} images",
                first.height, first.width, img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec(&[images.len(), 3, first.height, first.width], data)
}
