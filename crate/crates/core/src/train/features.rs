use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::ops::{resize, Interpolation, ResizeSpec};
use crate::pyramid::{image_batch, Image, NUM_LEVELS};
use crate::tensor::Tensor;

const CHUNK: usize = 16;

/// Frozen-extractor pyramids of a fixed image list, `[image][level]` as `C x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidCache {
    pub per_image: Vec<Vec<Tensor<f32>>>,
}

impl PyramidCache {
    pub fn compute(ext: &Extractor<f32>, images: &[&Image]) -> Result<Self> {
        let mut per_image = Vec::with_capacity(images.len());
        let mut start = 0;
        while start < images.len() {
            let size = (images[start].height, images[start].width);
            let mut end = start + 1;
            while end < images.len() && end - start < CHUNK && (images[end].height, images[end].width) == size {
                end += 1;
            }
            let levels = ext.pyramid_tensors(&image_batch(&images[start..end])?)?;
            for b in 0..end - start {
                per_image.push(levels.iter().map(|t| t.batch_item(b)).collect());
            }
            start = end;
        }
        Ok(PyramidCache { per_image })
    }

    pub fn len(&self) -> usize {
        self.per_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_image.is_empty()
    }

    /// `[B, C, H, W]` batch of level index `li` (0 for level 2).
    pub fn gather(&self, idx: &[usize], li: usize) -> Result<Tensor<f32>> {
        if li >= NUM_LEVELS {
            return Err(Error::invalid(format!("level index {li} out of range")));
        }
        let items: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.per_image[i][li]).collect();
        Tensor::stack(&items)
    }

    /// Bilinear `floor(s*H) x floor(s*W)` resize of every stored map.
    pub fn downsampled(&self, s: f64) -> Result<Self> {
        let per_image = self
            .per_image
            .iter()
            .map(|levels| {
                levels
                    .iter()
                    .enumerate()
                    .map(|(li, t)| {
                        let (_, h, w) = t.dims3();
                        let spec = ResizeSpec::by_factor(h, w, s);
                        resize(t, spec, Interpolation::Bilinear)
                            .map_err(|e| Error::invalid(format!("level {}: {e}", li + crate::pyramid::N_S)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PyramidCache { per_image })
    }
}
