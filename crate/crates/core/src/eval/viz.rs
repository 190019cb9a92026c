//! Heatmap rendering of feature maps.

use std::path::Path;

use image::{imageops, Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::FeatureMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    ChannelMean,
    Max,
    /// Projection on the leading principal component across channels.
    Pca1,
}

impl std::str::FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel_mean" | "mean" => Ok(Reduction::ChannelMean),
            "max" => Ok(Reduction::Max),
            "pca1" => Ok(Reduction::Pca1),
            _ => Err(Error::invalid(format!("unknown reduction '{s}' (channel_mean, max, pca1)"))),
        }
    }
}

/// `H x W` scalar field of a feature map.
pub fn reduce(fm: &FeatureMap<f32>, how: Reduction) -> Vec<f64> {
    let (c, h, w) = (fm.channels(), fm.height(), fm.width());
    let d = fm.data().data();
    let hw = h * w;
    match how {
        Reduction::ChannelMean => (0..hw).map(|i| (0..c).map(|k| d[k * hw + i] as f64).sum::<f64>() / c as f64).collect(),
        Reduction::Max => (0..hw).map(|i| (0..c).map(|k| d[k * hw + i] as f64).fold(f64::NEG_INFINITY, f64::max)).collect(),
        Reduction::Pca1 => {
            let x = DMatrix::from_fn(hw, c, |i, k| d[k * hw + i] as f64);
            let mean = x.row_mean();
            let centered = DMatrix::from_fn(hw, c, |i, k| x[(i, k)] - mean[k]);
            let cov = centered.transpose() * &centered;
            let eig = SymmetricEigen::new(cov);
            let top = eig.eigenvalues.imax();
            let mut v = eig.eigenvectors.column(top).into_owned();
            // Sign chosen so the largest-magnitude loading is positive.
            if v[v.iamax()] < 0.0 {
                v = -v;
            }
            (centered * v).iter().copied().collect()
        }
    }
}

/// Min-max normalized viridis rendering; a constant field maps to one color.
pub fn heatmap(values: &[f64], height: usize, width: usize) -> RgbImage {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        let t = if span > 0.0 && span.is_finite() { (v - lo) / span } else { 0.0 };
        let c = colorous::VIRIDIS.eval_continuous(t.clamp(0.0, 1.0));
        Rgb([c.r, c.g, c.b])
    })
}

pub fn render_feature(fm: &FeatureMap<f32>, how: Reduction, scale: u32) -> RgbImage {
    let img = heatmap(&reduce(fm, how), fm.height(), fm.width());
    if scale <= 1 {
        return img;
    }
    imageops::resize(&img, img.width() * scale, img.height() * scale, imageops::FilterType::Nearest)
}

pub fn visualize_feature(fm: &FeatureMap<f32>, path: &Path, how: Reduction, scale: u32) -> Result<()> {
    save_png(&render_feature(fm, how, scale), path)
}

/// Side-by-side panels separated by a 2-pixel gap, top-aligned.
pub fn grid(panels: &[RgbImage]) -> RgbImage {
    const GAP: u32 = 2;
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width()).sum::<u32>() + GAP * panels.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w.max(1), h.max(1), Rgb([255, 255, 255]));
    let mut x = 0;
    for p in panels {
        imageops::replace(&mut out, p, x as i64, 0);
        x += p.width() + GAP;
    }
    out
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn constant_map_is_uniform() {
        let fm = FeatureMap::new(Tensor::full(&[4, 3, 5], 0.7f32), 3).unwrap();
        for how in [Reduction::ChannelMean, Reduction::Max, Reduction::Pca1] {
            let img = render_feature(&fm, how, 1);
            assert_eq!(img.dimensions(), (5, 3));
            let first = *img.get_pixel(0, 0);
            assert!(img.pixels().all(|p| *p == first));
        }
    }
}
