//! Metrics, reports, ablation protocols and visualization.

pub mod ap;
pub mod protocol;
pub mod viz;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::generator::{generate, Generator};
use crate::head::{DecodeParams, Detector};
use crate::nn::Mode;
use crate::ops::{resize, Interpolation, ResizeSpec};
use crate::pyramid::{image_batch, Image, N_S};
use crate::tensor::Tensor;
use crate::train::PyramidCache;

pub use ap::{coco_metrics, ApMetrics};
pub use protocol::{
    compare_interpolations, run_ablation, AblationReport, ComparisonRow, InterpComparison, Protocol, Runner, Suite,
};
pub use viz::{visualize_feature, Reduction};

/// Metrics of one evaluated model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    /// Mean absolute feature difference by pyramid level.
    pub feature_l1: BTreeMap<usize, f64>,
    pub ap: Option<ApMetrics>,
    pub config_hash: String,
    pub seed: u64,
    /// Wall-clock time of the evaluation; excluded from reproducibility checks.
    pub wall_ms: u64,
}

impl EvalReport {
    pub fn new(name: impl Into<String>, config_hash: impl Into<String>, seed: u64) -> Self {
        EvalReport {
            name: name.into(),
            feature_l1: BTreeMap::new(),
            ap: None,
            config_hash: config_hash.into(),
            seed,
            wall_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(ap) = &self.ap {
            if !ap.is_valid() {
                return Err(Error::Consistency(format!("AP outside [0, 1]: {ap:?}")));
            }
        }
        if self.feature_l1.values().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Consistency("feature L1 must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn without_timing(&self) -> Self {
        EvalReport { wall_ms: 0, ..self.clone() }
    }

    pub fn mean_l1(&self) -> f64 {
        self.feature_l1.values().sum::<f64>() / self.feature_l1.len().max(1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json())
    }

    pub fn table(&self) -> String {
        let mut s = format!("{}\n", self.name);
        for (l, v) in &self.feature_l1 {
            let _ = writeln!(s, "  L1 P{l}: {v:.6}");
        }
        if let Some(ap) = &self.ap {
            let _ = writeln!(
                s,
                "  AP {:.4}  AP50 {:.4}  AP75 {:.4}  AP_S {:.4}  AP_M {:.4}  AP_L {:.4}",
                ap.ap, ap.ap50, ap.ap75, ap.ap_s, ap.ap_m, ap.ap_l
            );
        }
        let _ = writeln!(s, "  config {} seed {}", &self.config_hash[..self.config_hash.len().min(12)], self.seed);
        s
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// How low-resolution features are brought up to target resolution.
#[derive(Clone, Copy, Debug)]
pub enum FeatureUpsampler<'a> {
    Interp(Interpolation),
    Srf(&'a Generator<f32>),
}

impl FeatureUpsampler<'_> {
    pub fn name(&self) -> String {
        match self {
            FeatureUpsampler::Interp(m) => m.name().to_string(),
            FeatureUpsampler::Srf(_) => "srf".into(),
        }
    }

    /// Upsample one `C x H x W` map from pyramid `level`.
    pub fn apply(&self, x: &Tensor<f32>, level: usize) -> Result<Tensor<f32>> {
        match self {
            FeatureUpsampler::Interp(m) => {
                let (_, h, w) = x.dims3();
                resize(x, ResizeSpec::double(h, w), *m)
            }
            FeatureUpsampler::Srf(g) => {
                let (c, h, w) = x.dims3();
                let y = generate(g, &x.clone().reshape(&[1, c, h, w])?, level, Mode::Eval)?;
                y.reshape(&[c, 2 * h, 2 * w])
            }
        }
    }
}

/// Sum of `|a - b|` over the overlap of two `C x H x W` maps whose spatial
/// sizes differ by at most one, and the number of compared elements.
fn abs_diff_sum(a: &Tensor<f32>, b: &Tensor<f32>, level: usize) -> Result<(f64, usize)> {
    let (ca, ha, wa) = a.dims3();
    let (cb, hb, wb) = b.dims3();
    if ca != cb || ha.abs_diff(hb) > 1 || wa.abs_diff(wb) > 1 {
        return Err(Error::Pyramid {
            level,
            reason: format!("cannot compare {ca}x{ha}x{wa} with {cb}x{hb}x{wb}"),
        });
    }
    let (h, w) = (ha.min(hb), wa.min(wb));
    let (da, db) = (a.data(), b.data());
    let mut sum = 0.0;
    for c in 0..ca {
        for y in 0..h {
            let ra = &da[(c * ha + y) * wa..][..w];
            let rb = &db[(c * hb + y) * wb..][..w];
            sum += ra.iter().zip(rb).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>();
        }
    }
    Ok((sum, ca * h * w))
}

/// Order-independent mean from per-image `(sum, count)` pairs.
fn pooled_mean(mut parts: Vec<(f64, usize)>) -> f64 {
    parts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n: usize = parts.iter().map(|p| p.1).sum();
    parts.iter().map(|p| p.0).sum::<f64>() / n.max(1) as f64
}

fn pooled_levels(per_image: Vec<Vec<(f64, usize)>>) -> BTreeMap<usize, f64> {
    let levels = per_image.first().map_or(0, Vec::len);
    (0..levels)
        .map(|li| (N_S + li, pooled_mean(per_image.iter().map(|p| p[li]).collect())))
        .collect()
}

/// Per-level mean L1 between upsampled low-resolution pyramids and targets.
pub fn feature_l1_eval(up: FeatureUpsampler<'_>, low: &PyramidCache, target: &PyramidCache) -> Result<BTreeMap<usize, f64>> {
    if low.is_empty() || low.len() != target.len() {
        return Err(Error::invalid(format!(
            "feature evaluation needs equal non-empty splits, got {} and {}",
            low.len(),
            target.len()
        )));
    }
    let per_image = low
        .per_image
        .iter()
        .zip(&target.per_image)
        .map(|(lo, tr)| {
            lo.iter()
                .zip(tr)
                .enumerate()
                .map(|(li, (x, t))| abs_diff_sum(&up.apply(x, N_S + li)?, t, N_S + li))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pooled_levels(per_image))
}

/// Per-level mean L1 between an extractor's pyramid on `images` and targets.
pub fn extractor_l1_eval(ext: &Extractor<f32>, images: &[Image], target: &PyramidCache) -> Result<BTreeMap<usize, f64>> {
    if images.is_empty() || images.len() != target.len() {
        return Err(Error::invalid(format!(
            "feature evaluation needs equal non-empty splits, got {} and {}",
            images.len(),
            target.len()
        )));
    }
    let per_image = images
        .iter()
        .zip(&target.per_image)
        .map(|(img, tr)| {
            let levels = ext.pyramid_tensors(&image_batch(&[img])?)?;
            levels
                .iter()
                .zip(tr)
                .enumerate()
                .map(|(li, (x, t))| abs_diff_sum(&x.batch_item(0), t, N_S + li))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pooled_levels(per_image))
}

/// COCO metrics of `det` on a split.
pub fn evaluate_detector(det: &Detector<f32>, split: &Dataset, params: &DecodeParams) -> Result<ApMetrics> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let mut dets = Vec::with_capacity(split.len());
    for chunk in split.samples.chunks(1) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        dets.extend(det.detect(&imgs, params)?);
    }
    let gt: Vec<_> = split.samples.iter().map(|s| s.targets.clone()).collect();
    Ok(coco_metrics(&gt, &dets, det.head.config.num_classes))
}
