//! Feature reconstruction, adversarial and combined objectives.
//!
//! Every function sums over pyramid levels and averages within a level over
//! batch, channels and positions. Levels are passed as `(level, map)` pairs so
//! callers can skip levels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::pyramid::FeaturePyramid;
use crate::tensor::{Float, Tensor};

/// Default weight of the adversarial term.
pub const DEFAULT_LAMBDA: f64 = 0.001;
/// Probabilities are clamped to at least this before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

pub const L1: &str = "l1";
pub const ADV_G: &str = "adv_g";
pub const ADV_D_REAL: &str = "adv_d_real";
pub const ADV_D_FAKE: &str = "adv_d_fake";
pub const DET_CLS: &str = "det_cls";
pub const DET_BOX: &str = "det_box";

/// Scalar breakdown of a composite loss. `total` is the sum of `per_term`
/// with `adv_g` weighted by `lambda` and every other term by 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_term: BTreeMap<String, f64>,
    pub per_level: BTreeMap<usize, BTreeMap<String, f64>>,
    pub lambda: f64,
}

impl LossReport {
    pub fn term_weight(&self, term: &str) -> f64 {
        if term == ADV_G {
            self.lambda
        } else {
            1.0
        }
    }

    /// Weighted sum of `per_term`; equals `total` for every report built here.
    pub fn reconstruct_total(&self) -> f64 {
        self.per_term.iter().map(|(k, v)| self.term_weight(k) * v).sum()
    }

    pub fn term(&self, name: &str) -> f64 {
        self.per_term.get(name).copied().unwrap_or(0.0)
    }

    fn add_level(&mut self, level: usize, term: &str, value: f64) {
        *self.per_term.entry(term.to_string()).or_default() += value;
        self.per_level.entry(level).or_default().insert(term.to_string(), value);
    }

    pub(crate) fn add_term(&mut self, term: &str, value: f64) {
        *self.per_term.entry(term.to_string()).or_default() += value;
    }

    fn finish(mut self) -> Self {
        self.total = self.reconstruct_total();
        self
    }

    /// Combine two reports of disjoint terms (lambda taken from whichever is nonzero).
    pub fn merge(mut self, other: LossReport) -> Self {
        if self.lambda == 0.0 {
            self.lambda = other.lambda;
        }
        for (k, v) in other.per_term {
            *self.per_term.entry(k).or_default() += v;
        }
        for (lvl, terms) in other.per_level {
            self.per_level.entry(lvl).or_default().extend(terms);
        }
        self.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.total.is_finite()
            && self.per_term.values().all(|v| v.is_finite())
            && self.per_level.values().flat_map(|m| m.values()).all(|v| v.is_finite())
    }
}

pub type Levels<'g, T> = [(usize, Var<'g, T>)];

fn check_level_ranges<T: Float>(a: &Levels<'_, T>, b: &Levels<'_, T>) -> Result<()> {
    let la: Vec<usize> = a.iter().map(|(l, _)| *l).collect();
    let lb: Vec<usize> = b.iter().map(|(l, _)| *l).collect();
    if la != lb {
        return Err(Error::invalid(format!("level ranges differ: {la:?} vs {lb:?}")));
    }
    Ok(())
}

fn sum_vars<'g, T: Float>(vars: Vec<Var<'g, T>>) -> Result<Var<'g, T>> {
    vars.into_iter().reduce(|a, b| a.add(b)).ok_or_else(|| Error::invalid("no pyramid levels"))
}

/// `sum_i mean |sr_i - target_i|`.
pub fn l1_feature_loss<'g, T: Float>(sr: &Levels<'g, T>, target: &Levels<'g, T>) -> Result<(Var<'g, T>, LossReport)> {
    check_level_ranges(sr, target)?;
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    for ((level, s), (_, t)) in sr.iter().zip(target) {
        if s.shape() != t.shape() {
            return Err(Error::invalid(format!(
                "level {level}: super-resolved {:?} vs target {:?}",
                s.shape(),
                t.shape()
            )));
        }
        let term = s.sub(*t).abs().mean();
        report.add_level(*level, L1, term.item().as_f64());
        terms.push(term);
    }
    Ok((sum_vars(terms)?, report.finish()))
}

fn check_channels<T: Float>(d: &Discriminator<T>, maps: &Levels<'_, T>) -> Result<()> {
    for (level, m) in maps {
        let c = m.shape()[1];
        if c != d.channels() {
            return Err(Error::invalid(format!(
                "level {level}: discriminator expects {} channels, got {c}",
                d.channels()
            )));
        }
    }
    Ok(())
}

/// `sum_i mean -log D(sr_i)`. Gradients reach `sr`; the discriminator's own
/// parameters train only if `ctx` is trainable.
pub fn adv_generator_loss<'g, T: Float>(
    ctx: Ctx<'g, T>,
    d: &Discriminator<T>,
    sr: &Levels<'g, T>,
) -> Result<(Var<'g, T>, LossReport)> {
    check_channels(d, sr)?;
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    for (level, s) in sr {
        let term = d.forward(ctx, *s)?.clamped_log(LOG_FLOOR).mean().scale(-T::one());
        report.add_level(*level, ADV_G, term.item().as_f64());
        terms.push(term);
    }
    report.lambda = 1.0;
    Ok((sum_vars(terms)?, report.finish()))
}

/// `-sum_i mean log D(real_i) - sum_i mean log(1 - D(fake_i))`, with both inputs
/// detached so only the discriminator receives gradients.
pub fn adv_discriminator_loss<'g, T: Float>(
    ctx: Ctx<'g, T>,
    d: &Discriminator<T>,
    real: &Levels<'g, T>,
    fake: &Levels<'g, T>,
) -> Result<(Var<'g, T>, LossReport)> {
    check_level_ranges(real, fake)?;
    check_channels(d, real)?;
    check_channels(d, fake)?;
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    for ((level, r), (_, f)) in real.iter().zip(fake) {
        let lr = d.forward(ctx, r.detach())?.clamped_log(LOG_FLOOR).mean().scale(-T::one());
        let lf = d.forward(ctx, f.detach())?.one_minus().clamped_log(LOG_FLOOR).mean().scale(-T::one());
        report.add_level(*level, ADV_D_REAL, lr.item().as_f64());
        report.add_level(*level, ADV_D_FAKE, lf.item().as_f64());
        terms.push(lr);
        terms.push(lf);
    }
    Ok((sum_vars(terms)?, report.finish()))
}

/// `l1 + lambda * adv_g`.
pub fn srf_loss<'g, T: Float>(
    ctx: Ctx<'g, T>,
    d: &Discriminator<T>,
    sr: &Levels<'g, T>,
    target: &Levels<'g, T>,
    lambda: f64,
) -> Result<(Var<'g, T>, LossReport)> {
    let (l1, r1) = l1_feature_loss(sr, target)?;
    let (adv, r2) = adv_generator_loss(ctx, d, sr)?;
    let total = l1.add(adv.scale(T::from_f64_lossy(lambda)));
    let mut report = r1.merge(r2);
    report.lambda = lambda;
    Ok((total, report.finish()))
}

/// Unweighted sum of the feature objective and the detection loss.
pub fn integral_loss(srf: f64, det: f64) -> Result<f64> {
    if !srf.is_finite() || !det.is_finite() {
        return Err(Error::Numeric(format!("integral loss inputs srf={srf}, det={det}")));
    }
    Ok(srf + det)
}

/// Differentiable counterpart of [`integral_loss`].
pub fn integral_loss_var<'g, T: Float>(
    srf: (Var<'g, T>, LossReport),
    det: (Var<'g, T>, LossReport),
) -> Result<(Var<'g, T>, LossReport)> {
    integral_loss(srf.0.item().as_f64(), det.0.item().as_f64())?;
    let lambda = srf.1.lambda;
    let mut report = srf.1.merge(det.1);
    report.lambda = lambda;
    Ok((srf.0.add(det.0), report.finish()))
}

/// Mean absolute difference of two equally shaped tensors.
pub fn mean_abs_diff<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(s / a.len().max(1) as f64)
}

/// Per-level L1 between two plain pyramids, summed into `total`.
pub fn pyramid_l1<T: Float>(sr: &FeaturePyramid<T>, target: &FeaturePyramid<T>) -> Result<LossReport> {
    if (sr.n_s(), sr.n_e()) != (target.n_s(), target.n_e()) {
        return Err(Error::invalid(format!(
            "level ranges differ: {}..{} vs {}..{}",
            sr.n_s(),
            sr.n_e(),
            target.n_s(),
            target.n_e()
        )));
    }
    let mut report = LossReport::default();
    for (s, t) in sr.levels().iter().zip(target.levels()) {
        let v = mean_abs_diff(s.data(), t.data())
            .map_err(|e| Error::invalid(format!("level {}: {e}", s.level())))?;
        report.add_level(s.level(), L1, v);
    }
    Ok(report.finish())
}
