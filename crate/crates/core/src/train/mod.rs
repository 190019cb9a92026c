//! The three progressive training stages and the plumbing they share.
//!
//! 1. Generator/discriminator pretraining on frozen-extractor features.
//! 2. Adversarial training of the extractor with the generator in every
//!    top-down merge, on downscaled images.
//! 3. Detector training on full-resolution images, optionally reusing the
//!    generator or the whole stage-2 extractor.

pub mod checkpoint;
pub mod config;
pub mod features;
pub mod log;
pub mod optim;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::data::{degrade_image, generate_synthetic, load_dataset, Batcher, Dataset};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::extractor::{pad_to_multiple, Extractor, Upsampler, SIZE_DIVISOR};
use crate::generator::Generator;
use crate::head::{detection_loss, scale_targets, DetectionTargets, Detector, Head};
use crate::losses::{adv_discriminator_loss, integral_loss_var, srf_loss, LossReport};
use crate::nn::{Ctx, Mode, Module};
use crate::pyramid::{image_batch, Image, NUM_LEVELS, N_S};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{Ablation, ArchConfig, OptimizerKind, Reuse, SemanticLevelMode, TrainConfig, UpsamplerKind};
pub use features::PyramidCache;
pub use log::{LogRecord, TrainLog};
pub use optim::{Adam, LrSchedule, Optimizer, Sgd};

/// Independent sub-seed for one named component of a run.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Train and held-out splits.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Dataset,
    pub val: Dataset,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset, val_images: usize) -> Result<Self> {
        if ds.len() <= val_images {
            return Err(Error::invalid(format!("dataset of {} images cannot hold out {val_images}", ds.len())));
        }
        let (train, val) = ds.split_at(ds.len() - val_images, "train", "val");
        Ok(TrainData { train, val })
    }
}

pub fn prepare_data(cfg: &TrainConfig) -> Result<TrainData> {
    let ds = if cfg.dataset == "synthetic" {
        generate_synthetic(cfg.synthetic_images, cfg.image_size, cfg.synthetic_seed)?
    } else {
        let ann = Path::new(&cfg.dataset);
        let root = match &cfg.dataset_root {
            Some(r) => Path::new(r).to_path_buf(),
            None => ann.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        load_dataset(&root, ann)?
    };
    TrainData::from_dataset(&ds, cfg.val_images)
}

pub fn degrade_all(images: &[&Image], s: f64, method: crate::ops::Interpolation) -> Result<Vec<Image>> {
    images.iter().map(|img| degrade_image(img, s, method)).collect()
}

/// Parameter fingerprints around one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepAudit {
    pub iter: usize,
    /// `'d'` for a discriminator step, `'g'` for a generator / extractor step.
    pub phase: char,
    pub g_changed: bool,
    pub d_changed: bool,
}

fn checkpoint_meta(cfg: &TrainConfig, stage: u8, upsampler: &str) -> CheckpointMeta {
    CheckpointMeta {
        stage,
        upsampler: upsampler.to_string(),
        config_hash: cfg.hash(),
        format_version: checkpoint::FORMAT_VERSION,
        seed: cfg.seed,
        config: cfg.to_text(),
    }
}

struct Stepper {
    clip: f64,
    schedule: LrSchedule,
    stage: u8,
    last_good: Option<String>,
}

impl Stepper {
    fn new(cfg: &TrainConfig) -> Self {
        Stepper {
            clip: cfg.grad_clip,
            schedule: LrSchedule { base: cfg.lr, milestones: cfg.milestones.clone(), factor: cfg.decay_factor },
            stage: cfg.stage,
            last_good: cfg.checkpoint_out.as_ref().map(|p| format!("{p}.last_good")),
        }
    }

    /// Backward, clip and update; refuses to step on non-finite losses or
    /// gradients, saving the current (pre-step) parameters if possible.
    fn step<M: Module<f32>>(
        &self,
        graph: &Graph<f32>,
        loss: Var<'_, f32>,
        module: &mut M,
        opt: &mut Optimizer<f32>,
        iter: usize,
        what: &str,
    ) -> Result<f64> {
        let value = loss.item();
        let mut grads = graph.backward(loss)?;
        if !value.is_finite() || !grads.all_finite() {
            return Err(self.diverged(iter, format!("non-finite {what} loss {value}"), module));
        }
        let norm = grads.clip_global_norm(self.clip);
        opt.step(module, &grads, self.schedule.lr_at(iter));
        Ok(norm)
    }

    fn diverged<M: Module<f32>>(&self, iter: usize, reason: String, module: &M) -> Error {
        let last_good = match &self.last_good {
            Some(path) => {
                let mut ckpt = Checkpoint::new(CheckpointMeta {
                    stage: self.stage,
                    upsampler: String::new(),
                    config_hash: String::new(),
                    format_version: checkpoint::FORMAT_VERSION,
                    seed: 0,
                    config: String::new(),
                });
                ckpt.insert_module("model", module);
                match save_checkpoint(Path::new(path), &ckpt) {
                    Ok(()) => path.clone(),
                    Err(_) => "none".into(),
                }
            }
            None => "none".into(),
        };
        Error::Diverged { iteration: iter, reason, last_good }
    }
}

fn record(stage: u8, iter: usize, lr: f64, reports: &[(&str, &LossReport)], extra: &[(&str, f64)], start: Instant) -> LogRecord {
    let mut values = BTreeMap::new();
    for (prefix, r) in reports {
        for (k, v) in &r.per_term {
            values.insert(k.clone(), *v);
        }
        values.insert(format!("{prefix}_total"), r.total);
    }
    for (k, v) in extra {
        values.insert(k.to_string(), *v);
    }
    LogRecord { stage, iter, lr, values, wall_ms: start.elapsed().as_millis() as u64 }
}

fn consts<'g>(graph: &'g Graph<f32>, maps: Vec<Tensor<f32>>) -> Vec<(usize, Var<'g, f32>)> {
    maps.into_iter().enumerate().map(|(i, t)| (N_S + i, graph.constant(t))).collect()
}

fn gather_levels(cache: &PyramidCache, idx: &[usize]) -> Result<Vec<Tensor<f32>>> {
    (0..NUM_LEVELS).map(|li| cache.gather(idx, li)).collect()
}

fn padded_batch(images: &[Image], idx: &[usize]) -> Result<Tensor<f32>> {
    let refs: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
    pad_to_multiple(&image_batch(&refs)?, SIZE_DIVISOR)
}

fn gather_targets(targets: &[DetectionTargets], idx: &[usize]) -> Vec<DetectionTargets> {
    idx.iter().map(|&i| targets[i].clone()).collect()
}

pub struct GanOutcome {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub log: TrainLog,
    pub audit: Vec<StepAudit>,
}

impl GanOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut c = Checkpoint::new(checkpoint_meta(cfg, 1, "srf"));
        c.insert_module("generator", &self.generator);
        c.insert_module("discriminator", &self.discriminator);
        c
    }
}

pub fn new_generator(cfg: &TrainConfig) -> Result<Generator<f32>> {
    Generator::with_width(cfg.arch.channels, cfg.arch.generator_width, derive_seed(cfg.seed, "generator"))
}

pub fn new_discriminator(cfg: &TrainConfig) -> Result<Discriminator<f32>> {
    Discriminator::with_widths(cfg.arch.channels, cfg.arch.disc_widths, derive_seed(cfg.seed, "discriminator"))
}

/// Target (`P^tr`) and low-resolution (`P^lr`) pyramids of the training images.
pub struct GanFeatures {
    pub target: PyramidCache,
    pub low: PyramidCache,
}

impl GanFeatures {
    pub fn compute(cfg: &TrainConfig, f: &Extractor<f32>, images: &[&Image]) -> Result<Self> {
        let low_images = degrade_all(images, cfg.s, cfg.degradation)?;
        Ok(GanFeatures {
            target: PyramidCache::compute(f, images)?,
            low: PyramidCache::compute(f, &low_images.iter().collect::<Vec<_>>())?,
        })
    }
}

/// Stage 1: alternate one discriminator step and one generator step per
/// iteration, on pyramids of the frozen extractor `f`.
pub fn train_srf_gan(cfg: &TrainConfig, f: &Extractor<f32>, data: &TrainData) -> Result<GanOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let feats = GanFeatures::compute(cfg, f, &data.train.images())?;
    train_srf_gan_on(cfg, &feats)
}

/// Stage 1 on precomputed features.
pub fn train_srf_gan_on(cfg: &TrainConfig, feats: &GanFeatures) -> Result<GanOutcome> {
    cfg.validate()?;
    let mut gen = new_generator(cfg)?;
    let mut disc = new_discriminator(cfg)?;
    if feats.target.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let batcher = Batcher::new(feats.target.len(), cfg.batch_size, derive_seed(cfg.seed, "batches"))?;
    let mut g_opt = Optimizer::from_config(cfg);
    let mut d_opt = Optimizer::from_config(cfg);
    let stepper = Stepper::new(cfg);
    let mut log = TrainLog::default();
    let mut audit = Vec::new();

    for iter in 0..cfg.iterations {
        let start = Instant::now();
        let idx = batcher.batch(iter);
        let graph = Graph::new();
        let real = consts(&graph, gather_levels(&feats.target, &idx)?);
        let low = consts(&graph, gather_levels(&feats.low, &idx)?);

        let gctx = Ctx::new(&graph, Mode::Train);
        let fakes = low
            .iter()
            .map(|&(l, x)| Ok((l, gen.forward(gctx, x, l)?)))
            .collect::<Result<Vec<_>>>()?;
        let g_bn = graph.take_bn_updates();

        let (g0, d0) = (gen.param_digest(), disc.param_digest());
        let (d_loss, d_report) = adv_discriminator_loss(Ctx::new(&graph, Mode::Train), &disc, &real, &fakes)?;
        let d_norm = stepper.step(&graph, d_loss, &mut disc, &mut d_opt, iter, "discriminator")?;
        disc.apply_bn_updates(&graph.take_bn_updates());
        let (g1, d1) = (gen.param_digest(), disc.param_digest());
        audit.push(StepAudit { iter, phase: 'd', g_changed: g0 != g1, d_changed: d0 != d1 });

        let dctx = Ctx { graph: &graph, mode: Mode::Train, trainable: false };
        let (g_loss, g_report) = srf_loss(dctx, &disc, &fakes, &real, cfg.lambda)?;
        let g_norm = stepper.step(&graph, g_loss, &mut gen, &mut g_opt, iter, "generator")?;
        gen.apply_bn_updates(&g_bn);
        graph.take_bn_updates();
        audit.push(StepAudit { iter, phase: 'g', g_changed: gen.param_digest() != g1, d_changed: disc.param_digest() != d1 });

        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.push(record(
                1,
                iter,
                stepper.schedule.lr_at(iter),
                &[("d", &d_report), ("g", &g_report)],
                &[("g_grad_norm", g_norm), ("d_grad_norm", d_norm)],
                start,
            ));
        }
    }
    Ok(GanOutcome { generator: gen, discriminator: disc, log, audit })
}

/// A detector with freshly initialized extractor and head.
pub fn new_detector(cfg: &TrainConfig, upsampler: Upsampler<f32>) -> Result<Detector<f32>> {
    Ok(Detector {
        extractor: Extractor::new(cfg.arch.extractor(), upsampler, derive_seed(cfg.seed, "extractor"))?,
        head: Head::new(cfg.arch.head(), derive_seed(cfg.seed, "head"))?,
        mask: cfg.arch.head_levels.clone(),
    })
}

pub struct ExtractorOutcome {
    /// The extractor `M` (with its generator) and head.
    pub detector: Detector<f32>,
    pub discriminator: Discriminator<f32>,
    pub log: TrainLog,
    pub audit: Vec<StepAudit>,
}

impl ExtractorOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut c = Checkpoint::new(checkpoint_meta(cfg, 2, "srf"));
        c.insert_module("detector", &self.detector);
        c.insert_module("discriminator", &self.discriminator);
        c
    }
}

/// Everything stage 2 derives from the training images once.
pub struct ExtractorData {
    pub full: Vec<Image>,
    pub low: Vec<Image>,
    pub full_targets: Vec<DetectionTargets>,
    pub low_targets: Vec<DetectionTargets>,
    /// `P^tr` from the frozen extractor on full-resolution images.
    pub target: PyramidCache,
    /// `P^tr` downsampled by `s`.
    pub target_down: PyramidCache,
    pub dropped_boxes: usize,
}

impl ExtractorData {
    pub fn compute(cfg: &TrainConfig, f: &Extractor<f32>, ds: &Dataset) -> Result<Self> {
        let images = ds.images();
        let target = PyramidCache::compute(f, &images)?;
        Self::with_target(cfg, ds, target)
    }

    /// Reuse an already computed `P^tr` cache for the same images.
    pub fn with_target(cfg: &TrainConfig, ds: &Dataset, target: PyramidCache) -> Result<Self> {
        let images = ds.images();
        let low = degrade_all(&images, cfg.s, cfg.degradation)?;
        let mut dropped = 0;
        let mut low_targets = Vec::with_capacity(ds.len());
        for s in &ds.samples {
            let (t, d) = scale_targets(&s.targets, cfg.s)?;
            dropped += d;
            low_targets.push(t);
        }
        Ok(ExtractorData {
            full: ds.samples.iter().map(|s| s.image.clone()).collect(),
            low,
            full_targets: ds.samples.iter().map(|s| s.targets.clone()).collect(),
            low_targets,
            target_down: target.downsampled(cfg.s)?,
            target,
            dropped_boxes: dropped,
        })
    }
}

/// Stage 2: train `M` (extractor with the generator in every merge, plus head)
/// against the discriminator with the integral loss.
pub fn train_srf_extractor(
    cfg: &TrainConfig,
    f: &Extractor<f32>,
    g0: &Generator<f32>,
    d0: &Discriminator<f32>,
    data: &TrainData,
) -> Result<ExtractorOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let prepared = ExtractorData::compute(cfg, f, &data.train)?;
    train_srf_extractor_on(cfg, g0, d0, &prepared)
}

pub fn train_srf_extractor_on(
    cfg: &TrainConfig,
    g0: &Generator<f32>,
    d0: &Discriminator<f32>,
    data: &ExtractorData,
) -> Result<ExtractorOutcome> {
    cfg.validate()?;
    if g0.channels() != cfg.arch.channels || d0.channels() != cfg.arch.channels {
        return Err(Error::invalid(format!(
            "generator/discriminator channels {}/{} do not match configured {}",
            g0.channels(),
            d0.channels(),
            cfg.arch.channels
        )));
    }
    let mut m = new_detector(cfg, Upsampler::Srf(g0.clone()))?;
    let mut disc = d0.clone();
    let batcher = Batcher::new(data.full.len(), cfg.batch_size, derive_seed(cfg.seed, "batches"))?;
    let mut m_opt = Optimizer::from_config(cfg);
    let mut d_opt = Optimizer::from_config(cfg);
    let stepper = Stepper::new(cfg);
    let mut log = TrainLog::default();
    let mut audit = Vec::new();
    if data.dropped_boxes > 0 {
        log.warn(format!("{} boxes dropped when scaling targets by {}", data.dropped_boxes, cfg.s));
    }
    let matched = cfg.semantic_level_mode == SemanticLevelMode::Matched;
    if !matched {
        log.warn(format!(
            "mismatched levels: generator output from level {N_S} would need level {} targets; skipped",
            N_S - 1
        ));
    }

    for iter in 0..cfg.iterations {
        let start = Instant::now();
        let idx = batcher.batch(iter);
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, Mode::Train);
        let (images, targets) = if matched {
            (padded_batch(&data.low, &idx)?, gather_targets(&data.low_targets, &idx))
        } else {
            (padded_batch(&data.full, &idx)?, gather_targets(&data.full_targets, &idx))
        };
        let (fpn, preds) = m.forward(ctx, graph.constant(images))?;
        let m_bn = graph.take_bn_updates();
        let (sr, real) = if matched {
            let sr: Vec<_> = fpn.levels.iter().enumerate().map(|(i, v)| (N_S + i, *v)).collect();
            (sr, consts(&graph, gather_levels(&data.target_down, &idx)?))
        } else {
            // Generator output entering merge `j` has level-j resolution and is
            // compared with the target at level j.
            let sr: Vec<_> = fpn.upsampled.iter().enumerate().map(|(i, v)| (N_S + i, *v)).collect();
            let tr = gather_levels(&data.target, &idx)?;
            (sr, consts(&graph, tr.into_iter().take(NUM_LEVELS - 1).collect()))
        };

        let (g0d, d0d) = (m.param_digest(), disc.param_digest());
        let (d_loss, d_report) = adv_discriminator_loss(Ctx::new(&graph, Mode::Train), &disc, &real, &sr)?;
        let d_norm = stepper.step(&graph, d_loss, &mut disc, &mut d_opt, iter, "discriminator")?;
        disc.apply_bn_updates(&graph.take_bn_updates());
        let (g1, d1) = (m.param_digest(), disc.param_digest());
        audit.push(StepAudit { iter, phase: 'd', g_changed: g0d != g1, d_changed: d0d != d1 });

        let dctx = Ctx { graph: &graph, mode: Mode::Train, trainable: false };
        let srf = srf_loss(dctx, &disc, &sr, &real, cfg.lambda)?;
        let det = detection_loss(&preds, &targets, &cfg.arch.size_ranges)?;
        let (m_loss, m_report) = integral_loss_var(srf, det)?;
        let m_norm = stepper.step(&graph, m_loss, &mut m, &mut m_opt, iter, "integral")?;
        m.apply_bn_updates(&m_bn);
        graph.take_bn_updates();
        audit.push(StepAudit { iter, phase: 'g', g_changed: m.param_digest() != g1, d_changed: disc.param_digest() != d1 });

        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.push(record(
                2,
                iter,
                stepper.schedule.lr_at(iter),
                &[("d", &d_report), ("m", &m_report)],
                &[("m_grad_norm", m_norm), ("d_grad_norm", d_norm)],
                start,
            ));
        }
    }
    Ok(ExtractorOutcome { detector: m, discriminator: disc, log, audit })
}

/// What a detector run starts from.
pub enum DetectorSource<'a> {
    None,
    G(&'a Generator<f32>),
    M(&'a Detector<f32>),
}

pub struct DetectorOutcome {
    pub detector: Detector<f32>,
    pub log: TrainLog,
}

impl DetectorOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut c = Checkpoint::new(checkpoint_meta(cfg, 3, &self.detector.extractor.upsampler.name()));
        c.insert_module("detector", &self.detector);
        c
    }
}

/// Build the initial detector for stage 3 from `source`.
pub fn initial_detector(cfg: &TrainConfig, source: DetectorSource<'_>) -> Result<Detector<f32>> {
    let mut det = match source {
        DetectorSource::None => {
            let up = match cfg.upsampler.interpolation() {
                Some(m) => Upsampler::Naive(m),
                None => Upsampler::Srf(new_generator(cfg)?),
            };
            new_detector(cfg, up)?
        }
        DetectorSource::G(g) => {
            if g.channels() != cfg.arch.channels {
                return Err(Error::Checkpoint(format!(
                    "generator has {} channels, configuration expects {}",
                    g.channels(),
                    cfg.arch.channels
                )));
            }
            new_detector(cfg, Upsampler::Srf(g.clone()))?
        }
        DetectorSource::M(m) => {
            if m.extractor.config != cfg.arch.extractor() || m.head.config != cfg.arch.head() {
                return Err(Error::Checkpoint("stage-2 extractor architecture differs from the configuration".into()));
            }
            let mut m = m.clone();
            m.mask = cfg.arch.head_levels.clone();
            m
        }
    };
    det.extractor.freeze_generator = cfg.freeze_generator;
    Ok(det)
}

/// Stage 3: minimize the detection loss on full-resolution images.
pub fn train_target_detector(cfg: &TrainConfig, source: DetectorSource<'_>, data: &TrainData) -> Result<DetectorOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut det = initial_detector(cfg, source)?;
    let images: Vec<Image> = data.train.samples.iter().map(|s| s.image.clone()).collect();
    let targets: Vec<DetectionTargets> = data.train.samples.iter().map(|s| s.targets.clone()).collect();
    let batcher = Batcher::new(images.len(), cfg.batch_size, derive_seed(cfg.seed, "batches"))?;
    let mut opt = Optimizer::from_config(cfg);
    let stepper = Stepper::new(cfg);
    let mut log = TrainLog::default();

    for iter in 0..cfg.iterations {
        let start = Instant::now();
        let idx = batcher.batch(iter);
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, Mode::Train);
        let (_, preds) = det.forward(ctx, graph.constant(padded_batch(&images, &idx)?))?;
        let bn = graph.take_bn_updates();
        let (loss, report) = detection_loss(&preds, &gather_targets(&targets, &idx), &cfg.arch.size_ranges)?;
        let norm = stepper.step(&graph, loss, &mut det, &mut opt, iter, "detection")?;
        det.apply_bn_updates(&bn);
        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log.push(record(3, iter, stepper.schedule.lr_at(iter), &[("det", &report)], &[("grad_norm", norm)], start));
        }
    }
    Ok(DetectorOutcome { detector: det, log })
}

/// Configuration text stored in a checkpoint, parsed back.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<TrainConfig> {
    TrainConfig::from_text(&ckpt.meta.config, ckpt.meta.stage.max(1), "checkpoint metadata")
}

/// Generator tensors from a stage-1 (`generator.*`) or stage-2/3
/// (`detector.extractor.generator.*`) checkpoint.
pub fn generator_from_checkpoint(ckpt: &Checkpoint, arch: &ArchConfig) -> Result<Generator<f32>> {
    let mut g = Generator::with_width(arch.channels, arch.generator_width, 0)?;
    for prefix in ["generator", "detector.extractor.generator"] {
        if ckpt.has_prefix(prefix) {
            ckpt.load_module(prefix, &mut g)?;
            return Ok(g);
        }
    }
    Err(Error::Checkpoint("checkpoint holds no generator tensors".into()))
}

pub fn discriminator_from_checkpoint(ckpt: &Checkpoint, arch: &ArchConfig) -> Result<Discriminator<f32>> {
    let mut d = Discriminator::with_widths(arch.channels, arch.disc_widths, 0)?;
    ckpt.load_module("discriminator", &mut d)?;
    Ok(d)
}

/// The detector stored in a stage-2 or stage-3 checkpoint.
pub fn detector_from_checkpoint(ckpt: &Checkpoint) -> Result<Detector<f32>> {
    let cfg = checkpoint_config(ckpt)?;
    let up = match ckpt.meta.upsampler.parse::<UpsamplerKind>()? {
        UpsamplerKind::Srf => Upsampler::Srf(Generator::with_width(cfg.arch.channels, cfg.arch.generator_width, 0)?),
        k => Upsampler::Naive(k.interpolation().unwrap()),
    };
    let mut det = new_detector(&cfg, up)?;
    det.extractor.freeze_generator = cfg.freeze_generator;
    ckpt.load_module("detector", &mut det)?;
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(0, "generator"), derive_seed(0, "discriminator"));
        assert_eq!(derive_seed(5, "x"), derive_seed(5, "x"));
    }
}
