//! Multi-run experiments: progressive-learning ablations, semantic-level
//! matching, degradation sensitivity and interpolation comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate_detector, extractor_l1_eval, feature_l1_eval, write_text, EvalReport, FeatureUpsampler};
use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::head::Detector;
use crate::ops::Interpolation;
use crate::pyramid::Image;
use crate::train::{
    degrade_all, prepare_data, train_srf_extractor_on, train_srf_gan_on, train_target_detector, Ablation,
    DetectorSource, ExtractorData, ExtractorOutcome, GanFeatures, GanOutcome, PyramidCache, Reuse,
    SemanticLevelMode, TrainConfig, TrainData, TrainLog, UpsamplerKind,
};

/// Per-stage configurations of one experiment. Keys given as `stageN.key`
/// apply to one stage, bare keys to all three.
#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub stages: [TrainConfig; 3],
}

impl Suite {
    pub fn new(seed: u64) -> Result<Self> {
        let mut stages = [TrainConfig::for_stage(1)?, TrainConfig::for_stage(2)?, TrainConfig::for_stage(3)?];
        for c in &mut stages {
            c.seed = seed;
        }
        Ok(Suite { stages })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key.split_once('.') {
            Some((stage, k)) => {
                let i = match stage {
                    "stage1" => 0,
                    "stage2" => 1,
                    "stage3" => 2,
                    _ => return Err(Error::Config(format!("unknown stage prefix in '{key}'"))),
                };
                self.stages[i].set(k, value)
            }
            None => self.stages.iter_mut().try_for_each(|c| c.set(key, value)),
        }
    }

    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected 'key = value'", i + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("{source}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        for c in &mut s.stages {
            c.seed = seed;
        }
        s
    }

    pub fn stage(&self, n: u8) -> &TrainConfig {
        &self.stages[n as usize - 1]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.stages.iter().enumerate() {
            if c.stage as usize != i + 1 {
                return Err(Error::Config(format!("stage{} configuration has stage = {}", i + 1, c.stage)));
            }
            c.validate()?;
        }
        let [a, b, c] = &self.stages;
        for other in [b, c] {
            let same = a.seed == other.seed
                && a.dataset == other.dataset
                && a.dataset_root == other.dataset_root
                && a.synthetic_images == other.synthetic_images
                && a.synthetic_seed == other.synthetic_seed
                && a.image_size == other.image_size
                && a.val_images == other.val_images
                && a.arch == other.arch;
            if !same {
                return Err(Error::Config("seed, data and architecture keys must agree across stages".into()));
            }
        }
        Ok(())
    }
}

/// Memoized training runs of one seed, shared between protocols.
pub struct Runner {
    pub suite: Suite,
    pub data: TrainData,
    baselines: BTreeMap<&'static str, Detector<f32>>,
    train_target: Option<PyramidCache>,
    val_target: Option<PyramidCache>,
    gans: BTreeMap<&'static str, GanOutcome>,
    stage2: BTreeMap<&'static str, ExtractorOutcome>,
    rows: BTreeMap<&'static str, EvalReport>,
    /// Every training log produced, by run name.
    pub logs: Vec<(String, TrainLog)>,
}

impl Runner {
    pub fn new(suite: Suite) -> Result<Self> {
        suite.validate()?;
        let data = prepare_data(suite.stage(3))?;
        Ok(Runner {
            suite,
            data,
            baselines: BTreeMap::new(),
            train_target: None,
            val_target: None,
            gans: BTreeMap::new(),
            stage2: BTreeMap::new(),
            rows: BTreeMap::new(),
            logs: Vec::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.suite.stage(1).seed
    }

    fn val_images(&self) -> Vec<&Image> {
        self.data.val.images()
    }

    /// Detector trained from scratch with a fixed interpolation upsampler.
    pub fn baseline(&mut self, kind: UpsamplerKind) -> Result<&Detector<f32>> {
        if kind == UpsamplerKind::Srf {
            return Err(Error::invalid("baseline detectors use a fixed interpolation"));
        }
        if !self.baselines.contains_key(kind.name()) {
            let mut cfg = self.suite.stage(3).clone();
            cfg.upsampler = kind;
            cfg.reuse = Reuse::None;
            let out = train_target_detector(&cfg, DetectorSource::None, &self.data)?;
            self.logs.push((format!("baseline_{}", kind.name()), out.log));
            self.baselines.insert(kind.name(), out.detector);
        }
        Ok(&self.baselines[kind.name()])
    }

    /// The frozen extractor whose features serve as targets: the nearest
    /// baseline's.
    pub fn frozen_extractor(&mut self) -> Result<&Extractor<f32>> {
        Ok(&self.baseline(UpsamplerKind::Nearest)?.extractor)
    }

    fn ensure_targets(&mut self) -> Result<()> {
        if self.train_target.is_none() {
            self.frozen_extractor()?;
            let f = &self.baselines["nearest"].extractor;
            self.train_target = Some(PyramidCache::compute(f, &self.data.train.images())?);
            self.val_target = Some(PyramidCache::compute(f, &self.val_images())?);
        }
        Ok(())
    }

    pub fn val_target(&mut self) -> Result<&PyramidCache> {
        self.ensure_targets()?;
        Ok(self.val_target.as_ref().unwrap())
    }

    /// Held-out `P^lr` of the frozen extractor for a degradation method.
    pub fn val_low(&mut self, degradation: Interpolation) -> Result<PyramidCache> {
        let s = self.suite.stage(1).s;
        let low = degrade_all(&self.val_images(), s, degradation)?;
        let f = self.frozen_extractor()?;
        PyramidCache::compute(f, &low.iter().collect::<Vec<_>>())
    }

    /// Stage-1 outcome for a degradation method.
    pub fn gan(&mut self, degradation: Interpolation) -> Result<&GanOutcome> {
        if !self.gans.contains_key(degradation.name()) {
            self.ensure_targets()?;
            let mut cfg = self.suite.stage(1).clone();
            cfg.degradation = degradation;
            let low = degrade_all(&self.data.train.images(), cfg.s, degradation)?;
            let f = &self.baselines["nearest"].extractor;
            let feats = GanFeatures {
                target: self.train_target.clone().unwrap(),
                low: PyramidCache::compute(f, &low.iter().collect::<Vec<_>>())?,
            };
            let out = train_srf_gan_on(&cfg, &feats)?;
            self.logs.push((format!("stage1_{}", degradation.name()), out.log.clone()));
            self.gans.insert(degradation.name(), out);
        }
        Ok(&self.gans[degradation.name()])
    }

    /// Stage-2 outcome for a level pairing, from the default stage-1 run.
    pub fn stage2(&mut self, mode: SemanticLevelMode) -> Result<&ExtractorOutcome> {
        if !self.stage2.contains_key(mode.name()) {
            let mut cfg = self.suite.stage(2).clone();
            cfg.semantic_level_mode = mode;
            self.gan(cfg.degradation)?;
            let gan = &self.gans[cfg.degradation.name()];
            let prepared = ExtractorData::with_target(&cfg, &self.data.train, self.train_target.clone().unwrap())?;
            let out = train_srf_extractor_on(&cfg, &gan.generator, &gan.discriminator, &prepared)?;
            self.logs.push((format!("stage2_{}", mode.name()), out.log.clone()));
            self.stage2.insert(mode.name(), out);
        }
        Ok(&self.stage2[mode.name()])
    }

    /// Held-out L1 of an extractor on degraded images against `↓P^tr`.
    pub fn extractor_l1(&mut self, ext: &Extractor<f32>) -> Result<BTreeMap<usize, f64>> {
        let cfg = self.suite.stage(2).clone();
        let low = degrade_all(&self.val_images(), cfg.s, cfg.degradation)?;
        let target = self.val_target()?.downsampled(cfg.s)?;
        extractor_l1_eval(ext, &low, &target)
    }

    fn report(&self, name: &str, cfg: &TrainConfig) -> EvalReport {
        EvalReport::new(name, cfg.hash(), cfg.seed)
    }

    fn ap_report(&self, name: &str, cfg: &TrainConfig, det: &Detector<f32>) -> Result<EvalReport> {
        let start = Instant::now();
        let mut r = self.report(name, cfg);
        r.ap = Some(evaluate_detector(det, &self.data.val, &cfg.decode)?);
        r.wall_ms = start.elapsed().as_millis() as u64;
        Ok(r)
    }

    /// One progressive-learning variant, evaluated for AP on the held-out split.
    pub fn ablation_row(&mut self, which: Ablation) -> Result<EvalReport> {
        if let Some(r) = self.rows.get(which.name()) {
            return Ok(r.clone());
        }
        let r = self.run_ablation_row(which)?;
        self.rows.insert(which.name(), r.clone());
        Ok(r)
    }

    fn run_ablation_row(&mut self, which: Ablation) -> Result<EvalReport> {
        let mut cfg = self.suite.stage(3).clone();
        cfg.ablation = which;
        which.apply_preset(&mut cfg);
        let det = match which {
            Ablation::None => return Err(Error::invalid("no ablation selected")),
            Ablation::A1 => self.baseline(UpsamplerKind::Nearest)?.clone(),
            Ablation::A3 => {
                let m = self.stage2(SemanticLevelMode::Matched)?.detector.clone();
                return self.ap_report("A3", self.suite.stage(2), &m);
            }
            Ablation::A2 => {
                let g = self.gan(self.suite.stage(1).degradation)?.generator.clone();
                self.train_detector("A2", &cfg, DetectorSource::G(&g))?
            }
            Ablation::A4 | Ablation::A5 => {
                let m = self.stage2(SemanticLevelMode::Matched)?;
                let g = m.detector.extractor.generator().expect("stage-2 extractor has a generator").clone();
                self.train_detector(which.name(), &cfg, DetectorSource::G(&g))?
            }
        };
        self.ap_report(&which.name().to_ascii_uppercase(), &cfg, &det)
    }

    fn train_detector(&mut self, name: &str, cfg: &TrainConfig, source: DetectorSource<'_>) -> Result<Detector<f32>> {
        let out = train_target_detector(cfg, source, &self.data)?;
        self.logs.push((format!("stage3_{name}"), out.log));
        Ok(out.detector)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Progressive-learning variants A1 to A5.
    ASuite,
    SemanticLevel,
    Degradation,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "a_suite" | "a-suite" | "progressive" => Ok(Protocol::ASuite),
            "semantic_level" | "semantic-level" => Ok(Protocol::SemanticLevel),
            "degradation" => Ok(Protocol::Degradation),
            _ => Err(Error::invalid(format!("unknown protocol '{s}' (a_suite, semantic_level, degradation)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub rows: Vec<EvalReport>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn without_timing(&self) -> Self {
        AblationReport { rows: self.rows.iter().map(EvalReport::without_timing).collect(), ..self.clone() }
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:?} (seed {})\n", self.protocol, self.seed);
        let levels: Vec<usize> = self.rows.iter().flat_map(|r| r.feature_l1.keys().copied()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let _ = write!(s, "{:<22}", "variant");
        for l in &levels {
            let _ = write!(s, " {:>10}", format!("L1 P{l}"));
        }
        let _ = writeln!(s, " {:>8} {:>8} {:>8}", "AP", "AP50", "AP75");
        for r in &self.rows {
            let _ = write!(s, "{:<22}", r.name);
            for l in &levels {
                match r.feature_l1.get(l) {
                    Some(v) => {
                        let _ = write!(s, " {v:>10.5}");
                    }
                    None => {
                        let _ = write!(s, " {:>10}", "-");
                    }
                }
            }
            match &r.ap {
                Some(ap) => {
                    let _ = writeln!(s, " {:>8.4} {:>8.4} {:>8.4}", ap.ap, ap.ap50, ap.ap75);
                }
                None => {
                    let _ = writeln!(s, " {:>8} {:>8} {:>8}", "-", "-", "-");
                }
            }
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_text(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(self)?)?;
        write_text(&dir.join(format!("{stem}.txt")), &self.table())
    }
}

pub fn run_ablation(runner: &mut Runner, protocol: Protocol) -> Result<AblationReport> {
    let seed = runner.seed();
    let rows = match protocol {
        Protocol::ASuite => [Ablation::A1, Ablation::A2, Ablation::A3, Ablation::A4, Ablation::A5]
            .into_iter()
            .map(|a| runner.ablation_row(a))
            .collect::<Result<Vec<_>>>()?,
        Protocol::SemanticLevel => {
            let mut rows = Vec::new();
            for mode in SemanticLevelMode::ALL {
                let start = Instant::now();
                let m = runner.stage2(*mode)?.detector.extractor.clone();
                let mut cfg = runner.suite.stage(2).clone();
                cfg.semantic_level_mode = *mode;
                let mut r = runner.report(mode.name(), &cfg);
                r.feature_l1 = runner.extractor_l1(&m)?;
                r.wall_ms = start.elapsed().as_millis() as u64;
                rows.push(r);
            }
            rows
        }
        Protocol::Degradation => {
            let mut rows = Vec::new();
            for method in [Interpolation::Nearest, Interpolation::Bilinear, Interpolation::Bicubic] {
                let start = Instant::now();
                let g = runner.gan(method)?.generator.clone();
                let low = runner.val_low(method)?;
                let mut cfg = runner.suite.stage(1).clone();
                cfg.degradation = method;
                let mut r = runner.report(method.name(), &cfg);
                r.feature_l1 = feature_l1_eval(FeatureUpsampler::Srf(&g), &low, runner.val_target()?)?;
                r.wall_ms = start.elapsed().as_millis() as u64;
                rows.push(r);
            }
            rows
        }
    };
    Ok(AblationReport { protocol, seed, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpComparison {
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
    /// Published full-scale numbers, shown for context only.
    pub reference: String,
}

pub const REFERENCE_NOTE: &str = "published full-scale reference (ResNet-50 FPN, COCO), not reproduced here: \
nearest 38.6 box AP / 35.2 mask AP, SRF 41.2 box AP / 37.0 mask AP";

impl InterpComparison {
    pub fn row(&self, method: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.method == method).map(|r| &r.report)
    }

    pub fn without_timing(&self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| ComparisonRow { method: r.method.clone(), report: r.report.without_timing() })
            .collect();
        InterpComparison { rows, ..self.clone() }
    }

    pub fn table(&self) -> String {
        let report = AblationReport {
            protocol: Protocol::ASuite,
            seed: self.seed,
            rows: self.rows.iter().map(|r| EvalReport { name: r.method.clone(), ..r.report.clone() }).collect(),
        };
        let body = report.table();
        let body = body.split_once('\n').map_or(body.as_str(), |(_, rest)| rest);
        format!("interpolation comparison (seed {})\n{body}\n{}\n", self.seed, self.reference)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_text(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(self)?)?;
        write_text(&dir.join(format!("{stem}.txt")), &self.table())
    }
}

/// Held-out feature L1 of each method against the frozen extractor's
/// full-resolution pyramid, and detector AP when `with_ap` is set. The
/// interpolation rows train a detector with that fixed upsampler; the SRF row
/// is the fully progressive detector (generator from the adversarially
/// trained extractor, fine-tuned).
pub fn compare_interpolations(runner: &mut Runner, methods: &[UpsamplerKind], with_ap: bool) -> Result<InterpComparison> {
    let degradation = runner.suite.stage(1).degradation;
    let low = runner.val_low(degradation)?;
    let mut rows = Vec::new();
    for &kind in methods {
        let start = Instant::now();
        let cfg = runner.suite.stage(3).clone();
        let mut r = runner.report(kind.name(), &cfg);
        r.feature_l1 = match kind.interpolation() {
            Some(m) => feature_l1_eval(FeatureUpsampler::Interp(m), &low, runner.val_target()?)?,
            None => {
                let g = runner.gan(degradation)?.generator.clone();
                feature_l1_eval(FeatureUpsampler::Srf(&g), &low, runner.val_target()?)?
            }
        };
        if with_ap {
            let row = match kind {
                UpsamplerKind::Srf => runner.ablation_row(Ablation::A5)?,
                k => {
                    let det = runner.baseline(k)?.clone();
                    let mut c = cfg.clone();
                    c.upsampler = k;
                    runner.ap_report(k.name(), &c, &det)?
                }
            };
            r.ap = row.ap;
            r.config_hash = row.config_hash;
        }
        r.wall_ms = start.elapsed().as_millis() as u64;
        rows.push(ComparisonRow { method: kind.name().into(), report: r });
    }
    Ok(InterpComparison { seed: runner.seed(), rows, reference: REFERENCE_NOTE.into() })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-row medians of AP and feature L1 over several seeds.
pub fn median_summary(reports: &[AblationReport]) -> String {
    let Some(first) = reports.first() else { return String::new() };
    let seeds: Vec<String> = reports.iter().map(|r| r.seed.to_string()).collect();
    let mut s = format!("{:?}, median over seeds {}\n", first.protocol, seeds.join(","));
    for row in &first.rows {
        let rows: Vec<&EvalReport> = reports.iter().filter_map(|r| r.row(&row.name)).collect();
        let _ = write!(s, "{:<22}", row.name);
        for l in row.feature_l1.keys() {
            let mut v: Vec<f64> = rows.iter().filter_map(|r| r.feature_l1.get(l).copied()).collect();
            let _ = write!(s, " L1 P{l} {:.5}", median(&mut v));
        }
        let mut ap: Vec<f64> = rows.iter().filter_map(|r| r.ap.map(|a| a.ap)).collect();
        if !ap.is_empty() {
            let _ = write!(s, " AP {:.4}", median(&mut ap));
        }
        s.push('\n');
    }
    s
}
