//! Training configuration and its flat `key = value` text format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::head::{DecodeParams, HeadConfig, LevelMask, SizeRanges};
use crate::ops::Interpolation;

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let lower = s.trim().to_ascii_lowercase();
                $(if lower == $text { return Ok($name::$variant); })+
                Err(Error::Config(format!(
                    "unknown {} '{s}' (expected one of: {})",
                    stringify!($name),
                    [$($text),+].join(", ")
                )))
            }
        }
    };
}

keyword_enum!(
    /// Top-down upsampler of the extractor being trained.
    UpsamplerKind { Nearest => "nearest", Bilinear => "bilinear", Bicubic => "bicubic", Srf => "srf" }
);

keyword_enum!(
    /// What a detector-stage run initializes from.
    Reuse { None => "none", G => "g", M => "m" }
);

keyword_enum!(
    /// How extractor-stage features are paired with targets.
    SemanticLevelMode { Matched => "matched", Mismatched => "mismatched" }
);

keyword_enum!(
    OptimizerKind { Sgd => "sgd", Adam => "adam" }
);

keyword_enum!(
    Ablation { None => "none", A1 => "a1", A2 => "a2", A3 => "a3", A4 => "a4", A5 => "a5" }
);

impl UpsamplerKind {
    pub fn interpolation(self) -> Option<Interpolation> {
        match self {
            UpsamplerKind::Nearest => Some(Interpolation::Nearest),
            UpsamplerKind::Bilinear => Some(Interpolation::Bilinear),
            UpsamplerKind::Bicubic => Some(Interpolation::Bicubic),
            UpsamplerKind::Srf => None,
        }
    }
}

impl Ablation {
    /// Detector-stage settings of a progressive-learning variant: A1 is the
    /// nearest-neighbour baseline, A2 reuses the pretrained generator, A4 and
    /// A5 reuse the generator of the adversarially trained extractor (frozen
    /// and fine-tuned). A3 evaluates that extractor directly and trains nothing.
    pub fn apply_preset(self, cfg: &mut TrainConfig) {
        let (upsampler, reuse, freeze) = match self {
            Ablation::None | Ablation::A3 => return,
            Ablation::A1 => (UpsamplerKind::Nearest, Reuse::None, false),
            Ablation::A2 | Ablation::A5 => (UpsamplerKind::Srf, Reuse::G, false),
            Ablation::A4 => (UpsamplerKind::Srf, Reuse::G, true),
        };
        cfg.upsampler = upsampler;
        cfg.reuse = reuse;
        cfg.freeze_generator = freeze;
    }
}

/// Network sizes. `full_scale` mirrors the published widths; `desk` shrinks
/// everything so the three stages run on one CPU core in minutes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub channels: usize,
    pub generator_width: usize,
    pub disc_widths: [usize; 3],
    pub stem_width: usize,
    pub stage_widths: [usize; 4],
    pub num_classes: usize,
    pub size_ranges: SizeRanges,
    pub head_levels: LevelMask,
}

impl ArchConfig {
    pub fn full_scale() -> Self {
        ArchConfig {
            channels: 256,
            generator_width: 256,
            disc_widths: [512, 1024, 1024],
            stem_width: 32,
            stage_widths: [32, 64, 128, 256],
            num_classes: 3,
            size_ranges: SizeRanges::FULL_SCALE,
            head_levels: LevelMask::all(),
        }
    }

    pub fn desk() -> Self {
        ArchConfig {
            channels: 16,
            generator_width: 64,
            disc_widths: [32, 64, 64],
            stem_width: 8,
            stage_widths: [16, 32, 64, 64],
            num_classes: 3,
            size_ranges: SizeRanges::DESK,
            head_levels: LevelMask::all(),
        }
    }

    pub fn extractor(&self) -> ExtractorConfig {
        ExtractorConfig { channels: self.channels, stem_width: self.stem_width, stage_widths: self.stage_widths }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig { channels: self.channels, num_classes: self.num_classes, ranges: self.size_ranges }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage: u8,
    /// `synthetic` or a COCO-style annotation file.
    pub dataset: String,
    /// Directory image file names are relative to (defaults to the annotation file's).
    pub dataset_root: Option<String>,
    pub synthetic_images: usize,
    pub synthetic_seed: u64,
    pub image_size: usize,
    /// Held-out images taken from the end of the dataset.
    pub val_images: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub grad_clip: f64,
    pub lambda: f64,
    pub s: f64,
    pub degradation: Interpolation,
    pub upsampler: UpsamplerKind,
    pub reuse: Reuse,
    pub freeze_generator: bool,
    pub semantic_level_mode: SemanticLevelMode,
    pub ablation: Ablation,
    /// Checkpoint holding the frozen target extractor.
    pub target_extractor: Option<String>,
    /// Checkpoint the run initializes from (stage-1 output for stage 2, reuse source for stage 3).
    pub init_checkpoint: Option<String>,
    pub checkpoint_out: Option<String>,
    pub log_every: usize,
    pub arch: ArchConfig,
    pub decode: DecodeParams,
}

impl TrainConfig {
    /// Desk-scale defaults for a stage.
    pub fn for_stage(stage: u8) -> Result<Self> {
        let (iterations, lr, milestones) = match stage {
            1 => (2000, 0.1, vec![1600]),
            2 => (4000, 0.02, vec![3120, 3720]),
            3 => (4000, 0.01, vec![3000, 3600]),
            _ => return Err(Error::Config(format!("stage must be 1, 2 or 3, got {stage}"))),
        };
        Ok(TrainConfig {
            seed: 0,
            stage,
            dataset: "synthetic".into(),
            dataset_root: None,
            synthetic_images: 600,
            synthetic_seed: 0,
            image_size: 64,
            val_images: 100,
            iterations,
            batch_size: 8,
            lr,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones,
            decay_factor: 0.1,
            grad_clip: 10.0,
            lambda: crate::losses::DEFAULT_LAMBDA,
            s: 0.5,
            degradation: Interpolation::Bilinear,
            upsampler: if stage == 3 { UpsamplerKind::Nearest } else { UpsamplerKind::Srf },
            reuse: Reuse::None,
            freeze_generator: false,
            semantic_level_mode: SemanticLevelMode::Matched,
            ablation: Ablation::None,
            target_extractor: None,
            init_checkpoint: None,
            checkpoint_out: None,
            log_every: 1,
            arch: ArchConfig::desk(),
            decode: DecodeParams::default(),
        })
    }

    /// Change the iteration budget, keeping milestones at the same fractions.
    pub fn rescale_iterations(&mut self, iterations: usize) {
        let old = self.iterations.max(1) as f64;
        self.milestones = self
            .milestones
            .iter()
            .map(|&m| ((m as f64 / old) * iterations as f64).round() as usize)
            .collect();
        self.iterations = iterations;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.stage) {
            return bad(format!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} are not strictly increasing", self.milestones));
        }
        if self.milestones.iter().any(|&m| m >= self.iterations) {
            return bad(format!("milestones {:?} must be below iterations {}", self.milestones, self.iterations));
        }
        if !(self.s > 0.0 && self.s < 1.0) {
            return bad(format!("s = {} outside (0, 1)", self.s));
        }
        if self.reuse == Reuse::M && self.stage != 3 {
            return bad("reuse = m is only valid for stage 3".into());
        }
        if self.reuse == Reuse::G && self.upsampler != UpsamplerKind::Srf {
            return bad("reuse = g needs upsampler = srf".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("lr must be positive, momentum in [0, 1), weight_decay non-negative".into());
        }
        if !(self.decay_factor > 0.0) || !(self.grad_clip > 0.0) || !(self.lambda >= 0.0) {
            return bad("decay_factor and grad_clip must be positive, lambda non-negative".into());
        }
        if self.arch.channels == 0 || self.arch.generator_width == 0 || self.arch.num_classes == 0 {
            return bad("channels, generator_width and num_classes must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        let err = |e: String| Error::Config(format!("{key} = {value}: {e}"));
        fn num<V: FromStr>(v: &str) -> std::result::Result<V, String>
        where
            V::Err: fmt::Display,
        {
            v.parse::<V>().map_err(|e| e.to_string())
        }
        fn list<V: FromStr>(v: &str) -> std::result::Result<Vec<V>, String>
        where
            V::Err: fmt::Display,
        {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|p| num(p.trim())).collect()
        }
        fn array<const N: usize>(v: &str) -> std::result::Result<[usize; N], String> {
            let items: Vec<usize> = list(v)?;
            items.try_into().map_err(|items: Vec<usize>| format!("expected {N} values, got {}", items.len()))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(format!("expected true or false, got '{v}'")),
            }
        }
        fn path(v: &str) -> Option<String> {
            (!v.is_empty() && v != "none").then(|| v.to_string())
        }
        match key {
            "seed" => self.seed = num(value).map_err(err)?,
            "stage" => self.stage = num(value).map_err(err)?,
            "dataset" => self.dataset = value.to_string(),
            "dataset_root" => self.dataset_root = path(value),
            "synthetic_images" => self.synthetic_images = num(value).map_err(err)?,
            "synthetic_seed" => self.synthetic_seed = num(value).map_err(err)?,
            "image_size" => self.image_size = num(value).map_err(err)?,
            "val_images" => self.val_images = num(value).map_err(err)?,
            "iterations" => self.iterations = num(value).map_err(err)?,
            "batch_size" => self.batch_size = num(value).map_err(err)?,
            "lr" => self.lr = num(value).map_err(err)?,
            "optimizer" => self.optimizer = value.parse()?,
            "momentum" => self.momentum = num(value).map_err(err)?,
            "weight_decay" => self.weight_decay = num(value).map_err(err)?,
            "milestones" => self.milestones = list(value).map_err(err)?,
            "decay_factor" => self.decay_factor = num(value).map_err(err)?,
            "grad_clip" => self.grad_clip = num(value).map_err(err)?,
            "lambda" => self.lambda = num(value).map_err(err)?,
            "s" => self.s = num(value).map_err(err)?,
            "degradation" => self.degradation = value.parse().map_err(|e: Error| err(e.to_string()))?,
            "upsampler" => self.upsampler = value.parse()?,
            "reuse" => self.reuse = value.parse()?,
            "freeze_generator" => self.freeze_generator = flag(value).map_err(err)?,
            "semantic_level_mode" => self.semantic_level_mode = value.parse()?,
            "ablation" => {
                self.ablation = value.parse()?;
                self.ablation.apply_preset(self);
            }
            "target_extractor" => self.target_extractor = path(value),
            "init_checkpoint" => self.init_checkpoint = path(value),
            "checkpoint_out" => self.checkpoint_out = path(value),
            "log_every" => self.log_every = num(value).map_err(err)?,
            "channels" => self.arch.channels = num(value).map_err(err)?,
            "generator_width" => self.arch.generator_width = num(value).map_err(err)?,
            "disc_widths" => self.arch.disc_widths = array(value).map_err(err)?,
            "stem_width" => self.arch.stem_width = num(value).map_err(err)?,
            "stage_widths" => self.arch.stage_widths = array(value).map_err(err)?,
            "num_classes" => self.arch.num_classes = num(value).map_err(err)?,
            "size_ranges" => {
                let v: Vec<f64> = list(value).map_err(err)?;
                let v: [f64; 3] = v.try_into().map_err(|_| err("expected 3 values".into()))?;
                self.arch.size_ranges = SizeRanges(v);
            }
            "head_levels" => self.arch.head_levels = LevelMask::new(list::<usize>(value).map_err(err)?)?,
            "score_threshold" => self.decode.score_threshold = num(value).map_err(err)?,
            "nms_iou" => self.decode.nms_iou = num(value).map_err(err)?,
            "max_detections" => self.decode.max_detections = num(value).map_err(err)?,
            "preset" => match value {
                "desk" => self.arch = ArchConfig::desk(),
                "full" => self.arch = ArchConfig::full_scale(),
                _ => return Err(err("expected desk or full".into())),
            },
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Apply every assignment in a config text. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected 'key = value', got '{line}'", i + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("{source}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Defaults for `stage` (or the file's own `stage` key), then the file.
    pub fn from_file(path: &Path, stage: u8) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_text(&text, stage, &path.display().to_string())
    }

    pub fn from_text(text: &str, stage: u8, source: &str) -> Result<Self> {
        let mut stage = stage;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() == "stage" {
                    stage = v.trim().parse().map_err(|_| Error::Config(format!("{source}: bad stage '{}'", v.trim())))?;
                }
            }
        }
        let mut cfg = Self::for_stage(stage)?;
        cfg.apply_text(text, source)?;
        Ok(cfg)
    }

    /// Every key with its current value, in the same format the parser reads.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| "none".into());
        let a = &self.arch;
        let lines = [
            format!("seed = {}", self.seed),
            format!("stage = {}", self.stage),
            format!("dataset = {}", self.dataset),
            format!("dataset_root = {}", opt(&self.dataset_root)),
            format!("synthetic_images = {}", self.synthetic_images),
            format!("synthetic_seed = {}", self.synthetic_seed),
            format!("image_size = {}", self.image_size),
            format!("val_images = {}", self.val_images),
            format!("iterations = {}", self.iterations),
            format!("batch_size = {}", self.batch_size),
            format!("lr = {}", self.lr),
            format!("optimizer = {}", self.optimizer),
            format!("momentum = {}", self.momentum),
            format!("weight_decay = {}", self.weight_decay),
            format!("milestones = {}", join(&self.milestones)),
            format!("decay_factor = {}", self.decay_factor),
            format!("grad_clip = {}", self.grad_clip),
            format!("lambda = {}", self.lambda),
            format!("s = {}", self.s),
            format!("degradation = {}", self.degradation),
            format!("upsampler = {}", self.upsampler),
            format!("reuse = {}", self.reuse),
            format!("freeze_generator = {}", self.freeze_generator),
            format!("semantic_level_mode = {}", self.semantic_level_mode),
            format!("ablation = {}", self.ablation),
            format!("target_extractor = {}", opt(&self.target_extractor)),
            format!("init_checkpoint = {}", opt(&self.init_checkpoint)),
            format!("checkpoint_out = {}", opt(&self.checkpoint_out)),
            format!("log_every = {}", self.log_every),
            format!("channels = {}", a.channels),
            format!("generator_width = {}", a.generator_width),
            format!("disc_widths = {}", join(&a.disc_widths)),
            format!("stem_width = {}", a.stem_width),
            format!("stage_widths = {}", join(&a.stage_widths)),
            format!("num_classes = {}", a.num_classes),
            format!("size_ranges = {},{},{}", a.size_ranges.0[0], a.size_ranges.0[1], a.size_ranges.0[2]),
            format!("head_levels = {}", join(&a.head_levels.iter().collect::<Vec<_>>())),
            format!("score_threshold = {}", self.decode.score_threshold),
            format!("nms_iou = {}", self.decode.nms_iou),
            format!("max_detections = {}", self.decode.max_detections),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}
