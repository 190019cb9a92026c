use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use srf_core::data::{generate_synthetic, save_dataset};
use srf_core::eval::protocol::REFERENCE_NOTE;
use srf_core::eval::viz::{grid, render_feature, save_png};
use srf_core::eval::{
    compare_interpolations, evaluate_detector, extractor_l1_eval, feature_l1_eval, run_ablation, ComparisonRow,
    FeatureUpsampler, InterpComparison, Protocol, Reduction,
};
use srf_core::train::{
    degrade_all, detector_from_checkpoint, discriminator_from_checkpoint, generator_from_checkpoint, load_checkpoint,
    prepare_data, save_checkpoint, train_srf_extractor, train_srf_gan, train_target_detector, checkpoint_config,
    DetectorSource, PyramidCache, Reuse, TrainConfig, UpsamplerKind,
};
use srf_core::{EvalReport, Extractor, FeatureMap, Interpolation, Result, Runner, Suite};

#[derive(Parser)]
#[command(name = "srf", version, about = "Train and evaluate feature pyramids with learned feature upsampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: pretrain the feature generator and discriminator.
    PretrainGan(Common),
    /// Stage 2: adversarially train an extractor with the generator in every merge.
    TrainExtractor(Common),
    /// Stage 3: train a detector on full-resolution images.
    TrainDetector(Common),
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Held-out feature L1 of interpolation methods and a trained generator.
    CompareInterp {
        #[command(flatten)]
        common: Common,
        /// Stage-1 (or later) checkpoint holding the generator.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train every model inline and add detector AP rows.
        #[arg(long)]
        full: bool,
    },
    /// Run an ablation protocol end to end.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// a_suite, semantic_level or degradation.
        #[arg(long)]
        protocol: String,
        /// Comma-separated seeds; the summary reports medians.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Render a pyramid level as a heatmap.
    Viz {
        #[command(flatten)]
        common: Common,
        /// Detector checkpoint whose extractor produces the features.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generator checkpoint; adds a comparison grid of upsamplers.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        level: usize,
        /// Index into the held-out split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "channel_mean")]
        reduction: String,
        #[arg(long, default_value_t = 8)]
        scale: u32,
    },
    /// Write the synthetic dataset as PNG files plus annotations.
    MakeSynthetic(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn overrides(common: &Common) -> Result<Vec<(String, String)>> {
    common
        .set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| srf_core::Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))
        })
        .collect()
}

fn load_config(common: &Common, stage: u8) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_file(p, stage)?,
        None => TrainConfig::for_stage(stage)?,
    };
    if cfg.stage != stage {
        return Err(srf_core::Error::Config(format!("configuration is for stage {}, command runs stage {stage}", cfg.stage)));
    }
    for (k, v) in overrides(common)? {
        cfg.set(&k, &v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_suite(common: &Common, seed: Option<u64>) -> Result<Suite> {
    let mut suite = Suite::new(0)?;
    if let Some(p) = &common.config {
        let text = std::fs::read_to_string(p).map_err(|_| srf_core::Error::MissingFile(p.clone()))?;
        suite.apply_text(&text, &p.display().to_string())?;
    }
    for (k, v) in overrides(common)? {
        suite.set(&k, &v)?;
    }
    if let Some(s) = seed.or(common.seed) {
        suite = suite.with_seed(s);
    }
    suite.validate()?;
    Ok(suite)
}

fn required<'a>(v: &'a Option<String>, key: &str) -> Result<&'a Path> {
    v.as_deref()
        .map(Path::new)
        .ok_or_else(|| srf_core::Error::Config(format!("'{key}' must name a checkpoint")))
}

fn target_extractor(cfg: &TrainConfig) -> Result<Extractor<f32>> {
    let ckpt = load_checkpoint(required(&cfg.target_extractor, "target_extractor")?)?;
    Ok(detector_from_checkpoint(&ckpt)?.extractor)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    let start = Instant::now();
    match cmd {
        Command::PretrainGan(common) => {
            let mut cfg = load_config(&common, 1)?;
            let out = common.out.join("stage1.ckpt");
            cfg.checkpoint_out.get_or_insert_with(|| out.display().to_string());
            let f = target_extractor(&cfg)?;
            let data = prepare_data(&cfg)?;
            let result = train_srf_gan(&cfg, &f, &data)?;
            save_checkpoint(Path::new(cfg.checkpoint_out.as_ref().unwrap()), &result.checkpoint(&cfg))?;
            result.log.write(&common.out.join("stage1.jsonl"))?;
            println!("stage 1 finished: {} iterations, final l1 {:?}", cfg.iterations, result.log.last("l1"));
        }
        Command::TrainExtractor(common) => {
            let mut cfg = load_config(&common, 2)?;
            let out = common.out.join("stage2.ckpt");
            cfg.checkpoint_out.get_or_insert_with(|| out.display().to_string());
            let f = target_extractor(&cfg)?;
            let init = load_checkpoint(required(&cfg.init_checkpoint, "init_checkpoint")?)?;
            let g0 = generator_from_checkpoint(&init, &cfg.arch)?;
            let d0 = discriminator_from_checkpoint(&init, &cfg.arch)?;
            let data = prepare_data(&cfg)?;
            let result = train_srf_extractor(&cfg, &f, &g0, &d0, &data)?;
            save_checkpoint(Path::new(cfg.checkpoint_out.as_ref().unwrap()), &result.checkpoint(&cfg))?;
            result.log.write(&common.out.join("stage2.jsonl"))?;
            for w in &result.log.warnings {
                eprintln!("warning: {w}");
            }
            println!("stage 2 finished: {} iterations", cfg.iterations);
        }
        Command::TrainDetector(common) => {
            let mut cfg = load_config(&common, 3)?;
            let out = common.out.join("stage3.ckpt");
            cfg.checkpoint_out.get_or_insert_with(|| out.display().to_string());
            let data = prepare_data(&cfg)?;
            let init = match cfg.reuse {
                Reuse::None => None,
                _ => Some(load_checkpoint(required(&cfg.init_checkpoint, "init_checkpoint")?)?),
            };
            let result = match (cfg.reuse, &init) {
                (Reuse::G, Some(c)) => {
                    let g = generator_from_checkpoint(c, &cfg.arch)?;
                    train_target_detector(&cfg, DetectorSource::G(&g), &data)?
                }
                (Reuse::M, Some(c)) => {
                    let m = detector_from_checkpoint(c)?;
                    train_target_detector(&cfg, DetectorSource::M(&m), &data)?
                }
                _ => train_target_detector(&cfg, DetectorSource::None, &data)?,
            };
            save_checkpoint(Path::new(cfg.checkpoint_out.as_ref().unwrap()), &result.checkpoint(&cfg))?;
            result.log.write(&common.out.join("stage3.jsonl"))?;
            let mut report = EvalReport::new("detector", cfg.hash(), cfg.seed);
            report.ap = Some(evaluate_detector(&result.detector, &data.val, &cfg.decode)?);
            report.write(&common.out.join("stage3_eval.json"))?;
            print!("{}", report.table());
        }
        Command::Eval { common, checkpoint } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut cfg = checkpoint_config(&ckpt)?;
            for (k, v) in overrides(&common)? {
                cfg.set(&k, &v)?;
            }
            let data = prepare_data(&cfg)?;
            let mut report = EvalReport::new(format!("stage{}", ckpt.meta.stage), ckpt.meta.config_hash.clone(), cfg.seed);
            if ckpt.meta.stage == 1 {
                let f = target_extractor(&cfg)?;
                let g = generator_from_checkpoint(&ckpt, &cfg.arch)?;
                let val = data.val.images();
                let low = degrade_all(&val, cfg.s, cfg.degradation)?;
                let low = PyramidCache::compute(&f, &low.iter().collect::<Vec<_>>())?;
                report.feature_l1 = feature_l1_eval(FeatureUpsampler::Srf(&g), &low, &PyramidCache::compute(&f, &val)?)?;
            } else {
                let det = detector_from_checkpoint(&ckpt)?;
                report.ap = Some(evaluate_detector(&det, &data.val, &cfg.decode)?);
                if ckpt.meta.stage == 2 && cfg.target_extractor.is_some() {
                    let f = target_extractor(&cfg)?;
                    let val = data.val.images();
                    let low = degrade_all(&val, cfg.s, cfg.degradation)?;
                    let target = PyramidCache::compute(&f, &val)?.downsampled(cfg.s)?;
                    report.feature_l1 = extractor_l1_eval(&det.extractor, &low, &target)?;
                }
            }
            report.wall_ms = start.elapsed().as_millis() as u64;
            report.write(&common.out.join("eval.json"))?;
            print!("{}", report.table());
        }
        Command::CompareInterp { common, checkpoint, full } => {
            let cmp = if full {
                let mut runner = Runner::new(load_suite(&common, None)?)?;
                compare_interpolations(&mut runner, UpsamplerKind::ALL, true)?
            } else {
                let path = checkpoint.ok_or_else(|| {
                    srf_core::Error::Config("compare-interp needs --checkpoint with a trained generator (or --full)".into())
                })?;
                let ckpt = load_checkpoint(&path)?;
                let mut cfg = checkpoint_config(&ckpt)?;
                for (k, v) in overrides(&common)? {
                    cfg.set(&k, &v)?;
                }
                let f = target_extractor(&cfg)?;
                let g = generator_from_checkpoint(&ckpt, &cfg.arch)?;
                let data = prepare_data(&cfg)?;
                let val = data.val.images();
                let low = degrade_all(&val, cfg.s, cfg.degradation)?;
                let low = PyramidCache::compute(&f, &low.iter().collect::<Vec<_>>())?;
                let target = PyramidCache::compute(&f, &val)?;
                let mut rows = Vec::new();
                for kind in UpsamplerKind::ALL {
                    let up = match kind.interpolation() {
                        Some(m) => FeatureUpsampler::Interp(m),
                        None => FeatureUpsampler::Srf(&g),
                    };
                    let mut r = EvalReport::new(kind.name(), ckpt.meta.config_hash.clone(), cfg.seed);
                    r.feature_l1 = feature_l1_eval(up, &low, &target)?;
                    rows.push(ComparisonRow { method: kind.name().into(), report: r });
                }
                InterpComparison { seed: cfg.seed, rows, reference: REFERENCE_NOTE.into() }
            };
            cmp.write(&common.out, "compare_interp")?;
            print!("{}", cmp.table());
        }
        Command::Ablate { common, protocol, seeds } => {
            let protocol: Protocol = protocol.parse()?;
            let seeds = if seeds.is_empty() { vec![common.seed.unwrap_or(0)] } else { seeds };
            let mut reports = Vec::new();
            for &seed in &seeds {
                let mut runner = Runner::new(load_suite(&common, Some(seed))?)?;
                let report = run_ablation(&mut runner, protocol)?;
                report.write(&common.out, &format!("ablation_seed{seed}"))?;
                for (name, log) in &runner.logs {
                    log.write(&common.out.join(format!("logs_seed{seed}")).join(format!("{name}.jsonl")))?;
                }
                print!("{}", report.table());
                reports.push(report);
            }
            if reports.len() > 1 {
                let summary = srf_core::eval::protocol::median_summary(&reports);
                write(&common.out.join("ablation_median.txt"), &summary)?;
                print!("{summary}");
            }
        }
        Command::Viz { common, checkpoint, compare, level, index, reduction, scale } => {
            let reduction: Reduction = reduction.parse()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut cfg = checkpoint_config(&ckpt)?;
            for (k, v) in overrides(&common)? {
                cfg.set(&k, &v)?;
            }
            let det = detector_from_checkpoint(&ckpt)?;
            let data = prepare_data(&cfg)?;
            let sample = data.val.samples.get(index).ok_or_else(|| {
                srf_core::Error::Config(format!("index {index} outside the held-out split of {}", data.val.len()))
            })?;
            let li = level.checked_sub(2).filter(|&l| l < 4).ok_or_else(|| {
                srf_core::Error::Config(format!("level must be 2 to 5, got {level}"))
            })?;
            let pyr = det.extractor.pyramid_tensors(&sample.image.tensor().reshape(&[1, 3, sample.image.height, sample.image.width])?)?;
            let target = FeatureMap::new(pyr[li].batch_item(0), level)?;
            let mut panels = vec![render_feature(&target, reduction, scale)];
            if let Some(gpath) = compare {
                let g = generator_from_checkpoint(&load_checkpoint(&gpath)?, &cfg.arch)?;
                let low = degrade_all(&[&sample.image], cfg.s, cfg.degradation)?;
                let low = det.extractor.pyramid_tensors(&low[0].tensor().reshape(&[1, 3, low[0].height, low[0].width])?)?;
                let x = low[li].batch_item(0);
                let ups = [
                    FeatureUpsampler::Interp(Interpolation::Nearest),
                    FeatureUpsampler::Interp(Interpolation::Bilinear),
                    FeatureUpsampler::Interp(Interpolation::Bicubic),
                    FeatureUpsampler::Srf(&g),
                ];
                for up in ups {
                    panels.push(render_feature(&FeatureMap::new(up.apply(&x, level)?, level)?, reduction, scale));
                }
            }
            let path = common.out.join(format!("p{level}_{index}.png"));
            save_png(&grid(&panels), &path)?;
            println!("wrote {}", path.display());
        }
        Command::MakeSynthetic(common) => {
            let cfg = load_config(&common, 3)?;
            let ds = generate_synthetic(cfg.synthetic_images, cfg.image_size, cfg.synthetic_seed)?;
            let ann = save_dataset(&ds, &common.out)?;
            println!("wrote {} images and {}", ds.len(), ann.display());
        }
    }
    eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
