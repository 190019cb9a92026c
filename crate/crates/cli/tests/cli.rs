use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
synthetic_images = 16
val_images = 4
image_size = 64
batch_size = 2
iterations = 4
milestones = 3
log_every = 1
channels = 4
generator_width = 4
disc_widths = 4,4,4
stem_width = 4
stage_widths = 4,4,4,4
";

fn srf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srf")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = srf(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

/// Log lines with the wall-clock field removed.
fn log_without_timing(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            if let Some(o) = v.as_object_mut() {
                o.remove("wall_ms");
            }
            v
        })
        .collect()
}

#[test]
fn make_synthetic_writes_images_and_annotations() {
    let dir = setup();
    let out = ok(dir.path(), &["make-synthetic", "--config", "tiny.cfg", "--out", "ds"]);
    assert!(out.contains("wrote 16 images"), "{out}");
    let pngs = std::fs::read_dir(dir.path().join("ds"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert!(pngs >= 16, "{pngs} png files");
}

#[test]
fn unknown_key_exits_with_one() {
    let dir = setup();
    let out = srf(dir.path(), &["train-detector", "--set", "no_such_key=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = srf(dir.path(), &["eval", "--checkpoint", "missing.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two() {
    let dir = setup();
    let out = srf(
        dir.path(),
        &["train-detector", "--config", "tiny.cfg", "--set", "lr=1e30", "--set", "grad_clip=1e30", "--out", "run"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn three_stages_then_eval() {
    let dir = setup();
    let d = dir.path();
    let base = ["--config", "tiny.cfg"];
    let run = |args: &[&str]| ok(d, &[args, &base[..]].concat());

    let out = run(&["train-detector", "--out", "f"]);
    assert!(out.contains("AP "), "{out}");
    assert!(d.join("f/stage3.ckpt").exists() && d.join("f/stage3_eval.json").exists());

    let stage1 = ["pretrain-gan", "--out", "s1", "--set", "target_extractor=f/stage3.ckpt"];
    run(&stage1);
    let first = std::fs::read(d.join("s1/stage1.ckpt")).unwrap();
    let first_log = log_without_timing(&d.join("s1/stage1.jsonl"));
    run(&stage1);
    assert_eq!(first, std::fs::read(d.join("s1/stage1.ckpt")).unwrap());
    assert_eq!(first_log, log_without_timing(&d.join("s1/stage1.jsonl")));

    run(&[
        "train-extractor",
        "--out",
        "s2",
        "--set",
        "target_extractor=f/stage3.ckpt",
        "--set",
        "init_checkpoint=s1/stage1.ckpt",
    ]);
    assert!(d.join("s2/stage2.ckpt").exists());

    run(&["train-detector", "--out", "s3", "--set", "ablation=A5", "--set", "init_checkpoint=s2/stage2.ckpt"]);
    let out = ok(d, &["eval", "--checkpoint", "s3/stage3.ckpt", "--out", "e3"]);
    assert!(out.contains("AP50"), "{out}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e3/eval.json")).unwrap()).unwrap();
    let ap = report["ap"]["ap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap));

    let out = ok(d, &["eval", "--checkpoint", "s1/stage1.ckpt", "--out", "e1"]);
    assert!(out.contains("L1 P2") && out.contains("L1 P5"), "{out}");

    let out = ok(d, &["compare-interp", "--checkpoint", "s1/stage1.ckpt", "--out", "cmp"]);
    for m in ["nearest", "bilinear", "bicubic", "srf"] {
        assert!(out.contains(m), "{out}");
    }
    assert!(d.join("cmp/compare_interp.json").exists());

    let out = ok(
        d,
        &["viz", "--checkpoint", "f/stage3.ckpt", "--compare", "s1/stage1.ckpt", "--level", "3", "--out", "viz"],
    );
    assert!(out.contains("p3_0.png"));
    let img = image::open(d.join("viz/p3_0.png"));
    assert!(img.is_ok());
}

#[test]
fn ablation_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    let args = ["ablate", "--protocol", "semantic_level", "--config", "tiny.cfg", "--seeds", "3"];
    ok(d, &[&args[..], &["--out", "a"]].concat());
    ok(d, &[&args[..], &["--out", "b"]].concat());
    let strip = |p: &str| {
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join(p)).unwrap()).unwrap();
        for row in v["rows"].as_array_mut().unwrap() {
            row.as_object_mut().unwrap().remove("wall_ms");
        }
        v
    };
    assert_eq!(strip("a/ablation_seed3.json"), strip("b/ablation_seed3.json"));
    assert_eq!(
        log_without_timing(&d.join("a/logs_seed3/stage2_matched.jsonl")),
        log_without_timing(&d.join("b/logs_seed3/stage2_matched.jsonl"))
    );
}
