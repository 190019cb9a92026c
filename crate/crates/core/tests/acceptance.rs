//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 2 to 5 and 11 are correctness properties and fail the run. The
//! desk-scale learning and direction criteria 6 to 10 are measured at the
//! pinned budgets below and reported; their outcome does not change the exit
//! status.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use srf_core::eval::protocol::median;
use srf_core::eval::{
    compare_interpolations, feature_l1_eval, run_ablation, AblationReport, FeatureUpsampler, InterpComparison, Protocol,
};
use srf_core::train::UpsamplerKind;
use srf_core::*;

#[allow(dead_code)]
#[path = "ap_oracle.rs"]
mod ap_oracle;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Iterations of stages 1, 2 and 3 for the direction criteria 7 to 10, a
/// quarter of the defaults.
const DIRECTION_BUDGET: [usize; 3] = [500, 1000, 1000];
/// The learning check runs the default configuration.
const LEARNING_ITERS: usize = 2000;
const LEARNING_IMAGES: usize = 500;
const LEARNING_RATIO: f64 = 0.5;
const DEGRADATION_SPREAD: f64 = 0.10;

/// Pass flag and detail line, or an error message.
type Outcome = std::result::Result<(bool, String), String>;

struct Line {
    id: u8,
    pass: bool,
    gating: bool,
    detail: String,
}

fn run(
    wanted: &[u8],
    id: u8,
    gating: bool,
    f: impl FnOnce() -> Outcome,
) -> Option<Line> {
    if !wanted.is_empty() && !wanted.contains(&id) {
        return None;
    }
    let start = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let line = Line { id, pass, gating, detail: format!("{} [{:.1}s]", detail, start.elapsed().as_secs_f64()) };
    println!("{} criterion {:>2}: {}", if line.pass { "PASS" } else { "FAIL" }, line.id, line.detail);
    Some(line)
}

fn within(start: Instant, limit: Duration) -> bool {
    start.elapsed() < limit
}

fn suite_checks(names: &[(&str, fn())], limit: Duration) -> Outcome {
    let start = Instant::now();
    for (name, f) in names {
        if catch_unwind(*f).is_err() {
            return Ok((false, format!("{name} failed")));
        }
    }
    let ok = within(start, limit);
    Ok((ok, format!("{} checks, {:.1}s (limit {}s)", names.len(), start.elapsed().as_secs_f64(), limit.as_secs())))
}

fn err(e: Error) -> String {
    e.to_string()
}

fn direction_suite(seed: u64) -> Result<Suite> {
    let mut suite = Suite::new(seed)?;
    for (i, &iters) in DIRECTION_BUDGET.iter().enumerate() {
        suite.stages[i].rescale_iterations(iters);
        suite.stages[i].log_every = 50;
    }
    Ok(suite)
}

fn fmt_levels(m: &BTreeMap<usize, f64>) -> String {
    m.iter().map(|(l, v)| format!("P{l} {v:.4}")).collect::<Vec<_>>().join(" ")
}

/// Everything criteria 7 to 10 need from one seed.
struct SeedResult {
    interp: InterpComparison,
    ablation: AblationReport,
    semantic: AblationReport,
    degradation: AblationReport,
}

fn seed_result(seed: u64) -> Result<SeedResult> {
    let start = Instant::now();
    let mut runner = Runner::new(direction_suite(seed)?)?;
    let interp = compare_interpolations(
        &mut runner,
        &[UpsamplerKind::Nearest, UpsamplerKind::Bilinear, UpsamplerKind::Srf],
        false,
    )?;
    let ablation = run_ablation(&mut runner, Protocol::ASuite)?;
    let semantic = run_ablation(&mut runner, Protocol::SemanticLevel)?;
    let degradation = run_ablation(&mut runner, Protocol::Degradation)?;
    eprintln!("  seed {seed} finished in {:.0}s", start.elapsed().as_secs_f64());
    Ok(SeedResult { interp, ablation, semantic, degradation })
}

fn median_of(values: impl Iterator<Item = f64>) -> f64 {
    median(&mut values.collect::<Vec<_>>())
}

fn median_levels<'a>(reports: impl Iterator<Item = &'a EvalReport> + Clone) -> BTreeMap<usize, f64> {
    let levels: Vec<usize> = reports.clone().next().map(|r| r.feature_l1.keys().copied().collect()).unwrap_or_default();
    levels
        .into_iter()
        .map(|l| (l, median_of(reports.clone().map(|r| r.feature_l1[&l]))))
        .collect()
}

fn ap_of(r: &AblationReport, name: &str) -> f64 {
    r.row(name).and_then(|x| x.ap).map_or(f64::NAN, |a| a.ap)
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let suite = Suite::new(0).map_err(err)?;
    let images = suite.stage(1).synthetic_images - suite.stage(1).val_images;
    if suite.stage(1).iterations != LEARNING_ITERS || images != LEARNING_IMAGES {
        return Err(format!("default stage 1 is {} iterations on {images} images", suite.stage(1).iterations));
    }
    let mut runner = Runner::new(suite).map_err(err)?;
    let deg = runner.suite.stage(1).degradation;
    let low = runner.val_low(deg).map_err(err)?;
    let target = runner.val_target().map_err(err)?.clone();
    let init = feature_l1_eval(FeatureUpsampler::Interp(Interpolation::Bilinear), &low, &target).map_err(err)?;
    let g = runner.gan(deg).map_err(err)?.generator.clone();
    let end = feature_l1_eval(FeatureUpsampler::Srf(&g), &low, &target).map_err(err)?;
    let ratios: BTreeMap<usize, f64> = end.iter().map(|(l, v)| (*l, v / init[l])).collect();
    let pass = ratios.values().all(|r| *r <= LEARNING_RATIO) && within(start, Duration::from_secs(30 * 60));
    Ok((
        pass,
        format!(
            "{images} training images, {LEARNING_ITERS} iterations; held-out L1 end/init {} (need <= {LEARNING_RATIO} at every level)",
            ratios.iter().map(|(l, r)| format!("P{l} {r:.3}")).collect::<Vec<_>>().join(" ")
        ),
    ))
}

fn criterion_7(results: &[SeedResult]) -> Outcome {
    let l1 = |m: &str| median_levels(results.iter().map(|r| r.interp.row(m).expect("row")));
    let (near, bil, srf) = (l1("nearest"), l1("bilinear"), l1("srf"));
    let l1_ok = srf.iter().all(|(l, v)| *v < near[l] && *v < bil[l]);
    let a1 = median_of(results.iter().map(|r| ap_of(&r.ablation, "A1")));
    let a5 = median_of(results.iter().map(|r| ap_of(&r.ablation, "A5")));
    Ok((
        l1_ok && a5 >= a1,
        format!(
            "median L1 srf [{}] nearest [{}] bilinear [{}]; median AP srf {a5:.4} vs nearest {a1:.4}",
            fmt_levels(&srf),
            fmt_levels(&near),
            fmt_levels(&bil)
        ),
    ))
}

fn criterion_8(results: &[SeedResult]) -> Outcome {
    let ap = |n: &str| median_of(results.iter().map(|r| ap_of(&r.ablation, n)));
    let (a1, a3, a4, a5) = (ap("A1"), ap("A3"), ap("A4"), ap("A5"));
    Ok((
        a5 >= a4 && a4 >= a1 && a3 < a1,
        format!("median AP A5 {a5:.4} A4 {a4:.4} A1 {a1:.4} A3 {a3:.4} (need A5 >= A4 >= A1 > A3)"),
    ))
}

fn criterion_9(results: &[SeedResult]) -> Outcome {
    let l1 = |n: &str| median_of(results.iter().map(|r| r.semantic.row(n).expect("row").mean_l1()));
    let (m, mm) = (l1("matched"), l1("mismatched"));
    Ok((m <= mm, format!("median mean held-out L1 matched {m:.4} vs mismatched {mm:.4}")))
}

fn criterion_10(results: &[SeedResult]) -> Outcome {
    let methods = ["nearest", "bilinear", "bicubic"];
    let per: Vec<BTreeMap<usize, f64>> =
        methods.iter().map(|m| median_levels(results.iter().map(|r| r.degradation.row(m).expect("row")))).collect();
    let mut worst: f64 = 0.0;
    for l in per[0].keys() {
        let v: Vec<f64> = per.iter().map(|p| p[l]).collect();
        let (lo, hi) = v.iter().fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
        worst = worst.max(hi / lo - 1.0);
    }
    let detail = methods.iter().zip(&per).map(|(m, p)| format!("{m} [{}]", fmt_levels(p))).collect::<Vec<_>>();
    Ok((
        worst <= DEGRADATION_SPREAD,
        format!("median L1 {}; largest relative spread {:.1}% (limit {:.0}%)", detail.join(" "), worst * 100.0, DEGRADATION_SPREAD * 100.0),
    ))
}

const TINY: &str = "
synthetic_images = 24
val_images = 4
image_size = 64
batch_size = 2
iterations = 5
milestones = 3
log_every = 1
channels = 4
generator_width = 4
disc_widths = 4,4,4
stem_width = 4
stage_widths = 4,4,4,4
";

fn criterion_11() -> Outcome {
    type Snapshot = (AblationReport, AblationReport, Vec<(String, srf_core::train::TrainLog)>, Vec<Vec<u8>>);
    let once = || -> Result<Snapshot> {
        let mut suite = Suite::new(7)?;
        suite.apply_text(TINY, "tiny")?;
        let mut runner = Runner::new(suite)?;
        let a = run_ablation(&mut runner, Protocol::ASuite)?.without_timing();
        let s = run_ablation(&mut runner, Protocol::SemanticLevel)?.without_timing();
        let c1 = runner.suite.stage(1).clone();
        let c2 = runner.suite.stage(2).clone();
        let ck = vec![
            runner.gan(c1.degradation)?.checkpoint(&c1).to_bytes()?,
            runner.stage2(c2.semantic_level_mode)?.checkpoint(&c2).to_bytes()?,
        ];
        let logs = runner.logs.iter().map(|(n, l)| (n.clone(), l.without_timing())).collect();
        Ok((a, s, logs, ck))
    };
    let first = once().map_err(err)?;
    let second = once().map_err(err)?;
    let same = [first.0 == second.0, first.1 == second.1, first.2 == second.2, first.3 == second.3];
    Ok((
        same.iter().all(|x| *x),
        format!(
            "re-run identical: reports {} {}, {} logs {}, checkpoints {}",
            same[0], same[1], first.2.len(), same[2], same[3]
        ),
    ))
}

fn main() -> ExitCode {
    println!("acceptance: seeds {SEEDS:?}, direction budget {DIRECTION_BUDGET:?}, learning check {LEARNING_ITERS} iterations");
    // Optional criterion numbers select a subset.
    let wanted: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let w = wanted.as_slice();
    let mut lines = Vec::new();
    lines.extend(run(w, 1, false, || {
        Ok((
            true,
            "scope: full-scale published numbers are not reproduced; checks below are property suites and desk-scale directions"
                .into(),
        ))
    }));
    lines.extend(run(w, 2, true, || {
        let start = Instant::now();
        let n = properties::all_laws();
        Ok((
            within(start, Duration::from_secs(60)),
            format!("{n} laws x {} random instances, {:.1}s (limit 60s)", properties::CASES, start.elapsed().as_secs_f64()),
        ))
    }));
    lines.extend(run(w, 3, true, || {
        suite_checks(
            &[
                ("l1 feature loss", gradients::l1_feature_loss_input_gradient),
                ("discriminator objective", gradients::discriminator_objective_gradients),
                ("generator objective", gradients::generator_objective_gradients),
                ("adversarial term", gradients::adversarial_term_gradient_reaches_input),
                ("detection loss", gradients::detection_loss_gradients),
                ("integral objective", gradients::integral_objective_gradients),
            ],
            Duration::from_secs(300),
        )
        .map(|(ok, d)| (ok, format!("central differences, max relative error <= 1e-3: {d}")))
    }));
    lines.extend(run(w, 4, true, || {
        suite_checks(
            &[
                ("level sum", loss_oracles::l1_sums_level_means),
                ("ln 2 equilibria", loss_oracles::equilibrium_values_are_multiples_of_ln2),
                ("lambda weighting", loss_oracles::lambda_weights_only_the_adversarial_term),
                ("random scalar loops", loss_oracles::random_instances_match_scalar_loops),
                ("error cases", loss_oracles::mismatched_levels_and_non_finite_inputs_fail),
            ],
            Duration::from_secs(60),
        )
        .map(|(ok, d)| (ok, format!("loss values within 1e-6 of scalar loops: {d}")))
    }));
    lines.extend(run(w, 5, true, || {
        suite_checks(
            &[
                ("100 random scenes", ap_oracle::toolkit_equals_oracle_on_random_scenes),
                ("hand case", ap_oracle::hand_case_three_gt_four_predictions),
                ("no ground truth", ap_oracle::no_ground_truth_reports_minus_one),
            ],
            Duration::from_secs(60),
        )
        .map(|(ok, d)| (ok, format!("AP equals exhaustive matching oracle exactly: {d}")))
    }));
    lines.extend(run(w, 6, false, criterion_6));

    let mut results = Vec::new();
    let mut failure = None;
    let directions = (7..=10).any(|id| w.is_empty() || w.contains(&id));
    for &seed in SEEDS.iter().filter(|_| directions) {
        match catch_unwind(|| seed_result(seed)) {
            Ok(Ok(r)) => results.push(r),
            Ok(Err(e)) => failure = Some(format!("seed {seed}: {e}")),
            Err(_) => failure = Some(format!("seed {seed} panicked")),
        }
    }
    let (failure, results) = (&failure, &results);
    let gate = |f: fn(&[SeedResult]) -> Outcome| {
        move || match failure {
            Some(e) => Err(e.clone()),
            None => f(results),
        }
    };
    lines.extend(run(w, 7, false, gate(criterion_7)));
    lines.extend(run(w, 8, false, gate(criterion_8)));
    lines.extend(run(w, 9, false, gate(criterion_9)));
    lines.extend(run(w, 10, false, gate(criterion_10)));
    lines.extend(run(w, 11, true, criterion_11));

    let passed = lines.iter().filter(|l| l.pass).count();
    let gating_failed: Vec<u8> = lines.iter().filter(|l| l.gating && !l.pass).map(|l| l.id).collect();
    println!("acceptance: {passed}/{} criteria pass", lines.len());
    if gating_failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: gating criteria failed: {gating_failed:?}");
        ExitCode::FAILURE
    }
}
