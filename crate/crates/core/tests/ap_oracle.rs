//! COCO AP against an exhaustive matching oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srf_core::eval::ap::{iou_thresholds, recall_points, AREA_ALL, AREA_LARGE, AREA_MEDIUM, AREA_SMALL};
use srf_core::eval::{coco_metrics, ApMetrics};
use srf_core::head::iou;
use srf_core::{Detection, DetectionTargets};

fn area(b: &[f64; 4]) -> f64 {
    b[2] * b[3]
}

fn outside(b: &[f64; 4], r: (f64, f64)) -> bool {
    area(b) < r.0 || area(b) > r.1
}

/// Every injective partial assignment of detections to ground truth.
fn assignments(n_det: usize, n_gt: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n_det {
        let mut next = Vec::new();
        for a in &out {
            next.push([a.clone(), vec![None]].concat());
            for g in 0..n_gt {
                if !a.contains(&Some(g)) {
                    next.push([a.clone(), vec![Some(g)]].concat());
                }
            }
        }
        out = next;
    }
    out
}

/// Whether `a` is what the greedy rule produces: each detection, in score
/// order, takes the free ground truth of highest IoU at least `thr`,
/// preferring non-ignored ones and, among equals, the later one.
fn is_greedy(a: &[Option<usize>], gts: &[([f64; 4], bool)], dets: &[&Detection], thr: f64) -> bool {
    let thr = thr.min(1.0 - 1e-10);
    for (di, (det, choice)) in dets.iter().zip(a).enumerate() {
        let taken: Vec<usize> = a[..di].iter().flatten().copied().collect();
        let free = |g: usize| !taken.contains(&g);
        let best = |ignored: bool| {
            let mut best: Option<(f64, usize)> = None;
            for (g, (b, ign)) in gts.iter().enumerate() {
                if *ign != ignored || !free(g) {
                    continue;
                }
                let v = iou(&det.bbox, b);
                if v >= thr && best.is_none_or(|(bv, _)| v >= bv) {
                    best = Some((v, g));
                }
            }
            best.map(|(_, g)| g)
        };
        let want = best(false).or_else(|| best(true));
        if *choice != want {
            return false;
        }
    }
    true
}

/// Per-detection `(score, matched, ignored)` and the non-ignored ground-truth count.
type ImageMatches = (Vec<(f64, bool, bool)>, usize);

/// Matches of one image and class.
fn oracle_image(gts: &[[f64; 4]], dets: &[&Detection], thr: f64, range: (f64, f64)) -> ImageMatches {
    let mut g: Vec<([f64; 4], bool)> = gts.iter().map(|b| (*b, outside(b, range))).collect();
    g.sort_by_key(|x| x.1);
    let mut d = dets.to_vec();
    d.sort_by(|a, b| b.score.total_cmp(&a.score));
    let valid: Vec<_> = assignments(d.len(), g.len()).into_iter().filter(|a| is_greedy(a, &g, &d, thr)).collect();
    assert_eq!(valid.len(), 1, "greedy matching must be unique");
    let out = d
        .iter()
        .zip(&valid[0])
        .map(|(det, m)| match m {
            Some(gi) => (det.score, true, g[*gi].1),
            None => (det.score, false, outside(&det.bbox, range)),
        })
        .collect();
    (out, g.iter().filter(|x| !x.1).count())
}

/// Interpolated precision at each recall point, straight from the definition:
/// the best precision over all score cutoffs reaching that recall.
fn oracle_ap(per_image: Vec<ImageMatches>) -> Option<f64> {
    let npig: usize = per_image.iter().map(|p| p.1).sum();
    if npig == 0 {
        return None;
    }
    let mut all: Vec<(f64, bool, bool)> = per_image.into_iter().flat_map(|p| p.0).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let kept: Vec<bool> = all.iter().filter(|x| !x.2).map(|x| x.1).collect();
    let mut sum = 0.0;
    for r in recall_points() {
        let mut best: f64 = 0.0;
        let mut found = false;
        for k in 1..=kept.len() {
            let tp = kept[..k].iter().filter(|&&m| m).count();
            let rc = tp as f64 / npig as f64;
            let pr = tp as f64 / k as f64;
            if rc >= r && (!found || pr > best) {
                best = pr;
                found = true;
            }
        }
        sum += if found { best } else { 0.0 };
    }
    Some(sum / 101.0)
}

fn oracle_metric(gt: &[DetectionTargets], dets: &[Vec<Detection>], k: usize, thr: f64, range: (f64, f64)) -> Option<f64> {
    let per_class: Vec<f64> = (0..k)
        .filter_map(|c| {
            let imgs = gt
                .iter()
                .zip(dets)
                .map(|(t, d)| {
                    let g: Vec<[f64; 4]> = t.boxes.iter().zip(&t.labels).filter(|x| *x.1 == c).map(|x| *x.0).collect();
                    let ds: Vec<&Detection> = d.iter().filter(|x| x.class == c).collect();
                    oracle_image(&g, &ds, thr, range)
                })
                .collect();
            oracle_ap(imgs)
        })
        .collect();
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

fn oracle_metrics(gt: &[DetectionTargets], dets: &[Vec<Detection>], k: usize) -> ApMetrics {
    let mean = |range| {
        let v: Vec<f64> = iou_thresholds().iter().filter_map(|&t| oracle_metric(gt, dets, k, t, range)).collect();
        if v.is_empty() { -1.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
    };
    ApMetrics {
        ap: mean(AREA_ALL),
        ap50: oracle_metric(gt, dets, k, 0.5, AREA_ALL).unwrap_or(-1.0),
        ap75: oracle_metric(gt, dets, k, 0.75, AREA_ALL).unwrap_or(-1.0),
        ap_s: mean(AREA_SMALL),
        ap_m: mean(AREA_MEDIUM),
        ap_l: mean(AREA_LARGE),
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let side = |rng: &mut ChaCha8Rng| [rng.random_range(4.0..30.0), rng.random_range(25.0..60.0), rng.random_range(80.0..140.0)][rng.random_range(0..3)];
    let (w, h) = (side(rng), side(rng));
    [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), w, h]
}

fn jitter(rng: &mut ChaCha8Rng, b: &[f64; 4]) -> [f64; 4] {
    let s = rng.random_range(0.0..0.3);
    let mut j = |v: f64, span: f64| v + rng.random_range(-s..=s) * span;
    [j(b[0], b[2]), j(b[1], b[3]), (j(b[2], b[2])).max(1.0), (j(b[3], b[3])).max(1.0)]
}

fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<DetectionTargets>, Vec<Vec<Detection>>) {
    let images = rng.random_range(1..=2);
    let total_gt = rng.random_range(1..=6);
    let total_det = rng.random_range(0..=6);
    let mut gt: Vec<DetectionTargets> = (0..images).map(|_| DetectionTargets::empty(256, 256)).collect();
    for _ in 0..total_gt {
        let i = rng.random_range(0..images);
        gt[i].boxes.push(random_box(rng));
        gt[i].labels.push(rng.random_range(0..2));
    }
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); images];
    for _ in 0..total_det {
        let i = rng.random_range(0..images);
        let (bbox, class) = if !gt[i].boxes.is_empty() && rng.random_bool(0.7) {
            let j = rng.random_range(0..gt[i].boxes.len());
            let class = if rng.random_bool(0.85) { gt[i].labels[j] } else { 1 - gt[i].labels[j] };
            (jitter(rng, &gt[i].boxes[j]), class)
        } else {
            (random_box(rng), rng.random_range(0..2))
        };
        dets[i].push(Detection { bbox, class, score: rng.random_range(0.0..1.0) });
    }
    (gt, dets)
}

pub fn toolkit_equals_oracle_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut nontrivial = 0;
    for scene in 0..100 {
        let (gt, dets) = random_scene(&mut rng);
        let ours = coco_metrics(&gt, &dets, 2);
        let oracle = oracle_metrics(&gt, &dets, 2);
        assert_eq!(ours, oracle, "scene {scene}: {gt:?} {dets:?}");
        if ours.ap > 0.0 && ours.ap < 1.0 {
            nontrivial += 1;
        }
    }
    assert!(nontrivial >= 20, "only {nontrivial} scenes with fractional AP");
}

pub fn hand_case_three_gt_four_predictions() {
    let gt = vec![DetectionTargets {
        boxes: vec![[0.0, 0.0, 10.0, 10.0], [20.0, 0.0, 10.0, 10.0], [40.0, 0.0, 10.0, 10.0]],
        labels: vec![0, 0, 0],
        width: 64,
        height: 64,
    }];
    let det = |bbox, score| Detection { bbox, class: 0, score };
    let dets = vec![vec![
        det([0.0, 0.0, 10.0, 10.0], 0.9),
        det([0.0, 40.0, 10.0, 10.0], 0.8),
        det([20.0, 0.0, 10.0, 7.2], 0.7),
        det([40.0, 0.0, 10.0, 10.0], 0.6),
    ]];
    assert!((iou(&dets[0][2].bbox, &gt[0].boxes[1]) - 0.72).abs() < 1e-12);
    let m = coco_metrics(&gt, &dets, 1);
    assert_eq!(m, oracle_metrics(&gt, &dets, 1));
    // Loose thresholds: TP FP TP TP. Strict ones: TP FP FP TP.
    let loose = (34.0 + 67.0 * 0.75) / 101.0;
    let strict = (34.0 + 33.0 * 0.5) / 101.0;
    assert!((m.ap50 - loose).abs() < 1e-12);
    assert!((m.ap75 - strict).abs() < 1e-12);
    assert!((m.ap - (5.0 * loose + 5.0 * strict) / 10.0).abs() < 1e-12);
    assert_eq!((m.ap_m, m.ap_l), (-1.0, -1.0));
    assert!((m.ap_s - m.ap).abs() < 1e-12);
}

pub fn no_ground_truth_reports_minus_one() {
    let gt = vec![DetectionTargets::empty(32, 32)];
    let dets = vec![vec![Detection { bbox: [0.0, 0.0, 4.0, 4.0], class: 0, score: 0.5 }]];
    let m = coco_metrics(&gt, &dets, 1);
    assert_eq!(m, oracle_metrics(&gt, &dets, 1));
    assert_eq!(m.ap, -1.0);
    assert!(m.is_valid());
}

mod tests {
    #[test]
    fn toolkit_equals_oracle_on_random_scenes() {
        super::toolkit_equals_oracle_on_random_scenes();
    }

    #[test]
    fn hand_case_three_gt_four_predictions() {
        super::hand_case_three_gt_four_predictions();
    }

    #[test]
    fn no_ground_truth_reports_minus_one() {
        super::no_ground_truth_reports_minus_one();
    }
}
