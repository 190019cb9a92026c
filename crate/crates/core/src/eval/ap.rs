//! COCO-protocol average precision over axis-aligned boxes.

use serde::{Deserialize, Serialize};

use crate::head::{iou, Detection, DetectionTargets};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Recall sample points 0.00, 0.01, ..., 1.00.
pub fn recall_points() -> [f64; 101] {
    std::array::from_fn(|i| i as f64 / 100.0)
}

pub const MAX_DETECTIONS: usize = 100;

/// Area buckets `[lo, hi)` in pixels squared.
pub const AREA_ALL: (f64, f64) = (0.0, 1e10);
pub const AREA_SMALL: (f64, f64) = (0.0, 32.0 * 32.0);
pub const AREA_MEDIUM: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);
pub const AREA_LARGE: (f64, f64) = (96.0 * 96.0, 1e10);

/// COCO summary metrics. A value of `-1` means no ground truth fell in the
/// bucket, following the COCO convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
}

impl ApMetrics {
    pub fn is_valid(&self) -> bool {
        [self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l]
            .iter()
            .all(|&v| v == -1.0 || (0.0..=1.0).contains(&v))
    }
}

fn area(b: &[f64; 4]) -> f64 {
    b[2] * b[3]
}

fn in_range(a: f64, r: (f64, f64)) -> bool {
    a >= r.0 && a <= r.1
}

/// Per-detection outcome for one image, class, threshold and area range.
struct ImageEval {
    /// `(score, matched, ignored)` in descending score order.
    dets: Vec<(f64, bool, bool)>,
    num_gt: usize,
}

fn evaluate_image(gts: &[[f64; 4]], dets: &[&Detection], thr: f64, range: (f64, f64)) -> ImageEval {
    // Ignored ground truth sorts last so real matches are preferred.
    let mut gt: Vec<(&[f64; 4], bool)> = gts.iter().map(|b| (b, !in_range(area(b), range))).collect();
    gt.sort_by_key(|g| g.1);
    let mut dets: Vec<&Detection> = dets.to_vec();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(MAX_DETECTIONS);
    let mut taken = vec![false; gt.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best = thr.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for (g, (gb, g_ign)) in gt.iter().enumerate() {
            if taken[g] {
                continue;
            }
            if let Some(mi) = m {
                if !gt[mi].1 && *g_ign {
                    break;
                }
            }
            let v = iou(&d.bbox, gb);
            if v < best {
                continue;
            }
            best = v;
            m = Some(g);
        }
        match m {
            Some(g) => {
                taken[g] = true;
                out.push((d.score, true, gt[g].1));
            }
            None => out.push((d.score, false, !in_range(area(&d.bbox), range))),
        }
    }
    ImageEval { dets: out, num_gt: gt.iter().filter(|g| !g.1).count() }
}

/// 101-point interpolated precision, or `None` without ground truth.
fn accumulate(evals: &[ImageEval]) -> Option<f64> {
    let npig: usize = evals.iter().map(|e| e.num_gt).sum();
    if npig == 0 {
        return None;
    }
    let mut dets: Vec<(f64, bool, bool)> = evals.iter().flat_map(|e| e.dets.iter().copied()).collect();
    // Stable sort keeps image order among equal scores.
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut rc = Vec::new();
    let mut pr = Vec::new();
    for (_, matched, ignored) in dets {
        if ignored {
            continue;
        }
        if matched {
            tp += 1;
        } else {
            fp += 1;
        }
        rc.push(tp as f64 / npig as f64);
        pr.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let points = recall_points();
    let mut sum = 0.0;
    for r in points {
        let i = rc.partition_point(|&x| x < r);
        if i < pr.len() {
            sum += pr[i];
        }
    }
    Some(sum / points.len() as f64)
}

/// AP for one IoU threshold and area range, averaged over classes with
/// ground truth; `None` if no class has any.
pub fn average_precision(
    gt: &[DetectionTargets],
    dets: &[Vec<Detection>],
    num_classes: usize,
    thr: f64,
    range: (f64, f64),
) -> Option<f64> {
    let mut per_class = Vec::new();
    for c in 0..num_classes {
        let evals: Vec<ImageEval> = gt
            .iter()
            .zip(dets)
            .map(|(t, d)| {
                let gts: Vec<[f64; 4]> =
                    t.boxes.iter().zip(&t.labels).filter(|(_, &l)| l == c).map(|(b, _)| *b).collect();
                let ds: Vec<&Detection> = d.iter().filter(|x| x.class == c).collect();
                evaluate_image(&gts, &ds, thr, range)
            })
            .collect();
        if let Some(ap) = accumulate(&evals) {
            per_class.push(ap);
        }
    }
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

fn mean_over_thresholds(gt: &[DetectionTargets], dets: &[Vec<Detection>], k: usize, range: (f64, f64)) -> f64 {
    let v: Vec<f64> = iou_thresholds().iter().filter_map(|&t| average_precision(gt, dets, k, t, range)).collect();
    if v.is_empty() {
        -1.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// COCO summary over a split; `dets[i]` are the detections for `gt[i]`.
pub fn coco_metrics(gt: &[DetectionTargets], dets: &[Vec<Detection>], num_classes: usize) -> ApMetrics {
    assert_eq!(gt.len(), dets.len(), "one detection list per image");
    let at = |t: f64| average_precision(gt, dets, num_classes, t, AREA_ALL).unwrap_or(-1.0);
    ApMetrics {
        ap: mean_over_thresholds(gt, dets, num_classes, AREA_ALL),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_s: mean_over_thresholds(gt, dets, num_classes, AREA_SMALL),
        ap_m: mean_over_thresholds(gt, dets, num_classes, AREA_MEDIUM),
        ap_l: mean_over_thresholds(gt, dets, num_classes, AREA_LARGE),
    }
}
