//! Resampling, location assignment, NMS and decoding against brute-force oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srf_core::head::{
    assign_locations, decode_detections, detection_loss, iou, location_center, nms, scale_targets, DecodeParams, HeadOutput,
    LevelPrediction,
};
use srf_core::pyramid::{downsample_feature, level_stride, upsample_naive};
use srf_core::*;

fn map(c: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureMap<f32> {
    FeatureMap::new(Tensor::from_vec(&[c, h, w], data).unwrap(), 2).unwrap()
}

/// Half-pixel bilinear sample of one channel, edges clamped.
fn bilinear_at(src: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    let (sy, sx) = (clamp(sy, h), clamp(sx, w));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let v = |y: usize, x: usize| src[y * w + x] as f64;
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

#[test]
fn resampling_examples() {
    let d = downsample_feature(&map(1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]), 0.5).unwrap();
    assert_eq!(d.data().shape(), &[1, 1, 1]);
    assert!((d.data().data()[0] - 4.0).abs() < 1e-6);

    let up = upsample_naive(&map(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]), Interpolation::Nearest);
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(up.data().data()[y * 4 + x], [1.0, 2.0, 3.0, 4.0][(y / 2) * 2 + x / 2]);
        }
    }
    let one = upsample_naive(&map(1, 1, 1, vec![5.0]), Interpolation::Nearest);
    assert_eq!(one.data().data(), &[5.0; 4]);

    let big = FeatureMap::new(Tensor::<f32>::zeros(&[256, 17, 13]), 4).unwrap();
    assert_eq!(downsample_feature(&big, 0.5).unwrap().data().shape(), &[256, 8, 6]);
    for m in Interpolation::ALL {
        let c = upsample_naive(&map(2, 3, 5, vec![0.25; 30]), m);
        assert!(c.data().data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
    assert!(downsample_feature(&map(1, 1, 4, vec![0.0; 4]), 0.5).is_err());
}

#[test]
fn bilinear_matches_per_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let src: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fm = map(1, h, w, src.clone());
        let up = upsample_naive(&fm, Interpolation::Bilinear);
        for y in 0..2 * h {
            for x in 0..2 * w {
                let want = bilinear_at(&src, h, w, (y as f64 + 0.5) / 2.0 - 0.5, (x as f64 + 0.5) / 2.0 - 0.5);
                assert!((up.data().data()[y * 2 * w + x] as f64 - want).abs() < 1e-6);
            }
        }
        let s = rng.random_range(0.3..0.95);
        if let Ok(d) = downsample_feature(&fm, s) {
            let (dh, dw) = (d.height(), d.width());
            assert_eq!((dh, dw), ((s * h as f64).floor() as usize, (s * w as f64).floor() as usize));
            for y in 0..dh {
                for x in 0..dw {
                    let want = bilinear_at(&src, h, w, (y as f64 + 0.5) / s - 0.5, (x as f64 + 0.5) / s - 0.5);
                    let got = d.data().data()[y * dw + x] as f64;
                    assert!((got - want).abs() < 1e-5, "{h}x{w} s={s}: {got} vs {want}");
                }
            }
        }
    }
}

/// Location-major assignment: every location picks the smallest box of its
/// level whose interior holds the location's center. A box holding no center
/// competes for the cell its own center falls in.
fn assignment_oracle(t: &DetectionTargets, level: usize, h: usize, w: usize, ranges: &SizeRanges) -> Vec<Option<usize>> {
    let inside = |b: &[f64; 4], y: usize, x: usize| {
        let (cx, cy) = location_center(level, y, x);
        cx > b[0] && cx < b[0] + b[2] && cy > b[1] && cy < b[1] + b[3]
    };
    let s = level_stride(level) as f64;
    let home = |b: &[f64; 4]| {
        let cell = |c: f64, n: usize| ((c / s).floor().max(0.0) as usize).min(n - 1);
        (cell(b[1] + b[3] / 2.0, h), cell(b[0] + b[2] / 2.0, w))
    };
    let mut cells = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(f64, usize)> = None;
            for (i, b) in t.boxes.iter().enumerate() {
                let empty = (0..h).all(|yy| (0..w).all(|xx| !inside(b, yy, xx)));
                let claims = inside(b, y, x) || (empty && home(b) == (y, x));
                if ranges.level_for(b) == level && claims && best.is_none_or(|(a, _)| b[2] * b[3] < a) {
                    best = Some((b[2] * b[3], i));
                }
            }
            cells[y * w + x] = best.map(|(_, i)| i);
        }
    }
    cells
}

#[test]
fn centered_box_is_assigned_to_level_three_only() {
    let t = DetectionTargets { boxes: vec![[24.0, 24.0, 16.0, 16.0]], labels: vec![0], width: 64, height: 64 };
    let dims: Vec<_> = (2..=5).map(|l| (l, 64 / level_stride(l), 64 / level_stride(l))).collect();
    let asg = assign_locations(&t, &dims, &SizeRanges::DESK);
    let counts: Vec<usize> = asg.iter().map(|a| a.num_positive()).collect();
    let oracle = assignment_oracle(&t, 3, 8, 8, &SizeRanges::DESK);
    assert_eq!(counts, vec![0, oracle.iter().flatten().count(), 0, 0]);
    assert_eq!(counts[1], 4);
}

#[test]
fn random_assignments_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..6);
        let mut t = DetectionTargets::empty(64, 64);
        for _ in 0..n {
            let (w, h) = (rng.random_range(6.0..60.0), rng.random_range(6.0..60.0));
            t.boxes.push([rng.random_range(0.0..64.0 - w), rng.random_range(0.0..64.0 - h), w, h]);
            t.labels.push(rng.random_range(0..3));
        }
        let dims: Vec<_> = (2..=5).map(|l| (l, 64 / level_stride(l), 64 / level_stride(l))).collect();
        let asg = assign_locations(&t, &dims, &SizeRanges::DESK);
        for (a, &(level, h, w)) in asg.iter().zip(&dims) {
            let oracle = assignment_oracle(&t, level, h, w, &SizeRanges::DESK);
            for (idx, (got, want)) in a.cells.iter().zip(&oracle).enumerate() {
                match (got, want) {
                    (Some(p), Some(i)) => {
                        assert_eq!(p.gt_index, *i);
                        assert_eq!(p.class, t.labels[*i]);
                    }
                    (None, None) => {}
                    (g, o) => panic!("level {level} cell {idx}: {g:?} vs oracle {o:?}"),
                }
            }
        }
    }
}

/// The unique set `S` with: `d` in `S` iff no higher-scored member of `S`
/// of the same class overlaps it by more than `thr`. Found by enumeration.
fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let suppressed = (0..n).any(|j| {
                inside(j) && dets[j].score > dets[i].score && dets[j].class == dets[i].class && iou(&dets[j].bbox, &dets[i].bbox) > thr
            });
            inside(i) == !suppressed
        });
        if consistent {
            found.push((0..n).filter(|&i| inside(i)).collect::<Vec<_>>());
        }
    }
    assert_eq!(found.len(), 1);
    found.pop().unwrap()
}

#[test]
fn nms_matches_exhaustive_suppression() {
    let d = |bbox, score| Detection { bbox, class: 0, score };
    let kept = nms(vec![d([0.0, 0.0, 10.0, 10.0], 0.8), d([0.0, 0.0, 10.0, 10.0], 0.9)], 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(0..9);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                bbox: [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), rng.random_range(5.0..20.0), rng.random_range(5.0..20.0)],
                class: rng.random_range(0..2),
                score: rng.random_range(0.0..1.0),
            })
            .collect();
        let thr = rng.random_range(0.1..0.9);
        let mut want: Vec<Detection> = nms_oracle(&dets, thr).into_iter().map(|i| dets[i].clone()).collect();
        want.sort_by(|a, b| b.score.total_cmp(&a.score));
        assert_eq!(nms(dets, thr), want);
    }
}

fn perfect_output(t: &DetectionTargets, k: usize) -> HeadOutput<f32> {
    let dims: Vec<_> = (2..=5).map(|l| (l, t.height / level_stride(l), t.width / level_stride(l))).collect();
    let asg = assign_locations(t, &dims, &SizeRanges::DESK);
    let levels = asg
        .iter()
        .map(|a| {
            let s = a.height * a.width;
            let mut logits = Tensor::full(&[k, a.height, a.width], -20.0f32);
            let mut boxes = Tensor::zeros(&[4, a.height, a.width]);
            for (idx, cell) in a.cells.iter().enumerate() {
                if let Some(p) = cell {
                    logits.data_mut()[p.class * s + idx] = 8.0;
                    for j in 0..4 {
                        boxes.data_mut()[j * s + idx] = p.ltrb[j] as f32;
                    }
                }
            }
            (a.level, logits, boxes)
        })
        .collect();
    HeadOutput { levels }
}

#[test]
fn perfect_predictions_decode_to_the_targets() {
    let t = DetectionTargets {
        boxes: vec![[5.0, 6.0, 12.0, 10.0], [30.0, 28.0, 26.0, 30.0]],
        labels: vec![1, 2],
        width: 64,
        height: 64,
    };
    let dets = decode_detections(&perfect_output(&t, 3), &DecodeParams::default(), (0, 0), (64, 64)).unwrap();
    for (b, &l) in t.boxes.iter().zip(&t.labels) {
        let best = dets.iter().filter(|d| d.class == l).map(|d| iou(&d.bbox, b)).fold(0.0, f64::max);
        assert!(best >= 0.9, "box {b:?}: best IoU {best}");
    }
    let all_neg = HeadOutput { levels: vec![(3, Tensor::full(&[3, 8, 8], -1e4f32), Tensor::full(&[4, 8, 8], 1.0f32))] };
    assert!(decode_detections(&all_neg, &DecodeParams::default(), (0, 0), (64, 64)).unwrap().is_empty());
}

#[test]
fn detection_loss_edge_cases() {
    let g = Graph::<f64>::new();
    let t = DetectionTargets { boxes: vec![[16.0, 16.0, 14.0, 14.0]], labels: vec![0], width: 64, height: 64 };
    let preds_from = |out: &HeadOutput<f32>| -> Vec<LevelPrediction<'_, f64>> {
        out.levels
            .iter()
            .map(|(l, lg, bx)| {
                let (k, h, w) = lg.dims3();
                LevelPrediction {
                    level: *l,
                    logits: g.constant(lg.cast::<f64>().reshape(&[1, k, h, w]).unwrap()),
                    boxes: g.constant(bx.cast::<f64>().reshape(&[1, 4, h, w]).unwrap()),
                }
            })
            .collect()
    };
    let perfect = perfect_output(&t, 2);
    let mut background = perfect.clone();
    for (_, lg, _) in &mut background.levels {
        *lg = Tensor::full(lg.shape(), -4.6);
    }
    let (good, _) = detection_loss(&preds_from(&perfect), std::slice::from_ref(&t), &SizeRanges::DESK).unwrap();
    let (bad, _) = detection_loss(&preds_from(&background), std::slice::from_ref(&t), &SizeRanges::DESK).unwrap();
    assert!(good.item() < bad.item());

    let empty = DetectionTargets::empty(64, 64);
    let (v, r) = detection_loss(&preds_from(&background), &[empty], &SizeRanges::DESK).unwrap();
    assert_eq!(r.term("det_box"), 0.0);
    assert!(v.item() >= 0.0);

    let degenerate = DetectionTargets { boxes: vec![[1.0, 1.0, 0.0, 3.0]], labels: vec![0], width: 64, height: 64 };
    assert!(detection_loss(&preds_from(&background), &[degenerate], &SizeRanges::DESK).is_err());
}

#[test]
fn target_scaling_is_linear() {
    let t = DetectionTargets { boxes: vec![[10.0, 20.0, 40.0, 60.0], [0.0, 0.0, 1.0, 1.0]], labels: vec![0, 1], width: 101, height: 80 };
    let (half, dropped) = scale_targets(&t, 0.5).unwrap();
    assert_eq!(half.boxes, vec![[5.0, 10.0, 20.0, 30.0]]);
    assert_eq!((dropped, half.width, half.height), (1, 50, 40));
    assert_eq!(scale_targets(&t, 1.0).unwrap(), (t.clone(), 0));
    let (quarter, _) = scale_targets(&t, 0.25).unwrap();
    let (twice, _) = scale_targets(&scale_targets(&t, 0.5).unwrap().0, 0.5).unwrap();
    assert_eq!(quarter.boxes, twice.boxes);
    assert!(scale_targets(&t, 0.0).is_err());
}
