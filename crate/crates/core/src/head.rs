//! A small anchor-free one-stage detection head: per-location class logits and
//! `ltrb` box distances, center-in-box assignment, focal + L1 loss, and
//! greedy per-class NMS decoding.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Param, Var};
use crate::error::{Error, Result};
use crate::extractor::{pad_to_multiple, Extractor, FpnOutput, SIZE_DIVISOR};
use crate::losses::{LossReport, DET_BOX, DET_CLS};
use crate::nn::{join, Conv2d, Ctx, Module};
use crate::ops::elementwise::sigmoid;
use crate::pyramid::{image_batch, level_stride, Image, N_E, N_S};
use crate::tensor::{Float, Tensor};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Initial foreground probability encoded in the classifier bias.
pub const PRIOR_PROB: f64 = 0.01;

/// Ground truth for one image: `(x, y, w, h)` boxes in absolute pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionTargets {
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
    pub width: usize,
    pub height: usize,
}

impl DetectionTargets {
    pub fn empty(width: usize, height: usize) -> Self {
        DetectionTargets { boxes: Vec::new(), labels: Vec::new(), width, height }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("box {i} is degenerate: {b:?}")));
            }
        }
        Ok(())
    }

    fn translated(&self, dx: f64, dy: f64) -> Self {
        let boxes = self.boxes.iter().map(|b| [b[0] + dx, b[1] + dy, b[2], b[3]]).collect();
        DetectionTargets { boxes, ..self.clone() }
    }
}

/// Multiply all coordinates by `s`, flooring image dims. Boxes narrower or
/// shorter than one pixel afterwards are dropped; returns how many were.
pub fn scale_targets(t: &DetectionTargets, s: f64) -> Result<(DetectionTargets, usize)> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::invalid(format!("target scale {s} outside (0, 1]")));
    }
    let mut out = DetectionTargets::empty((t.width as f64 * s).floor() as usize, (t.height as f64 * s).floor() as usize);
    let mut dropped = 0;
    for (b, &l) in t.boxes.iter().zip(&t.labels) {
        let sb = [b[0] * s, b[1] * s, b[2] * s, b[3] * s];
        if sb[2] < 1.0 || sb[3] < 1.0 {
            dropped += 1;
            continue;
        }
        out.boxes.push(sb);
        out.labels.push(l);
    }
    Ok((out, dropped))
}

/// Max-side boundaries (image pixels) between levels 2|3, 3|4 and 4|5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRanges(pub [f64; 3]);

impl SizeRanges {
    pub const FULL_SCALE: SizeRanges = SizeRanges([32.0, 64.0, 128.0]);
    /// Boundaries halved once more for 64-pixel images.
    pub const DESK: SizeRanges = SizeRanges([16.0, 32.0, 64.0]);

    pub fn level_for(&self, b: &[f64; 4]) -> usize {
        let side = b[2].max(b[3]);
        N_S + self.0.iter().take_while(|&&t| side >= t).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub channels: usize,
    pub num_classes: usize,
    pub ranges: SizeRanges,
}

/// Pyramid levels fed to the head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMask(BTreeSet<usize>);

impl LevelMask {
    pub fn new(levels: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = levels.into_iter().collect();
        if set.is_empty() {
            return Err(Error::invalid("empty level mask"));
        }
        if let Some(bad) = set.iter().find(|l| !(N_S..=N_E).contains(*l)) {
            return Err(Error::invalid(format!("level {bad} outside {N_S}..={N_E}")));
        }
        Ok(LevelMask(set))
    }

    pub fn all() -> Self {
        LevelMask((N_S..=N_E).collect())
    }

    pub fn contains(&self, level: usize) -> bool {
        self.0.contains(&level)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

impl Default for LevelMask {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Clone, Debug)]
pub struct Head<T: Float = f32> {
    pub config: HeadConfig,
    pub tower: Vec<Conv2d<T>>,
    pub cls: Conv2d<T>,
    pub bbox: Conv2d<T>,
}

/// Raw outputs on one level: logits `[N, K, H, W]`, box distances `[N, 4, H, W]`.
pub struct LevelPrediction<'g, T: Float> {
    pub level: usize,
    pub logits: Var<'g, T>,
    pub boxes: Var<'g, T>,
}

impl<T: Float> Head<T> {
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 || config.num_classes == 0 {
            return Err(Error::invalid(format!("head needs nonzero channels and classes: {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let tower = (0..2).map(|_| Conv2d::new(&mut rng, c, c, 3, 1, 1, true)).collect();
        let mut cls = Conv2d::new(&mut rng, c, config.num_classes, 1, 1, 0, true);
        let mut bbox = Conv2d::new(&mut rng, c, 4, 1, 1, 0, true);
        // Small output weights keep the initial loss near the prior.
        for conv in [&mut cls, &mut bbox] {
            for v in conv.weight.value.data_mut() {
                *v *= T::from_f64_lossy(0.1);
            }
        }
        let prior = T::from_f64_lossy(-((1.0 - PRIOR_PROB) / PRIOR_PROB).ln());
        for v in cls.bias.as_mut().unwrap().value.data_mut() {
            *v = prior;
        }
        Ok(Head { config, tower, cls, bbox })
    }

    pub fn forward<'g>(
        &self,
        ctx: Ctx<'g, T>,
        levels: &[(usize, Var<'g, T>)],
        mask: &LevelMask,
    ) -> Result<Vec<LevelPrediction<'g, T>>> {
        let mut out = Vec::new();
        for &(level, x) in levels.iter().filter(|(l, _)| mask.contains(*l)) {
            let c = x.shape()[1];
            if c != self.config.channels {
                return Err(Error::invalid(format!(
                    "level {level}: head expects {} channels, got {c}",
                    self.config.channels
                )));
            }
            let mut h = x;
            for conv in &self.tower {
                h = conv.forward(ctx, h).relu();
            }
            out.push(LevelPrediction { level, logits: self.cls.forward(ctx, h), boxes: self.bbox.forward(ctx, h) });
        }
        if out.is_empty() {
            return Err(Error::invalid("no pyramid level selected by the head mask"));
        }
        Ok(out)
    }
}

impl<T: Float> Module<T> for Head<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.tower.iter().enumerate() {
            c.visit(&join(prefix, &format!("tower{i}")), f);
        }
        self.cls.visit(&join(prefix, "cls"), f);
        self.bbox.visit(&join(prefix, "bbox"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.tower.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("tower{i}")), f);
        }
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.bbox.visit_mut(&join(prefix, "bbox"), f);
    }
}

/// Image-space center of location `(y, x)` on a level.
pub fn location_center(level: usize, y: usize, x: usize) -> (f64, f64) {
    let s = level_stride(level) as f64;
    ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s)
}

/// A positive location: class and `ltrb` distances in units of the level stride.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub class: usize,
    pub ltrb: [f64; 4],
    pub gt_index: usize,
}

/// Positives of one level, row-major over `H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelAssignment {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Option<Positive>>,
}

impl LevelAssignment {
    pub fn num_positive(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// Assign each box to the level chosen by its size, then mark every location
/// of that level whose center lies strictly inside the box; the smallest box
/// wins ties. A box containing no center claims the location whose cell holds
/// its own center.
pub fn assign_locations(t: &DetectionTargets, dims: &[(usize, usize, usize)], ranges: &SizeRanges) -> Vec<LevelAssignment> {
    let mut out: Vec<LevelAssignment> = dims
        .iter()
        .map(|&(level, height, width)| LevelAssignment { level, height, width, cells: vec![None; height * width] })
        .collect();
    let mut best_area: Vec<Vec<f64>> = dims.iter().map(|&(_, h, w)| vec![f64::INFINITY; h * w]).collect();
    for (gi, (b, &class)) in t.boxes.iter().zip(&t.labels).enumerate() {
        let level = ranges.level_for(b);
        let Some(li) = out.iter().position(|a| a.level == level) else { continue };
        let (h, w) = (out[li].height, out[li].width);
        let s = level_stride(level) as f64;
        let area = b[2] * b[3];
        let (x0, y0, x1, y1) = (b[0], b[1], b[0] + b[2], b[1] + b[3]);
        let mut claim = |idx: usize, cx: f64, cy: f64| {
            if area < best_area[li][idx] {
                best_area[li][idx] = area;
                out[li].cells[idx] = Some(Positive {
                    class,
                    ltrb: [(cx - x0) / s, (cy - y0) / s, (x1 - cx) / s, (y1 - cy) / s],
                    gt_index: gi,
                });
            }
        };
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = location_center(level, y, x);
                if cx > x0 && cx < x1 && cy > y0 && cy < y1 {
                    claim(y * w + x, cx, cy);
                    any = true;
                }
            }
        }
        if !any {
            let bx = ((x0 + x1) / 2.0 / s).floor().clamp(0.0, (w - 1) as f64) as usize;
            let by = ((y0 + y1) / 2.0 / s).floor().clamp(0.0, (h - 1) as f64) as usize;
            let (cx, cy) = location_center(level, by, bx);
            claim(by * w + bx, cx, cy);
        }
    }
    out
}

/// Offsets `(left, top)` that symmetric padding to [`SIZE_DIVISOR`] adds.
pub fn pad_offsets(width: usize, height: usize) -> (usize, usize) {
    let pad = |v: usize| (v.div_ceil(SIZE_DIVISOR) * SIZE_DIVISOR - v) / 2;
    (pad(width), pad(height))
}

/// Focal classification plus L1 box regression, each divided by the number
/// of positives (at least one). `targets[n]` describes batch item `n`.
pub fn detection_loss<'g, T: Float>(
    preds: &[LevelPrediction<'g, T>],
    targets: &[DetectionTargets],
    ranges: &SizeRanges,
) -> Result<(Var<'g, T>, LossReport)> {
    let first = preds.first().ok_or_else(|| Error::invalid("no predictions"))?;
    let (n, k, _, _) = first.logits.dims4();
    if targets.len() != n {
        return Err(Error::invalid(format!("{} target sets for a batch of {n}", targets.len())));
    }
    for t in targets {
        t.validate()?;
    }
    let dims: Vec<(usize, usize, usize)> = preds
        .iter()
        .map(|p| {
            let (_, _, h, w) = p.logits.dims4();
            (p.level, h, w)
        })
        .collect();
    let assignments: Vec<Vec<LevelAssignment>> = targets
        .iter()
        .map(|t| {
            let (dx, dy) = pad_offsets(t.width, t.height);
            assign_locations(&t.translated(dx as f64, dy as f64), &dims, ranges)
        })
        .collect();
    let npos: usize = assignments.iter().flatten().map(|a| a.num_positive()).sum();
    let norm = T::one() / T::from_usize(npos.max(1)).unwrap();

    let mut report = LossReport::default();
    let mut cls_total: Option<Var<'g, T>> = None;
    let mut box_total: Option<Var<'g, T>> = None;
    for (li, p) in preds.iter().enumerate() {
        let (_, kk, h, w) = p.logits.dims4();
        if kk != k {
            return Err(Error::Shape(format!("level {}: {kk} classes vs {k}", p.level)));
        }
        let s = h * w;
        let mut cls_t = Tensor::<T>::zeros(&[n, k, h, w]);
        let mut box_t = Tensor::<T>::zeros(&[n, 4, h, w]);
        let mut box_m = Tensor::<T>::zeros(&[n, 4, h, w]);
        for (b, asg) in assignments.iter().enumerate() {
            for (idx, cell) in asg[li].cells.iter().enumerate() {
                let Some(pos) = cell else { continue };
                if pos.class >= k {
                    return Err(Error::invalid(format!("class {} outside {k} classes", pos.class)));
                }
                cls_t.data_mut()[(b * k + pos.class) * s + idx] = T::one();
                for j in 0..4 {
                    box_t.data_mut()[(b * 4 + j) * s + idx] = T::from_f64_lossy(pos.ltrb[j]);
                    box_m.data_mut()[(b * 4 + j) * s + idx] = T::one();
                }
            }
        }
        let g = p.logits.graph();
        let cls = p.logits.sigmoid_focal_sum(&cls_t, FOCAL_ALPHA, FOCAL_GAMMA).scale(norm);
        let bx = p.boxes.sub(g.constant(box_t)).abs().mul(g.constant(box_m)).sum().scale(norm);
        report.per_level.entry(p.level).or_default().insert(DET_CLS.into(), cls.item().as_f64());
        report.per_level.entry(p.level).or_default().insert(DET_BOX.into(), bx.item().as_f64());
        report.add_term(DET_CLS, cls.item().as_f64());
        report.add_term(DET_BOX, bx.item().as_f64());
        cls_total = Some(match cls_total {
            Some(a) => a.add(cls),
            None => cls,
        });
        box_total = Some(match box_total {
            Some(a) => a.add(bx),
            None => bx,
        });
    }
    report.total = report.reconstruct_total();
    Ok((cls_total.unwrap().add(box_total.unwrap()), report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `(x, y, w, h)` in image pixels.
    pub bbox: [f64; 4],
    pub class: usize,
    pub score: f64,
}

/// Plain per-level outputs for one image: logits `[K, H, W]`, distances `[4, H, W]`.
#[derive(Clone, Debug)]
pub struct HeadOutput<T: Float = f32> {
    pub levels: Vec<(usize, Tensor<T>, Tensor<T>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { score_threshold: 0.05, nms_iou: 0.6, max_detections: 100 }
    }
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// Greedy per-class suppression over score-sorted detections (stable order).
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.iter().all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

/// Turn head outputs into scored boxes. `offset` is the `(left, top)` padding
/// to remove and `(width, height)` the original image size used for clipping.
pub fn decode_detections<T: Float>(
    out: &HeadOutput<T>,
    params: &DecodeParams,
    offset: (usize, usize),
    image_size: (usize, usize),
) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&params.score_threshold) || !(0.0..=1.0).contains(&params.nms_iou) {
        return Err(Error::invalid(format!("decode thresholds must lie in [0, 1]: {params:?}")));
    }
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let mut cands = Vec::new();
    for (level, logits, boxes) in &out.levels {
        let (k, h, w) = logits.dims3();
        let s = level_stride(*level) as f64;
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let (cx, cy) = location_center(*level, y, x);
                let (cx, cy) = (cx - offset.0 as f64, cy - offset.1 as f64);
                let d: Vec<f64> = (0..4).map(|j| boxes.data()[j * h * w + idx].as_f64().max(0.0) * s).collect();
                let x0 = (cx - d[0]).clamp(0.0, iw);
                let y0 = (cy - d[1]).clamp(0.0, ih);
                let x1 = (cx + d[2]).clamp(0.0, iw);
                let y1 = (cy + d[3]).clamp(0.0, ih);
                if x1 <= x0 || y1 <= y0 {
                    continue;
                }
                for c in 0..k {
                    let score = sigmoid(logits.data()[c * h * w + idx].as_f64());
                    if score > params.score_threshold {
                        cands.push(Detection { bbox: [x0, y0, x1 - x0, y1 - y0], class: c, score });
                    }
                }
            }
        }
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    cands.truncate(1000);
    let mut kept = nms(cands, params.nms_iou);
    kept.truncate(params.max_detections);
    Ok(kept)
}

/// Extractor plus head: a complete detector.
#[derive(Clone, Debug)]
pub struct Detector<T: Float = f32> {
    pub extractor: Extractor<T>,
    pub head: Head<T>,
    pub mask: LevelMask,
}

impl<T: Float> Detector<T> {
    /// Pyramid and predictions for an already padded `[N, 3, H, W]` batch.
    pub fn forward<'g>(&self, ctx: Ctx<'g, T>, images: Var<'g, T>) -> Result<(FpnOutput<'g, T>, Vec<LevelPrediction<'g, T>>)> {
        let fpn = self.extractor.forward(ctx, images)?;
        let levels: Vec<_> = fpn.levels.iter().enumerate().map(|(i, v)| (N_S + i, *v)).collect();
        let preds = self.head.forward(ctx, &levels, &self.mask)?;
        Ok((fpn, preds))
    }

    /// Eval-mode detections for equally sized images.
    pub fn detect(&self, images: &[&Image], params: &DecodeParams) -> Result<Vec<Vec<Detection>>> {
        let batch = image_batch(images)?.cast::<T>();
        let (w, h) = (images[0].width, images[0].height);
        let graph = Graph::new();
        let x = graph.constant(pad_to_multiple(&batch, SIZE_DIVISOR)?);
        let (_, preds) = self.forward(Ctx::eval(&graph), x)?;
        let offset = pad_offsets(w, h);
        (0..images.len())
            .map(|b| {
                let out = HeadOutput {
                    levels: preds
                        .iter()
                        .map(|p| (p.level, p.logits.value().batch_item(b), p.boxes.value().batch_item(b)))
                        .collect(),
                };
                decode_detections(&out, params, offset, (w, h))
            })
            .collect()
    }
}

impl<T: Float> Module<T> for Detector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.extractor.visit(&join(prefix, "extractor"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.extractor.visit_mut(&join(prefix, "extractor"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
