//! FPN-style multi-scale extractor with a pluggable top-down upsampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Param, Var};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{join, BatchNorm2d, Conv2d, Ctx, Mode, Module};
use crate::ops::Interpolation;
use crate::pyramid::{image_batch, FeatureMap, FeaturePyramid, Image, NUM_LEVELS, N_E, N_S};
use crate::tensor::{Float, Tensor};

/// Images are zero-padded to a multiple of this before the backbone.
pub const SIZE_DIVISOR: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Pyramid channel count.
    pub channels: usize,
    pub stem_width: usize,
    /// Output widths of the four backbone stages (strides 4, 8, 16, 32).
    pub stage_widths: [usize; 4],
}

impl ExtractorConfig {
    pub fn full_scale() -> Self {
        ExtractorConfig { channels: 256, stem_width: 32, stage_widths: [32, 64, 128, 256] }
    }
}

/// Which operation doubles resolution in the top-down pathway.
#[derive(Clone, Debug)]
pub enum Upsampler<T: Float = f32> {
    Naive(Interpolation),
    Srf(Generator<T>),
}

impl<T: Float> Upsampler<T> {
    pub fn name(&self) -> String {
        match self {
            Upsampler::Naive(m) => m.name().to_string(),
            Upsampler::Srf(_) => "srf".to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackboneStage<T: Float> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
}

impl<T: Float> BackboneStage<T> {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        BackboneStage {
            conv1: Conv2d::new(rng, c_in, c_out, 3, 2, 1, false),
            bn1: BatchNorm2d::new(c_out),
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1, false),
            bn2: BatchNorm2d::new(c_out),
        }
    }

    fn forward<'g>(&self, ctx: Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.bn1.forward(ctx, self.conv1.forward(ctx, x)).relu();
        self.bn2.forward(ctx, self.conv2.forward(ctx, h)).relu()
    }
}

impl<T: Float> Module<T> for BackboneStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Extractor<T: Float = f32> {
    pub config: ExtractorConfig,
    pub stem: Conv2d<T>,
    pub stem_bn: BatchNorm2d<T>,
    pub stages: Vec<BackboneStage<T>>,
    /// Indexed by `level - N_S`.
    pub laterals: Vec<Conv2d<T>>,
    pub outputs: Vec<Conv2d<T>>,
    pub upsampler: Upsampler<T>,
    /// Run the generator in eval mode with no gradient even when the rest trains.
    pub freeze_generator: bool,
}

/// Result of a batched forward pass.
pub struct FpnOutput<'g, T: Float> {
    /// `P_2..P_5`.
    pub levels: Vec<Var<'g, T>>,
    /// Upsampled coarser maps entering the merges of levels `2..=4` (after cropping).
    pub upsampled: Vec<Var<'g, T>>,
}

impl<T: Float> Extractor<T> {
    pub fn new(config: ExtractorConfig, upsampler: Upsampler<T>, seed: u64) -> Result<Self> {
        let ExtractorConfig { channels, stem_width, stage_widths } = config;
        if channels == 0 || stem_width == 0 || stage_widths.contains(&0) {
            return Err(Error::invalid(format!("extractor widths must be nonzero: {config:?}")));
        }
        if let Upsampler::Srf(g) = &upsampler {
            if g.channels() != channels {
                return Err(Error::invalid(format!(
                    "generator has {} channels but the pyramid has {channels}",
                    g.channels()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new(&mut rng, 3, stem_width, 3, 2, 1, false);
        let mut stages = Vec::new();
        let mut c_in = stem_width;
        for &w in &stage_widths {
            stages.push(BackboneStage::new(&mut rng, c_in, w));
            c_in = w;
        }
        let laterals = stage_widths.iter().map(|&w| Conv2d::new(&mut rng, w, channels, 1, 1, 0, true)).collect();
        let outputs = (0..NUM_LEVELS).map(|_| Conv2d::new(&mut rng, channels, channels, 3, 1, 1, true)).collect();
        Ok(Extractor {
            config,
            stem,
            stem_bn: BatchNorm2d::new(stem_width),
            stages,
            laterals,
            outputs,
            upsampler,
            freeze_generator: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn generator(&self) -> Option<&Generator<T>> {
        match &self.upsampler {
            Upsampler::Srf(g) => Some(g),
            Upsampler::Naive(_) => None,
        }
    }

    pub fn generator_mut(&mut self) -> Option<&mut Generator<T>> {
        match &mut self.upsampler {
            Upsampler::Srf(g) => Some(g),
            Upsampler::Naive(_) => None,
        }
    }

    /// Bottom-up features `C_2..C_5` of a padded `[N, 3, H, W]` batch.
    pub fn backbone<'g>(&self, ctx: Ctx<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let (_, c, h, w) = x.dims4();
        if c != 3 || h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
            return Err(Error::invalid(format!(
                "backbone needs 3-channel input padded to a multiple of {SIZE_DIVISOR}, got {:?}",
                x.shape()
            )));
        }
        let mut h = self.stem_bn.forward(ctx, self.stem.forward(ctx, x)).relu();
        let mut out = Vec::with_capacity(4);
        for s in &self.stages {
            h = s.forward(ctx, h);
            out.push(h);
        }
        Ok(out)
    }

    fn upsample<'g>(&self, ctx: Ctx<'g, T>, x: Var<'g, T>, level: usize) -> Result<Var<'g, T>> {
        match &self.upsampler {
            Upsampler::Naive(m) => Ok(x.upsample2x(*m)),
            Upsampler::Srf(g) => {
                let gctx = if self.freeze_generator { ctx.frozen() } else { ctx };
                g.forward(gctx, x, level)
            }
        }
    }

    /// Top-down pathway over `C_2..C_5`.
    pub fn fpn<'g>(&self, ctx: Ctx<'g, T>, bottom_up: &[Var<'g, T>]) -> Result<FpnOutput<'g, T>> {
        if bottom_up.len() != NUM_LEVELS {
            return Err(Error::invalid(format!("expected {NUM_LEVELS} bottom-up maps, got {}", bottom_up.len())));
        }
        let mut pre: Vec<Option<Var<'g, T>>> = vec![None; NUM_LEVELS];
        let mut upsampled = vec![None; NUM_LEVELS - 1];
        let top = NUM_LEVELS - 1;
        pre[top] = Some(self.laterals[top].forward(ctx, bottom_up[top]));
        for i in (0..top).rev() {
            let lateral = self.laterals[i].forward(ctx, bottom_up[i]);
            let up = self.upsample(ctx, pre[i + 1].unwrap(), N_S + i + 1)?;
            let (_, _, lh, lw) = lateral.dims4();
            let (_, _, uh, uw) = up.dims4();
            if uh < lh || uw < lw || uh - lh > 1 || uw - lw > 1 {
                return Err(Error::Consistency(format!(
                    "level {}: upsampled {uh}x{uw} does not match lateral {lh}x{lw}",
                    N_S + i
                )));
            }
            let up = up.crop(lh, lw);
            upsampled[i] = Some(up);
            pre[i] = Some(lateral.add(up));
        }
        let levels = pre
            .into_iter()
            .zip(&self.outputs)
            .map(|(p, conv)| conv.forward(ctx, p.unwrap()))
            .collect();
        Ok(FpnOutput { levels, upsampled: upsampled.into_iter().map(Option::unwrap).collect() })
    }

    pub fn forward<'g>(&self, ctx: Ctx<'g, T>, images: Var<'g, T>) -> Result<FpnOutput<'g, T>> {
        let bu = self.backbone(ctx, images)?;
        self.fpn(ctx, &bu)
    }

    /// Eval-mode pyramids for a batch of raw images, as plain tensors per level.
    pub fn pyramid_tensors(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let graph = Graph::new();
        let x = graph.constant(pad_to_multiple(images, SIZE_DIVISOR)?);
        let out = self.forward(Ctx::eval(&graph), x)?;
        Ok(out.levels.iter().map(|v| (*v.value()).clone()).collect())
    }
}

impl<T: Float> Module<T> for Extractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "backbone.stem"), f);
        self.stem_bn.visit(&join(prefix, "backbone.stem_bn"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("backbone.stage{}", i + N_S)), f);
        }
        for (i, (l, o)) in self.laterals.iter().zip(&self.outputs).enumerate() {
            l.visit(&join(prefix, &format!("fpn.lateral{}", i + N_S)), f);
            o.visit(&join(prefix, &format!("fpn.output{}", i + N_S)), f);
        }
        if let Upsampler::Srf(g) = &self.upsampler {
            g.visit(&join(prefix, "generator"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "backbone.stem"), f);
        self.stem_bn.visit_mut(&join(prefix, "backbone.stem_bn"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("backbone.stage{}", i + N_S)), f);
        }
        for (i, (l, o)) in self.laterals.iter_mut().zip(&mut self.outputs).enumerate() {
            l.visit_mut(&join(prefix, &format!("fpn.lateral{}", i + N_S)), f);
            o.visit_mut(&join(prefix, &format!("fpn.output{}", i + N_S)), f);
        }
        if let Upsampler::Srf(g) = &mut self.upsampler {
            g.visit_mut(&join(prefix, "generator"), f);
        }
    }
}

/// Zero-pad the trailing `[H, W]` axes symmetrically up to a multiple of `m`.
/// Inputs smaller than `m` in either dimension are rejected.
pub fn pad_to_multiple<T: Float>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    if h < m || w < m {
        return Err(Error::invalid(format!("image {h}x{w} is smaller than {m}x{m}")));
    }
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let planes = x.len() / (h * w);
    let mut out = vec![T::zero(); planes * ph * pw];
    for p in 0..planes {
        for y in 0..h {
            let src = &x.data()[(p * h + y) * w..(p * h + y + 1) * w];
            let dst = (p * ph + y + top) * pw + left;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[nd - 2] = ph;
    out_shape[nd - 1] = pw;
    Tensor::from_vec(&out_shape, out)
}

/// Bottom-up features `C_2..C_5` for one image.
#[derive(Clone, Debug)]
pub struct BottomUpFeatures<T: Float = f32> {
    pub stages: Vec<FeatureMap<T>>,
}

fn single_image<T: Float>(img: &Image) -> Result<Tensor<T>> {
    pad_to_multiple(&image_batch(&[img])?.cast::<T>(), SIZE_DIVISOR)
}

fn to_feature_maps<T: Float>(vars: &[Var<'_, T>]) -> Result<Vec<FeatureMap<T>>> {
    vars.iter()
        .enumerate()
        .map(|(i, v)| FeatureMap::new(v.value().batch_item(0), N_S + i))
        .collect()
}

pub fn backbone_forward<T: Float>(ext: &Extractor<T>, img: &Image, mode: Mode) -> Result<BottomUpFeatures<T>> {
    let graph = Graph::new();
    let x = graph.constant(single_image(img)?);
    let bu = ext.backbone(Ctx { graph: &graph, mode, trainable: false }, x)?;
    Ok(BottomUpFeatures { stages: to_feature_maps(&bu)? })
}

pub fn fpn_forward<T: Float>(ext: &Extractor<T>, bu: &BottomUpFeatures<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
    let graph = Graph::new();
    let vars = bu
        .stages
        .iter()
        .map(|m| {
            let (c, h, w) = m.data().dims3();
            Ok(graph.constant(m.data().clone().reshape(&[1, c, h, w])?))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = ext.fpn(Ctx { graph: &graph, mode, trainable: false }, &vars)?;
    FeaturePyramid::new(to_feature_maps(&out.levels)?)
}

pub fn extract_pyramid<T: Float>(ext: &Extractor<T>, img: &Image, mode: Mode) -> Result<FeaturePyramid<T>> {
    let graph = Graph::new();
    let x = graph.constant(single_image(img)?);
    let out = ext.forward(Ctx { graph: &graph, mode, trainable: false }, x)?;
    let pyr = FeaturePyramid::new(to_feature_maps(&out.levels)?)?;
    debug_assert_eq!(pyr.n_e(), N_E);
    Ok(pyr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExtractorConfig {
        ExtractorConfig { channels: 4, stem_width: 4, stage_widths: [4, 4, 8, 8] }
    }

    #[test]
    fn padding_is_symmetric_and_rejects_small_inputs() {
        let x = Tensor::<f32>::full(&[1, 34, 33], 1.0);
        let p = pad_to_multiple(&x, 32).unwrap();
        assert_eq!(p.shape(), &[1, 64, 64]);
        assert_eq!(p.data()[15 * 64 + 15], 1.0);
        assert_eq!(p.data()[14 * 64 + 15], 0.0);
        assert!(pad_to_multiple(&Tensor::<f32>::zeros(&[1, 31, 64]), 32).is_err());
    }

    #[test]
    fn strides_of_bottom_up_features() {
        let ext = Extractor::<f32>::new(tiny(), Upsampler::Naive(Interpolation::Nearest), 0).unwrap();
        let img = Image::new(96, 64, vec![0.5; 3 * 96 * 64]).unwrap();
        let bu = backbone_forward(&ext, &img, Mode::Eval).unwrap();
        let dims: Vec<_> = bu.stages.iter().map(|m| (m.height(), m.width())).collect();
        assert_eq!(dims, vec![(24, 16), (12, 8), (6, 4), (3, 2)]);
    }
}
