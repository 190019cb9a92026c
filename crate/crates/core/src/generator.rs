//! The super-resolving feature generator: a residual network that doubles the
//! resolution of any feature map, added on top of a bilinear shortcut.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Param, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvTranspose2d, Ctx, LevelBatchNorm2d, Mode, Module, LEAKY_SLOPE};
use crate::ops::Interpolation;
use crate::pyramid::FeatureMap;
use crate::tensor::{Float, Tensor};

pub const NUM_RES_BLOCKS: usize = 5;

#[derive(Clone, Debug)]
pub struct ResBlock<T: Float> {
    pub conv1: Conv2d<T>,
    pub bn1: LevelBatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: LevelBatchNorm2d<T>,
}

impl<T: Float> ResBlock<T> {
    fn new(rng: &mut ChaCha8Rng, width: usize) -> Self {
        ResBlock {
            conv1: Conv2d::new(rng, width, width, 3, 1, 1, false),
            bn1: LevelBatchNorm2d::new(width),
            conv2: Conv2d::new(rng, width, width, 3, 1, 1, false),
            bn2: LevelBatchNorm2d::new(width),
        }
    }

    fn forward<'g>(&self, ctx: Ctx<'g, T>, x: Var<'g, T>, level: usize) -> Result<Var<'g, T>> {
        let y = self.bn1.forward(ctx, self.conv1.forward(ctx, x), level)?.leaky_relu(LEAKY_SLOPE);
        let y = self.bn2.forward(ctx, self.conv2.forward(ctx, y), level)?;
        Ok(x.add(y))
    }
}

impl<T: Float> Module<T> for ResBlock<T> {
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

/// Generator parameters. One instance serves every pyramid level.
#[derive(Debug)]
pub struct Generator<T: Float = f32> {
    pub stem: Conv2d<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub post: Conv2d<T>,
    pub post_bn: LevelBatchNorm2d<T>,
    pub deconv: ConvTranspose2d<T>,
    pub proj: Conv2d<T>,
    calls: AtomicU64,
}

impl<T: Float> Clone for Generator<T> {
    fn clone(&self) -> Self {
        Generator {
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            post: self.post.clone(),
            post_bn: self.post_bn.clone(),
            deconv: self.deconv.clone(),
            proj: self.proj.clone(),
            calls: AtomicU64::new(0),
        }
    }
}

impl<T: Float> Generator<T> {
    /// Hidden width equal to `channels`.
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        Self::with_width(channels, channels, seed)
    }

    pub fn with_width(channels: usize, width: usize, seed: u64) -> Result<Self> {
        if channels < 1 || width < 1 {
            return Err(Error::invalid(format!("generator needs C >= 1 and width >= 1, got {channels}, {width}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new(&mut rng, channels, width, 3, 1, 1, true);
        let blocks = (0..NUM_RES_BLOCKS).map(|_| ResBlock::new(&mut rng, width)).collect();
        let post = Conv2d::new(&mut rng, width, width, 3, 1, 1, false);
        let deconv = ConvTranspose2d::new(&mut rng, width, width, 4, 2, 1);
        Ok(Generator {
            stem,
            blocks,
            post,
            post_bn: LevelBatchNorm2d::new(width),
            deconv,
            proj: Conv2d::zeroed(width, channels, 1, 1, 0),
            calls: AtomicU64::new(0),
        })
    }

    pub fn channels(&self) -> usize {
        self.stem.in_channels()
    }

    pub fn width(&self) -> usize {
        self.stem.out_channels()
    }

    /// Number of forward passes since construction or the last reset.
    pub fn invocations(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_invocations(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    /// `[N, C, H, W] -> [N, C, 2H, 2W]` for an input from pyramid `level`,
    /// which selects the normalization statistics used in eval mode.
    pub fn forward<'g>(&self, ctx: Ctx<'g, T>, x: Var<'g, T>, level: usize) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::invalid(format!(
                "generator expects {} input channels, got shape {shape:?}",
                self.channels()
            )));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h = self.stem.forward(ctx, x).leaky_relu(LEAKY_SLOPE);
        for b in &self.blocks {
            h = b.forward(ctx, h, level)?;
        }
        let h = self.post_bn.forward(ctx, self.post.forward(ctx, h), level)?.leaky_relu(LEAKY_SLOPE);
        let h = self.deconv.forward(ctx, h).leaky_relu(LEAKY_SLOPE);
        let residual = self.proj.forward(ctx, h);
        Ok(residual.add(x.upsample2x(Interpolation::Bilinear)))
    }
}

impl<T: Float> Module<T> for Generator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("res{i}")), f);
        }
        self.post.visit(&join(prefix, "post"), f);
        self.post_bn.visit(&join(prefix, "post_bn"), f);
        self.deconv.visit(&join(prefix, "deconv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("res{i}")), f);
        }
        self.post.visit_mut(&join(prefix, "post"), f);
        self.post_bn.visit_mut(&join(prefix, "post_bn"), f);
        self.deconv.visit_mut(&join(prefix, "deconv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Super-resolve a single feature map outside any training graph.
pub fn generator_forward<T: Float>(g: &Generator<T>, fm: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
    let (c, h, w) = fm.data().dims3();
    if c != g.channels() {
        return Err(Error::invalid(format!("generator expects {} channels, got {c}", g.channels())));
    }
    let graph = Graph::new();
    let x = graph.constant(fm.data().clone().reshape(&[1, c, h, w])?);
    let ctx = Ctx { graph: &graph, mode, trainable: false };
    let y = g.forward(ctx, x, fm.level())?;
    let out = (*y.value()).clone().reshape(&[c, 2 * h, 2 * w])?;
    FeatureMap::new(out, fm.level())
}

/// Convenience for tensors already in `[N, C, H, W]` form.
pub fn generate<T: Float>(g: &Generator<T>, x: &Tensor<T>, level: usize, mode: Mode) -> Result<Tensor<T>> {
    let graph = Graph::new();
    let ctx = Ctx { graph: &graph, mode, trainable: false };
    let y = g.forward(ctx, graph.constant(x.clone()), level)?;
    Ok((*y.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_starts_at_zero_and_init_is_deterministic() {
        let a = Generator::<f32>::new(4, 7).unwrap();
        let b = Generator::<f32>::new(4, 7).unwrap();
        assert_eq!(a.state_dict(""), b.state_dict(""));
        assert!(a.proj.weight.value.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.blocks.len(), NUM_RES_BLOCKS);
        assert!(Generator::<f32>::new(0, 0).is_err());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let g = Generator::<f32>::new(4, 0).unwrap();
        let fm = FeatureMap::new(Tensor::zeros(&[3, 4, 4]), 3).unwrap();
        let err = generator_forward(&g, &fm, Mode::Eval).unwrap_err().to_string();
        assert!(err.contains('4') && err.contains('3'), "{err}");
    }
}
