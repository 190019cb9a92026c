//! Fully convolutional discriminator scoring every feature position as real
//! (target feature) or fake (super-resolved).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Param, Var};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Ctx, Mode, Module, LEAKY_SLOPE};
use crate::pyramid::FeatureMap;
use crate::tensor::{Float, Tensor};

/// Block widths at full scale.
pub const DEFAULT_WIDTHS: [usize; 3] = [512, 1024, 1024];

#[derive(Clone, Debug)]
pub struct Discriminator<T: Float = f32> {
    pub convs: Vec<Conv2d<T>>,
    pub bns: Vec<BatchNorm2d<T>>,
    pub classifier: Conv2d<T>,
}

impl<T: Float> Discriminator<T> {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        Self::with_widths(channels, DEFAULT_WIDTHS, seed)
    }

    pub fn with_widths(channels: usize, widths: [usize; 3], seed: u64) -> Result<Self> {
        if channels < 1 || widths.contains(&0) {
            return Err(Error::invalid(format!("discriminator needs C >= 1 and nonzero widths, got {channels}, {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut c_in = channels;
        for &w in &widths {
            convs.push(Conv2d::new(&mut rng, c_in, w, 3, 1, 1, false));
            bns.push(BatchNorm2d::new(w));
            c_in = w;
        }
        let classifier = Conv2d::new(&mut rng, c_in, 1, 1, 1, 0, true);
        Ok(Discriminator { convs, bns, classifier })
    }

    pub fn channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.convs[0].out_channels(), self.convs[1].out_channels(), self.convs[2].out_channels()]
    }

    /// `[N, C, H, W] -> [N, 1, H, W]` probabilities.
    pub fn forward<'g>(&self, ctx: Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::invalid(format!(
                "discriminator expects {} input channels, got shape {shape:?}",
                self.channels()
            )));
        }
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            h = bn.forward(ctx, conv.forward(ctx, h)).leaky_relu(LEAKY_SLOPE);
        }
        Ok(self.classifier.forward(ctx, h).sigmoid())
    }
}

impl<T: Float> Module<T> for Discriminator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, (c, b)) in self.convs.iter().zip(&self.bns).enumerate() {
            c.visit(&join(prefix, &format!("block{i}.conv")), f);
            b.visit(&join(prefix, &format!("block{i}.bn")), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, (c, b)) in self.convs.iter_mut().zip(&mut self.bns).enumerate() {
            c.visit_mut(&join(prefix, &format!("block{i}.conv")), f);
            b.visit_mut(&join(prefix, &format!("block{i}.bn")), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// Probability map `1 x H x W` for one feature map.
pub fn discriminator_forward<T: Float>(d: &Discriminator<T>, fm: &FeatureMap<T>, mode: Mode) -> Result<Tensor<T>> {
    let (c, h, w) = fm.data().dims3();
    let graph = Graph::new();
    let x = graph.constant(fm.data().clone().reshape(&[1, c, h, w])?);
    let y = d.forward(Ctx { graph: &graph, mode, trainable: false }, x)?;
    (*y.value()).clone().reshape(&[1, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_and_resolution() {
        let d = Discriminator::<f32>::with_widths(4, [8, 16, 16], 1).unwrap();
        assert_eq!(d.classifier.out_channels(), 1);
        assert_eq!(d.channels(), 4);
        let fm = FeatureMap::new(Tensor::full(&[4, 7, 9], 0.3), 2).unwrap();
        let p = discriminator_forward(&d, &fm, Mode::Eval).unwrap();
        assert_eq!(p.shape(), &[1, 7, 9]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
