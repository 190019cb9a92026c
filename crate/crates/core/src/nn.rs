//! Layers, parameter traversal and forward-pass context.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BnUpdate, Graph, Param, ParamKey, Var};
use crate::error::{Error, Result};
use crate::pyramid::{N_E, N_S};
use crate::tensor::{Float, Tensor};

/// Negative slope of every leaky ReLU in the generator and discriminator.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass needs besides the module itself.
#[derive(Clone, Copy)]
pub struct Ctx<'g, T: Float> {
    pub graph: &'g Graph<T>,
    pub mode: Mode,
    /// When false, parameters bind as constants and receive no gradient.
    pub trainable: bool,
}

impl<'g, T: Float> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, mode: Mode) -> Self {
        Ctx { graph, mode, trainable: true }
    }

    pub fn eval(graph: &'g Graph<T>) -> Self {
        Ctx { graph, mode: Mode::Eval, trainable: false }
    }

    /// Eval-mode, non-trainable view: how frozen networks are run.
    pub fn frozen(self) -> Self {
        Ctx { mode: Mode::Eval, trainable: false, ..self }
    }

    pub fn bind(&self, p: &Param<T>) -> Var<'g, T> {
        self.graph.param(p, self.trainable)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named traversal over a network's tensors (parameters and buffers).
pub trait Module<T: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable() {
                n += p.value.len()
            }
        });
        n
    }

    /// All tensors as `f32`, keyed by dotted path.
    fn state_dict(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        let mut out = BTreeMap::new();
        self.visit(prefix, &mut |name, p| {
            out.insert(name.to_string(), p.value.cast());
        });
        out
    }

    /// Copy every tensor under `prefix` from `state`. All names must be present
    /// with matching shapes; nothing is modified if any check fails.
    fn load_state_dict(&mut self, prefix: &str, state: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let mut problem = None;
        self.visit(prefix, &mut |name, p| {
            if problem.is_some() {
                return;
            }
            match state.get(name) {
                None => problem = Some(Error::Checkpoint(format!("missing tensor '{name}'"))),
                Some(t) if t.shape() != p.value.shape() => {
                    problem = Some(Error::Checkpoint(format!(
                        "tensor '{name}' has shape {:?}, expected {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }
        self.visit_mut(prefix, &mut |name, p| {
            p.value = state[name].cast();
        });
        Ok(())
    }

    /// Fold recorded train-mode batch statistics into running averages, in recording order.
    fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        if updates.is_empty() {
            return;
        }
        self.visit_mut("", &mut |_, p| {
            for u in updates {
                let stat = if u.running_mean == p.key() {
                    &u.mean
                } else if u.running_var == p.key() {
                    &u.var
                } else {
                    continue;
                };
                let m = T::from_f64_lossy(u.momentum);
                for (r, &s) in p.value.data_mut().iter_mut().zip(stat) {
                    *r = (T::one() - m) * *r + m * s;
                }
            }
        });
    }

    /// Order-stable digest of every trainable parameter, for bookkeeping checks.
    fn param_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit("", &mut |name, p| {
            if !p.trainable() {
                return;
            }
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in p.value.data() {
                h = (h ^ v.as_f64().to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        });
        h
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, p| ok &= p.value.all_finite());
        ok
    }
}

fn normal_tensor<T: Float>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize, bias: bool) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        Conv2d {
            weight: Param::new(normal_tensor(rng, &[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt())),
            bias: bias.then(|| Param::new(Tensor::zeros(&[c_out]))),
            stride,
            pad,
        }
    }

    pub fn zeroed(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Param::new(Tensor::zeros(&[c_out, c_in, kernel, kernel])),
            bias: Some(Param::new(Tensor::zeros(&[c_out]))),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward<'g>(&self, ctx: Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = ctx.bind(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.bind(b));
        x.conv2d(w, b, self.stride, self.pad)
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Transposed convolution, weight layout `[C_in, C_out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> ConvTranspose2d<T> {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64 / (stride * stride) as f64;
        ConvTranspose2d {
            weight: Param::new(normal_tensor(rng, &[c_in, c_out, kernel, kernel], (2.0 / fan_in).sqrt())),
            bias: Some(Param::new(Tensor::zeros(&[c_out]))),
            stride,
            pad,
        }
    }

    pub fn forward<'g>(&self, ctx: Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = ctx.bind(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.bind(b));
        x.conv_transpose2d(w, b, self.stride, self.pad)
    }
}

impl<T: Float> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Float> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::full(&[channels], T::one())),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'g>(&self, ctx: Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        normalize(ctx, x, &self.gamma, &self.beta, (&self.running_mean, &self.running_var), self.momentum, self.eps)
    }
}

fn normalize<'g, T: Float>(
    ctx: Ctx<'g, T>,
    x: Var<'g, T>,
    gamma: &Param<T>,
    beta: &Param<T>,
    running: (&Param<T>, &Param<T>),
    momentum: f64,
    eps: f64,
) -> Var<'g, T> {
    let gamma = ctx.bind(gamma);
    let beta = ctx.bind(beta);
    match ctx.mode {
        Mode::Train => {
            let (y, stats) = x.batch_norm_train(gamma, beta, eps);
            let unbias = if stats.count > 1 {
                T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap()
            } else {
                T::one()
            };
            ctx.graph.record_bn(BnUpdate {
                running_mean: running.0.key(),
                running_var: running.1.key(),
                momentum,
                mean: stats.mean,
                var: stats.var.iter().map(|&v| v * unbias).collect(),
            });
            y
        }
        Mode::Eval => x.batch_norm_eval(gamma, beta, running.0.value.data(), running.1.value.data(), eps),
    }
}

/// Batch normalization with shared affine parameters and one pair of running
/// statistics per pyramid level, for layers applied to every level.
#[derive(Clone, Debug)]
pub struct LevelBatchNorm2d<T: Float> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    /// `(mean, var)` for levels `N_S..N_E`.
    pub running: Vec<(Param<T>, Param<T>)>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Float> LevelBatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let bn = BatchNorm2d::<T>::new(channels);
        LevelBatchNorm2d {
            gamma: bn.gamma,
            beta: bn.beta,
            running: (N_S..=N_E)
                .map(|_| (Param::buffer(Tensor::zeros(&[channels])), Param::buffer(Tensor::full(&[channels], T::one()))))
                .collect(),
            momentum: bn.momentum,
            eps: bn.eps,
        }
    }

    pub fn forward<'g>(&self, ctx: Ctx<'g, T>, x: Var<'g, T>, level: usize) -> Result<Var<'g, T>> {
        let (m, v) = level
            .checked_sub(N_S)
            .and_then(|i| self.running.get(i))
            .ok_or_else(|| Error::invalid(format!("level {level} outside {N_S}..={N_E}")))?;
        Ok(normalize(ctx, x, &self.gamma, &self.beta, (m, v), self.momentum, self.eps))
    }
}

impl<T: Float> Module<T> for LevelBatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        for (i, (m, v)) in self.running.iter().enumerate() {
            f(&join(prefix, &format!("running_mean_p{}", i + N_S)), m);
            f(&join(prefix, &format!("running_var_p{}", i + N_S)), v);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        for (i, (m, v)) in self.running.iter_mut().enumerate() {
            f(&join(prefix, &format!("running_mean_p{}", i + N_S)), m);
            f(&join(prefix, &format!("running_var_p{}", i + N_S)), v);
        }
    }
}

impl<T: Float> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Keys of every tensor in a module, used to route gradients and updates.
pub fn param_keys<T: Float, M: Module<T> + ?Sized>(m: &M) -> Vec<ParamKey> {
    let mut keys = Vec::new();
    m.visit("", &mut |_, p| keys.push(p.key()));
    keys
}

/// Convert every tensor of a module to another precision.
pub fn cast_module<T: Float, U: Float, M: Module<T>, N: Module<U>>(src: &M, dst: &mut N) -> Result<()> {
    let mut exact = BTreeMap::new();
    src.visit("", &mut |name, p| {
        exact.insert(name.to_string(), p.value.cast::<U>());
    });
    let mut missing = None;
    dst.visit_mut("", &mut |name, p| match exact.get(name) {
        Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
        _ => missing = Some(name.to_string()),
    });
    match missing {
        Some(name) => Err(Error::Checkpoint(format!("cast: no compatible tensor for '{name}'"))),
        None => Ok(()),
    }
}
