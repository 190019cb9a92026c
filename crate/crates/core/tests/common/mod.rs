//! Shared helpers for the integration tests.
#![allow(dead_code, clippy::type_complexity, clippy::let_and_return)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srf_core::{Graph, Module, Result, Tensor, Var};

/// Step used by the central differences.
pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this in magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl FdReport {
    fn note(&mut self, name: &str, a: f64, n: f64) {
        self.checked += 1;
        let e = rel_err(a, n);
        if e > self.max_rel {
            self.max_rel = e;
            self.worst = format!("{name}: analytic {a:e} numeric {n:e}");
        }
    }
}

fn set_entry<M: Module<f64>>(m: &mut M, name: &str, idx: usize, v: f64) {
    m.visit_mut("", &mut |n, p| {
        if n == name {
            p.value.data_mut()[idx] = v;
        }
    });
}

/// Compares backpropagated parameter gradients of `loss` with central
/// differences on up to `per_tensor` entries of every trainable tensor.
pub fn check_params<M: Module<f64>>(
    m: &mut M,
    per_tensor: usize,
    loss: &dyn for<'g> Fn(&M, &'g Graph<f64>) -> Result<Var<'g, f64>>,
) -> FdReport {
    let graph = Graph::new();
    let l = loss(m, &graph).unwrap();
    let grads = graph.backward(l).unwrap();
    let mut analytic = Vec::new();
    m.visit("", &mut |name, p| {
        if p.trainable() {
            let g = grads.get(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            analytic.push((name.to_string(), p.value.data().to_vec(), g.into_data()));
        }
    });
    drop(grads);
    let mut report = FdReport::default();
    for (name, values, g) in analytic {
        let n = values.len();
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|i| i * n / per_tensor).collect() };
        for idx in picks {
            let x0 = values[idx];
            let eval = |m: &mut M, v: f64| {
                set_entry(m, &name, idx, v);
                let graph = Graph::new();
                let r = loss(m, &graph).unwrap().item();
                r
            };
            let up = eval(m, x0 + FD_STEP);
            let down = eval(m, x0 - FD_STEP);
            set_entry(m, &name, idx, x0);
            report.note(&format!("{name}[{idx}]"), g[idx], (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}

/// Same as [`check_params`] for the gradient with respect to one input tensor.
pub fn check_input(
    x: &Tensor<f64>,
    per_tensor: usize,
    loss: &dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
) -> FdReport {
    let graph = Graph::new();
    let v = graph.input(x.clone());
    let l = loss(&graph, v).unwrap();
    let grads = graph.backward(l).unwrap();
    let g = grads.input(&v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let n = x.len();
    let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|i| i * n / per_tensor).collect() };
    let mut report = FdReport::default();
    for idx in picks {
        let eval = |delta: f64| {
            let mut y = x.clone();
            y.data_mut()[idx] += delta;
            let graph = Graph::new();
            let v = graph.input(y);
            let r = loss(&graph, v).unwrap().item();
            r
        };
        let num = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        report.note(&format!("input[{idx}]"), g.data()[idx], num);
    }
    report
}
