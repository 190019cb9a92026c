//! Separable resampling with half-pixel-center alignment.
//!
//! Output index `o` maps to source coordinate `(o + 0.5) / scale - 0.5`, the
//! usual image-resize convention. Every method is a fixed linear map per
//! axis, so the same taps drive the forward pass and its adjoint.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
    Bicubic,
}

impl Interpolation {
    pub const ALL: [Interpolation; 3] = [Interpolation::Nearest, Interpolation::Bilinear, Interpolation::Bicubic];

    pub fn name(self) -> &'static str {
        match self {
            Interpolation::Nearest => "nearest",
            Interpolation::Bilinear => "bilinear",
            Interpolation::Bicubic => "bicubic",
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nearest" | "nn" => Ok(Interpolation::Nearest),
            "bilinear" | "bl" => Ok(Interpolation::Bilinear),
            "bicubic" => Ok(Interpolation::Bicubic),
            other => Err(Error::invalid(format!("unknown interpolation method '{other}'"))),
        }
    }
}

/// Keys cubic convolution kernel with `a = -0.75`.
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps for every output index along one axis.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps<T> {
    pub in_len: usize,
    pub taps: Vec<Vec<(usize, T)>>,
}

impl<T: Float> AxisTaps<T> {
    pub fn new(method: Interpolation, in_len: usize, out_len: usize, scale: f64) -> Self {
        assert!(in_len >= 1 && out_len >= 1 && scale > 0.0);
        let last = in_len - 1;
        let taps = (0..out_len)
            .map(|o| {
                let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
                match method {
                    Interpolation::Nearest => {
                        let src = ((o as f64 + 0.5) / scale).floor() as usize;
                        t.push((src.min(last), 1.0));
                    }
                    Interpolation::Bilinear => {
                        let src = ((o as f64 + 0.5) / scale - 0.5).max(0.0);
                        let i0 = (src.floor() as usize).min(last);
                        let i1 = (i0 + 1).min(last);
                        let frac = src - i0 as f64;
                        t.push((i0, 1.0 - frac));
                        t.push((i1, frac));
                    }
                    Interpolation::Bicubic => {
                        let src = (o as f64 + 0.5) / scale - 0.5;
                        let base = src.floor();
                        let frac = src - base;
                        for (k, dist) in [(-1isize, frac + 1.0), (0, frac), (1, 1.0 - frac), (2, 2.0 - frac)] {
                            let idx = (base as isize + k).clamp(0, last as isize) as usize;
                            t.push((idx, cubic_weight(dist)));
                        }
                    }
                }
                merge_taps(t)
                    .into_iter()
                    .map(|(i, w)| (i, T::from_f64_lossy(w)))
                    .collect()
            })
            .collect();
        AxisTaps { in_len, taps }
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }
}

fn merge_taps(mut taps: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    taps.sort_by_key(|&(i, _)| i);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(taps.len());
    for (i, w) in taps {
        match out.last_mut() {
            Some((j, acc)) if *j == i => *acc += w,
            _ => out.push((i, w)),
        }
    }
    out.retain(|&(_, w)| w != 0.0);
    out
}

/// Apply separable taps to every `[H, W]` plane of `data`.
fn apply_planes<T: Float>(data: &[T], planes: usize, rows: &AxisTaps<T>, cols: &AxisTaps<T>) -> Vec<T> {
    let (ih, iw) = (rows.in_len, cols.in_len);
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); oh * iw];
    for p in 0..planes {
        let src = &data[p * ih * iw..(p + 1) * ih * iw];
        tmp.iter_mut().for_each(|v| *v = T::zero());
        for (o, taps) in rows.taps.iter().enumerate() {
            let dst = &mut tmp[o * iw..(o + 1) * iw];
            for &(i, wt) in taps {
                for (d, &s) in dst.iter_mut().zip(&src[i * iw..(i + 1) * iw]) {
                    *d += wt * s;
                }
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for o in 0..oh {
            let row = &tmp[o * iw..(o + 1) * iw];
            for (x, taps) in cols.taps.iter().enumerate() {
                let mut acc = T::zero();
                for &(i, wt) in taps {
                    acc += wt * row[i];
                }
                dst[o * ow + x] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`apply_planes`].
fn apply_planes_adjoint<T: Float>(grad: &[T], planes: usize, rows: &AxisTaps<T>, cols: &AxisTaps<T>) -> Vec<T> {
    let (ih, iw) = (rows.in_len, cols.in_len);
    let (oh, ow) = (rows.out_len(), cols.out_len());
    let mut out = vec![T::zero(); planes * ih * iw];
    let mut tmp = vec![T::zero(); oh * iw];
    for p in 0..planes {
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        tmp.iter_mut().for_each(|v| *v = T::zero());
        for o in 0..oh {
            let row = &mut tmp[o * iw..(o + 1) * iw];
            for (x, taps) in cols.taps.iter().enumerate() {
                let gv = g[o * ow + x];
                for &(i, wt) in taps {
                    row[i] += wt * gv;
                }
            }
        }
        let dst = &mut out[p * ih * iw..(p + 1) * ih * iw];
        for (o, taps) in rows.taps.iter().enumerate() {
            let src = &tmp[o * iw..(o + 1) * iw];
            for &(i, wt) in taps {
                for (d, &s) in dst[i * iw..(i + 1) * iw].iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    out
}

/// Target size and coordinate scale for one resize along both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResizeSpec {
    pub out_h: usize,
    pub out_w: usize,
    pub scale: f64,
}

impl ResizeSpec {
    /// Exact 2x enlargement.
    pub fn double(h: usize, w: usize) -> Self {
        ResizeSpec { out_h: 2 * h, out_w: 2 * w, scale: 2.0 }
    }

    /// `floor(s * H) x floor(s * W)`.
    pub fn by_factor(h: usize, w: usize, s: f64) -> Self {
        ResizeSpec {
            out_h: (s * h as f64).floor() as usize,
            out_w: (s * w as f64).floor() as usize,
            scale: s,
        }
    }
}

/// Resize the trailing `[H, W]` axes of a tensor of rank >= 2.
pub fn resize<T: Float>(x: &Tensor<T>, spec: ResizeSpec, method: Interpolation) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("resize needs rank >= 2, got {shape:?}")));
    }
    if spec.out_h == 0 || spec.out_w == 0 {
        return Err(Error::invalid(format!(
            "resize to zero size ({}x{})",
            spec.out_h, spec.out_w
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = x.len() / (h * w);
    let rows = AxisTaps::new(method, h, spec.out_h, spec.scale);
    let cols = AxisTaps::new(method, w, spec.out_w, spec.scale);
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = spec.out_h;
    out_shape[n - 1] = spec.out_w;
    Tensor::from_vec(&out_shape, apply_planes(x.data(), planes, &rows, &cols))
}

impl<'g, T: Float> Var<'g, T> {
    /// Differentiable resize of a `[N, C, H, W]` tensor.
    pub fn resize(self, spec: ResizeSpec, method: Interpolation) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let rows = Rc::new(AxisTaps::new(method, h, spec.out_h, spec.scale));
        let cols = Rc::new(AxisTaps::new(method, w, spec.out_w, spec.scale));
        let out = apply_planes(x.data(), n * c, &rows, &cols);
        let out = Tensor::from_vec(&[n, c, spec.out_h, spec.out_w], out).unwrap();
        self.graph().op(out, &[self], move |g, _| {
            let dx = apply_planes_adjoint(g.data(), n * c, &rows, &cols);
            vec![Some(Tensor::from_vec(&[n, c, h, w], dx).unwrap())]
        })
    }

    pub fn upsample2x(self, method: Interpolation) -> Var<'g, T> {
        let (_, _, h, w) = self.dims4();
        self.resize(ResizeSpec::double(h, w), method)
    }
}
