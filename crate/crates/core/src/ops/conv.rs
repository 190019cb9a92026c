//! 2-d convolution and transposed convolution over `[N, C, H, W]` tensors.
//!
//! Both lower to a single GEMM over the whole batch: columns of the patch
//! matrix are indexed by `(n, y, x)`, rows by `(c, ky, kx)`.

use crate::autograd::Var;
use crate::tensor::{cn_to_nc, matmul_into, nc_to_cn, Float, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && kernel >= 1);
        assert!(
            height + 2 * pad >= kernel && width + 2 * pad >= kernel,
            "kernel {kernel} does not fit {height}x{width} with padding {pad}"
        );
        ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Source index along one axis for output position `o` and kernel tap `k`.
#[inline]
fn src_index(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

pub(crate) fn im2col<T: Float>(x: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let (h, w, k) = (g.height, g.width, g.kernel);
    if g.is_pointwise() {
        return nc_to_cn(x, n, g.channels, h * w);
    }
    let so = g.out_h * g.out_w;
    let ncols = n * so;
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let plane = &x[(ni * g.channels + c) * h * w..(ni * g.channels + c + 1) * h * w];
                    for oy in 0..g.out_h {
                        let Some(iy) = src_index(oy, ky, g.stride, g.pad, h) else { continue };
                        let src_row = &plane[iy * w..(iy + 1) * w];
                        let dst = &mut dst_row[ni * so + oy * g.out_w..ni * so + (oy + 1) * g.out_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            if let Some(ix) = src_index(ox, kx, g.stride, g.pad, w) {
                                *d = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an `[N, C, H, W]` buffer.
pub(crate) fn col2im<T: Float>(cols: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let (h, w, k) = (g.height, g.width, g.kernel);
    if g.is_pointwise() {
        return cn_to_nc(cols, n, g.channels, h * w);
    }
    let so = g.out_h * g.out_w;
    let ncols = n * so;
    let mut x = vec![T::zero(); n * g.channels * h * w];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let base = (ni * g.channels + c) * h * w;
                    for oy in 0..g.out_h {
                        let Some(iy) = src_index(oy, ky, g.stride, g.pad, h) else { continue };
                        let src = &src_row[ni * so + oy * g.out_w..ni * so + (oy + 1) * g.out_w];
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(ix) = src_index(ox, kx, g.stride, g.pad, w) {
                                x[base + iy * w + ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn channel_sums<T: Float>(g: &[T], n: usize, c: usize, s: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += g[(ni * c + ci) * s..(ni * c + ci + 1) * s].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], out).unwrap()
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], n: usize, s: usize) {
    let c = bias.len();
    for ni in 0..n {
        for (ci, &b) in bias.iter().enumerate() {
            for v in &mut out[(ni * c + ci) * s..(ni * c + ci + 1) * s] {
                *v += b;
            }
        }
    }
}

impl<'g, T: Float> Var<'g, T> {
    /// Cross-correlation with weight `[C_out, C_in, k, k]` and optional bias `[C_out]`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = x.dims4();
        let (co, wc, k, k2) = wt.dims4();
        assert_eq!(wc, c, "conv2d: weight expects {wc} input channels, input has {c}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let geom = ConvGeom::new(c, h, w, k, stride, pad);
        let so = geom.out_h * geom.out_w;

        let cols = im2col(x.data(), n, &geom);
        let mut out_cn = vec![T::zero(); co * n * so];
        matmul_into(
            MatRef::new(wt.data(), co, geom.rows()),
            MatRef::new(&cols, geom.rows(), n * so),
            T::zero(),
            &mut out_cn,
        );
        drop(cols);
        let mut out = cn_to_nc(&out_cn, n, co, so);
        if let Some(b) = bias {
            add_channel_bias(&mut out, b.value().data(), n, so);
        }
        let out = Tensor::from_vec(&[n, co, geom.out_h, geom.out_w], out).unwrap();

        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph().op(out, &parents, move |g, need| {
            let g_cn = nc_to_cn(g.data(), n, co, so);
            let mut grads = Vec::with_capacity(3);
            grads.push(need[0].then(|| {
                let mut dcols = vec![T::zero(); geom.rows() * n * so];
                matmul_into(
                    MatRef::new(wt.data(), co, geom.rows()).t(),
                    MatRef::new(&g_cn, co, n * so),
                    T::zero(),
                    &mut dcols,
                );
                Tensor::from_vec(&[n, c, h, w], col2im(&dcols, n, &geom)).unwrap()
            }));
            grads.push(need[1].then(|| {
                let cols = im2col(x.data(), n, &geom);
                let mut dw = vec![T::zero(); co * geom.rows()];
                matmul_into(
                    MatRef::new(&g_cn, co, n * so),
                    MatRef::new(&cols, geom.rows(), n * so).t(),
                    T::zero(),
                    &mut dw,
                );
                Tensor::from_vec(&[co, c, k, k], dw).unwrap()
            }));
            if need.len() > 2 {
                grads.push(need[2].then(|| channel_sums(g.data(), n, co, so)));
            }
            grads
        })
    }

    /// Transposed convolution with weight `[C_in, C_out, k, k]`; output side is
    /// `(in - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, T> {
        let x = self.value();
        let wt = weight.value();
        let (n, ci, h, w) = x.dims4();
        let (wci, co, k, k2) = wt.dims4();
        assert_eq!(wci, ci, "conv_transpose2d: weight expects {wci} input channels, input has {ci}");
        assert_eq!(k, k2, "conv_transpose2d: square kernels only");
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (w - 1) * stride + k - 2 * pad;
        // The forward conv geometry whose adjoint this is.
        let geom = ConvGeom::new(co, oh, ow, k, stride, pad);
        assert_eq!((geom.out_h, geom.out_w), (h, w));
        let s_in = h * w;
        let s_out = oh * ow;

        let x_cn = nc_to_cn(x.data(), n, ci, s_in);
        let mut cols = vec![T::zero(); geom.rows() * n * s_in];
        matmul_into(
            MatRef::new(wt.data(), ci, geom.rows()).t(),
            MatRef::new(&x_cn, ci, n * s_in),
            T::zero(),
            &mut cols,
        );
        let mut out = col2im(&cols, n, &geom);
        drop(cols);
        if let Some(b) = bias {
            add_channel_bias(&mut out, b.value().data(), n, s_out);
        }
        let out = Tensor::from_vec(&[n, co, oh, ow], out).unwrap();

        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph().op(out, &parents, move |g, need| {
            let dcols = im2col(g.data(), n, &geom);
            let mut grads = Vec::with_capacity(3);
            grads.push(need[0].then(|| {
                let mut dx_cn = vec![T::zero(); ci * n * s_in];
                matmul_into(
                    MatRef::new(wt.data(), ci, geom.rows()),
                    MatRef::new(&dcols, geom.rows(), n * s_in),
                    T::zero(),
                    &mut dx_cn,
                );
                Tensor::from_vec(&[n, ci, h, w], cn_to_nc(&dx_cn, n, ci, s_in)).unwrap()
            }));
            grads.push(need[1].then(|| {
                let mut dw = vec![T::zero(); ci * geom.rows()];
                matmul_into(
                    MatRef::new(&x_cn, ci, n * s_in),
                    MatRef::new(&dcols, geom.rows(), n * s_in).t(),
                    T::zero(),
                    &mut dw,
                );
                Tensor::from_vec(&[ci, co, k, k], dw).unwrap()
            }));
            if need.len() > 2 {
                grads.push(need[2].then(|| channel_sums(g.data(), n, co, s_out)));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    /// Direct seven-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for ni in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((ni * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_for_several_geometries() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let x = ramp(&[2, 3, 7, 6], 0.1);
            let w = ramp(&[4, 3, k, k], 0.05);
            let g = Graph::new();
            let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, s, p);
            let want = naive_conv(&x, &w, s, p);
            assert_eq!(y.shape(), want.shape().to_vec());
            for (a, b) in y.value().data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching weights.
        let x = ramp(&[1, 3, 8, 8], 0.1);
        let w = ramp(&[2, 3, 4, 4], 0.03); // conv: 3 -> 2 channels
        let y = ramp(&[1, 2, 4, 4], 0.07);
        let g = Graph::new();
        let cx = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, 2, 1);
        // conv_transpose weight layout is [C_in, C_out, k, k] with C_in = 2.
        let ty = g.constant(y.clone()).conv_transpose2d(g.constant(w.clone()), None, 2, 1);
        assert_eq!(ty.shape(), vec![1, 3, 8, 8]);
        let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.value().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_conv_doubles_odd_sizes() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 7, 5]));
        let w = g.constant(Tensor::zeros(&[2, 3, 4, 4]));
        assert_eq!(x.conv_transpose2d(w, None, 2, 1).shape(), vec![1, 3, 14, 10]);
    }
}
