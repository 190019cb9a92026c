use crate::autograd::Var;
use crate::tensor::{Float, Tensor};

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl<'g, T: Float> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph().op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph().op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph().op(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                need[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn scale(self, factor: T) -> Var<'g, T> {
        let out = self.value().map(|x| x * factor);
        self.graph().op(out, &[self], move |g, _| vec![Some(g.map(|v| v * factor))])
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g, T> {
        let out = self.value().map(|x| T::one() - x);
        self.graph().op(out, &[self], |g, _| vec![Some(g.map(|v| -v))])
    }

    pub fn abs(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v.abs());
        self.graph().op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| {
                if xv > T::zero() {
                    gv
                } else if xv < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn relu(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.graph().op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }))]
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let slope = T::from_f64_lossy(slope);
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * slope });
        self.graph().op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { gv * slope }))]
        })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.graph().op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |gv, yv| gv * yv * (T::one() - yv)))]
        })
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn clamped_log(self, floor: f64) -> Var<'g, T> {
        let floor = T::from_f64_lossy(floor);
        let x = self.value();
        let out = x.map(|v| v.max(floor).ln());
        self.graph().op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > floor { gv / xv } else { T::zero() }))]
        })
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph().op(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::from_usize(n.max(1)).unwrap())
    }

    /// Keep the top-left `h x w` window of a `[N, C, H, W]` tensor.
    pub fn crop(self, h: usize, w: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, ih, iw) = x.dims4();
        assert!(h <= ih && w <= iw, "crop {h}x{w} larger than {ih}x{iw}");
        if h == ih && w == iw {
            return self;
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in x.data().chunks(ih * iw) {
            for row in plane.chunks(iw).take(h) {
                out.extend_from_slice(&row[..w]);
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out).unwrap();
        self.graph().op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[n, c, ih, iw]);
            let d = dx.data_mut();
            for (p, gp) in g.data().chunks(h * w).enumerate() {
                for (y, grow) in gp.chunks(w).enumerate() {
                    let start = p * ih * iw + y * iw;
                    d[start..start + w].copy_from_slice(grow);
                }
            }
            vec![Some(dx)]
        })
    }
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^v)` without overflow.
pub(crate) fn softplus<T: Float>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn product_rule_and_reduction() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let b = g.input(Tensor::from_vec(&[3], vec![4.0, 5.0, -6.0]).unwrap());
        let loss = a.mul(b).sum();
        assert_eq!(loss.item(), 4.0 - 10.0 - 18.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.input(&a).unwrap().data(), &[4.0, 5.0, -6.0]);
        assert_eq!(grads.input(&b).unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn clamped_log_floors_value_and_gradient() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[2], vec![0.0, 0.5]).unwrap());
        let y = x.clamped_log(1e-12);
        let v = y.value();
        assert!((v.data()[0] - (1e-12f64).ln()).abs() < 1e-9);
        assert!((v.data()[1] - 0.5f64.ln()).abs() < 1e-15);
        let grads = g.backward(y.sum()).unwrap();
        assert_eq!(grads.input(&x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn crop_gradient_pads_with_zeros() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = x.crop(2, 2);
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        let grads = g.backward(y.sum()).unwrap();
        assert_eq!(
            grads.input(&x).unwrap().data(),
            &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn constants_record_no_backward() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = a.add(a).sigmoid();
        assert!(!b.requires_grad());
    }
}
