use crate::autograd::Var;
use crate::ops::elementwise::{sigmoid, softplus};
use crate::tensor::{Float, Tensor};

impl<'g, T: Float> Var<'g, T> {
    /// Summed sigmoid focal loss of logits against binary targets of the same shape.
    pub fn sigmoid_focal_sum(self, targets: &Tensor<T>, alpha: f64, gamma: f64) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape(), targets.shape(), "focal loss: logits/targets shape mismatch");
        let (a, gm) = (T::from_f64_lossy(alpha), T::from_f64_lossy(gamma));
        let one = T::one();
        let t = targets.clone();
        let mut total = T::zero();
        for (&v, &tv) in x.data().iter().zip(t.data()) {
            let p = sigmoid(v);
            total += if tv > T::zero() {
                // -alpha (1-p)^gamma log p, with log p = -softplus(-v)
                a * (one - p).powf(gm) * softplus(-v)
            } else {
                (one - a) * p.powf(gm) * softplus(v)
            };
        }
        self.graph().op(Tensor::scalar(total), &[self], move |g, _| {
            let gv = g.item();
            let dx = x.zip_map(&t, |v, tv| {
                let p = sigmoid(v);
                let d = if tv > T::zero() {
                    // alpha (1-p)^gamma (gamma p log p - (1-p))
                    a * (one - p).powf(gm) * (gm * p * -softplus(-v) - (one - p))
                } else {
                    // (1-alpha) p^gamma (p - gamma (1-p) log(1-p))
                    (one - a) * p.powf(gm) * (p + gm * (one - p) * softplus(v))
                };
                d * gv
            });
            vec![Some(dx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn matches_closed_form_and_central_difference() {
        let logits = [-2.0, -0.3, 0.0, 0.7, 3.0];
        let targets = [0.0, 1.0, 0.0, 1.0, 0.0];
        let tt = Tensor::from_vec(&[5], targets.to_vec()).unwrap();
        let f = |xs: &[f64]| -> f64 {
            xs.iter()
                .zip(&targets)
                .map(|(&x, &t)| {
                    let p = 1.0 / (1.0 + (-x).exp());
                    if t > 0.0 {
                        -0.25 * (1.0 - p).powi(2) * p.ln()
                    } else {
                        -0.75 * p.powi(2) * (1.0 - p).ln()
                    }
                })
                .sum()
        };
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[5], logits.to_vec()).unwrap());
        let loss = x.sigmoid_focal_sum(&tt, 0.25, 2.0);
        assert!((loss.item() - f(&logits)).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let dx = grads.input(&x).unwrap();
        for i in 0..5 {
            let mut up = logits;
            let mut dn = logits;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - dx.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx.data()[i]);
        }
    }
}
