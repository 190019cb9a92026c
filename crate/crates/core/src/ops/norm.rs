use crate::autograd::Var;
use crate::tensor::{Float, Tensor};

/// Per-channel statistics of a train-mode batch norm.
pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, the quantity used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

fn channel_stats<T: Float>(x: &Tensor<T>) -> BatchStats<T> {
    let (n, c, h, w) = x.dims4();
    let s = h * w;
    let count = n * s;
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for ni in 0..n {
            acc += x.data()[(ni * c + ci) * s..(ni * c + ci + 1) * s].iter().copied().sum::<T>();
        }
        let m = acc * inv;
        let mut sq = T::zero();
        for ni in 0..n {
            for &v in &x.data()[(ni * c + ci) * s..(ni * c + ci + 1) * s] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ci] = m;
        var[ci] = sq * inv;
    }
    BatchStats { mean, var, count }
}

impl<'g, T: Float> Var<'g, T> {
    /// Normalize with batch statistics over `(N, H, W)`.
    pub(crate) fn batch_norm_train(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> (Var<'g, T>, BatchStats<T>) {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let s = h * w;
        let stats = channel_stats(&x);
        let eps = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (gamma.value(), beta.value());

        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let range = (ni * c + ci) * s..(ni * c + ci + 1) * s;
                for i in range {
                    let xh = (x.data()[i] - stats.mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = xh * gm.data()[ci] + bt.data()[ci];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out).unwrap();
        let count = T::from_usize(stats.count).unwrap();

        let var = self.graph().op(out, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    for i in (ni * c + ci) * s..(ni * c + ci + 1) * s {
                        sum_dy[ci] += gd[i];
                        sum_dy_xhat[ci] += gd[i] * xhat[i];
                    }
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); gd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let k = gm.data()[ci] * inv_std[ci] / count;
                        for i in (ni * c + ci) * s..(ni * c + ci + 1) * s {
                            dx[i] = k * (count * gd[i] - sum_dy[ci] - xhat[i] * sum_dy_xhat[ci]);
                        }
                    }
                }
                Tensor::from_vec(&[n, c, h, w], dx).unwrap()
            });
            vec![
                dx,
                need[1].then(|| Tensor::from_vec(&[c], sum_dy_xhat.clone()).unwrap()),
                need[2].then(|| Tensor::from_vec(&[c], sum_dy.clone()).unwrap()),
            ]
        });
        (var, stats)
    }

    /// Normalize with fixed running statistics.
    pub(crate) fn batch_norm_eval(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let s = h * w;
        let eps = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let (gm, bt) = (gamma.value(), beta.value());
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                for i in (ni * c + ci) * s..(ni * c + ci + 1) * s {
                    out[i] = (x.data()[i] - mean[ci]) * inv_std[ci] * gm.data()[ci] + bt.data()[ci];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out).unwrap();
        self.graph().op(out, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = need[0].then(|| vec![T::zero(); gd.len()]);
            for ni in 0..n {
                for ci in 0..c {
                    for i in (ni * c + ci) * s..(ni * c + ci + 1) * s {
                        let xh = (x.data()[i] - mean[ci]) * inv_std[ci];
                        dgamma[ci] += gd[i] * xh;
                        dbeta[ci] += gd[i];
                        if let Some(dx) = dx.as_mut() {
                            dx[i] = gd[i] * gm.data()[ci] * inv_std[ci];
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_vec(&[n, c, h, w], d).unwrap()),
                need[1].then(|| Tensor::from_vec(&[c], dgamma).unwrap()),
                need[2].then(|| Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        })
    }
}
