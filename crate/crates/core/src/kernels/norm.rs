//! Batch normalization over the (N, H, W) axes of each channel.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnSpec {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnSpec {
    fn default() -> Self {
        BnSpec {
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl BnSpec {
    pub fn validate(&self) -> Result<()> {
        // eps = 0 is accepted; it is only unsafe for zero-variance channels
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!("batch_norm eps must be >= 0, got {}", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "batch_norm momentum must be in [0, 1], got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Saved state needed by the backward pass.
#[derive(Clone)]
pub struct BnSaved<T> {
    /// Normalized input `(x - mean) / sqrt(var + eps)`.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Per-channel batch statistics from a training-mode pass: mean and
/// unbiased variance, ready to be blended into the running buffers.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

fn check_params<T: Element>(x: &Tensor<T>, params: [&Tensor<T>; 4]) -> Result<()> {
    let c = x.shape().c();
    for p in params {
        if p.numel() != c {
            return Err(Error::shape(format!(
                "batch_norm parameter {} does not match {c} channels",
                p.shape()
            )));
        }
    }
    Ok(())
}

#[allow(clippy::type_complexity)]
pub fn batch_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    spec: &BnSpec,
    train: bool,
) -> Result<(Tensor<T>, BnSaved<T>, Option<BatchStats<T>>)> {
    spec.validate()?;
    check_params(x, [gamma, beta, running_mean, running_var])?;
    let [n, c, h, w] = x.shape().dims();
    let plane = h * w;
    let count = n * plane;
    let xd = x.data();
    let eps = T::of(spec.eps);

    let (mean, var, stats) = if train {
        if count == 0 {
            return Err(Error::shape("batch_norm over an empty batch"));
        }
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                s += xd[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            let m = s / count as f64;
            let mut ss = 0.0f64;
            for b in 0..n {
                ss += xd[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = T::of(m);
            var[ch] = T::of(ss / count as f64);
        }
        let unbiased = var
            .iter()
            .map(|&v| {
                if count > 1 {
                    v * T::of(count as f64 / (count - 1) as f64)
                } else {
                    v
                }
            })
            .collect();
        (
            mean.clone(),
            var,
            Some(BatchStats {
                mean,
                var_unbiased: unbiased,
            }),
        )
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec(), None)
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    {
        let hd = xhat.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (m, is) = (mean[ch], inv_std[ch]);
                for (dst, &v) in hd[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                    *dst = (v - m) * is;
                }
            }
        }
    }
    {
        let hd = xhat.data();
        let od = out.data_mut();
        let (gd, bd) = (gamma.data(), beta.data());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (g, be) = (gd[ch], bd[ch]);
                for (dst, &v) in od[base..base + plane].iter_mut().zip(&hd[base..base + plane]) {
                    *dst = g * v + be;
                }
            }
        }
    }
    Ok((out, BnSaved { xhat, inv_std, train }, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Element>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = dy.shape().dims();
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let gd = dy.data();
    let hd = saved.xhat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let g = &gd[base..base + plane];
            let xh = &hd[base..base + plane];
            dbeta[ch] += g.iter().copied().sum::<T>();
            dgamma[ch] += g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    let dd = dx.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            let g = &gd[base..base + plane];
            let xh = &hd[base..base + plane];
            let out = &mut dd[base..base + plane];
            if saved.train {
                let mg = dbeta[ch] / count;
                let mgx = dgamma[ch] / count;
                for i in 0..plane {
                    out[i] = scale * (g[i] - mg - xh[i] * mgx);
                }
            } else {
                for i in 0..plane {
                    out[i] = scale * g[i];
                }
            }
        }
    }
    let cshape = gamma.shape();
    (
        dx,
        Tensor::from_vec(cshape, dgamma).expect("channel count"),
        Tensor::from_vec(cshape, dbeta).expect("channel count"),
    )
}

/// Blends batch statistics into running buffers:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn update_running<T: Element>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &BatchStats<T>,
    momentum: f64,
) {
    let m = T::of(momentum);
    let keep = T::one() - m;
    for (r, &s) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * s;
    }
    for (r, &s) in running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
        *r = keep * *r + m * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(c: usize, v: f64) -> Tensor<f64> {
        Tensor::full([1, c, 1, 1], v)
    }

    #[test]
    fn infer_identity() {
        let x = Tensor::<f64>::from_vec([2, 2, 2, 2], (0..16).map(|v| v as f64 - 7.0).collect()).unwrap();
        let (y, _, stats) = batch_norm_forward(
            &x,
            &vec1(2, 1.0),
            &vec1(2, 0.0),
            &vec1(2, 0.0),
            &vec1(2, 1.0),
            &BnSpec::default(),
            false,
        )
        .unwrap();
        assert!(stats.is_none());
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn hand_arithmetic_eps_zero() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let spec = BnSpec {
            eps: 0.0,
            momentum: 0.1,
        };
        let (y, _, _) = batch_norm_forward(
            &x,
            &vec1(1, 3.0),
            &vec1(1, 1.0),
            &vec1(1, 3.0),
            &vec1(1, 1.0),
            &spec,
            false,
        )
        .unwrap();
        assert_eq!(y.data(), &[-2.0, 4.0]);
    }

    #[test]
    fn negative_eps_rejected() {
        let spec = BnSpec {
            eps: -1e-5,
            momentum: 0.1,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut rm = vec1(1, 0.0);
        let mut rv = vec1(1, 1.0);
        let stats = BatchStats {
            mean: vec![2.0],
            var_unbiased: vec![3.0],
        };
        update_running(&mut rm, &mut rv, &stats, 0.1);
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        assert!((rv.data()[0] - 1.2).abs() < 1e-12);
    }
}
