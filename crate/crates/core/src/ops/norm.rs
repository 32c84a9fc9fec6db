//! Batch normalization over (N, D, H, W) and layer normalization over channels.

use crate::tensor::{Scalar, Shape, Tensor5};

pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance used for running statistics.
    pub var_unbiased: Vec<T>,
}

pub(crate) struct BnForward<T> {
    pub y: Tensor5<T>,
    pub xhat: Tensor5<T>,
    pub inv_std: Vec<T>,
    pub stats: BatchStats<T>,
}

fn for_channel<T: Scalar>(s: Shape, c: usize, data: &[T], mut f: impl FnMut(&[T])) {
    let vol = s.spatial();
    for n in 0..s.n() {
        let off = (n * s.c() + c) * vol;
        f(&data[off..off + vol]);
    }
}

pub(crate) fn batchnorm_train<T: Scalar>(
    x: &Tensor5<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> BnForward<T> {
    let s = x.shape();
    let vol = s.spatial();
    let count = s.n() * vol;
    let m = T::of(count as f64);
    let mut mean = vec![T::zero(); s.c()];
    let mut var = vec![T::zero(); s.c()];
    let mut var_unbiased = vec![T::zero(); s.c()];
    for c in 0..s.c() {
        let mut acc = T::zero();
        for_channel(s, c, x.data(), |blk| acc += blk.iter().copied().sum::<T>());
        let mu = acc / m;
        let mut sq = T::zero();
        for_channel(s, c, x.data(), |blk| {
            sq += blk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>()
        });
        mean[c] = mu;
        var[c] = sq / m;
        var_unbiased[c] = if count > 1 {
            sq / T::of((count - 1) as f64)
        } else {
            T::zero()
        };
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor5::zeros(s);
    let mut y = Tensor5::zeros(s);
    for n in 0..s.n() {
        for c in 0..s.c() {
            let off = (n * s.c() + c) * vol;
            for i in off..off + vol {
                let xh = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    BnForward {
        y,
        xhat,
        inv_std,
        stats: BatchStats { mean, var_unbiased },
    }
}

/// Returns (dx, dgamma, dbeta) for training-mode batch norm.
pub(crate) fn batchnorm_train_backward<T: Scalar>(
    xhat: &Tensor5<T>,
    inv_std: &[T],
    gamma: &[T],
    dy: &Tensor5<T>,
) -> (Tensor5<T>, Vec<T>, Vec<T>) {
    let s = xhat.shape();
    let vol = s.spatial();
    let m = T::of((s.n() * vol) as f64);
    let mut dgamma = vec![T::zero(); s.c()];
    let mut dbeta = vec![T::zero(); s.c()];
    for c in 0..s.c() {
        for n in 0..s.n() {
            let off = (n * s.c() + c) * vol;
            for i in off..off + vol {
                dgamma[c] += dy.data()[i] * xhat.data()[i];
                dbeta[c] += dy.data()[i];
            }
        }
    }
    let mut dx = Tensor5::zeros(s);
    for n in 0..s.n() {
        for c in 0..s.c() {
            let off = (n * s.c() + c) * vol;
            // dxhat = dy·γ; dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let sum_dxhat = dbeta[c] * gamma[c];
            let sum_dxhat_xhat = dgamma[c] * gamma[c];
            let k = inv_std[c] / m;
            for i in off..off + vol {
                let dxh = dy.data()[i] * gamma[c];
                dx.data_mut()[i] = k * (m * dxh - sum_dxhat - xhat.data()[i] * sum_dxhat_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) struct LnForward<T> {
    pub y: Tensor5<T>,
    pub xhat: Tensor5<T>,
    /// One entry per (batch, voxel).
    pub inv_std: Vec<T>,
}

/// Normalizes each voxel's channel vector, then applies a per-channel affine map.
pub(crate) fn channel_layernorm<T: Scalar>(
    x: &Tensor5<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> LnForward<T> {
    let s = x.shape();
    let vol = s.spatial();
    let cs = s.c();
    let cf = T::of(cs as f64);
    let mut xhat = Tensor5::zeros(s);
    let mut y = Tensor5::zeros(s);
    let mut inv_std = vec![T::zero(); s.n() * vol];
    let xd = x.data();
    for n in 0..s.n() {
        let base = n * cs * vol;
        for v in 0..vol {
            let mut mu = T::zero();
            for c in 0..cs {
                mu += xd[base + c * vol + v];
            }
            mu = mu / cf;
            let mut var = T::zero();
            for c in 0..cs {
                let d = xd[base + c * vol + v] - mu;
                var += d * d;
            }
            let is = T::one() / (var / cf + eps).sqrt();
            inv_std[n * vol + v] = is;
            for c in 0..cs {
                let i = base + c * vol + v;
                let xh = (xd[i] - mu) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    LnForward { y, xhat, inv_std }
}

pub(crate) fn channel_layernorm_backward<T: Scalar>(
    xhat: &Tensor5<T>,
    inv_std: &[T],
    gamma: &[T],
    dy: &Tensor5<T>,
) -> (Tensor5<T>, Vec<T>, Vec<T>) {
    let s = xhat.shape();
    let vol = s.spatial();
    let cs = s.c();
    let cf = T::of(cs as f64);
    let mut dx = Tensor5::zeros(s);
    let mut dgamma = vec![T::zero(); cs];
    let mut dbeta = vec![T::zero(); cs];
    let (xh, g) = (xhat.data(), dy.data());
    for n in 0..s.n() {
        let base = n * cs * vol;
        for v in 0..vol {
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for c in 0..cs {
                let i = base + c * vol + v;
                let d = g[i] * gamma[c];
                sum_d += d;
                sum_dx += d * xh[i];
                dgamma[c] += g[i] * xh[i];
                dbeta[c] += g[i];
            }
            let k = inv_std[n * vol + v] / cf;
            for c in 0..cs {
                let i = base + c * vol + v;
                let d = g[i] * gamma[c];
                dx.data_mut()[i] = k * (cf * d - sum_d - xh[i] * sum_dx);
            }
        }
    }
    (dx, dgamma, dbeta)
}
