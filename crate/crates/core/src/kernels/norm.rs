//! Per-channel batch normalization.

use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values kept from the forward pass for the vector-Jacobian product.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// True when normalized with batch statistics.
    pub batch_stats: bool,
}

/// Batch mean and unbiased variance per channel, for the running-stat update.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

fn channel_iter<T: Scalar>(x: &Tensor<T>, c: usize) -> impl Iterator<Item = T> + '_ {
    (0..x.n()).flat_map(move |n| x.plane(n, c).iter().copied())
}

fn apply<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T], scale: &[T], shift: &[T]) -> (Tensor<T>, Tensor<T>) {
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for n in 0..x.n() {
        for c in 0..x.c() {
            let xp = x.plane(n, c);
            let hp = xhat.plane_mut(n, c);
            for (h, &v) in hp.iter_mut().zip(xp) {
                *h = (v - mean[c]) * inv_std[c];
            }
            let hp = xhat.plane(n, c).to_vec();
            for (o, h) in y.plane_mut(n, c).iter_mut().zip(hp) {
                *o = h * scale[c] + shift[c];
            }
        }
    }
    (y, xhat)
}

/// Normalizes with batch statistics (biased variance, epsilon `1e-5`).
pub fn bn_train<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> (Tensor<T>, BnSaved<T>, BnBatchStats<T>) {
    let count = x.n() * x.h() * x.w();
    let m = T::of(count as f64);
    let eps = T::of(BN_EPS);
    let mut mean = Vec::with_capacity(x.c());
    let mut var = Vec::with_capacity(x.c());
    let mut var_unbiased = Vec::with_capacity(x.c());
    for c in 0..x.c() {
        let mu = channel_iter(x, c).sum::<T>() / m;
        let ss = channel_iter(x, c).map(|v| (v - mu) * (v - mu)).sum::<T>();
        mean.push(mu);
        var.push(ss / m);
        var_unbiased.push(if count > 1 {
            ss / T::of((count - 1) as f64)
        } else {
            ss / m
        });
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = apply(x, &mean, &inv_std, scale, shift);
    (
        y,
        BnSaved {
            xhat,
            inv_std,
            batch_stats: true,
        },
        BnBatchStats { mean, var_unbiased },
    )
}

/// Normalizes with running statistics.
pub fn bn_infer<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> (Tensor<T>, BnSaved<T>) {
    let eps = T::of(BN_EPS);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = apply(x, running_mean, &inv_std, scale, shift);
    (
        y,
        BnSaved {
            xhat,
            inv_std,
            batch_stats: false,
        },
    )
}

/// Returns `(d input, d scale, d shift)`.
pub fn bn_backward<T: Scalar>(gy: &Tensor<T>, saved: &BnSaved<T>, scale: &[T]) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let channels = gy.c();
    let m = T::of((gy.n() * gy.h() * gy.w()) as f64);
    let mut gscale = vec![T::zero(); channels];
    let mut gshift = vec![T::zero(); channels];
    for c in 0..channels {
        for n in 0..gy.n() {
            for (&g, &h) in gy.plane(n, c).iter().zip(saved.xhat.plane(n, c)) {
                gshift[c] += g;
                gscale[c] += g * h;
            }
        }
    }
    let mut gx = Tensor::zeros(gy.shape());
    for n in 0..gy.n() {
        for c in 0..channels {
            let k = scale[c] * saved.inv_std[c];
            let gyp = gy.plane(n, c).to_vec();
            let hp = saved.xhat.plane(n, c).to_vec();
            let gxp = gx.plane_mut(n, c);
            if saved.batch_stats {
                for ((o, g), h) in gxp.iter_mut().zip(gyp).zip(hp) {
                    *o = k / m * (m * g - gshift[c] - h * gscale[c]);
                }
            } else {
                for (o, g) in gxp.iter_mut().zip(gyp) {
                    *o = k * g;
                }
            }
        }
    }
    (gx, gscale, gshift)
}

/// Exponential moving average with momentum `0.1`.
pub fn update_running<T: Scalar>(running: &mut [T], batch: &[T]) {
    let mom = T::of(BN_MOMENTUM);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (T::one() - mom) * *r + mom * b;
    }
}
