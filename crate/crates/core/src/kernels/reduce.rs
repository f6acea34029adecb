//! Pooling, softmax and the classification loss.

use crate::tensor::{Scalar, Tensor};

/// Mean over `H·W`, shaped `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let inv = T::of(1.0 / (h * w) as f64);
    Tensor::from_fn([n, c, 1, 1], |ni, ci, _, _| {
        x.plane(ni, ci).iter().copied().sum::<T>() * inv
    })
}

pub fn global_avg_pool_backward<T: Scalar>(gy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, _, _] = gy.shape();
    let inv = T::of(1.0 / (h * w) as f64);
    Tensor::from_fn([n, c, h, w], |ni, ci, _, _| gy.at(ni, ci, 0, 0) * inv)
}

/// Softmax over the last (W) axis with max subtraction.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.w();
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(w) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    y
}

/// `dx = y ⊙ (dy − Σ dy·y)` per row.
pub fn softmax_lastdim_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let w = y.w();
    let mut gx = Tensor::zeros(y.shape());
    for ((gxr, yr), gyr) in gx
        .data_mut()
        .chunks_mut(w)
        .zip(y.data().chunks(w))
        .zip(gy.data().chunks(w))
    {
        let dot: T = yr.iter().zip(gyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &g) in gxr.iter_mut().zip(yr).zip(gyr) {
            *o = yv * (g - dot);
        }
    }
    gx
}

/// Label-smoothed cross entropy averaged over the batch.
///
/// `logits` is `(N, K, 1, 1)`. Returns the loss and the class probabilities
/// needed by [`cross_entropy_backward`].
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], smoothing: f64) -> (T, Tensor<T>) {
    let [n, k, _, _] = logits.shape();
    let probs = softmax_lastdim(&logits.clone().reshape([1, 1, n, k]).expect("same numel"));
    let off = T::of(smoothing / k as f64);
    let on = T::of(1.0 - smoothing) + off;
    let mut loss = T::zero();
    for (row, &t) in probs.data().chunks(k).zip(targets) {
        for (c, &p) in row.iter().enumerate() {
            let q = if c == t { on } else { off };
            if q > T::zero() {
                loss -= q * p.max(T::min_positive_value()).ln();
            }
        }
    }
    let probs = probs.reshape([n, k, 1, 1]).expect("same numel");
    (loss / T::of(n as f64), probs)
}

/// `(p − q) / N` scaled by the upstream scalar gradient.
pub fn cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[usize],
    smoothing: f64,
    upstream: T,
) -> Tensor<T> {
    let [n, k, _, _] = probs.shape();
    let off = T::of(smoothing / k as f64);
    let on = T::of(1.0 - smoothing) + off;
    let scale = upstream / T::of(n as f64);
    let mut g = probs.clone();
    for (row, &t) in g.data_mut().chunks_mut(k).zip(targets) {
        for (c, v) in row.iter_mut().enumerate() {
            let q = if c == t { on } else { off };
            *v = (*v - q) * scale;
        }
    }
    g
}
