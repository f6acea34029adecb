//! Grouped per-pixel dynamic aggregation.
//!
//! `x` is `(N, C, H, W)`, `w` is `(N, G·K², H, W)`. Weight channel
//! `d = g·K² + u·K + v` holds tap `(u, v)` of group `g`; channel `c` reads group
//! `c / (C/G)`. Zero padding of `r = (K−1)/2` on every side.

use rayon::prelude::*;

use super::{min_planes, valid_range};
use crate::tensor::{Scalar, Tensor};

/// Plane-major implementation: for each tap, a contiguous row-wise multiply-add
/// over the valid output columns.
pub fn ska_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, ks: usize, groups: usize) -> Tensor<T> {
    let [_, c, h, wd] = x.shape();
    let cg = c / groups;
    let taps = ks * ks;
    let r = (ks / 2) as isize;
    let mut y = Tensor::zeros(x.shape());
    y.data_mut()
        .par_chunks_mut(h * wd)
        .with_min_len(min_planes(taps * h * wd))
        .enumerate()
        .for_each(|(plane, yp)| {
            let (n, ch) = (plane / c, plane % c);
            let g = ch / cg;
            let xp = x.plane(n, ch);
            for u in 0..ks {
                let du = u as isize - r;
                let (i_lo, i_hi) = valid_range(h, h, 1, du);
                for v in 0..ks {
                    let dv = v as isize - r;
                    let (j_lo, j_hi) = valid_range(wd, wd, 1, dv);
                    if j_lo >= j_hi {
                        continue;
                    }
                    let wp = w.plane(n, g * taps + u * ks + v);
                    for i in i_lo..i_hi {
                        let src = (i as isize + du) as usize * wd;
                        let row = i * wd;
                        let xs = &xp[(src as isize + j_lo as isize + dv) as usize
                            ..(src as isize + j_hi as isize + dv) as usize];
                        let ws = &wp[row + j_lo..row + j_hi];
                        for ((yo, &wi), &xi) in yp[row + j_lo..row + j_hi].iter_mut().zip(ws).zip(xs) {
                            *yo += wi * xi;
                        }
                    }
                }
            }
        });
    y
}

/// Direct transcription of the aggregation sum: one output element at a time,
/// explicit bounds test per tap.
pub fn ska_forward_naive<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, ks: usize, groups: usize) -> Tensor<T> {
    let [n_batch, c, h, wd] = x.shape();
    let cg = c / groups;
    let r = (ks / 2) as isize;
    let mut y = Tensor::zeros(x.shape());
    for n in 0..n_batch {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..wd {
                    let g = ch / cg;
                    let mut acc = T::zero();
                    for u in 0..ks {
                        for v in 0..ks {
                            let ii = i as isize + u as isize - r;
                            let jj = j as isize + v as isize - r;
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                acc += w.at(n, g * ks * ks + u * ks + v, i, j) * x.at(n, ch, ii as usize, jj as usize);
                            }
                        }
                    }
                    y.set(n, ch, i, j, acc);
                }
            }
        }
    }
    y
}

/// Gradient with respect to `x`: each output pixel scatters its upstream
/// gradient back through its own kernel.
pub fn ska_backward_input<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, ks: usize, groups: usize) -> Tensor<T> {
    let [_, c, h, wd] = gy.shape();
    let cg = c / groups;
    let taps = ks * ks;
    let r = (ks / 2) as isize;
    let mut gx = Tensor::zeros(gy.shape());
    gx.data_mut()
        .par_chunks_mut(h * wd)
        .with_min_len(min_planes(taps * h * wd))
        .enumerate()
        .for_each(|(plane, gxp)| {
            let (n, ch) = (plane / c, plane % c);
            let g = ch / cg;
            let gyp = gy.plane(n, ch);
            for u in 0..ks {
                let du = u as isize - r;
                let (i_lo, i_hi) = valid_range(h, h, 1, du);
                for v in 0..ks {
                    let dv = v as isize - r;
                    let (j_lo, j_hi) = valid_range(wd, wd, 1, dv);
                    let wp = w.plane(n, g * taps + u * ks + v);
                    for i in i_lo..i_hi {
                        let dst = ((i as isize + du) as usize * wd) as isize + dv;
                        let row = i * wd;
                        for j in j_lo..j_hi {
                            gxp[(dst + j as isize) as usize] += wp[row + j] * gyp[row + j];
                        }
                    }
                }
            }
        });
    gx
}

/// Gradient with respect to the weight map: tap `(g, u, v)` at pixel `(i, j)`
/// collects `gy · x_shifted` over the channels of group `g`.
pub fn ska_backward_weights<T: Scalar>(gy: &Tensor<T>, x: &Tensor<T>, ks: usize, groups: usize) -> Tensor<T> {
    let [n_batch, c, h, wd] = x.shape();
    let cg = c / groups;
    let taps = ks * ks;
    let d = groups * taps;
    let r = (ks / 2) as isize;
    let mut gw = Tensor::zeros([n_batch, d, h, wd]);
    gw.data_mut()
        .par_chunks_mut(h * wd)
        .with_min_len(min_planes(cg * h * wd))
        .enumerate()
        .for_each(|(plane, gwp)| {
            let (n, dd) = (plane / d, plane % d);
            let (g, tap) = (dd / taps, dd % taps);
            let (u, v) = (tap / ks, tap % ks);
            let (du, dv) = (u as isize - r, v as isize - r);
            let (i_lo, i_hi) = valid_range(h, h, 1, du);
            let (j_lo, j_hi) = valid_range(wd, wd, 1, dv);
            for ch in g * cg..(g + 1) * cg {
                let gyp = gy.plane(n, ch);
                let xp = x.plane(n, ch);
                for i in i_lo..i_hi {
                    let src = ((i as isize + du) as usize * wd) as isize + dv;
                    let row = i * wd;
                    for j in j_lo..j_hi {
                        gwp[row + j] += gyp[row + j] * xp[(src + j as isize) as usize];
                    }
                }
            }
        });
    gw
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kernel_wider_than_plane_matches_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &(h, wd) in &[(1, 1), (2, 3), (3, 1), (1, 4)] {
            let x = Tensor::<f64>::randn([1, 4, h, wd], 1.0, &mut rng);
            let w = Tensor::<f64>::randn([1, 2 * 25, h, wd], 1.0, &mut rng);
            let diff = ska_forward(&x, &w, 5, 2)
                .max_abs_diff(&ska_forward_naive(&x, &w, 5, 2))
                .unwrap();
            assert!(diff < 1e-12, "{h}x{wd}: {diff}");
        }
    }

    #[test]
    fn backward_is_adjoint_in_both_operands() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(c, g, ks) in &[(4, 2, 3), (6, 3, 5), (4, 1, 1), (4, 4, 3)] {
            let x = Tensor::<f64>::randn([2, c, 5, 6], 1.0, &mut rng);
            let w = Tensor::<f64>::randn([2, g * ks * ks, 5, 6], 1.0, &mut rng);
            let gy = Tensor::<f64>::randn(x.shape(), 1.0, &mut rng);
            let y = ska_forward(&x, &w, ks, g);
            let lhs = gy.dot(&y).unwrap();
            // SKA is bilinear, so <gy, y(x, w)> = <gx, x> = <gw, w>.
            let gx = ska_backward_input(&gy, &w, ks, g);
            let gw = ska_backward_weights(&gy, &x, ks, g);
            assert!((lhs - gx.dot(&x).unwrap()).abs() < 1e-10);
            assert!((lhs - gw.dot(&w).unwrap()).abs() < 1e-10);
        }
    }
}
