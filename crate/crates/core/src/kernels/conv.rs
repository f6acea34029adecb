//! Grouped 2-D convolution with symmetric zero padding.
//!
//! Dense convolutions (`groups = 1`) lower to one matrix product per image
//! over an im2col buffer; pointwise convolutions skip the buffer. Grouped and
//! depthwise convolutions use direct plane-major loop nests where one task
//! owns one output plane (or one kernel slice for the weight gradient).
//! Either way every output element is accumulated in a fixed order.

use rayon::prelude::*;

use super::matmul::gemm_into;
use super::{min_planes, valid_range};
use crate::error::{ensure_config, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Stride, symmetric padding and group count of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1, `(k - 1) / 2` padding.
    pub fn same(k: usize, groups: usize) -> Self {
        ConvGeom::new(1, (k - 1) / 2, groups)
    }
}

/// `⌊(len + 2p − k) / s⌋ + 1`, or `None` when the padded input is smaller than the kernel.
pub fn out_extent(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

/// Validates operand shapes and returns the output shape.
pub fn conv_out_shape(x: Shape, kernel: Shape, geom: ConvGeom) -> Result<Shape> {
    let [n, c_in, h, w] = x;
    let [c_out, cin_g, kh, kw] = kernel;
    let g = geom.groups;
    ensure_config!(g > 0 && geom.stride > 0, "conv2d: groups and stride must be positive");
    ensure_config!(
        c_in % g == 0 && c_out % g == 0,
        "conv2d: groups {g} must divide input channels {c_in} and output channels {c_out}"
    );
    ensure_config!(
        cin_g * g == c_in,
        "conv2d: kernel expects {} input channels, input has {c_in}",
        cin_g * g
    );
    let oh = out_extent(h, kh, geom.stride, geom.padding);
    let ow = out_extent(w, kw, geom.stride, geom.padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([n, c_out, oh, ow]),
        _ => Err(crate::error::config_err!(
            "conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with padding {}",
            geom.padding
        )),
    }
}

/// True when the input itself is the im2col matrix.
fn is_identity_lowering(kernel: Shape, geom: ConvGeom) -> bool {
    kernel[2] == 1 && kernel[3] == 1 && geom.stride == 1 && geom.padding == 0
}

/// Writes image `n` of `x` as a `(C·kh·kw) × (oh·ow)` row-major matrix.
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    kh: usize,
    kw: usize,
    out: (usize, usize),
    geom: ConvGeom,
    col: &mut [T],
) {
    let [_, c_in, h, w] = x.shape();
    let (oh, ow) = out;
    let (s, p) = (geom.stride, geom.padding as isize);
    for ci in 0..c_in {
        let xp = x.plane(n, ci);
        for u in 0..kh {
            let (oh_lo, oh_hi) = valid_range(oh, h, s, u as isize - p);
            for v in 0..kw {
                let dv = v as isize - p;
                let (ow_lo, ow_hi) = valid_range(ow, w, s, dv);
                let row = &mut col[((ci * kh + u) * kw + v) * oh * ow..][..oh * ow];
                row.fill(T::zero());
                for r in oh_lo..oh_hi {
                    let ih = ((r * s) as isize + u as isize - p) as usize;
                    let xrow = &xp[ih * w..(ih + 1) * w];
                    let orow = &mut row[r * ow..(r + 1) * ow];
                    for c in ow_lo..ow_hi {
                        orow[c] = xrow[((c * s) as isize + dv) as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `(C·kh·kw) × (oh·ow)` matrix back onto one image of shape `(C, h, w)`.
fn col2im<T: Scalar>(
    col: &[T],
    kh: usize,
    kw: usize,
    out: (usize, usize),
    geom: ConvGeom,
    img: &mut [T],
    hw: (usize, usize),
) {
    let (h, w) = hw;
    let (oh, ow) = out;
    let (s, p) = (geom.stride, geom.padding as isize);
    for (ci, plane) in img.chunks_mut(h * w).enumerate() {
        for u in 0..kh {
            let (oh_lo, oh_hi) = valid_range(oh, h, s, u as isize - p);
            for v in 0..kw {
                let dv = v as isize - p;
                let (ow_lo, ow_hi) = valid_range(ow, w, s, dv);
                let row = &col[((ci * kh + u) * kw + v) * oh * ow..][..oh * ow];
                for r in oh_lo..oh_hi {
                    let ih = ((r * s) as isize + u as isize - p) as usize;
                    let prow = &mut plane[ih * w..(ih + 1) * w];
                    let crow = &row[r * ow..(r + 1) * ow];
                    for c in ow_lo..ow_hi {
                        prow[((c * s) as isize + dv) as usize] += crow[c];
                    }
                }
            }
        }
    }
}

fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
    out: &mut Tensor<T>,
) {
    let [_, c_in, h, w] = x.shape();
    let [_, c_out, oh, ow] = out.shape();
    let [_, _, kh, kw] = kernel.shape();
    let rows = c_in * kh * kw;
    let identity = is_identity_lowering(kernel.shape(), geom);
    out.data_mut()
        .par_chunks_mut(c_out * oh * ow)
        .enumerate()
        .for_each(|(n, y)| {
            if let Some(b) = bias {
                for (plane, &bv) in y.chunks_mut(oh * ow).zip(b.data()) {
                    plane.fill(bv);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            let owned;
            let col: &[T] = if identity {
                &x.data()[n * c_in * h * w..(n + 1) * c_in * h * w]
            } else {
                let mut buf = vec![T::zero(); rows * oh * ow];
                im2col(x, n, kh, kw, (oh, ow), geom, &mut buf);
                owned = buf;
                &owned
            };
            let hw = (oh * ow) as isize;
            gemm_into(
                (c_out, rows, oh * ow),
                kernel.data(),
                (rows as isize, 1),
                col,
                (hw, 1),
                beta,
                y,
                (hw, 1),
            );
        });
}

fn dense_backward_input<T: Scalar>(gy: &Tensor<T>, kernel: &Tensor<T>, geom: ConvGeom, gx: &mut Tensor<T>) {
    let [_, c_in, h, w] = gx.shape();
    let [_, c_out, oh, ow] = gy.shape();
    let [_, _, kh, kw] = kernel.shape();
    let rows = c_in * kh * kw;
    let identity = is_identity_lowering(kernel.shape(), geom);
    let hw = (oh * ow) as isize;
    gx.data_mut()
        .par_chunks_mut(c_in * h * w)
        .enumerate()
        .for_each(|(n, img)| {
            let g = &gy.data()[n * c_out * oh * ow..(n + 1) * c_out * oh * ow];
            // Kernel transposed: element (r, co) sits at co·rows + r.
            let kt = (1, rows as isize);
            if identity {
                gemm_into(
                    (rows, c_out, oh * ow),
                    kernel.data(),
                    kt,
                    g,
                    (hw, 1),
                    T::zero(),
                    img,
                    (hw, 1),
                );
            } else {
                let mut col = vec![T::zero(); rows * oh * ow];
                gemm_into(
                    (rows, c_out, oh * ow),
                    kernel.data(),
                    kt,
                    g,
                    (hw, 1),
                    T::zero(),
                    &mut col,
                    (hw, 1),
                );
                col2im(&col, kh, kw, (oh, ow), geom, img, (h, w));
            }
        });
}

fn dense_backward_kernel<T: Scalar>(gy: &Tensor<T>, x: &Tensor<T>, geom: ConvGeom, gk: &mut Tensor<T>) {
    let [n_batch, c_in, h, w] = x.shape();
    let [_, c_out, oh, ow] = gy.shape();
    let [_, _, kh, kw] = gk.shape();
    let rows = c_in * kh * kw;
    let identity = is_identity_lowering(gk.shape(), geom);
    let hw = (oh * ow) as isize;
    // Per-image partial products, then a fixed-order sum over the batch.
    let partials: Vec<Vec<T>> = (0..n_batch)
        .into_par_iter()
        .map(|n| {
            let g = &gy.data()[n * c_out * oh * ow..(n + 1) * c_out * oh * ow];
            let owned;
            let col: &[T] = if identity {
                &x.data()[n * c_in * h * w..(n + 1) * c_in * h * w]
            } else {
                let mut buf = vec![T::zero(); rows * oh * ow];
                im2col(x, n, kh, kw, (oh, ow), geom, &mut buf);
                owned = buf;
                &owned
            };
            let mut part = vec![T::zero(); c_out * rows];
            gemm_into(
                (c_out, oh * ow, rows),
                g,
                (hw, 1),
                col,
                (1, hw),
                T::zero(),
                &mut part,
                (rows as isize, 1),
            );
            part
        })
        .collect();
    let acc = gk.data_mut();
    for part in &partials {
        for (a, &p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let out_shape = conv_out_shape(x.shape(), kernel.shape(), geom)?;
    let [_, c_out, oh, ow] = out_shape;
    if let Some(b) = bias {
        ensure_config!(
            b.numel() == c_out,
            "conv2d: bias has {} entries, expected {c_out}",
            b.numel()
        );
    }
    let mut out = Tensor::zeros(out_shape);
    if geom.groups == 1 {
        dense_forward(x, kernel, bias, geom, &mut out);
        return Ok(out);
    }
    let [_, _, h, w] = x.shape();
    let [_, cin_g, kh, kw] = kernel.shape();
    let cout_g = c_out / geom.groups;
    let (s, p) = (geom.stride, geom.padding as isize);
    let kdata = kernel.data();
    let work = cin_g * kh * kw * oh * ow;
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .with_min_len(min_planes(work))
        .enumerate()
        .for_each(|(plane_idx, y)| {
            let (n, co) = (plane_idx / c_out, plane_idx % c_out);
            if let Some(b) = bias {
                y.fill(b.data()[co]);
            }
            let g = co / cout_g;
            for ci_l in 0..cin_g {
                let ci = g * cin_g + ci_l;
                let xp = x.plane(n, ci);
                for u in 0..kh {
                    let (oh_lo, oh_hi) = valid_range(oh, h, s, u as isize - p);
                    for v in 0..kw {
                        let wt = kdata[((co * cin_g + ci_l) * kh + u) * kw + v];
                        let dv = v as isize - p;
                        let (ow_lo, ow_hi) = valid_range(ow, w, s, dv);
                        for r in oh_lo..oh_hi {
                            let ih = (r * s) as isize + u as isize - p;
                            let yrow = &mut y[r * ow..(r + 1) * ow];
                            let xrow = &xp[ih as usize * w..(ih as usize + 1) * w];
                            if s == 1 {
                                let xs = &xrow[(ow_lo as isize + dv) as usize..(ow_hi as isize + dv) as usize];
                                for (yo, &xi) in yrow[ow_lo..ow_hi].iter_mut().zip(xs) {
                                    *yo += wt * xi;
                                }
                            } else {
                                for c in ow_lo..ow_hi {
                                    yrow[c] += wt * xrow[((c * s) as isize + dv) as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input<T: Scalar>(
    gy: &Tensor<T>,
    kernel: &Tensor<T>,
    x_shape: Shape,
    geom: ConvGeom,
) -> Tensor<T> {
    let [_, c_in, h, w] = x_shape;
    let [_, c_out, oh, ow] = gy.shape();
    let [_, cin_g, kh, kw] = kernel.shape();
    let cout_g = c_out / geom.groups;
    let (s, p) = (geom.stride, geom.padding as isize);
    let kdata = kernel.data();
    let mut gx = Tensor::zeros(x_shape);
    if geom.groups == 1 {
        dense_backward_input(gy, kernel, geom, &mut gx);
        return gx;
    }
    let work = cout_g * kh * kw * oh * ow;
    gx.data_mut()
        .par_chunks_mut(h * w)
        .with_min_len(min_planes(work))
        .enumerate()
        .for_each(|(plane_idx, gxp)| {
            let (n, ci) = (plane_idx / c_in, plane_idx % c_in);
            let g = ci / cin_g;
            let ci_l = ci % cin_g;
            for co in g * cout_g..(g + 1) * cout_g {
                let gyp = gy.plane(n, co);
                for u in 0..kh {
                    let (oh_lo, oh_hi) = valid_range(oh, h, s, u as isize - p);
                    for v in 0..kw {
                        let wt = kdata[((co * cin_g + ci_l) * kh + u) * kw + v];
                        let dv = v as isize - p;
                        let (ow_lo, ow_hi) = valid_range(ow, w, s, dv);
                        for r in oh_lo..oh_hi {
                            let ih = ((r * s) as isize + u as isize - p) as usize;
                            let gyrow = &gyp[r * ow..(r + 1) * ow];
                            let gxrow = &mut gxp[ih * w..(ih + 1) * w];
                            for c in ow_lo..ow_hi {
                                gxrow[((c * s) as isize + dv) as usize] += wt * gyrow[c];
                            }
                        }
                    }
                }
            }
        });
    gx
}

/// Gradient with respect to the kernel.
pub fn conv2d_backward_kernel<T: Scalar>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    kernel_shape: Shape,
    geom: ConvGeom,
) -> Tensor<T> {
    let [n_batch, _, h, w] = x.shape();
    let [_, c_out, oh, ow] = gy.shape();
    let [_, cin_g, kh, kw] = kernel_shape;
    let cout_g = c_out / geom.groups;
    let (s, p) = (geom.stride, geom.padding as isize);
    let mut gk = Tensor::zeros(kernel_shape);
    if geom.groups == 1 {
        dense_backward_kernel(gy, x, geom, &mut gk);
        return gk;
    }
    let slice = cin_g * kh * kw;
    let work = n_batch * slice * oh * ow;
    gk.data_mut()
        .par_chunks_mut(slice)
        .with_min_len(min_planes(work))
        .enumerate()
        .for_each(|(co, gks)| {
            let g = co / cout_g;
            for n in 0..n_batch {
                let gyp = gy.plane(n, co);
                for ci_l in 0..cin_g {
                    let xp = x.plane(n, g * cin_g + ci_l);
                    for u in 0..kh {
                        let (oh_lo, oh_hi) = valid_range(oh, h, s, u as isize - p);
                        for v in 0..kw {
                            let dv = v as isize - p;
                            let (ow_lo, ow_hi) = valid_range(ow, w, s, dv);
                            let mut acc = T::zero();
                            for r in oh_lo..oh_hi {
                                let ih = ((r * s) as isize + u as isize - p) as usize;
                                let gyrow = &gyp[r * ow..(r + 1) * ow];
                                let xrow = &xp[ih * w..(ih + 1) * w];
                                for c in ow_lo..ow_hi {
                                    acc += gyrow[c] * xrow[((c * s) as isize + dv) as usize];
                                }
                            }
                            gks[(ci_l * kh + u) * kw + v] += acc;
                        }
                    }
                }
            }
        });
    gk
}

/// Gradient with respect to a per-output-channel bias, shaped `[1, C_out, 1, 1]`.
pub fn conv2d_backward_bias<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let [n_batch, c_out, _, _] = gy.shape();
    let sums = (0..c_out)
        .map(|c| {
            let mut acc = T::zero();
            for n in 0..n_batch {
                acc += gy.plane(n, c).iter().copied().sum::<T>();
            }
            acc
        })
        .collect();
    Tensor::vector(sums)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook convolution straight from the output-shape formula.
    fn reference(x: &Tensor<f64>, k: &Tensor<f64>, geom: ConvGeom) -> Tensor<f64> {
        let shape = conv_out_shape(x.shape(), k.shape(), geom).unwrap();
        let [_, c_out, _, _] = shape;
        let [_, cin_g, kh, kw] = k.shape();
        let cout_g = c_out / geom.groups;
        Tensor::from_fn(shape, |n, co, i, j| {
            let g = co / cout_g;
            let mut acc = 0.0;
            for ci_l in 0..cin_g {
                for u in 0..kh {
                    for v in 0..kw {
                        let ih = (i * geom.stride + u) as isize - geom.padding as isize;
                        let iw = (j * geom.stride + v) as isize - geom.padding as isize;
                        if ih >= 0 && iw >= 0 && (ih as usize) < x.h() && (iw as usize) < x.w() {
                            acc += k.at(co, ci_l, u, v) * x.at(n, g * cin_g + ci_l, ih as usize, iw as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_reference_over_geometries() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(c_in, c_out, groups, k, stride, pad, h, w) in &[
            (4, 6, 1, 3, 1, 1, 5, 7),
            (4, 4, 4, 3, 2, 1, 6, 5),
            (4, 8, 2, 1, 1, 0, 3, 3),
            (6, 6, 3, 5, 2, 2, 9, 8),
            (2, 3, 1, 3, 3, 0, 7, 7),
        ] {
            let x = Tensor::<f64>::randn([2, c_in, h, w], 1.0, &mut rng);
            let kernel = Tensor::<f64>::randn([c_out, c_in / groups, k, k], 1.0, &mut rng);
            let geom = ConvGeom::new(stride, pad, groups);
            let got = conv2d_forward(&x, &kernel, None, geom).unwrap();
            let want = reference(&x, &kernel, geom);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_groups() {
        let x = Tensor::<f32>::zeros([1, 4, 3, 3]);
        let k = Tensor::<f32>::zeros([3, 4, 1, 1]);
        assert!(conv2d_forward(&x, &k, None, ConvGeom::new(1, 0, 3)).is_err());
        let k = Tensor::<f32>::zeros([4, 3, 1, 1]);
        assert!(conv2d_forward(&x, &k, None, ConvGeom::new(1, 0, 1)).is_err());
    }

    #[test]
    fn backward_kernels_are_adjoint_to_forward() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let geom = ConvGeom::new(2, 1, 2);
        let x = Tensor::<f64>::randn([2, 4, 7, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([6, 2, 3, 3], 1.0, &mut rng);
        let y = conv2d_forward(&x, &k, None, geom).unwrap();
        let gy = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
        // <gy, conv(x)> = <conv_T(gy), x> = <dK, k>
        let lhs = gy.dot(&y).unwrap();
        let gx = conv2d_backward_input(&gy, &k, x.shape(), geom);
        let gk = conv2d_backward_kernel(&gy, &x, k.shape(), geom);
        assert!((lhs - gx.dot(&x).unwrap()).abs() < 1e-10);
        assert!((lhs - gk.dot(&k).unwrap()).abs() < 1e-10);
    }
}
