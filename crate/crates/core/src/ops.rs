//! Tensor-level primitives for callers that do not need gradients.
//!
//! Each function validates its operands, runs the kernel and rejects
//! non-finite output.

use crate::error::{ensure_config, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm;
use crate::kernels::reduce;
use crate::tensor::{Scalar, Tensor};

/// Kernel `(C_out, C_in/groups, k_h, k_w)`, optional bias and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams {
            kernel,
            bias: None,
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1 with `(k − 1)/2` padding; the kernel must be odd in both extents.
    pub fn same(kernel: Tensor<T>, groups: usize) -> Result<Self> {
        let [_, _, kh, kw] = kernel.shape();
        ensure_config!(
            kh % 2 == 1 && kw % 2 == 1 && kh == kw,
            "same padding needs an odd square kernel, got {kh}x{kw}"
        );
        Ok(ConvParams::new(kernel, 1, (kh - 1) / 2, groups))
    }

    pub fn with_bias(mut self, bias: Tensor<T>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, self.padding, self.groups)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.n()
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.c() * self.groups
    }
}

/// Grouped 2-D convolution with symmetric zero padding.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    conv::conv2d_forward(input, &params.kernel, params.bias.as_ref(), params.geom())?.ensure_finite("conv2d")
}

/// Softmax over the last axis; every row sums to one.
pub fn softmax_lastdim<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    reduce::softmax_lastdim(input).ensure_finite("softmax_lastdim")
}

/// Mean over `H·W`, shaped `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_config!(input.h() >= 1 && input.w() >= 1, "global_avg_pool on an empty plane");
    reduce::global_avg_pool(input).ensure_finite("global_avg_pool")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    Train,
    Infer,
}

/// Affine parameters and running statistics of one batch-norm layer, each `[1, C, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BnParams<T> {
    /// Scale 1, shift 0, running statistics (0, 1).
    pub fn identity(channels: usize) -> Self {
        BnParams {
            scale: Tensor::vector(vec![T::one(); channels]),
            shift: Tensor::vector(vec![T::zero(); channels]),
            running_mean: Tensor::vector(vec![T::zero(); channels]),
            running_var: Tensor::vector(vec![T::one(); channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }
}

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics and folds them into the running averages (momentum 0.1).
pub fn batch_norm<T: Scalar>(input: &Tensor<T>, params: &mut BnParams<T>, mode: NormMode) -> Result<Tensor<T>> {
    let c = input.c();
    ensure_config!(
        params.channels() == c
            && params.shift.numel() == c
            && params.running_mean.numel() == c
            && params.running_var.numel() == c,
        "batch_norm: parameters for {} channels, input has {c}",
        params.channels()
    );
    let y = match mode {
        NormMode::Train => {
            let (y, _, stats) = norm::bn_train(input, params.scale.data(), params.shift.data());
            norm::update_running(params.running_mean.data_mut(), &stats.mean);
            norm::update_running(params.running_var.data_mut(), &stats.var_unbiased);
            y
        }
        NormMode::Infer => {
            norm::bn_infer(
                input,
                params.scale.data(),
                params.shift.data(),
                params.running_mean.data(),
                params.running_var.data(),
            )
            .0
        }
    };
    y.ensure_finite("batch_norm")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_pointwise_kernel_returns_input() {
        let x = Tensor::<f64>::from_fn([1, 2, 2, 2], |_, c, h, w| (c * 4 + h * 2 + w) as f64 - 3.5);
        let eye = Tensor::from_fn([2, 2, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &ConvParams::new(eye, 1, 0, 1)).unwrap(), x);
    }

    #[test]
    fn depthwise_ones_kernel_on_constant_field() {
        let x = Tensor::<f32>::full([1, 3, 5, 5], 1.0);
        let p = ConvParams::same(Tensor::full([3, 1, 3, 3], 1.0), 3).unwrap();
        let y = conv2d(&x, &p).unwrap();
        for c in 0..3 {
            assert_eq!(y.at(0, c, 2, 2), 9.0);
            assert_eq!(y.at(0, c, 0, 0), 4.0);
            assert_eq!(y.at(0, c, 4, 4), 4.0);
            assert_eq!(y.at(0, c, 0, 2), 6.0);
        }
    }

    #[test]
    fn output_shape_follows_floor_formula() {
        let x = Tensor::<f32>::zeros([2, 4, 7, 6]);
        let p = ConvParams::new(Tensor::zeros([8, 2, 3, 3]), 2, 1, 2);
        assert_eq!(conv2d(&x, &p).unwrap().shape(), [2, 8, 4, 3]);
    }

    #[test]
    fn same_padding_rejects_even_kernels() {
        assert!(ConvParams::same(Tensor::<f32>::zeros([1, 1, 2, 2]), 1).is_err());
    }

    #[test]
    fn grouped_conv_equals_block_diagonal_dense_conv() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn([2, 4, 5, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([4, 2, 3, 3], 1.0, &mut rng);
        let grouped = conv2d(&x, &ConvParams::same(k.clone(), 2).unwrap()).unwrap();
        // Dense kernel with cross-group slices zero-filled.
        let dense_k = Tensor::from_fn(
            [4, 4, 3, 3],
            |o, i, u, v| {
                if o / 2 == i / 2 {
                    k.at(o, i % 2, u, v)
                } else {
                    0.0
                }
            },
        );
        let dense = conv2d(&x, &ConvParams::same(dense_k, 1).unwrap()).unwrap();
        assert!(grouped.max_abs_diff(&dense).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_closed_forms() {
        let y = softmax_lastdim(&Tensor::<f64>::from_vec([1, 1, 1, 4], vec![0.3; 4]).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let y = softmax_lastdim(&Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        let big = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![1000.0, 1001.0, 999.0]).unwrap();
        let y = softmax_lastdim(&big).unwrap();
        assert!((y.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pooling_is_the_plane_mean() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f32>::full([2, 3, 4, 4], -1.25);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn batch_norm_identity_statistics_in_infer_mode() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn([2, 3, 4, 4], 1.0, &mut rng);
        let mut p = BnParams::identity(3);
        let y = batch_norm(&x, &mut p, NormMode::Infer).unwrap();
        // (x - 0) / sqrt(1 + 1e-5): equal up to the epsilon's relative effect.
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 5.1e-6 * b.abs());
        }
    }

    #[test]
    fn batch_norm_constant_input_yields_shift() {
        let x = Tensor::<f64>::full([4, 2, 3, 3], 7.0);
        let mut p = BnParams::identity(2);
        p.shift = Tensor::vector(vec![0.5, -2.0]);
        let y = batch_norm(&x, &mut p, NormMode::Train).unwrap();
        for n in 0..4 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.5));
            assert!(y.plane(n, 1).iter().all(|&v| v == -2.0));
        }
        // running mean moved 10% toward 7, running var decayed toward 0.
        assert!((p.running_mean.data()[0] - 0.7).abs() < 1e-12);
        assert!((p.running_var.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_channel_mismatch() {
        let mut p = BnParams::<f32>::identity(2);
        assert!(batch_norm(&Tensor::zeros([1, 3, 1, 1]), &mut p, NormMode::Infer).is_err());
    }
}
