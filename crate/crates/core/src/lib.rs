//! Large-Small convolution and the LSNet family of lightweight vision backbones.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`kernels`], [`ops`] and [`tape`]: rank-4 tensors,
//!   convolution (im2col + GEMM when dense, direct loops when grouped) and
//!   reduction kernels, and reverse-mode differentiation.
//! * [`lsconv`]: large-kernel perception (LKP) that predicts per-pixel
//!   aggregation weights, small-kernel aggregation (SKA) that consumes them,
//!   and the closed-form multiply-accumulate model.
//! * [`blocks`] and [`model`]: SE, FFN, LS and MSA blocks, stem, downsampling,
//!   variant tables, parameter/MAC accounting and the weight file format.
//! * [`data`], [`train`], [`gradcheck`], [`analysis`], [`bench`]: the
//!   desk-scale harness.

pub mod analysis;
pub mod bench;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod lsconv;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{GradTape, Gradients, PrimKind, Var};
pub use tensor::{DType, Scalar, Shape, Tensor};
