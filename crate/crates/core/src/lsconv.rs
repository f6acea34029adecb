//! The LS convolution: large-kernel perception (LKP) predicts a `G·K_S²`-wide
//! weight vector for every pixel, small-kernel aggregation (SKA) convolves each
//! pixel's `K_S × K_S` neighborhood with those weights, shared by the `C/G`
//! channels of a group.
//!
//! ```
//! use lsnet::lsconv::{ls_conv_macs, LsConvConfig};
//!
//! let cfg = LsConvConfig::new(256).unwrap().with_groups(32);
//! let report = ls_conv_macs(&cfg, 14, 14).unwrap();
//! assert_eq!(report.closed_form, 18_540_032);
//! assert_eq!(report.itemized, report.closed_form);
//! ```

use crate::error::{ensure_config, Error, Result};
use crate::kernels::{norm, ska};
use crate::nn::{checked_product, Conv, ConvBn, Ctx, Layer, LsConvCheck, MacTally};
use crate::ops::{self, BnParams, ConvParams};
use crate::params::{join, ParamDecl, ParamStore};
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LARGE_KERNEL: usize = 7;
pub const DEFAULT_SMALL_KERNEL: usize = 3;
/// Channels per aggregation group when none is given (`G = C/8`).
pub const DEFAULT_GROUP_WIDTH: usize = 8;

/// Operator hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LsConvConfig {
    pub channels: usize,
    pub large_kernel: usize,
    pub small_kernel: usize,
    pub groups: usize,
    /// When false the large depthwise layer is replaced by the identity.
    pub lkp_dw: bool,
}

impl LsConvConfig {
    /// `K_L = 7`, `K_S = 3` and `G = C/8`, or the largest divisor of `C`
    /// below that when 8 does not divide `C`.
    pub fn new(channels: usize) -> Result<Self> {
        let widest = (channels / DEFAULT_GROUP_WIDTH).max(1);
        let cfg = LsConvConfig {
            channels,
            large_kernel: DEFAULT_LARGE_KERNEL,
            small_kernel: DEFAULT_SMALL_KERNEL,
            groups: (1..=widest).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1),
            lkp_dw: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_kernels(mut self, large: usize, small: usize) -> Self {
        self.large_kernel = large;
        self.small_kernel = small;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn without_lkp_dw(mut self) -> Self {
        self.lkp_dw = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let LsConvConfig {
            channels: c,
            large_kernel: kl,
            small_kernel: ks,
            groups: g,
            ..
        } = *self;
        ensure_config!(c >= 2 && c % 2 == 0, "LS conv needs an even channel count, got {c}");
        ensure_config!(
            kl % 2 == 1 && ks % 2 == 1,
            "LS conv kernels must be odd, got K_L={kl} K_S={ks}"
        );
        ensure_config!(kl >= ks, "K_L={kl} must be at least K_S={ks}");
        ensure_config!(g >= 1 && c % g == 0, "G={g} must divide C={c}");
        Ok(())
    }

    /// `D = G·K_S²`.
    pub fn weight_dim(&self) -> usize {
        self.groups * self.small_kernel * self.small_kernel
    }

    /// Width of the LKP bottleneck, `C/2`.
    pub fn hidden(&self) -> usize {
        self.channels / 2
    }
}

/// Per-pixel aggregation weights `(N, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap<T> {
    tensor: Tensor<T>,
    groups: usize,
    small_kernel: usize,
}

impl<T: Scalar> WeightMap<T> {
    pub fn new(tensor: Tensor<T>, groups: usize, small_kernel: usize) -> Result<Self> {
        ensure_config!(small_kernel % 2 == 1, "K_S={small_kernel} must be odd");
        ensure_config!(
            tensor.c() == groups * small_kernel * small_kernel,
            "weight map has {} channels, expected G·K_S² = {}",
            tensor.c(),
            groups * small_kernel * small_kernel
        );
        Ok(WeightMap {
            tensor,
            groups,
            small_kernel,
        })
    }

    /// Weights that copy the center tap: SKA with these is the identity.
    pub fn delta(n: usize, groups: usize, small_kernel: usize, h: usize, w: usize) -> Self {
        let k2 = small_kernel * small_kernel;
        let center = k2 / 2;
        let t = Tensor::from_fn([n, groups * k2, h, w], |_, d, _, _| {
            if d % k2 == center {
                T::one()
            } else {
                T::zero()
            }
        });
        WeightMap {
            tensor: t,
            groups,
            small_kernel,
        }
    }

    pub fn uniform(n: usize, groups: usize, small_kernel: usize, h: usize, w: usize, value: T) -> Self {
        WeightMap {
            tensor: Tensor::full([n, groups * small_kernel * small_kernel, h, w], value),
            groups,
            small_kernel,
        }
    }

    /// `d ↦ (g, u, v)`, row-major.
    pub fn split_index(&self, d: usize) -> (usize, usize, usize) {
        let k = self.small_kernel;
        (d / (k * k), (d % (k * k)) / k, d % k)
    }

    /// Entry `w*[n, g, u, v, i, j]` of the reshaped view.
    pub fn at(&self, n: usize, g: usize, u: usize, v: usize, i: usize, j: usize) -> T {
        let k = self.small_kernel;
        self.tensor.at(n, g * k * k + u * k + v, i, j)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn small_kernel(&self) -> usize {
        self.small_kernel
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }
}

/// Convolution followed by batch norm, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnParams<T> {
    pub conv: ConvParams<T>,
    pub bn: BnParams<T>,
}

/// The four LKP layers. `dw_large` is `None` when the large depthwise layer is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct LkpParams<T> {
    pub pw_reduce: ConvBnParams<T>,
    pub dw_large: Option<ConvBnParams<T>>,
    pub pw_mid: ConvBnParams<T>,
    pub pw_expand: ConvParams<T>,
}

impl<T: Scalar> LkpParams<T> {
    /// Seeded initialization, identical to what a model holding an [`LsConv`] gets.
    pub fn init(cfg: &LsConvConfig, seed: u64) -> Result<Self> {
        let layer = LsConv::new(*cfg)?;
        let store = crate::nn::init_params(&layer, "", seed)?;
        Self::from_store(cfg, &store, "")
    }

    /// Reads the LKP tensors of an LS conv stored under `prefix`.
    pub fn from_store(cfg: &LsConvConfig, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let conv_bn = |name: &str, stride: usize, pad: usize, groups: usize| -> Result<ConvBnParams<T>> {
            let p = join(prefix, name);
            let bn = join(&p, "bn");
            Ok(ConvBnParams {
                conv: ConvParams::new(store.get(&join(&p, "weight"))?.clone(), stride, pad, groups),
                bn: BnParams {
                    scale: store.get(&join(&bn, "scale"))?.clone(),
                    shift: store.get(&join(&bn, "shift"))?.clone(),
                    running_mean: store.get(&join(&bn, "running_mean"))?.clone(),
                    running_var: store.get(&join(&bn, "running_var"))?.clone(),
                },
            })
        };
        let expand = join(prefix, "pw_expand");
        Ok(LkpParams {
            pw_reduce: conv_bn("pw_reduce", 1, 0, 1)?,
            dw_large: if cfg.lkp_dw {
                Some(conv_bn("dw_large", 1, cfg.large_kernel / 2, cfg.hidden())?)
            } else {
                None
            },
            pw_mid: conv_bn("pw_mid", 1, 0, 1)?,
            pw_expand: ConvParams::new(store.get(&join(&expand, "weight"))?.clone(), 1, 0, 1)
                .with_bias(store.get(&join(&expand, "bias"))?.clone()),
        })
    }

    /// Learnable scalars in the four kernels, excluding norm and bias terms.
    pub fn kernel_weight_count(&self) -> usize {
        self.pw_reduce.conv.kernel.numel()
            + self.dw_large.as_ref().map_or(0, |p| p.conv.kernel.numel())
            + self.pw_mid.conv.kernel.numel()
            + self.pw_expand.kernel.numel()
    }
}

fn conv_bn_relu<T: Scalar>(x: &Tensor<T>, p: &ConvBnParams<T>) -> Result<Tensor<T>> {
    let y = ops::conv2d(x, &p.conv)?;
    let (y, _) = norm::bn_infer(
        &y,
        p.bn.scale.data(),
        p.bn.shift.data(),
        p.bn.running_mean.data(),
        p.bn.running_var.data(),
    );
    Ok(y.map(|v| v.max(T::zero())))
}

/// Predicts the weight map. Batch norms use their running statistics.
pub fn lkp_forward<T: Scalar>(x: &Tensor<T>, p: &LkpParams<T>, cfg: &LsConvConfig) -> Result<WeightMap<T>> {
    cfg.validate()?;
    ensure_config!(
        x.c() == cfg.channels,
        "LKP expects {} channels, input has {}",
        cfg.channels,
        x.c()
    );
    let mut h = conv_bn_relu(x, &p.pw_reduce)?;
    if let Some(dw) = &p.dw_large {
        h = conv_bn_relu(&h, dw)?;
    }
    let h = conv_bn_relu(&h, &p.pw_mid)?;
    WeightMap::new(ops::conv2d(&h, &p.pw_expand)?, cfg.groups, cfg.small_kernel)
}

fn check_ska<T: Scalar>(x: &Tensor<T>, w: &WeightMap<T>, cfg: &LsConvConfig) -> Result<()> {
    ensure_config!(
        w.groups == cfg.groups && w.small_kernel == cfg.small_kernel,
        "weight map built for G={} K_S={}, config has G={} K_S={}",
        w.groups,
        w.small_kernel,
        cfg.groups,
        cfg.small_kernel
    );
    ensure_config!(
        cfg.groups >= 1 && x.c().is_multiple_of(cfg.groups),
        "G={} must divide C={}",
        cfg.groups,
        x.c()
    );
    let [n, _, h, wd] = x.shape();
    ensure_config!(
        w.tensor.shape() == [n, cfg.weight_dim(), h, wd],
        "weight map {:?} does not match input {:?}",
        w.tensor.shape(),
        x.shape()
    );
    Ok(())
}

/// Dynamic aggregation of `x` with per-pixel weights.
pub fn ska_forward<T: Scalar>(x: &Tensor<T>, w: &WeightMap<T>, cfg: &LsConvConfig) -> Result<Tensor<T>> {
    check_ska(x, w, cfg)?;
    ska::ska_forward(x, &w.tensor, cfg.small_kernel, cfg.groups).ensure_finite("ska_forward")
}

/// Reference implementation of [`ska_forward`].
pub fn ska_forward_naive<T: Scalar>(x: &Tensor<T>, w: &WeightMap<T>, cfg: &LsConvConfig) -> Result<Tensor<T>> {
    check_ska(x, w, cfg)?;
    ska::ska_forward_naive(x, &w.tensor, cfg.small_kernel, cfg.groups).ensure_finite("ska_forward_naive")
}

/// `SKA(x, LKP(x))`.
pub fn ls_conv_forward<T: Scalar>(x: &Tensor<T>, p: &LkpParams<T>, cfg: &LsConvConfig) -> Result<Tensor<T>> {
    let w = lkp_forward(x, p, cfg)?;
    ska_forward(x, &w, cfg)
}

/// Itemized and closed-form multiply-accumulate counts of one LS conv.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LsConvMacs {
    pub pw: u64,
    pub dw: u64,
    pub ska: u64,
    pub itemized: u64,
    pub closed_form: u64,
}

/// `(HWC/4)·(3C + 2K_L² + (2G+4)K_S²)`. Without the large depthwise layer the
/// `2K_L²` term drops out.
pub fn closed_form_macs(cfg: &LsConvConfig, h: usize, w: usize) -> Result<u64> {
    let (c, ks, g) = (cfg.channels as u64, cfg.small_kernel as u64, cfg.groups as u64);
    let kl2 = if cfg.lkp_dw {
        (cfg.large_kernel as u64).pow(2)
    } else {
        0
    };
    let overflow = || Error::Overflow(format!("closed-form MACs overflow for {cfg:?} at {h}x{w}"));
    let bracket = (|| {
        let a = c.checked_mul(3)?;
        let b = kl2.checked_mul(2)?;
        let d = g.checked_mul(2)?.checked_add(4)?.checked_mul(ks.checked_mul(ks)?)?;
        a.checked_add(b)?.checked_add(d)
    })()
    .ok_or_else(overflow)?;
    let hwc = checked_product(&[h, w, cfg.channels])?;
    let total = hwc.checked_mul(bracket).ok_or_else(overflow)?;
    debug_assert_eq!(total % 4, 0);
    Ok(total / 4)
}

/// Counts each layer separately and alongside the closed form.
pub fn ls_conv_macs(cfg: &LsConvConfig, h: usize, w: usize) -> Result<LsConvMacs> {
    cfg.validate()?;
    ensure_config!(h > 0 && w > 0, "extents must be positive, got {h}x{w}");
    let mut tally = MacTally::default();
    LsConv::new(*cfg)?.tally("ls", (h, w), &mut tally)?;
    let sum_kind =
        |pred: &dyn Fn(&str) -> bool| -> u64 { tally.entries.iter().filter(|e| pred(&e.kind)).map(|e| e.macs).sum() };
    let check = &tally.ls_checks[0];
    Ok(LsConvMacs {
        pw: sum_kind(&|k| k == "pw"),
        dw: sum_kind(&|k| k == "dw"),
        ska: sum_kind(&|k| k == "ska"),
        itemized: check.itemized,
        closed_form: check.closed_form,
    })
}

/// LS convolution as a [`Layer`]. Parameter names below the prefix:
/// `pw_reduce`, `dw_large`, `pw_mid`, `pw_expand`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LsConv {
    pub cfg: LsConvConfig,
}

impl LsConv {
    pub fn new(cfg: LsConvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LsConv { cfg })
    }

    fn pw_reduce(&self) -> ConvBn {
        ConvBn::pointwise(self.cfg.channels, self.cfg.hidden(), true)
    }

    fn dw_large(&self) -> Option<ConvBn> {
        self.cfg
            .lkp_dw
            .then(|| ConvBn::depthwise(self.cfg.hidden(), self.cfg.large_kernel, 1, true))
    }

    fn pw_mid(&self) -> ConvBn {
        ConvBn::pointwise(self.cfg.hidden(), self.cfg.hidden(), true)
    }

    fn pw_expand(&self) -> Conv {
        Conv::pointwise(self.cfg.hidden(), self.cfg.weight_dim(), true)
    }

    /// Records LKP only and returns the weight-map variable.
    pub fn record_weights<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let mut h = self.pw_reduce().record(ctx, &join(prefix, "pw_reduce"), x)?;
        if let Some(dw) = self.dw_large() {
            h = dw.record(ctx, &join(prefix, "dw_large"), h)?;
        }
        let h = self.pw_mid().record(ctx, &join(prefix, "pw_mid"), h)?;
        self.pw_expand().record(ctx, &join(prefix, "pw_expand"), h)
    }
}

impl Layer for LsConv {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        self.pw_reduce().declare(&join(prefix, "pw_reduce"), out);
        if let Some(dw) = self.dw_large() {
            dw.declare(&join(prefix, "dw_large"), out);
        }
        self.pw_mid().declare(&join(prefix, "pw_mid"), out);
        self.pw_expand().declare(&join(prefix, "pw_expand"), out);
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.record_weights(ctx, prefix, x)?;
        ctx.capture(prefix, w);
        ctx.tape.ska(x, w, self.cfg.small_kernel, self.cfg.groups)
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        let first = t.entries.len();
        self.pw_reduce().tally(&join(prefix, "pw_reduce"), hw, t)?;
        if let Some(dw) = self.dw_large() {
            dw.tally(&join(prefix, "dw_large"), hw, t)?;
        }
        self.pw_mid().tally(&join(prefix, "pw_mid"), hw, t)?;
        self.pw_expand().tally(&join(prefix, "pw_expand"), hw, t)?;
        let ska_macs = checked_product(&[
            hw.0,
            hw.1,
            self.cfg.channels,
            self.cfg.small_kernel,
            self.cfg.small_kernel,
        ])?;
        t.push(join(prefix, "ska"), "ska", ska_macs, 0);
        let itemized = t.entries[first..].iter().try_fold(0u64, |acc, e| {
            acc.checked_add(e.macs)
                .ok_or_else(|| Error::Overflow("LS conv MAC tally exceeds u64".into()))
        })?;
        t.ls_checks.push(LsConvCheck {
            name: prefix.to_string(),
            itemized,
            closed_form: closed_form_macs(&self.cfg, hw.0, hw.1)?,
        });
        Ok(hw)
    }
}
