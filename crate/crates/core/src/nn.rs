//! Layer plumbing shared by every building block.
//!
//! A [`Layer`] is a structural description (channel counts, kernel sizes) with
//! three walks over the same structure: `declare` lists its parameters,
//! `record` evaluates it on a [`GradTape`], `tally` counts multiply-accumulates
//! symbolically. Parameters live in a [`ParamStore`] under dotted names.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::conv::{out_extent, ConvGeom};
use crate::kernels::norm::{self, BnBatchStats};
use crate::ops::NormMode;
use crate::params::{join, EntryKind, Init, ParamDecl, ParamStore, WEIGHT_STD};
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

/// Evaluation context: the tape, the parameters it reads and the norm mode.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut GradTape<T>,
    store: &'a ParamStore<T>,
    mode: NormMode,
    bn_updates: Vec<(String, BnBatchStats<T>)>,
    captures: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut GradTape<T>, store: &'a ParamStore<T>, mode: NormMode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            bn_updates: Vec::new(),
            captures: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    /// Leaf for a learnable tensor; repeated calls return the same leaf.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.tape.leaf_var(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        self.tape.leaf(name, t)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.store.get(name)
    }

    /// Remembers an intermediate under a name (LS convs record their weight maps).
    pub fn capture(&mut self, name: &str, v: Var) {
        self.captures.insert(name.to_string(), v);
    }

    pub fn captures(&self) -> &BTreeMap<String, Var> {
        &self.captures
    }

    /// Batch statistics gathered in train mode, keyed by norm prefix.
    pub fn take_bn_updates(&mut self) -> Vec<(String, BnBatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Folds train-mode batch statistics into the stored running averages.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[(String, BnBatchStats<T>)]) -> Result<()> {
    for (prefix, stats) in updates {
        norm::update_running(store.get_mut(&join(prefix, "running_mean"))?.data_mut(), &stats.mean);
        norm::update_running(
            store.get_mut(&join(prefix, "running_var"))?.data_mut(),
            &stats.var_unbiased,
        );
    }
    Ok(())
}

/// One row of a multiply-accumulate report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MacEntry {
    pub name: String,
    pub kind: String,
    pub macs: u64,
    pub params: u64,
}

/// Itemized LS-conv tally next to its closed form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LsConvCheck {
    pub name: String,
    pub itemized: u64,
    pub closed_form: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MacTally {
    pub entries: Vec<MacEntry>,
    pub ls_checks: Vec<LsConvCheck>,
}

/// Product with overflow reported as [`Error::Overflow`].
pub fn checked_product(parts: &[usize]) -> Result<u64> {
    parts.iter().try_fold(1u64, |acc, &p| {
        acc.checked_mul(p as u64)
            .ok_or_else(|| Error::Overflow(format!("product of {parts:?} exceeds u64")))
    })
}

impl MacTally {
    pub fn push(&mut self, name: String, kind: &str, macs: u64, params: u64) {
        self.entries.push(MacEntry {
            name,
            kind: kind.to_string(),
            macs,
            params,
        });
    }

    pub fn total_macs(&self) -> Result<u64> {
        self.entries.iter().try_fold(0u64, |acc, e| {
            acc.checked_add(e.macs)
                .ok_or_else(|| Error::Overflow("total MAC count exceeds u64".into()))
        })
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }
}

/// Structural layer with parameter, evaluation and MAC walks.
pub trait Layer {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>);

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var>;

    /// Adds this layer's rows for an `(h, w)` input and returns the output extent.
    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)>;
}

/// Evaluates a layer on a throwaway tape.
pub fn apply<L: Layer, T: Scalar>(
    layer: &L,
    store: &ParamStore<T>,
    prefix: &str,
    x: &Tensor<T>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let mut tape = GradTape::new();
    let mut ctx = Ctx::new(&mut tape, store, mode);
    let xv = ctx.tape.constant(x.clone());
    let y = layer.record(&mut ctx, prefix, xv)?;
    tape.value(y).clone().ensure_finite("layer forward")
}

/// Parameters of one layer, initialized from `seed`.
pub fn init_params<L: Layer, T: Scalar>(layer: &L, prefix: &str, seed: u64) -> Result<ParamStore<T>> {
    let mut decls = Vec::new();
    layer.declare(prefix, &mut decls);
    ParamStore::from_decls(&decls, seed)
}

pub fn declare_bn(prefix: &str, channels: usize, out: &mut Vec<ParamDecl>) {
    let shape = [1, channels, 1, 1];
    for (name, kind, init) in [
        ("scale", EntryKind::Learnable, Init::Ones),
        ("shift", EntryKind::Learnable, Init::Zeros),
        ("running_mean", EntryKind::Buffer, Init::Zeros),
        ("running_var", EntryKind::Buffer, Init::Ones),
    ] {
        out.push(ParamDecl {
            name: join(prefix, name),
            shape,
            kind,
            init,
        });
    }
}

/// Batch norm under `prefix` in the context's mode.
pub fn record_bn<T: Scalar>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let scale = ctx.param(&join(prefix, "scale"))?;
    let shift = ctx.param(&join(prefix, "shift"))?;
    match ctx.mode {
        NormMode::Train => {
            let (y, stats) = ctx.tape.batch_norm_train(x, scale, shift)?;
            ctx.bn_updates.push((prefix.to_string(), stats));
            Ok(y)
        }
        NormMode::Infer => {
            let rm = ctx.buffer(&join(prefix, "running_mean"))?;
            let rv = ctx.buffer(&join(prefix, "running_var"))?;
            ctx.tape.batch_norm_infer(x, scale, shift, rm, rv)
        }
    }
}

/// Convolution without normalization; optional bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv {
    pub fn pointwise(c_in: usize, c_out: usize, bias: bool) -> Self {
        Conv {
            c_in,
            c_out,
            kernel: 1,
            stride: 1,
            groups: 1,
            bias,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, (self.kernel - 1) / 2, self.groups)
    }

    pub fn kernel_params(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.kernel * self.kernel
    }

    fn kind(&self) -> &'static str {
        if self.kernel == 1 && self.groups == 1 {
            "pw"
        } else if self.groups == self.c_in && self.groups > 1 {
            "dw"
        } else if self.groups > 1 {
            "grouped"
        } else {
            "conv"
        }
    }

    fn out_hw(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        let p = (self.kernel - 1) / 2;
        match (
            out_extent(h, self.kernel, self.stride, p),
            out_extent(w, self.kernel, self.stride, p),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
            _ => Err(crate::error::config_err!("{}x{} input too small for conv", h, w)),
        }
    }

    fn tally_row(
        &self,
        prefix: &str,
        hw: (usize, usize),
        extra_params: usize,
        t: &mut MacTally,
    ) -> Result<(usize, usize)> {
        let (oh, ow) = self.out_hw(hw)?;
        let macs = checked_product(&[oh, ow, self.kernel_params()])?;
        let params = self.kernel_params() + if self.bias { self.c_out } else { 0 } + extra_params;
        t.push(prefix.to_string(), self.kind(), macs, params as u64);
        Ok((oh, ow))
    }
}

impl Layer for Conv {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        out.push(ParamDecl {
            name: join(prefix, "weight"),
            shape: [self.c_out, self.c_in / self.groups, self.kernel, self.kernel],
            kind: EntryKind::Learnable,
            init: Init::TruncNormal(WEIGHT_STD),
        });
        if self.bias {
            out.push(ParamDecl {
                name: join(prefix, "bias"),
                shape: [1, self.c_out, 1, 1],
                kind: EntryKind::Learnable,
                init: Init::Zeros,
            });
        }
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let k = ctx.param(&join(prefix, "weight"))?;
        let b = if self.bias {
            Some(ctx.param(&join(prefix, "bias"))?)
        } else {
            None
        };
        ctx.tape.conv2d(x, k, b, self.geom())
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        self.tally_row(prefix, hw, 0, t)
    }
}

/// Convolution (no bias) → batch norm → optional ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBn {
    pub conv: Conv,
    pub relu: bool,
}

impl ConvBn {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, groups: usize, relu: bool) -> Self {
        ConvBn {
            conv: Conv {
                c_in,
                c_out,
                kernel,
                stride,
                groups,
                bias: false,
            },
            relu,
        }
    }

    pub fn pointwise(c_in: usize, c_out: usize, relu: bool) -> Self {
        ConvBn::new(c_in, c_out, 1, 1, 1, relu)
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        ConvBn::new(channels, channels, kernel, stride, channels, relu)
    }
}

impl Layer for ConvBn {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        self.conv.declare(prefix, out);
        declare_bn(&join(prefix, "bn"), self.conv.c_out, out);
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv.record(ctx, prefix, x)?;
        let y = record_bn(ctx, &join(prefix, "bn"), y)?;
        Ok(if self.relu { ctx.tape.relu(y) } else { y })
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        self.conv.tally_row(prefix, hw, 2 * self.conv.c_out, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn declared_params_match_tallied_params() {
        let layer = ConvBn::depthwise(8, 3, 2, true);
        let store: ParamStore<f32> = init_params(&layer, "dw", 0).unwrap();
        let mut t = MacTally::default();
        let hw = layer.tally("dw", (7, 6), &mut t).unwrap();
        assert_eq!(hw, (4, 3));
        assert_eq!(t.total_params() as usize, store.count_params());
        assert_eq!(t.entries[0].macs, 4 * 3 * 8 * 9);
        assert_eq!(t.entries[0].kind, "dw");
    }

    #[test]
    fn train_mode_reports_running_stat_updates() {
        let layer = ConvBn::pointwise(2, 3, false);
        let mut store: ParamStore<f64> = init_params(&layer, "pw", 4).unwrap();
        let mut tape = GradTape::new();
        let mut ctx = Ctx::new(&mut tape, &store, NormMode::Train);
        let x = ctx.tape.constant(Tensor::full([2, 2, 2, 2], 1.0));
        layer.record(&mut ctx, "pw", x).unwrap();
        let updates = ctx.take_bn_updates();
        assert_eq!(updates.len(), 1);
        apply_bn_updates(&mut store, &updates).unwrap();
        // Constant input: every channel has zero variance, so running_var decays to 0.9.
        assert!(store
            .get("pw.bn.running_var")
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.9).abs() < 1e-12));
    }

    #[test]
    fn overflow_is_reported() {
        assert!(matches!(checked_product(&[usize::MAX, 3]), Err(Error::Overflow(_))));
    }
}
