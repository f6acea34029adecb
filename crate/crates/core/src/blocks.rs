//! Composite blocks: SE, FFN, self-attention, residual blocks, stem,
//! downsampling and the classifier head.
//!
//! Every block is a [`Layer`]; parameters sit under the prefix the caller
//! passes in. A [`Block`] combines an optional local branch (depthwise 3×3
//! followed by SE), an optional token mixer and an FFN, each residual:
//!
//! ```text
//! h = x + SE(DW(x))      local branch
//! h = h + mixer(h)       LS conv, self-attention or static conv
//! y = h + FFN(h)
//! ```

use crate::error::{config_err, ensure_config, Result};
use crate::lsconv::{LsConv, LsConvConfig};
use crate::nn::{checked_product, declare_bn, record_bn, Conv, ConvBn, Ctx, Layer, MacTally};
use crate::params::{join, ParamDecl};
use crate::tape::Var;
use crate::tensor::Scalar;

pub const SE_REDUCTION: usize = 4;
pub const FFN_RATIO: usize = 2;
pub const HEAD_DIM: usize = 32;
pub const KEY_DIM: usize = 16;

/// Squeeze-and-excitation: `x ⊙ sigmoid(fc2(relu(fc1(GAP(x)))))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Se {
    pub channels: usize,
    pub reduced: usize,
}

impl Se {
    pub fn new(channels: usize, reduction: usize) -> Self {
        Se {
            channels,
            reduced: (channels / reduction).max(1),
        }
    }

    fn fc1(&self) -> Conv {
        Conv::pointwise(self.channels, self.reduced, true)
    }

    fn fc2(&self) -> Conv {
        Conv::pointwise(self.reduced, self.channels, true)
    }

    /// Records the gate `(N, C, 1, 1)` only.
    pub fn record_gate<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let s = ctx.tape.global_avg_pool(x);
        let s = self.fc1().record(ctx, &join(prefix, "fc1"), s)?;
        let s = ctx.tape.relu(s);
        let s = self.fc2().record(ctx, &join(prefix, "fc2"), s)?;
        Ok(ctx.tape.sigmoid(s))
    }
}

impl Layer for Se {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        self.fc1().declare(&join(prefix, "fc1"), out);
        self.fc2().declare(&join(prefix, "fc2"), out);
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let c = ctx.tape.value(x).c();
        ensure_config!(
            c == self.channels,
            "SE built for {} channels, input has {c}",
            self.channels
        );
        let gate = self.record_gate(ctx, prefix, x)?;
        ctx.tape.mul_broadcast(x, gate)
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        self.fc1().tally(&join(prefix, "fc1"), (1, 1), t)?;
        self.fc2().tally(&join(prefix, "fc2"), (1, 1), t)?;
        Ok(hw)
    }
}

/// Channel-mixing feed-forward with its own residual: `x + PW₂(PW₁(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ffn {
    pub channels: usize,
    pub hidden: usize,
}

impl Ffn {
    pub fn new(channels: usize, ratio: usize) -> Self {
        Ffn {
            channels,
            hidden: channels * ratio,
        }
    }

    fn pw1(&self) -> ConvBn {
        ConvBn::pointwise(self.channels, self.hidden, true)
    }

    fn pw2(&self) -> ConvBn {
        ConvBn::pointwise(self.hidden, self.channels, false)
    }
}

impl Layer for Ffn {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        self.pw1().declare(&join(prefix, "pw1"), out);
        self.pw2().declare(&join(prefix, "pw2"), out);
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let c = ctx.tape.value(x).c();
        ensure_config!(
            c == self.channels,
            "FFN built for {} channels, input has {c}",
            self.channels
        );
        let h = self.pw1().record(ctx, &join(prefix, "pw1"), x)?;
        let h = self.pw2().record(ctx, &join(prefix, "pw2"), h)?;
        ctx.tape.add(x, h)
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        self.pw1().tally(&join(prefix, "pw1"), hw, t)?;
        self.pw2().tally(&join(prefix, "pw2"), hw, t)
    }
}

/// Multi-head self-attention over the `H·W` tokens. Projections are 1×1
/// convolutions with bias; no positional encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub channels: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl Attention {
    /// `max(1, C/head_dim)` heads, each with `key_dim` query/key channels and
    /// `C/heads` value channels.
    pub fn new(channels: usize, head_dim: usize, key_dim: usize) -> Result<Self> {
        ensure_config!(
            head_dim > 0 && key_dim > 0,
            "attention head and key dims must be positive"
        );
        let heads = (channels / head_dim).max(1);
        Self::with_heads(channels, heads, key_dim)
    }

    pub fn with_heads(channels: usize, heads: usize, key_dim: usize) -> Result<Self> {
        ensure_config!(
            heads > 0 && channels.is_multiple_of(heads),
            "{heads} heads do not divide {channels} channels"
        );
        Ok(Attention {
            channels,
            heads,
            key_dim,
            value_dim: channels / heads,
        })
    }

    fn q(&self) -> Conv {
        Conv::pointwise(self.channels, self.heads * self.key_dim, true)
    }

    fn v(&self) -> Conv {
        Conv::pointwise(self.channels, self.heads * self.value_dim, true)
    }

    fn proj(&self) -> Conv {
        Conv::pointwise(self.heads * self.value_dim, self.channels, true)
    }
}

impl Layer for Attention {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        self.q().declare(&join(prefix, "q"), out);
        self.q().declare(&join(prefix, "k"), out);
        self.v().declare(&join(prefix, "v"), out);
        self.proj().declare(&join(prefix, "proj"), out);
    }

    /// Captures the `(N, heads, HW, HW)` attention matrix under `{prefix}.attn`.
    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let [n, c, h, w] = ctx.tape.value(x).shape();
        ensure_config!(
            c == self.channels,
            "attention built for {} channels, input has {c}",
            self.channels
        );
        let (nh, kd, vd, hw) = (self.heads, self.key_dim, self.value_dim, h * w);
        let q = self.q().record(ctx, &join(prefix, "q"), x)?;
        let k = self.q().record(ctx, &join(prefix, "k"), x)?;
        let v = self.v().record(ctx, &join(prefix, "v"), x)?;
        let q = ctx.tape.reshape(q, [n, nh, kd, hw])?;
        let k = ctx.tape.reshape(k, [n, nh, kd, hw])?;
        let v = ctx.tape.reshape(v, [n, nh, vd, hw])?;
        let scores = ctx.tape.matmul(q, true, k, false)?;
        let scores = ctx.tape.scale(scores, T::of(1.0 / (kd as f64).sqrt()));
        let attn = ctx.tape.softmax(scores);
        ctx.capture(&join(prefix, "attn"), attn);
        let o = ctx.tape.matmul(v, false, attn, true)?;
        let o = ctx.tape.reshape(o, [n, nh * vd, h, w])?;
        self.proj().record(ctx, &join(prefix, "proj"), o)
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        self.q().tally(&join(prefix, "q"), hw, t)?;
        self.q().tally(&join(prefix, "k"), hw, t)?;
        self.v().tally(&join(prefix, "v"), hw, t)?;
        let tokens = hw.0 * hw.1;
        let qk = checked_product(&[tokens, tokens, self.heads, self.key_dim])?;
        let av = checked_product(&[tokens, tokens, self.heads, self.value_dim])?;
        t.push(join(prefix, "qk"), "attn", qk, 0);
        t.push(join(prefix, "av"), "attn", av, 0);
        self.proj().tally(&join(prefix, "proj"), hw, t)
    }
}

/// Static depthwise convolution: the aggregation weights are the kernel itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StaticConv {
    pub channels: usize,
    pub kernel: usize,
}

impl StaticConv {
    fn conv(&self) -> Conv {
        Conv {
            c_in: self.channels,
            c_out: self.channels,
            kernel: self.kernel,
            stride: 1,
            groups: self.channels,
            bias: false,
        }
    }
}

impl Layer for StaticConv {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        self.conv().declare(prefix, out);
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        self.conv().record(ctx, prefix, x)
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        self.conv().tally(prefix, hw, t)
    }
}

/// Token mixers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mixer {
    Ls(LsConv),
    Msa(Attention),
    Static(StaticConv),
}

impl Layer for Mixer {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        match self {
            Mixer::Ls(m) => m.declare(prefix, out),
            Mixer::Msa(m) => m.declare(prefix, out),
            Mixer::Static(m) => m.declare(prefix, out),
        }
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        match self {
            Mixer::Ls(m) => m.record(ctx, prefix, x),
            Mixer::Msa(m) => m.record(ctx, prefix, x),
            Mixer::Static(m) => m.record(ctx, prefix, x),
        }
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        match self {
            Mixer::Ls(m) => m.tally(prefix, hw, t),
            Mixer::Msa(m) => m.tally(prefix, hw, t),
            Mixer::Static(m) => m.tally(prefix, hw, t),
        }
    }
}

/// Residual block. Parameter names: `dw`, `se`, `mixer`, `ffn`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub channels: usize,
    pub dw: bool,
    pub se: bool,
    pub mixer: Option<Mixer>,
    pub ffn: Ffn,
}

impl Block {
    /// DW → SE → LS conv → FFN.
    pub fn ls(cfg: LsConvConfig) -> Result<Self> {
        Ok(Block::full(cfg.channels, Mixer::Ls(LsConv::new(cfg)?)))
    }

    /// DW → SE → self-attention → FFN.
    pub fn msa(channels: usize) -> Result<Self> {
        Ok(Block::full(
            channels,
            Mixer::Msa(Attention::new(channels, HEAD_DIM, KEY_DIM)?),
        ))
    }

    pub fn full(channels: usize, mixer: Mixer) -> Self {
        Block {
            channels,
            dw: true,
            se: true,
            mixer: Some(mixer),
            ffn: Ffn::new(channels, FFN_RATIO),
        }
    }

    /// DW → SE → FFN, no token mixer.
    pub fn local(channels: usize) -> Self {
        Block {
            channels,
            dw: true,
            se: true,
            mixer: None,
            ffn: Ffn::new(channels, FFN_RATIO),
        }
    }

    pub fn without_dw(mut self) -> Self {
        self.dw = false;
        self
    }

    pub fn without_se(mut self) -> Self {
        self.se = false;
        self
    }

    fn dw_layer(&self) -> ConvBn {
        ConvBn::depthwise(self.channels, 3, 1, false)
    }

    fn se_layer(&self) -> Se {
        Se::new(self.channels, SE_REDUCTION)
    }
}

impl Layer for Block {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        if self.dw {
            self.dw_layer().declare(&join(prefix, "dw"), out);
        }
        if self.se {
            self.se_layer().declare(&join(prefix, "se"), out);
        }
        if let Some(m) = &self.mixer {
            m.declare(&join(prefix, "mixer"), out);
        }
        self.ffn.declare(&join(prefix, "ffn"), out);
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let c = ctx.tape.value(x).c();
        ensure_config!(
            c == self.channels,
            "block built for {} channels, input has {c}",
            self.channels
        );
        let mut h = x;
        if self.dw || self.se {
            let mut b = x;
            if self.dw {
                b = self.dw_layer().record(ctx, &join(prefix, "dw"), b)?;
            }
            if self.se {
                b = self.se_layer().record(ctx, &join(prefix, "se"), b)?;
            }
            h = ctx.tape.add(h, b)?;
        }
        if let Some(m) = &self.mixer {
            let b = m.record(ctx, &join(prefix, "mixer"), h)?;
            h = ctx.tape.add(h, b)?;
        }
        self.ffn.record(ctx, &join(prefix, "ffn"), h)
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        if self.dw {
            self.dw_layer().tally(&join(prefix, "dw"), hw, t)?;
        }
        if self.se {
            self.se_layer().tally(&join(prefix, "se"), hw, t)?;
        }
        if let Some(m) = &self.mixer {
            m.tally(&join(prefix, "mixer"), hw, t)?;
        }
        self.ffn.tally(&join(prefix, "ffn"), hw, t)
    }
}

/// Three 3×3 stride-2 conv-BN-ReLU layers: `H×W → H/8 × W/8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stem {
    pub in_channels: usize,
    pub ladder: [usize; 3],
}

impl Stem {
    fn layers(&self) -> [ConvBn; 3] {
        let [a, b, c] = self.ladder;
        [
            ConvBn::new(self.in_channels, a, 3, 2, 1, true),
            ConvBn::new(a, b, 3, 2, 1, true),
            ConvBn::new(b, c, 3, 2, 1, true),
        ]
    }

    fn check_extent(h: usize, w: usize) -> Result<()> {
        ensure_config!(
            h >= 8 && w >= 8 && h.is_multiple_of(8) && w.is_multiple_of(8),
            "stem needs extents divisible by 8, got {h}x{w}"
        );
        Ok(())
    }
}

impl Layer for Stem {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        for (i, l) in self.layers().iter().enumerate() {
            l.declare(&join(prefix, &i.to_string()), out);
        }
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.value(x).shape();
        ensure_config!(
            c == self.in_channels,
            "stem expects {} channels, got {c}",
            self.in_channels
        );
        Self::check_extent(h, w)?;
        let mut y = x;
        for (i, l) in self.layers().iter().enumerate() {
            y = l.record(ctx, &join(prefix, &i.to_string()), y)?;
        }
        Ok(y)
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        Self::check_extent(hw.0, hw.1)?;
        let mut hw = hw;
        for (i, l) in self.layers().iter().enumerate() {
            hw = l.tally(&join(prefix, &i.to_string()), hw, t)?;
        }
        Ok(hw)
    }
}

/// Depthwise 3×3 with stride 1 or 2, then pointwise `C_in → C_out`.
/// Stride 2 maps an extent `h` to `⌈h/2⌉`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Downsample {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl Downsample {
    pub fn new(c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        ensure_config!(
            stride == 1 || stride == 2,
            "downsample stride must be 1 or 2, got {stride}"
        );
        Ok(Downsample { c_in, c_out, stride })
    }

    fn dw(&self) -> ConvBn {
        ConvBn::depthwise(self.c_in, 3, self.stride, true)
    }

    fn pw(&self) -> ConvBn {
        ConvBn::pointwise(self.c_in, self.c_out, true)
    }
}

impl Layer for Downsample {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        self.dw().declare(&join(prefix, "dw"), out);
        self.pw().declare(&join(prefix, "pw"), out);
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let y = self.dw().record(ctx, &join(prefix, "dw"), x)?;
        self.pw().record(ctx, &join(prefix, "pw"), y)
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        let hw = self.dw().tally(&join(prefix, "dw"), hw, t)?;
        self.pw().tally(&join(prefix, "pw"), hw, t)
    }
}

/// Global average pool → batch norm → linear classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Head {
    pub channels: usize,
    pub classes: usize,
}

impl Head {
    fn linear(&self) -> Conv {
        Conv::pointwise(self.channels, self.classes, true)
    }
}

impl Layer for Head {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        declare_bn(&join(prefix, "bn"), self.channels, out);
        self.linear().declare(&join(prefix, "linear"), out);
    }

    /// Logits shaped `(N, classes, 1, 1)`.
    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        let p = ctx.tape.global_avg_pool(x);
        let p = record_bn(ctx, &join(prefix, "bn"), p)?;
        self.linear().record(ctx, &join(prefix, "linear"), p)
    }

    fn tally(&self, prefix: &str, _hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        t.push(join(prefix, "bn"), "bn", 0, 2 * self.channels as u64);
        self.linear().tally(&join(prefix, "linear"), (1, 1), t)
    }
}

/// Builds the stride of a stage transition from consecutive resolution divisors.
pub fn transition_stride(prev: usize, next: usize) -> Result<usize> {
    match next.checked_div(prev) {
        Some(s @ (1 | 2)) if prev * s == next => Ok(s),
        _ => Err(config_err!("divisor {next} must equal {prev} or {}", 2 * prev)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{apply, init_params};
    use crate::ops::NormMode;
    use crate::params::ParamStore;
    use crate::tape::{GradTape, PrimKind};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed<L: Layer>(layer: &L, prefix: &str) -> ParamStore<f64> {
        let mut s: ParamStore<f64> = init_params(layer, prefix, 0).unwrap();
        let names: Vec<String> = s.learnable().map(|(n, _)| n.to_string()).collect();
        for n in names {
            if !n.ends_with(".scale") {
                let t = s.get_mut(&n).unwrap();
                *t = Tensor::zeros(t.shape());
            }
        }
        s
    }

    fn rand_x(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn se_with_zero_params_halves_input() {
        let se = Se::new(8, 4);
        let s = zeroed(&se, "se");
        let x = rand_x([2, 8, 3, 3], 1);
        let y = apply(&se, &s, "se", &x, NormMode::Infer).unwrap();
        assert!(y.max_abs_diff(&x.scale(0.5)).unwrap() < 1e-15);
    }

    #[test]
    fn se_saturates_and_never_amplifies() {
        let se = Se::new(8, 4);
        let mut s = zeroed(&se, "se");
        *s.get_mut("se.fc2.bias").unwrap() = Tensor::full([1, 8, 1, 1], 20.0);
        let x = rand_x([1, 8, 4, 4], 2);
        let y = apply(&se, &s, "se", &x, NormMode::Infer).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-6 * x.max_abs());
        let s: ParamStore<f64> = init_params(&se, "se", 3).unwrap();
        let y = apply(&se, &s, "se", &x, NormMode::Infer).unwrap();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
    }

    #[test]
    fn ffn_hidden_width_and_zero_identity() {
        assert_eq!(Ffn::new(64, FFN_RATIO).hidden, 128);
        let f = Ffn::new(6, 2);
        let x = rand_x([2, 6, 3, 3], 4);
        assert_eq!(apply(&f, &zeroed(&f, "f"), "f", &x, NormMode::Infer).unwrap(), x);
        assert!(apply(&f, &zeroed(&f, "f"), "f", &Tensor::zeros([1, 5, 2, 2]), NormMode::Infer).is_err());
    }

    #[test]
    fn zeroed_blocks_are_identities() {
        let x = rand_x([1, 64, 16, 16], 5);
        let ls = Block::ls(LsConvConfig::new(64).unwrap()).unwrap();
        for mode in [NormMode::Infer, NormMode::Train] {
            assert_eq!(apply(&ls, &zeroed(&ls, "b"), "b", &x, mode).unwrap(), x);
        }
        let msa = Block::msa(64).unwrap();
        let x = rand_x([2, 64, 4, 4], 6);
        assert_eq!(apply(&msa, &zeroed(&msa, "b"), "b", &x, NormMode::Infer).unwrap(), x);
    }

    #[test]
    fn removing_dw_removes_exactly_one_depthwise_op() {
        let cfg = LsConvConfig::new(16).unwrap();
        let count = |b: Block| {
            let s: ParamStore<f64> = init_params(&b, "b", 0).unwrap();
            let mut tape = GradTape::new();
            let mut ctx = Ctx::new(&mut tape, &s, NormMode::Infer);
            let x = ctx.tape.constant(rand_x([1, 16, 8, 8], 7));
            let y = b.record(&mut ctx, "b", x).unwrap();
            (tape.count(PrimKind::ConvDepthwise), tape.len(), tape.value(y).clone())
        };
        let full = count(Block::ls(cfg).unwrap());
        let ablated = count(Block::ls(cfg).unwrap().without_dw());
        assert_eq!(full.0, ablated.0 + 1);
        assert!(full.2.max_abs_diff(&ablated.2).unwrap() > 0.0);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let a = Attention::new(64, 32, 16).unwrap();
        assert_eq!((a.heads, a.value_dim), (2, 32));
        let s: ParamStore<f64> = init_params(&a, "a", 1).unwrap();
        let mut tape = GradTape::new();
        let mut ctx = Ctx::new(&mut tape, &s, NormMode::Infer);
        let x = ctx.tape.constant(rand_x([1, 64, 3, 3], 8).scale(20.0));
        a.record(&mut ctx, "a", x).unwrap();
        let attn = ctx.captures()["a.attn"];
        let m = tape.value(attn);
        assert_eq!(m.shape(), [1, 2, 9, 9]);
        for row in m.data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_on_one_token_is_projection_of_value() {
        let a = Attention::new(32, 32, 16).unwrap();
        let s: ParamStore<f64> = init_params(&a, "a", 2).unwrap();
        let x = rand_x([1, 32, 1, 1], 9);
        let y = apply(&a, &s, "a", &x, NormMode::Infer).unwrap();
        let v = apply(&a.v(), &s, "a.v", &x, NormMode::Infer).unwrap();
        let expected = apply(&a.proj(), &s, "a.proj", &v, NormMode::Infer).unwrap();
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let a = Attention::new(32, 16, 8).unwrap();
        let s: ParamStore<f64> = init_params(&a, "a", 3).unwrap();
        let x = rand_x([1, 32, 1, 6], 10).scale(10.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let px = Tensor::from_fn(x.shape(), |n, c, h, w| x.at(n, c, h, perm[w]));
        let y = apply(&a, &s, "a", &x, NormMode::Infer).unwrap();
        let py = apply(&a, &s, "a", &px, NormMode::Infer).unwrap();
        let expected = Tensor::from_fn(y.shape(), |n, c, h, w| y.at(n, c, h, perm[w]));
        assert!(py.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn head_count_must_divide_channels() {
        assert!(Attention::with_heads(48, 5, 16).is_err());
    }

    #[test]
    fn stem_shapes_and_divisibility() {
        let stem = Stem {
            in_channels: 3,
            ladder: [16, 32, 64],
        };
        let s: ParamStore<f32> = init_params(&stem, "stem", 0).unwrap();
        let y = apply(&stem, &s, "stem", &Tensor::zeros([2, 3, 32, 32]), NormMode::Infer).unwrap();
        assert_eq!(y.shape(), [2, 64, 4, 4]);
        assert!(apply(&stem, &s, "stem", &Tensor::zeros([1, 3, 30, 30]), NormMode::Infer).is_err());
        let mut t = MacTally::default();
        assert_eq!(stem.tally("stem", (224, 224), &mut t).unwrap(), (28, 28));
    }

    #[test]
    fn downsample_halves_and_sums_neighborhood() {
        let d = Downsample::new(64, 128, 2).unwrap();
        let s: ParamStore<f32> = init_params(&d, "d", 0).unwrap();
        let y = apply(&d, &s, "d", &Tensor::zeros([1, 64, 16, 16]), NormMode::Infer).unwrap();
        assert_eq!(y.shape(), [1, 128, 8, 8]);

        let d = Downsample::new(2, 2, 2).unwrap();
        let mut s: ParamStore<f64> = init_params(&d, "d", 0).unwrap();
        *s.get_mut("d.dw.weight").unwrap() = Tensor::full([2, 1, 3, 3], 1.0);
        *s.get_mut("d.pw.weight").unwrap() = Tensor::from_fn([2, 2, 1, 1], |o, i, _, _| f64::from(o == i));
        let y = apply(&d, &s, "d", &Tensor::full([1, 2, 6, 6], 1.5), NormMode::Infer).unwrap();
        // Both batch norms hold identity statistics, each dividing by sqrt(1 + 1e-5).
        let expected = 13.5 / (1.0 + 1e-5);
        assert!((y.at(0, 1, 1, 1) - expected).abs() < 1e-12);
    }

    #[test]
    fn transition_strides() {
        assert_eq!(transition_stride(8, 16).unwrap(), 2);
        assert_eq!(transition_stride(16, 16).unwrap(), 1);
        assert!(transition_stride(8, 32).is_err());
        assert!(transition_stride(16, 8).is_err());
    }
}
