//! LSNet assembly, accounting and inference.
//!
//! ```
//! use lsnet::model::{count_macs, Model, ModelSpec};
//!
//! let model = Model::new(ModelSpec::micro()).unwrap();
//! let store = model.init::<f32>(0).unwrap();
//! let images = lsnet::Tensor::zeros([2, 3, 32, 32]);
//! let logits = model.forward_classify(&store, &images).unwrap();
//! assert_eq!(logits.shape(), [2, 10, 1, 1]);
//!
//! let report = count_macs(&ModelSpec::micro(), 32, 32).unwrap();
//! assert_eq!(report.total_params as usize, store.count_params());
//! ```

mod spec;
pub mod weights;

pub use spec::{MixerKind, ModelSpec, StageSpec, Wiring, FORMAT_TAG};
pub use weights::{inspect_weights, load_weights, save_weights, WeightEntry, WeightFileInfo};

use serde::Serialize;

use crate::blocks::{transition_stride, Attention, Block, Downsample, Ffn, Head, Mixer, Stem};
use crate::error::{ensure_config, Result};
use crate::lsconv::{LsConv, LsConvConfig};
use crate::nn::{Ctx, Layer, LsConvCheck, MacEntry, MacTally};
use crate::ops::NormMode;
use crate::params::{join, ParamDecl, ParamStore};
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

/// One stage: optional transition followed by residual blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub down: Option<Downsample>,
    pub blocks: Vec<Block>,
}

/// Location of an LS conv inside a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LsConvSite {
    /// 1-based stage index.
    pub stage: usize,
    /// 0-based index among the stage's LS convs.
    pub layer: usize,
    pub prefix: String,
    pub cfg: LsConvConfig,
}

/// A validated spec with its layer structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Model {
    spec: ModelSpec,
    stem: Stem,
    stages: Vec<Stage>,
    head: Head,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let stem = Stem {
            in_channels: spec.in_channels,
            ladder: spec.stem,
        };
        let mut stages = Vec::with_capacity(4);
        let (mut prev_c, mut prev_div) = (spec.stem[2], 8);
        for s in &spec.stages {
            let stride = transition_stride(prev_div, s.divisor)?;
            let down = (stride != 1 || prev_c != s.channels)
                .then(|| Downsample::new(prev_c, s.channels, stride))
                .transpose()?;
            let mixer = match s.mixer {
                MixerKind::Ls if s.blocks > 0 => Some(Mixer::Ls(LsConv::new(spec.ls_config(s.channels)?)?)),
                MixerKind::Msa if s.blocks > 0 => {
                    Some(Mixer::Msa(Attention::new(s.channels, spec.head_dim, spec.key_dim)?))
                }
                _ => None,
            };
            let blocks = (0..s.blocks)
                .map(|j| {
                    let local = spec.wiring == Wiring::Full || j % 2 == 0;
                    let with_mixer = spec.wiring == Wiring::Full || j % 2 == 1;
                    Block {
                        channels: s.channels,
                        dw: local && spec.dw,
                        se: local && spec.se,
                        mixer: if with_mixer { mixer } else { None },
                        ffn: Ffn::new(s.channels, spec.ffn_ratio),
                    }
                })
                .collect();
            stages.push(Stage { down, blocks });
            prev_c = s.channels;
            prev_div = s.divisor;
        }
        let head = Head {
            channels: prev_c,
            classes: spec.classes,
        };
        Ok(Model {
            spec,
            stem,
            stages,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn declarations(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        self.declare("", &mut out);
        out
    }

    /// Seeded parameters: truncated-normal weights (std 0.02), zero biases,
    /// identity batch norms.
    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        ParamStore::from_decls(&self.declarations(), seed)
    }

    /// LS convs in network order.
    pub fn ls_conv_sites(&self) -> Vec<LsConvSite> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            let mut layer = 0;
            for (j, b) in st.blocks.iter().enumerate() {
                if let Some(Mixer::Ls(ls)) = b.mixer {
                    out.push(LsConvSite {
                        stage: i + 1,
                        layer,
                        prefix: format!("stages.{i}.blocks.{j}.mixer"),
                        cfg: ls.cfg,
                    });
                    layer += 1;
                }
            }
        }
        out
    }

    /// Checks image extents against the stem.
    pub fn check_images<T: Scalar>(&self, images: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = images.shape();
        ensure_config!(
            c == self.spec.in_channels,
            "model expects {} input channels, images have {c}",
            self.spec.in_channels
        );
        ensure_config!(
            h % 8 == 0 && w % 8 == 0 && h > 0 && w > 0,
            "image extents {h}x{w} must be divisible by 8"
        );
        Ok(())
    }

    /// Records the network up to (and including) stage `upto` (1-based);
    /// `None` records the full classifier.
    pub fn record_until<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, upto: Option<usize>) -> Result<Var> {
        let mut y = self.stem.record(ctx, "stem", x)?;
        for (i, st) in self.stages.iter().enumerate() {
            if upto.is_some_and(|u| i >= u) {
                return Ok(y);
            }
            let p = format!("stages.{i}");
            if let Some(d) = &st.down {
                y = d.record(ctx, &join(&p, "down"), y)?;
            }
            for (j, b) in st.blocks.iter().enumerate() {
                y = b.record(ctx, &format!("{p}.blocks.{j}"), y)?;
            }
        }
        if upto.is_some() {
            return Ok(y);
        }
        self.head.record(ctx, "head", y)
    }

    /// Infer-mode logits shaped `(N, classes, 1, 1)`.
    pub fn forward_classify<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut tape = GradTape::new();
        let mut ctx = Ctx::new(&mut tape, store, NormMode::Infer);
        let x = ctx.tape.constant(images.clone());
        let y = self.record_until(&mut ctx, x, None)?;
        tape.value(y).clone().ensure_finite("forward_classify")
    }

    pub fn count_macs(&self, h: usize, w: usize) -> Result<MacReport> {
        let mut t = MacTally::default();
        self.tally("", (h, w), &mut t)?;
        Ok(MacReport {
            model: self.spec.name.clone(),
            height: h,
            width: w,
            total_macs: t.total_macs()?,
            total_params: t.total_params(),
            entries: t.entries,
            ls_convs: t.ls_checks,
        })
    }
}

impl Layer for Model {
    fn declare(&self, prefix: &str, out: &mut Vec<ParamDecl>) {
        self.stem.declare(&join(prefix, "stem"), out);
        for (i, st) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            if let Some(d) = &st.down {
                d.declare(&join(&p, "down"), out);
            }
            for (j, b) in st.blocks.iter().enumerate() {
                b.declare(&format!("{p}.blocks.{j}"), out);
            }
        }
        self.head.declare(&join(prefix, "head"), out);
    }

    fn record<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
        ensure_config!(prefix.is_empty(), "models are recorded at the root prefix");
        self.record_until(ctx, x, None)
    }

    fn tally(&self, prefix: &str, hw: (usize, usize), t: &mut MacTally) -> Result<(usize, usize)> {
        let mut hw = self.stem.tally(&join(prefix, "stem"), hw, t)?;
        for (i, st) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            if let Some(d) = &st.down {
                hw = d.tally(&join(&p, "down"), hw, t)?;
            }
            for (j, b) in st.blocks.iter().enumerate() {
                hw = b.tally(&format!("{p}.blocks.{j}"), hw, t)?;
            }
        }
        self.head.tally(&join(prefix, "head"), hw, t)
    }
}

/// Per-operator multiply-accumulates and parameters of a model at one resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MacReport {
    pub model: String,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<MacEntry>,
    /// Itemized LS-conv tallies with the closed form alongside.
    pub ls_convs: Vec<LsConvCheck>,
    pub total_macs: u64,
    pub total_params: u64,
}

impl MacReport {
    /// `2 · MACs`.
    pub fn flops(&self) -> u64 {
        self.total_macs.saturating_mul(2)
    }

    /// MACs grouped by operator kind.
    pub fn by_kind(&self) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(k, _, _)| *k == e.kind) {
                Some(row) => {
                    row.1 += e.macs;
                    row.2 += e.params;
                }
                None => out.push((e.kind.clone(), e.macs, e.params)),
            }
        }
        out
    }
}

/// Initializes the parameters of `spec`.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<T>> {
    Model::new(spec.clone())?.init(seed)
}

/// Learnable scalars, batch-norm affine terms included, running statistics excluded.
pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.count_params()
}

pub fn count_macs(spec: &ModelSpec, h: usize, w: usize) -> Result<MacReport> {
    Model::new(spec.clone())?.count_macs(h, w)
}
