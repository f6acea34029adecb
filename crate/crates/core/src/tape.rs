//! Reverse-mode differentiation over an eagerly evaluated tape.
//!
//! Every primitive computes its value immediately, appends one node holding the
//! value plus whatever the vector-Jacobian product needs, and returns a [`Var`]
//! handle. [`GradTape::backward`] replays the nodes in reverse.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{ensure_config, Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm::{self, BnBatchStats, BnSaved};
use crate::kernels::{matmul, reduce, ska};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, as recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum PrimKind {
    Leaf,
    ConvPointwise,
    ConvDepthwise,
    ConvGrouped,
    ConvDense,
    BatchNorm,
    Relu,
    Sigmoid,
    Add,
    Scale,
    MulBroadcast,
    GlobalAvgPool,
    Softmax,
    MatMul,
    Reshape,
    Ska,
    CrossEntropy,
}

impl PrimKind {
    fn of_conv(c_in: usize, kernel: [usize; 4], groups: usize) -> Self {
        let [_, cin_g, kh, kw] = kernel;
        if groups == 1 && kh == 1 && kw == 1 {
            PrimKind::ConvPointwise
        } else if groups > 1 && groups == c_in && cin_g == 1 {
            PrimKind::ConvDepthwise
        } else if groups > 1 {
            PrimKind::ConvGrouped
        } else {
            PrimKind::ConvDense
        }
    }
}

/// Test hook: scales the gradients that one primitive kind hands to named
/// leaves, so the gradient checker can be shown to catch a broken VJP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub kind: PrimKind,
    pub factor: f64,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        saved: BnSaved<T>,
    },
    Relu(Var),
    /// ReLU whose on/off pattern was fixed in advance.
    MaskedRelu(Var, Vec<bool>),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    MulBroadcast {
        x: Var,
        gate: Var,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    MatMul {
        a: Var,
        ta: bool,
        b: Var,
        tb: bool,
    },
    Reshape(Var),
    Ska {
        x: Var,
        w: Var,
        ks: usize,
        groups: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, kernel, bias, .. } => [Some(*x), Some(*kernel), *bias].into_iter().flatten().collect(),
            Op::BatchNorm { x, scale, shift, .. } => vec![*x, *scale, *shift],
            Op::Relu(x)
            | Op::MaskedRelu(x, _)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::GlobalAvgPool(x)
            | Op::Softmax(x)
            | Op::Reshape(x) => vec![*x],
            Op::Add(a, b) | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::MulBroadcast { x, gate } => vec![*x, *gate],
            Op::Ska { x, w, .. } => vec![*x, *w],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    kind: PrimKind,
    leaf_name: Option<String>,
}

/// Ordered record of primitive applications.
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
    leaves: BTreeMap<String, Var>,
    fault: Option<Fault>,
    kink_signature: u64,
    frozen_relus: Option<std::vec::IntoIter<Vec<bool>>>,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients returned by [`GradTape::backward`], keyed by leaf name.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.by_name
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no leaf named `{name}` on the tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }

    /// Euclidean norm over all leaf gradients.
    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            leaves: BTreeMap::new(),
            fault: None,
            kink_signature: 0xcbf2_9ce4_8422_2325,
            frozen_relus: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes of one kind.
    pub fn count(&self, kind: PrimKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> PrimKind {
        self.nodes[v.0].kind
    }

    pub fn leaf_var(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    /// Primitive kinds that read each named leaf directly.
    pub fn leaf_consumers(&self) -> BTreeMap<String, Vec<PrimKind>> {
        let mut by_var: BTreeMap<Var, Vec<PrimKind>> = BTreeMap::new();
        for node in &self.nodes {
            for v in node.op.inputs() {
                let kinds = by_var.entry(v).or_default();
                if !kinds.contains(&node.kind) {
                    kinds.push(node.kind);
                }
            }
        }
        self.leaves
            .iter()
            .map(|(name, v)| (name.clone(), by_var.remove(v).unwrap_or_default()))
            .collect()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Hash of every ReLU sign pattern recorded so far. Two evaluations with
    /// the same signature took the same linear piece of the network.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    /// On/off pattern of every ReLU recorded so far, in recording order.
    pub fn relu_masks(&self) -> Vec<Vec<bool>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Relu(x) => Some(self.value(*x).data().iter().map(|&v| v > T::zero()).collect()),
                Op::MaskedRelu(_, m) => Some(m.clone()),
                _ => None,
            })
            .collect()
    }

    /// Makes the following ReLUs apply `masks` in order instead of their
    /// input's sign. The kink signature still tracks the actual signs.
    #[doc(hidden)]
    pub fn freeze_relus(&mut self, masks: Vec<Vec<bool>>) {
        self.frozen_relus = Some(masks.into_iter());
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, kind: PrimKind) -> Var {
        self.nodes.push(Node {
            value,
            op,
            kind,
            leaf_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named differentiable input. Names must be unique per tape.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        ensure_config!(!self.leaves.contains_key(&name), "leaf `{name}` registered twice");
        let v = self.push(value, Op::Leaf, PrimKind::Leaf);
        self.nodes[v.0].leaf_name = Some(name.clone());
        self.leaves.insert(name, v);
        Ok(v)
    }

    /// An input that receives no reported gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, PrimKind::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let value = conv::conv2d_forward(self.value(x), self.value(kernel), bias.map(|b| self.value(b)), geom)?;
        let kind = PrimKind::of_conv(self.value(x).c(), self.value(kernel).shape(), geom.groups);
        Ok(self.push(value, Op::Conv { x, kernel, bias, geom }, kind))
    }

    fn check_bn_operands(&self, x: Var, others: &[Var]) -> Result<()> {
        let c = self.value(x).c();
        for &o in others {
            ensure_config!(
                self.value(o).numel() == c,
                "batch_norm: parameter has {} entries, input has {c} channels",
                self.value(o).numel()
            );
        }
        Ok(())
    }

    /// Batch-statistics normalization; also returns the statistics for the
    /// running-average update, which the caller owns.
    pub fn batch_norm_train(&mut self, x: Var, scale: Var, shift: Var) -> Result<(Var, BnBatchStats<T>)> {
        self.check_bn_operands(x, &[scale, shift])?;
        let (y, saved, stats) = norm::bn_train(self.value(x), self.value(scale).data(), self.value(shift).data());
        Ok((
            self.push(y, Op::BatchNorm { x, scale, shift, saved }, PrimKind::BatchNorm),
            stats,
        ))
    }

    /// Running-statistics normalization; the statistics are constants.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
    ) -> Result<Var> {
        self.check_bn_operands(x, &[scale, shift])?;
        let c = self.value(x).c();
        ensure_config!(
            running_mean.numel() == c && running_var.numel() == c,
            "batch_norm: running statistics do not have {c} entries"
        );
        let (y, saved) = norm::bn_infer(
            self.value(x),
            self.value(scale).data(),
            self.value(shift).data(),
            running_mean.data(),
            running_var.data(),
        );
        Ok(self.push(y, Op::BatchNorm { x, scale, shift, saved }, PrimKind::BatchNorm))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut h = self.kink_signature;
        for v in self.value(x).data() {
            h = (h ^ u64::from(*v > T::zero())).wrapping_mul(0x0100_0000_01b3);
        }
        self.kink_signature = h;
        if let Some(mask) = self.frozen_relus.as_mut().and_then(Iterator::next) {
            let xv = self.value(x);
            assert_eq!(
                mask.len(),
                xv.numel(),
                "frozen ReLU mask does not match the recorded graph"
            );
            let mut value = xv.clone();
            for (v, &on) in value.data_mut().iter_mut().zip(&mask) {
                if !on {
                    *v = T::zero();
                }
            }
            return self.push(value, Op::MaskedRelu(x, mask), PrimKind::Relu);
        }
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), PrimKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(x), PrimKind::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), PrimKind::Add))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale(x, factor), PrimKind::Scale)
    }

    /// `x ⊙ gate` with `gate` shaped `(N, C, 1, 1)` broadcast over `H×W`.
    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, c, _, _] = self.value(x).shape();
        self.value(gate).expect_shape([n, c, 1, 1], "mul_broadcast gate")?;
        let mut value = self.value(x).clone();
        let g = self.value(gate).data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let s = g[ni * c + ci];
                for v in value.plane_mut(ni, ci) {
                    *v *= s;
                }
            }
        }
        Ok(self.push(value, Op::MulBroadcast { x, gate }, PrimKind::MulBroadcast))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let value = reduce::global_avg_pool(self.value(x));
        self.push(value, Op::GlobalAvgPool(x), PrimKind::GlobalAvgPool)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = reduce::softmax_lastdim(self.value(x));
        self.push(value, Op::Softmax(x), PrimKind::Softmax)
    }

    /// Batched `op(a) · op(b)` over the last two axes.
    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = matmul::bmm(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(value, Op::MatMul { a, ta, b, tb }, PrimKind::MatMul))
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), PrimKind::Reshape))
    }

    /// Grouped dynamic aggregation of `x` with the per-pixel weights `w`.
    pub fn ska(&mut self, x: Var, w: Var, ks: usize, groups: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        ensure_config!(ks % 2 == 1, "ska: kernel size {ks} must be odd");
        ensure_config!(
            groups > 0 && xs[1] % groups == 0,
            "ska: {groups} groups do not divide {} channels",
            xs[1]
        );
        ensure_config!(
            ws == [xs[0], groups * ks * ks, xs[2], xs[3]],
            "ska: weight map {:?} does not match input {:?} with D = {}",
            ws,
            xs,
            groups * ks * ks
        );
        let value = ska::ska_forward(self.value(x), self.value(w), ks, groups);
        Ok(self.push(value, Op::Ska { x, w, ks, groups }, PrimKind::Ska))
    }

    /// Mean label-smoothed cross entropy of `(N, K, 1, 1)` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let [n, k, h, w] = self.value(logits).shape();
        ensure_config!(h == 1 && w == 1, "cross_entropy: logits must be (N, K, 1, 1)");
        ensure_config!(
            targets.len() == n,
            "cross_entropy: {} targets for {n} rows",
            targets.len()
        );
        ensure_config!(
            targets.iter().all(|&t| t < k),
            "cross_entropy: target out of range for {k} classes"
        );
        let (loss, probs) = reduce::cross_entropy(self.value(logits), targets, smoothing);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            PrimKind::CrossEntropy,
        ))
    }

    /// Backward pass from a scalar output with unit seed.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        self.backward(output, Tensor::full(self.value(output).shape(), T::one()))
    }

    /// Replays the tape in reverse from `output`, seeded with `loss_grad`.
    /// Every named leaf receives a gradient, zero when unreachable.
    pub fn backward(&self, output: Var, loss_grad: Tensor<T>) -> Result<Gradients<T>> {
        ensure_config!(!self.nodes.is_empty(), "backward on an empty tape");
        ensure_config!(output.0 < self.nodes.len(), "output var is not on this tape");
        loss_grad.expect_shape(self.value(output).shape(), "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(loss_grad);
        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.vjp(node, &gy)?;
            for (var, g) in contributions {
                let g = match self.fault {
                    Some(f) if f.kind == node.kind && self.nodes[var.0].leaf_name.is_some() => g.scale(T::of(f.factor)),
                    _ => g,
                };
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        let by_name = self
            .leaves
            .iter()
            .map(|(name, v)| {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { by_name })
    }

    fn vjp(&self, node: &Node<T>, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv { x, kernel, bias, geom } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let mut v = vec![
                    (*x, conv::conv2d_backward_input(gy, kv, xv.shape(), *geom)),
                    (*kernel, conv::conv2d_backward_kernel(gy, xv, kv.shape(), *geom)),
                ];
                if let Some(b) = bias {
                    let gb = conv::conv2d_backward_bias(gy).reshape(self.value(*b).shape())?;
                    v.push((*b, gb));
                }
                v
            }
            Op::BatchNorm { x, scale, shift, saved } => {
                let (gx, gs, gb) = norm::bn_backward(gy, saved, self.value(*scale).data());
                let shape = self.value(*scale).shape();
                vec![
                    (*x, gx),
                    (*scale, Tensor::from_vec(shape, gs)?),
                    (*shift, Tensor::from_vec(shape, gb)?),
                ]
            }
            Op::Relu(x) => {
                let g = self
                    .value(*x)
                    .zip_map(gy, |xv, g| if xv > T::zero() { g } else { T::zero() })?;
                vec![(*x, g)]
            }
            Op::MaskedRelu(x, mask) => {
                let mut g = gy.clone();
                for (v, &on) in g.data_mut().iter_mut().zip(mask) {
                    if !on {
                        *v = T::zero();
                    }
                }
                vec![(*x, g)]
            }
            Op::Sigmoid(x) => {
                let g = node.value.zip_map(gy, |s, g| g * s * (T::one() - s))?;
                vec![(*x, g)]
            }
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::Scale(x, f) => vec![(*x, gy.scale(*f))],
            Op::MulBroadcast { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let [n, c, _, _] = xv.shape();
                let mut gx = gy.clone();
                let mut gg = Tensor::zeros(gv.shape());
                for ni in 0..n {
                    for ci in 0..c {
                        let s = gv.at(ni, ci, 0, 0);
                        let dot: T = gy
                            .plane(ni, ci)
                            .iter()
                            .zip(xv.plane(ni, ci))
                            .map(|(&a, &b)| a * b)
                            .sum();
                        gg.set(ni, ci, 0, 0, dot);
                        for v in gx.plane_mut(ni, ci) {
                            *v *= s;
                        }
                    }
                }
                vec![(*x, gx), (*gate, gg)]
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                vec![(*x, reduce::global_avg_pool_backward(gy, xv.h(), xv.w()))]
            }
            Op::Softmax(x) => vec![(*x, reduce::softmax_lastdim_backward(&node.value, gy))],
            Op::MatMul { a, ta, b, tb } => {
                let (ga, gb) = matmul::bmm_backward(gy, self.value(*a), *ta, self.value(*b), *tb)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reshape(x) => vec![(*x, gy.clone().reshape(self.value(*x).shape())?)],
            Op::Ska { x, w, ks, groups } => vec![
                (*x, ska::ska_backward_input(gy, self.value(*w), *ks, *groups)),
                (*w, ska::ska_backward_weights(gy, self.value(*x), *ks, *groups)),
            ],
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => vec![(
                *logits,
                reduce::cross_entropy_backward(probs, targets, *smoothing, gy.data()[0]),
            )],
        };
        Ok(out)
    }
}
