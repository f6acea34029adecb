//! Central-difference check of every analytic gradient in a model.
//!
//! Scalar parameters are sampled per layer group and the slope of the
//! cross-entropy loss is estimated with the fourth-order central stencil
//!
//! ```text
//! (8·(L(θ+h) − L(θ−h)) − (L(θ+2h) − L(θ−2h))) / 12h,   h = 1e-4 · max(1, |θ|)
//! ```
//!
//! and compared with the tape's gradient. Train-mode batch norm makes the
//! loss strongly curved in the conv weights; the two-point quotient's `O(h²)`
//! error alone exceeds 1e-4 relative on scalars whose gradient is small.
//!
//! Every ReLU in the nudged passes keeps the on/off pattern it had at `θ`.
//! Without that, nearly every nudge of an early-layer weight flips some unit
//! somewhere in the batch, and the quotient then measures a secant across a
//! kink rather than the derivative. With the pattern fixed the loss is smooth
//! in `θ` and agrees with the unfrozen loss on a neighbourhood of `θ`, so both
//! have the same derivative there. The ReLU's own gradient is still exercised
//! through its mask. Samples whose nudge did cross a kink are counted.
//!
//! A few primitives the model does not exercise with parameters (grouped
//! convolution, SKA with respect to both operands, the attention core) are
//! checked directly against a fixed random linear functional.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ensure_config, Result};
use crate::kernels::conv::ConvGeom;
use crate::model::{Model, ModelSpec};
use crate::nn::Ctx;
use crate::ops::NormMode;
use crate::params::ParamStore;
use crate::tape::{Fault, GradTape, PrimKind, Var};
use crate::tensor::Tensor;

/// Default pass threshold on the relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    /// Minimum number of model parameters checked, spread evenly over groups.
    pub samples: usize,
    /// Train-mode norms see only this many images; small batches make the
    /// loss sharply curved and the difference quotient drifts.
    pub batch: usize,
    pub resolution: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            tolerance: DEFAULT_TOLERANCE,
            samples: 200,
            batch: 16,
            resolution: 32,
            label_smoothing: 0.1,
            seed: 0,
            fault: None,
        }
    }
}

/// One compared scalar.
#[derive(Clone, Debug, Serialize)]
pub struct ScalarCheck {
    pub name: String,
    pub index: usize,
    pub group: String,
    pub prims: Vec<PrimKind>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl ScalarCheck {
    fn new(name: &str, index: usize, group: &str, prims: Vec<PrimKind>, analytic: f64, numeric: f64) -> Self {
        ScalarCheck {
            name: name.to_string(),
            index,
            group: group.to_string(),
            prims,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        }
    }
}

/// `|a − n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub model: String,
    pub tolerance: f64,
    pub checks: Vec<ScalarCheck>,
    /// Samples whose nudge would have flipped a ReLU without the frozen pattern.
    pub kink_crossings: usize,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_error < self.tolerance)
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.checks.iter().map(|c| c.group.as_str()).collect()
    }

    pub fn prims(&self) -> BTreeSet<PrimKind> {
        self.checks.iter().flat_map(|c| c.prims.iter().copied()).collect()
    }

    /// Largest error in each group.
    pub fn worst_by_group(&self) -> BTreeMap<&str, &ScalarCheck> {
        let mut worst: BTreeMap<&str, &ScalarCheck> = BTreeMap::new();
        for c in &self.checks {
            let slot = worst.entry(&c.group).or_insert(c);
            if c.rel_error > slot.rel_error {
                *slot = c;
            }
        }
        worst
    }

    /// Groups with at least one exceedance.
    pub fn failing_groups(&self) -> BTreeSet<&str> {
        self.checks
            .iter()
            .filter(|c| c.rel_error >= self.tolerance)
            .map(|c| c.group.as_str())
            .collect()
    }

    /// Primitive kinds read by every failing scalar; the kinds that explain all failures.
    pub fn failing_prims(&self) -> BTreeSet<PrimKind> {
        let mut failing = self.checks.iter().filter(|c| c.rel_error >= self.tolerance);
        let Some(first) = failing.next() else {
            return BTreeSet::new();
        };
        let mut common: BTreeSet<PrimKind> = first.prims.iter().copied().collect();
        for c in failing {
            common.retain(|k| c.prims.contains(k));
        }
        common
    }

    /// Human-readable summary: one line per group, worst offender first.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "gradcheck {}: {} scalars, max rel error {:.3e}, tolerance {:.0e}, {} crossed a ReLU kink: {}\n",
            self.model,
            self.checks.len(),
            self.max_rel_error(),
            self.tolerance,
            self.kink_crossings,
            if self.passed() { "pass" } else { "FAIL" }
        );
        for (group, c) in self.worst_by_group() {
            let n = self.checks.iter().filter(|x| x.group == group).count();
            out.push_str(&format!(
                "  {group:<14} n={n:<3} worst {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})\n",
                c.rel_error, c.name, c.index, c.analytic, c.numeric
            ));
        }
        out
    }
}

/// Layer group of a parameter, from its dotted name.
pub fn param_group(name: &str) -> &'static str {
    let has = |part: &str| name.split('.').any(|p| p == part);
    if has("bn") {
        "bn"
    } else if name.starts_with("head.") {
        "classifier"
    } else if name.starts_with("stem.") {
        "stem"
    } else if has("down") {
        "downsample"
    } else if has("mixer") {
        if ["pw_reduce", "dw_large", "pw_mid", "pw_expand"].iter().any(|p| has(p)) {
            "lkp"
        } else if ["q", "k", "v", "proj"].iter().any(|p| has(p)) {
            "msa"
        } else {
            "static_conv"
        }
    } else if has("se") {
        "se"
    } else if has("ffn") {
        "ffn"
    } else if has("dw") {
        "dw"
    } else {
        "other"
    }
}

struct Probe {
    loss: f64,
    kinks: u64,
}

struct Problem<'a> {
    model: &'a Model,
    x: Tensor<f64>,
    y: Vec<usize>,
    smoothing: f64,
}

impl Problem<'_> {
    fn record(&self, tape: &mut GradTape<f64>, store: &ParamStore<f64>) -> Result<Var> {
        let mut ctx = Ctx::new(tape, store, NormMode::Train);
        let xv = ctx.tape.constant(self.x.clone());
        let logits = self.model.record_until(&mut ctx, xv, None)?;
        ctx.tape.cross_entropy(logits, &self.y, self.smoothing)
    }

    fn probe(&self, store: &ParamStore<f64>, masks: &[Vec<bool>]) -> Result<Probe> {
        let mut tape = GradTape::new();
        tape.freeze_relus(masks.to_vec());
        let loss = self.record(&mut tape, store)?;
        Ok(Probe {
            loss: tape.value(loss).data()[0],
            kinks: tape.kink_signature(),
        })
    }
}

/// Checks sampled parameter gradients of `spec` in train mode at `f64`.
pub fn gradcheck_model(spec: &ModelSpec, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    ensure_config!(
        cfg.samples > 0 && cfg.batch > 1,
        "gradcheck needs samples > 0 and batch > 1"
    );
    let model = Model::new(spec.clone())?;
    let mut store = model.init::<f64>(cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    let x = Tensor::randn(
        [cfg.batch, spec.in_channels, cfg.resolution, cfg.resolution],
        1.0,
        &mut rng,
    );
    let y = (0..cfg.batch).map(|_| rng.random_range(0..spec.classes)).collect();
    let problem = Problem {
        model: &model,
        x,
        y,
        smoothing: cfg.label_smoothing,
    };

    let mut tape = GradTape::new();
    if let Some(f) = cfg.fault {
        tape.inject_fault(f);
    }
    let loss = problem.record(&mut tape, &store)?;
    let base_kinks = tape.kink_signature();
    let masks = tape.relu_masks();
    let consumers = tape.leaf_consumers();
    let grads = tape.backward_scalar(loss)?;
    drop(tape);

    let mut by_group: BTreeMap<&'static str, Vec<(String, usize)>> = BTreeMap::new();
    for (name, t) in store.learnable() {
        by_group
            .entry(param_group(name))
            .or_default()
            .push((name.to_string(), t.numel()));
    }
    let per_group = cfg.samples.div_ceil(by_group.len());
    let mut checks = Vec::new();
    let mut kink_crossings = 0;
    for (group, tensors) in &by_group {
        let total: usize = tensors.iter().map(|(_, n)| n).sum();
        for flat in rand::seq::index::sample(&mut rng, total, per_group.min(total)).into_vec() {
            let (name, index) = locate(tensors, flat);
            let theta = store.get(name)?.data()[index];
            let h = 1e-4 * theta.abs().max(1.0);
            let mut loss = [0.0; 4];
            let mut crossed = false;
            for (slot, step) in loss.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                store.get_mut(name)?.data_mut()[index] = theta + step * h;
                let p = problem.probe(&store, &masks)?;
                *slot = p.loss;
                crossed |= p.kinks != base_kinks;
            }
            store.get_mut(name)?.data_mut()[index] = theta;
            kink_crossings += usize::from(crossed);
            let [p2, p1, m1, m2] = loss;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let analytic = grads.get(name)?.data()[index];
            let prims = consumers.get(name).cloned().unwrap_or_default();
            checks.push(ScalarCheck::new(name, index, group, prims, analytic, numeric));
        }
    }
    checks.extend(primitive_checks(cfg.seed, cfg.fault)?);
    Ok(GradcheckReport {
        model: spec.name.clone(),
        tolerance: cfg.tolerance,
        checks,
        kink_crossings,
    })
}

/// Tensor name and element index of position `flat` in the concatenation of `tensors`.
fn locate(tensors: &[(String, usize)], mut flat: usize) -> (&str, usize) {
    for (name, n) in tensors {
        if flat < *n {
            return (name, flat);
        }
        flat -= n;
    }
    unreachable!("flat index within the group total")
}

/// Direct checks of primitives against `L = Σ r ⊙ f(inputs)` for a fixed random `r`.
pub fn primitive_checks(seed: u64, fault: Option<Fault>) -> Result<Vec<ScalarCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_696d);
    let mut out = Vec::new();

    let grouped = |t: &mut GradTape<f64>, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 1, 2));
    let inputs = vec![
        ("x", Tensor::randn([2, 4, 5, 6], 1.0, &mut rng)),
        ("kernel", Tensor::randn([6, 2, 3, 3], 0.5, &mut rng)),
        ("bias", Tensor::randn([6, 1, 1, 1], 0.5, &mut rng)),
    ];
    out.extend(check_primitive("grouped_conv", inputs, grouped, fault, &mut rng)?);

    let ska = |t: &mut GradTape<f64>, v: &[Var]| t.ska(v[0], v[1], 3, 2);
    let inputs = vec![
        ("x", Tensor::randn([2, 4, 5, 5], 1.0, &mut rng)),
        ("w", Tensor::randn([2, 18, 5, 5], 0.5, &mut rng)),
    ];
    out.extend(check_primitive("ska", inputs, ska, fault, &mut rng)?);

    // softmax(q kᵀ) v over 5 tokens, the attention core.
    let attention = |t: &mut GradTape<f64>, v: &[Var]| {
        let s = t.matmul(v[0], false, v[1], true)?;
        let a = t.softmax(s);
        t.matmul(a, false, v[2], false)
    };
    let inputs = vec![
        ("q", Tensor::randn([1, 2, 5, 3], 1.0, &mut rng)),
        ("k", Tensor::randn([1, 2, 5, 3], 1.0, &mut rng)),
        ("v", Tensor::randn([1, 2, 5, 4], 1.0, &mut rng)),
    ];
    out.extend(check_primitive("attention", inputs, attention, fault, &mut rng)?);
    Ok(out)
}

fn check_primitive<F>(
    group: &str,
    inputs: Vec<(&str, Tensor<f64>)>,
    f: F,
    fault: Option<Fault>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ScalarCheck>>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], r: Option<&Tensor<f64>>, with_fault: bool| -> Result<(f64, GradTape<f64>, Var)> {
        let mut tape = GradTape::new();
        if with_fault {
            if let Some(fl) = fault {
                tape.inject_fault(fl);
            }
        }
        let vars = inputs
            .iter()
            .zip(vals)
            .map(|((name, _), v)| tape.leaf(*name, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&mut tape, &vars)?;
        let yv = tape.value(y);
        let loss = r.map_or(0.0, |r| yv.data().iter().zip(r.data()).map(|(a, b)| a * b).sum());
        Ok((loss, tape, y))
    };
    let vals: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, tape, y) = eval(&vals, None, true)?;
    let r = Tensor::randn(tape.value(y).shape(), 1.0, rng);
    let consumers = tape.leaf_consumers();
    let grads = tape.backward(y, r.clone())?;
    let mut out = Vec::new();
    for (slot, (name, t)) in inputs.iter().enumerate() {
        for index in rand::seq::index::sample(rng, t.numel(), 8.min(t.numel())) {
            let theta = t.data()[index];
            let h = 1e-4 * theta.abs().max(1.0);
            let mut nudged = vals.clone();
            nudged[slot].data_mut()[index] = theta + h;
            let plus = eval(&nudged, Some(&r), false)?.0;
            nudged[slot].data_mut()[index] = theta - h;
            let minus = eval(&nudged, Some(&r), false)?.0;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(name)?.data()[index];
            let prims = consumers.get(*name).cloned().unwrap_or_default();
            out.push(ScalarCheck::new(
                &format!("{group}.{name}"),
                index,
                group,
                prims,
                analytic,
                numeric,
            ));
        }
    }
    Ok(out)
}
