//! Training loop, optimizers, schedule and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{ensure_config, Error, Result};
use crate::model::Model;
use crate::nn::{apply_bn_updates, Ctx};
use crate::ops::NormMode;
use crate::params::ParamStore;
use crate::tape::GradTape;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Optimizer {
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
    /// SGD with heavy-ball momentum and decoupled weight decay.
    Sgd { momentum: f64 },
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    /// Peak learning rate.
    pub lr: f64,
    /// Linear warmup length, in epochs; cosine decay afterwards.
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::adamw(),
            lr: 1e-3,
            warmup_epochs: 5,
            weight_decay: 0.025,
            batch_size: 32,
            epochs: 20,
            label_smoothing: 0.1,
            clip_norm: Some(0.02),
            hflip: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.batch_size > 0, "batch size must be positive");
        ensure_config!(
            self.lr >= 0.0 && self.lr.is_finite(),
            "learning rate must be finite and non-negative"
        );
        ensure_config!(
            (0.0..1.0).contains(&self.label_smoothing),
            "label smoothing must lie in [0, 1)"
        );
        ensure_config!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        Ok(())
    }

    /// Learning rate at optimizer step `step`: linear warmup over
    /// `warmup_epochs`, then cosine decay to zero at the last step.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        let total = (self.epochs * steps_per_epoch).max(1);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        if total <= warm {
            return self.lr;
        }
        let t = (step - warm) as f64 / (total - warm) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}

/// Batch-norm affine terms and biases are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains(".bn."))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub loss: f64,
    pub top1: f64,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Optimizer state and schedule position for one model.
pub struct Trainer<T> {
    model: Model,
    cfg: TrainConfig,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
    step: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            model,
            cfg,
            moments: BTreeMap::new(),
            step: 0,
            rng,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self, ds: &Dataset) -> usize {
        ds.len().div_ceil(self.cfg.batch_size)
    }

    /// One optimizer step on a batch; returns the loss and the number of
    /// correctly classified samples.
    pub fn train_step(
        &mut self,
        store: &mut ParamStore<T>,
        x: Tensor<T>,
        y: &[usize],
        steps_per_epoch: usize,
    ) -> Result<(f64, usize)> {
        let mut tape = GradTape::new();
        let mut ctx = Ctx::new(&mut tape, store, NormMode::Train);
        let xv = ctx.tape.constant(x);
        let logits = self.model.record_until(&mut ctx, xv, None)?;
        let loss = ctx.tape.cross_entropy(logits, y, self.cfg.label_smoothing)?;
        let updates = ctx.take_bn_updates();
        let loss_value = tape.value(loss).data()[0].as_f64();
        let step_index = self.step;
        let divergence = |detail: String| Error::Divergence {
            step: step_index,
            detail,
        };
        if !loss_value.is_finite() {
            return Err(divergence(format!("loss is {loss_value}")));
        }
        let lt = tape.value(logits);
        let k = lt.c();
        let correct = y
            .iter()
            .enumerate()
            .filter(|(n, &t)| argmax(&lt.data()[n * k..(n + 1) * k]) == t)
            .count();
        let grads = tape.backward_scalar(loss)?;
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(divergence(format!("gradient norm is {norm}")));
        }
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        apply_bn_updates(store, &updates)?;
        let lr = self.cfg.lr_at(self.step, steps_per_epoch);
        self.step += 1;
        let t = self.step as i32;
        let wd = self.cfg.weight_decay;
        for (name, p) in store.learnable_mut() {
            let g = grads.get(name)?;
            let decay = if decays(name) { lr * wd } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            match self.cfg.optimizer {
                Optimizer::AdamW { beta1, beta2, eps } => {
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let gv = gv.as_f64() * clip;
                        let mn = beta1 * mv.as_f64() + (1.0 - beta1) * gv;
                        let vn = beta2 * vv.as_f64() + (1.0 - beta2) * gv * gv;
                        *mv = T::of(mn);
                        *vv = T::of(vn);
                        let upd = lr * (mn / c1) / ((vn / c2).sqrt() + eps) + decay * pv.as_f64();
                        *pv = T::of(pv.as_f64() - upd);
                    }
                }
                Optimizer::Sgd { momentum } => {
                    for ((pv, &gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                        let mn = momentum * mv.as_f64() + gv.as_f64() * clip;
                        *mv = T::of(mn);
                        *pv = T::of(pv.as_f64() - lr * mn - decay * pv.as_f64());
                    }
                }
            }
        }
        if store.learnable().any(|(_, t)| !t.all_finite()) {
            return Err(divergence("parameters became non-finite".into()));
        }
        Ok((loss_value, correct))
    }

    /// One pass in a seeded shuffled order. Loss is the sample-weighted mean
    /// of batch losses; top-1 is measured on the training batches.
    pub fn train_epoch(&mut self, store: &mut ParamStore<T>, ds: &Dataset) -> Result<Metrics> {
        ensure_config!(
            ds.classes() == self.model.spec().classes,
            "model has {} classes, dataset has {}",
            self.model.spec().classes,
            ds.classes()
        );
        ensure_config!(!ds.is_empty(), "empty dataset");
        let spe = self.steps_per_epoch(ds);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let flips: Vec<bool> = if self.cfg.hflip {
                chunk.iter().map(|_| self.rng.random()).collect()
            } else {
                Vec::new()
            };
            let (x, y) = ds.batch::<T>(chunk, &flips);
            let (l, c) = self.train_step(store, x, &y, spe)?;
            loss_sum += l * chunk.len() as f64;
            correct += c;
        }
        Ok(Metrics {
            loss: loss_sum / ds.len() as f64,
            top1: correct as f64 / ds.len() as f64,
        })
    }
}

/// Infer-mode loss (no smoothing) and top-1 accuracy.
pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, ds: &Dataset, batch_size: usize) -> Result<Metrics> {
    ensure_config!(
        ds.classes() == model.spec().classes,
        "model has {} classes, dataset has {}",
        model.spec().classes,
        ds.classes()
    );
    ensure_config!(!ds.is_empty() && batch_size > 0, "empty dataset or zero batch size");
    let order: Vec<usize> = (0..ds.len()).collect();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(batch_size) {
        let (x, y) = ds.batch::<T>(chunk, &[]);
        let logits = model.forward_classify(store, &x)?;
        let (loss, _) = crate::kernels::reduce::cross_entropy(&logits, &y, 0.0);
        loss_sum += loss.as_f64() * chunk.len() as f64;
        let k = logits.c();
        correct += y
            .iter()
            .enumerate()
            .filter(|(n, &t)| argmax(&logits.data()[n * k..(n + 1) * k]) == t)
            .count();
    }
    Ok(Metrics {
        loss: loss_sum / ds.len() as f64,
        top1: correct as f64 / ds.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
}

/// Per-epoch metrics of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn push(&mut self, epoch: usize, split: &str, m: Metrics) {
        self.records.push(EpochRecord {
            epoch,
            split: split.to_string(),
            loss: m.loss,
            top1: m.top1,
        });
    }

    pub fn split(&self, split: &str) -> Vec<&EpochRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// `epoch,split,loss,top1` rows after `#` header lines.
    pub fn to_csv(&self, header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            out.push_str(&format!("# {h}\n"));
        }
        out.push_str("epoch,split,loss,top1\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{:.9},{:.6}\n", r.epoch, r.split, r.loss, r.top1));
        }
        out
    }

    pub fn write_csv(&self, path: &Path, header: &[String]) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv(header).as_bytes())?;
        Ok(())
    }
}

/// Trains for `cfg.epochs` epochs, evaluating on `test` after each one.
/// `on_epoch` sees every record as it is produced.
pub fn fit<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    let mut trainer = Trainer::new(model.clone(), cfg.clone())?;
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let m = trainer.train_epoch(store, train)?;
        log.push(epoch, "train", m);
        on_epoch(log.records.last().expect("just pushed"));
        if let Some(test) = test {
            let m = evaluate(model, store, test, cfg.batch_size.max(64))?;
            log.push(epoch, "test", m);
            on_epoch(log.records.last().expect("just pushed"));
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::blobs10;
    use crate::model::ModelSpec;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0, 10) - 5e-5).abs() < 1e-15);
        assert!((cfg.lr_at(19, 10) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(20, 10) - 1e-3).abs() < 1e-15);
        assert!(cfg.lr_at(60, 10) < 1e-3 && cfg.lr_at(60, 10) > cfg.lr_at(90, 10));
    }

    #[test]
    fn decay_exemptions() {
        assert!(decays("stages.1.blocks.0.ffn.pw1.weight"));
        assert!(!decays("head.linear.bias"));
        assert!(!decays("stem.0.bn.scale"));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let model = Model::new(ModelSpec::tiny()).unwrap();
        let mut store = model.init::<f32>(0).unwrap();
        let before = store.clone();
        let ds = blobs10(16, 0);
        let mut ds4 = ds
            .subset(&(0..16).filter(|&i| ds.labels()[i] < 4).collect::<Vec<_>>())
            .unwrap();
        ds4 =
            crate::data::Dataset::new(ds4.images().to_vec(), [ds4.len(), 3, 32, 32], ds4.labels().to_vec(), 4).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        };
        let a = Trainer::new(model.clone(), cfg.clone())
            .unwrap()
            .train_epoch(&mut store, &ds4)
            .unwrap();
        for (name, t) in before.learnable() {
            assert_eq!(store.get(name).unwrap(), t);
        }
        // Same batches again: train-mode loss depends only on the learnable tensors.
        let b = Trainer::new(model, cfg).unwrap().train_epoch(&mut store, &ds4).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let model = Model::new(ModelSpec::tiny()).unwrap();
        let store = model.init::<f32>(0).unwrap();
        assert!(evaluate(&model, &store, &blobs10(10, 0), 8).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut log = TrainLog::default();
        log.push(1, "train", Metrics { loss: 2.0, top1: 0.5 });
        let csv = log.to_csv(&["seed 0".into()]);
        assert_eq!(
            csv.lines().collect::<Vec<_>>(),
            ["# seed 0", "epoch,split,loss,top1", "1,train,2.000000000,0.500000"]
        );
    }
}
