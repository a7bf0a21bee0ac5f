//! Victim training, evaluation, and end-to-end experiments.

mod data;
mod experiment;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{load_cifar, load_cifar_with, load_toy_dataset, ChannelNorm, CifarCounts, Dataset, Split};
pub use experiment::{
    aggregate, load_dataset, real_batch, run_experiment, train_victim, write_aggregate_csv, AggregateRow, AttackSection,
    DatasetSection, ExperimentConfig, ExperimentReport, ModeOutcome, ModelSection, QuantizeSection, SeedOutcome,
};

use crate::error::{Error, Result};
use crate::model::{Mode, ModelGraph, ParamId, ParamKind, Track};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy and mean cross-entropy in inference mode. Ties in the
/// argmax go to the lowest class index.
pub fn evaluate(model: &ModelGraph, split: &Split) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty split".into()));
    }
    let k = model.classes();
    let (mut correct, mut loss_sum) = (0usize, 0.0f64);
    for start in (0..split.len()).step_by(EVAL_CHUNK) {
        let len = EVAL_CHUNK.min(split.len() - start);
        let logits = model.forward_eval(&split.x.slice_outer(start, len)?)?;
        for (row, &label) in logits.data().chunks(k).zip(&split.y[start..start + len]) {
            if label >= k {
                return Err(Error::Invalid(format!("label {label} outside [0, {k})")));
            }
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            correct += (best == label) as usize;
            let max = row[best] as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            loss_sum += lse - row[label] as f64;
        }
    }
    let n = split.len() as f64;
    Ok(EvalResult { accuracy: correct as f64 / n, loss: loss_sum / n })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
    /// Cosine decay from the base rate to zero over all epochs.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    /// L2 penalty on conv and linear weights.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 32, lr: 0.05, schedule: LrSchedule::Cosine, momentum: 0.9, weight_decay: 5e-4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("train.momentum must lie in [0, 1) and train.weight_decay be non-negative".into());
        }
        if let LrSchedule::Step { every, gamma } = self.schedule {
            if every == 0 || !(gamma > 0.0) {
                return bad("step schedule needs every >= 1 and gamma > 0".into());
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Step { every, gamma } => self.lr * gamma.powi((epoch / every) as i32),
            LrSchedule::Cosine => self.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    pub test_accuracy: f64,
}

/// Minibatch SGD with momentum on cross-entropy. Batch norm runs on batch
/// statistics and folds them into its running estimates. Minibatches with
/// fewer than two samples are skipped.
pub fn train(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if model.is_quantized() {
        return Err(Error::Invalid("cannot train a quantized model".into()));
    }
    if model.input_shape() != data.input_shape() || model.classes() != data.classes {
        return Err(Error::shape("train", "model and dataset shapes differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: BTreeMap<ParamId, Vec<f32>> = BTreeMap::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let diverged = || Error::Diverged { stage: "train", unit: "epoch", index: epoch };
        let lr = cfg.lr_at(epoch) as f32;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0f64, 0usize);
        for rows in order.chunks(cfg.batch_size).filter(|r| r.len() >= 2) {
            let batch = data.train.select(rows)?;
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(batch.x)?;
            let pass = model.forward_on_tape(&mut tape, x, Mode::Train, Track::All).map_err(|e| match e {
                Error::NonFinite { .. } | Error::NonFiniteActivation { .. } => diverged(),
                e => e,
            })?;
            let loss = tape.softmax_cross_entropy(pass.logits, &batch.y).map_err(|_| diverged())?;
            let value = tape.item(loss)? as f64;
            if !value.is_finite() {
                return Err(diverged());
            }
            tape.backward(loss).map_err(|_| diverged())?;
            loss_sum += value;
            batches += 1;

            model.update_running_stats(&pass.batch_stats);
            for &(id, var) in &pass.params {
                let grad = tape.grad(var).expect("parameters are tracked");
                let w = model.param_mut(id)?;
                let v = velocity.entry(id).or_insert_with(|| vec![0.0; w.len()]);
                let decay = if id.kind == ParamKind::Weight { cfg.weight_decay as f32 } else { 0.0 };
                for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(grad) {
                    *vi = cfg.momentum as f32 * *vi + gi + decay * *wi;
                    *wi -= lr * *vi;
                }
                if w.iter().any(|x| !x.is_finite()) {
                    return Err(diverged());
                }
            }
        }
        let test_accuracy = evaluate(model, &data.test)?.accuracy;
        let train_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
        log::debug!("epoch {epoch}: loss {train_loss:.4} test acc {test_accuracy:.3}");
        history.push(EpochMetrics { epoch, lr: lr as f64, train_loss, test_accuracy });
    }
    Ok(history)
}

/// Independent per-stage seeds derived from one experiment seed.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, mixed with the seed through splitmix64.
    let tag = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut z = seed.wrapping_add(tag).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Layer, Linear, Weights};
    use crate::tensor::Tensor;

    fn fixed_linear(weight: Vec<f32>, k: usize) -> ModelGraph {
        let d = weight.len() / k;
        ModelGraph::new(
            "fixed",
            vec![Layer::Flatten, Layer::Linear(Linear { in_features: d, out_features: k, weight: Weights::Float(weight), bias: vec![0.0; k] })],
            k,
            [d, 1, 1],
        )
        .unwrap()
    }

    #[test]
    fn three_of_four_correct() {
        let m = fixed_linear(vec![1.0, 0.0, 0.0, 1.0], 2);
        let x = Tensor::new(vec![4, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 3.0]).unwrap();
        let split = Split::new(x, vec![0, 1, 0, 0]).unwrap();
        assert_eq!(evaluate(&m, &split).unwrap().accuracy, 0.75);
    }

    #[test]
    fn constant_logits_pick_lowest_class() {
        let m = fixed_linear(vec![0.0; 8], 4);
        let x = Tensor::new(vec![4, 2, 1, 1], vec![1.0; 8]).unwrap();
        let r = evaluate(&m, &Split::new(x, vec![0, 1, 2, 3]).unwrap()).unwrap();
        assert_eq!(r.accuracy, 0.25);
        assert!((r.loss - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn evaluate_rejects_empty_and_ignores_order() {
        let d = load_toy_dataset("blobs4", 100, 1).unwrap();
        let m = Architecture::TinyCnn.build(d.input_shape(), 4, 2).unwrap();
        let a = evaluate(&m, &d.test).unwrap();
        let rev: Vec<usize> = (0..d.test.len()).rev().collect();
        let b = evaluate(&m, &d.test.select(&rev).unwrap()).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert!((a.loss - b.loss).abs() < 1e-9);
        let empty = Split { x: d.test.x.clone(), y: Vec::new() };
        assert!(evaluate(&m, &empty).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let d = load_toy_dataset("blobs4", 100, 1).unwrap();
        let mut m = Architecture::TinyCnn.build(d.input_shape(), 4, 2).unwrap();
        let before = m.clone();
        let cfg = TrainConfig { epochs: 1, lr: 0.0, ..Default::default() };
        train(&mut m, &d, &cfg).unwrap();
        for (a, b) in m.layers().iter().zip(before.layers()) {
            if let (Some(wa), Some(wb)) = (a.weights(), b.weights()) {
                assert_eq!(wa, wb);
            }
        }
    }

    #[test]
    fn first_epoch_beats_chance() {
        let d = load_toy_dataset("blobs4", 1000, 1).unwrap();
        let mut m = Architecture::DeskCnn.build(d.input_shape(), 4, 2).unwrap();
        let h = train(&mut m, &d, &TrainConfig { epochs: 1, ..Default::default() }).unwrap();
        assert!(h[0].train_loss < 4f64.ln(), "{h:?}");
    }

    #[test]
    fn huge_lr_diverges_with_epoch() {
        let d = load_toy_dataset("blobs4", 100, 1).unwrap();
        let mut m = Architecture::Linear.build(d.input_shape(), 4, 2).unwrap();
        let cfg = TrainConfig { epochs: 3, lr: 1e30, schedule: LrSchedule::Constant, ..Default::default() };
        match train(&mut m, &d, &cfg) {
            Err(Error::Diverged { stage: "train", unit: "epoch", index }) => assert!(index < 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schedules() {
        let c = TrainConfig { epochs: 4, lr: 1.0, ..Default::default() };
        assert_eq!(c.lr_at(0), 1.0);
        assert!((c.lr_at(2) - 0.5).abs() < 1e-12);
        let s = TrainConfig { schedule: LrSchedule::Step { every: 2, gamma: 0.1 }, ..c };
        assert!((s.lr_at(3) - 0.1).abs() < 1e-12);
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, "train"), derive_seed(0, "distill"));
        assert_ne!(derive_seed(0, "train"), derive_seed(1, "train"));
        assert_eq!(derive_seed(5, "x"), derive_seed(5, "x"));
    }
}
