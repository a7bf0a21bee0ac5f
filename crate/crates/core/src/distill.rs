//! Synthesizes an input batch from a trained model alone by matching each BN
//! layer's batch statistics to its running statistics, plus a cross-entropy
//! term against labels drawn once at initialization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{hex_digest, ChannelStats, Mode, ModelGraph, Track};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub batch_size: usize,
    pub iterations: usize,
    /// Weight of the BN-statistics term.
    pub alpha: f64,
    /// Weight of the cross-entropy term.
    pub beta: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { batch_size: 128, iterations: 500, alpha: 1.0, beta: 1.0, lr: 0.01, seed: 0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("distill.batch_size must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("distill.iterations must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !(self.alpha + self.beta > 0.0) || !(self.alpha + self.beta).is_finite() {
            return Err(Error::Config(format!(
                "distill.alpha and distill.beta must be non-negative with a positive sum, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("distill.lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub bn_loss: f64,
    pub dnn_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistilledBatch {
    pub x: Tensor<f32>,
    pub y: Vec<usize>,
    pub classes: usize,
    pub final_bn_loss: f64,
    pub final_dnn_loss: f64,
    /// Entry `i` holds the losses after `i` optimizer steps, so the first
    /// entry is the initial batch and the last matches the final losses.
    pub history: Vec<LossRecord>,
    pub config: DistillConfig,
}

impl DistilledBatch {
    pub fn initial_bn_loss(&self) -> f64 {
        self.history[0].bn_loss
    }
}

/// Rescales every sample (outer index) to mean 0 and population variance 1.
pub fn project_unit<T: Real>(x: &mut Tensor<T>) -> Result<()> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::shape("project_unit", "empty batch"));
    }
    let per = x.numel() / n;
    for (i, sample) in x.data_mut().chunks_mut(per).enumerate() {
        let mean = sample.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64;
        let var = sample.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / per as f64;
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::Invalid(format!("sample {i} has variance {var}; cannot normalize")));
        }
        let inv = 1.0 / var.sqrt();
        for v in sample.iter_mut() {
            *v = T::of((v.as_f64() - mean) * inv);
        }
    }
    Ok(())
}

/// Standard-normal batch projected to unit statistics, and uniform labels.
pub fn init_batch(shape: [usize; 4], classes: usize, seed: u64) -> Result<(Tensor<f32>, Vec<usize>)> {
    if classes < 2 {
        return Err(Error::Invalid(format!("need at least 2 classes, got {classes}")));
    }
    if shape.contains(&0) {
        return Err(Error::shape("init_batch", format!("zero-sized shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
    let mut x = Tensor::new(shape.to_vec(), data)?;
    project_unit(&mut x)?;
    let y = (0..shape[0]).map(|_| rng.random_range(0..classes)).collect();
    Ok((x, y))
}

fn check_aligned(batch: &[ChannelStats], running: &[ChannelStats]) -> Result<()> {
    if batch.len() != running.len() {
        return Err(Error::shape("bn_loss", format!("{} batch layers vs {} running layers", batch.len(), running.len())));
    }
    for (l, (b, r)) in batch.iter().zip(running).enumerate() {
        if b.mean.len() != r.mean.len() || b.std.len() != r.std.len() || b.mean.len() != b.std.len() {
            return Err(Error::shape("bn_loss", format!("layer {l}: channel counts differ")));
        }
    }
    Ok(())
}

/// `sum_l ||mu~_l - mu_l||^2 + ||sigma~_l - sigma_l||^2`.
pub fn bn_loss(batch: &[ChannelStats], running: &[ChannelStats]) -> Result<f64> {
    check_aligned(batch, running)?;
    let sq = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>();
    Ok(batch.iter().zip(running).map(|(b, r)| sq(&b.mean, &r.mean) + sq(&b.std, &r.std)).sum())
}

/// Mean cross-entropy of `logits` `[N, K]` against `labels`.
pub fn dnn_loss(logits: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits.cast())?;
    let loss = tape.softmax_cross_entropy(l, labels)?;
    tape.item(loss)
}

/// The BN term built on the tape from each BN layer's input activation.
fn bn_loss_on_tape(tape: &mut Tape<f32>, bn_inputs: &[Var], running: &[ChannelStats]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&input, r) in bn_inputs.iter().zip(running) {
        let c = r.mean.len();
        let mean = tape.channel_mean(input)?;
        let var = tape.channel_var(input)?;
        let std = tape.sqrt(var)?;
        let target_mean = tape.constant(Tensor::new(vec![c], r.mean.clone())?)?;
        let target_std = tape.constant(Tensor::new(vec![c], r.std.clone())?)?;
        let dm = tape.sub(mean, target_mean)?;
        let ds = tape.sub(std, target_std)?;
        let dm2 = tape.square(dm)?;
        let ds2 = tape.square(ds)?;
        let a = tape.sum(dm2)?;
        let b = tape.sum(ds2)?;
        let layer = tape.add(a, b)?;
        total = Some(match total {
            Some(t) => tape.add(t, layer)?,
            None => layer,
        });
    }
    total.ok_or_else(|| Error::BnStatsUnavailable("model has no batch-norm layers".into()))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, x: &mut [f32], g: &[f32]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            let gi = g[i] as f64;
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * gi;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * gi * gi;
            let update = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            x[i] = (x[i] as f64 - update) as f32;
        }
    }
}

fn diverged_at(index: usize) -> Error {
    Error::Diverged { stage: "distill", unit: "iteration", index }
}

struct Evaluation {
    record: LossRecord,
    grad: Option<Vec<f32>>,
}

fn evaluate(
    model: &ModelGraph,
    x: &Tensor<f32>,
    y: &[usize],
    running: &[ChannelStats],
    cfg: &DistillConfig,
    iteration: usize,
    want_grad: bool,
) -> Result<Evaluation> {
    let diverged = |e: Error| match e {
        Error::NonFinite { .. } | Error::NonFiniteActivation { .. } => diverged_at(iteration),
        other => other,
    };
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x.clone().requires_grad(want_grad))?;
    let pass = model.forward_on_tape(&mut tape, xv, Mode::BatchStats, Track::None).map_err(diverged)?;
    let bn = bn_loss_on_tape(&mut tape, &pass.bn_inputs, running).map_err(diverged)?;
    let ce = tape.softmax_cross_entropy(pass.logits, y).map_err(diverged)?;
    let a = tape.scale(bn, cfg.alpha as f32)?;
    let b = tape.scale(ce, cfg.beta as f32)?;
    let total = tape.add(a, b).map_err(diverged)?;
    let record = LossRecord {
        iteration,
        bn_loss: tape.item(bn)? as f64,
        dnn_loss: tape.item(ce)? as f64,
        total: tape.item(total)? as f64,
    };
    if !(record.bn_loss.is_finite() && record.dnn_loss.is_finite() && record.total.is_finite()) {
        return Err(diverged_at(iteration));
    }
    let grad = if want_grad {
        tape.backward(total).map_err(|e| match e {
            Error::Backward(_) => diverged_at(iteration),
            other => other,
        })?;
        Some(tape.grad(xv).expect("input is tracked").to_vec())
    } else {
        None
    };
    Ok(Evaluation { record, grad })
}

/// Optimizes a synthetic batch against the model's BN running statistics.
/// The model is read-only; batch norm runs on batch statistics without
/// touching its running estimates.
pub fn distill(model: &ModelGraph, cfg: &DistillConfig) -> Result<DistilledBatch> {
    cfg.validate()?;
    if model.bn_layers().next().is_none() {
        return Err(Error::BnStatsUnavailable("model has no batch-norm layers".into()));
    }
    let running = model.running_stats();
    if running.iter().any(|s| s.std.iter().chain(&s.mean).any(|v| !v.is_finite())) {
        return Err(Error::BnStatsUnavailable("running statistics are not finite".into()));
    }
    let [c, h, w] = model.input_shape();
    let (mut x, y) = init_batch([cfg.batch_size, c, h, w], model.classes(), cfg.seed)?;
    let mut adam = Adam::new(x.numel(), cfg.lr);
    let mut history = Vec::with_capacity(cfg.iterations + 1);

    for it in 0..cfg.iterations {
        let eval = evaluate(model, &x, &y, &running, cfg, it, true)?;
        history.push(eval.record);
        adam.step(x.data_mut(), eval.grad.as_deref().unwrap());
        if !x.is_finite() {
            return Err(diverged_at(it));
        }
        project_unit(&mut x).map_err(|_| diverged_at(it))?;
        if it % 100 == 0 {
            log::debug!("distill iter {it}: bn {:.5} ce {:.5}", eval.record.bn_loss, eval.record.dnn_loss);
        }
    }
    let last = evaluate(model, &x, &y, &running, cfg, cfg.iterations, false)?.record;
    history.push(last);
    Ok(DistilledBatch {
        x,
        y,
        classes: model.classes(),
        final_bn_loss: last.bn_loss,
        final_dnn_loss: last.dnn_loss,
        history,
        config: cfg.clone(),
    })
}

const FORMAT_NAME: &str = "bdfa-distilled";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    shape: Vec<usize>,
    classes: usize,
    seed: u64,
    config: DistillConfig,
    final_bn_loss: f64,
    final_dnn_loss: f64,
    inputs_sha256: String,
    labels: Vec<usize>,
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iteration,bn_loss,dnn_loss,total\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.iteration, r.bn_loss, r.dnn_loss, r.total).unwrap();
    }
    out
}

/// Writes `manifest.json`, `inputs.bin` (little-endian f32) and
/// `history.csv` into `dir`.
pub fn save_distilled(batch: &DistilledBatch, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob: Vec<u8> = batch.x.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        shape: batch.x.shape().to_vec(),
        classes: batch.classes,
        seed: batch.config.seed,
        config: batch.config.clone(),
        final_bn_loss: batch.final_bn_loss,
        final_dnn_loss: batch.final_dnn_loss,
        inputs_sha256: hex_digest(&blob),
        labels: batch.y.clone(),
    };
    let write = |name: &str, bytes: &[u8]| fs::write(dir.join(name), bytes).map_err(|e| Error::io(dir.join(name), e));
    write("inputs.bin", &blob)?;
    write("history.csv", history_csv(&batch.history).as_bytes())?;
    write("manifest.json", (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())
}

fn parse_history(text: &str) -> Result<Vec<LossRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Csv { row: i + 2, message: e.to_string() }))
        .collect()
}

pub fn load_distilled(dir: impl AsRef<Path>) -> Result<DistilledBatch> {
    let dir = dir.as_ref();
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| Error::io(dir.join(name), e));
    let manifest: Manifest =
        serde_json::from_slice(&read("manifest.json")?).map_err(|e| Error::Format(format!("distilled manifest: {e}")))?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::Format(format!("expected format `{FORMAT_NAME}`, found `{}`", manifest.format)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version { found: manifest.version, expected: FORMAT_VERSION });
    }
    let blob = read("inputs.bin")?;
    let numel: usize = manifest.shape.iter().product();
    if blob.len() != numel * 4 {
        return Err(Error::Truncated(format!("inputs.bin holds {} bytes, expected {}", blob.len(), numel * 4)));
    }
    if hex_digest(&blob) != manifest.inputs_sha256 {
        return Err(Error::Checksum("inputs".into()));
    }
    if manifest.shape.len() != 4 || manifest.labels.len() != manifest.shape[0] {
        return Err(Error::Consistency("label count does not match batch size".into()));
    }
    if manifest.labels.iter().any(|&l| l >= manifest.classes) {
        return Err(Error::Consistency(format!("label outside [0, {})", manifest.classes)));
    }
    let data = blob.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let history_text = String::from_utf8(read("history.csv")?).map_err(|e| Error::Format(format!("history.csv: {e}")))?;
    Ok(DistilledBatch {
        x: Tensor::new(manifest.shape, data)?,
        y: manifest.labels,
        classes: manifest.classes,
        final_bn_loss: manifest.final_bn_loss,
        final_dnn_loss: manifest.final_dnn_loss,
        history: parse_history(&history_text)?,
        config: manifest.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, BatchNorm2d, BnStats, Layer, Linear, Weights};

    fn stats(mean: &[f32], std: &[f32]) -> ChannelStats {
        ChannelStats { mean: mean.to_vec(), std: std.to_vec() }
    }

    #[test]
    fn bn_loss_examples() {
        let a = [stats(&[0.0], &[1.0])];
        assert_eq!(bn_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(bn_loss(&a, &[stats(&[3.0], &[1.0])]).unwrap(), 9.0);
        let two = [stats(&[0.0], &[1.0]), stats(&[1.0, 1.0], &[1.0, 2.0])];
        let run = [stats(&[3.0], &[1.0]), stats(&[1.0, 0.0], &[1.0, 2.0])];
        assert_eq!(bn_loss(&two, &run).unwrap(), 9.0 + 1.0);
        assert!(bn_loss(&two, &run[..1]).is_err());
        assert!(bn_loss(&a, &[stats(&[0.0, 0.0], &[1.0, 1.0])]).is_err());
    }

    #[test]
    fn dnn_loss_examples() {
        let zeros = Tensor::zeros(vec![3, 4]).unwrap();
        assert!((dnn_loss(&zeros, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-6);
        let sure = Tensor::new(vec![2, 3], vec![100.0, 0.0, 0.0, 0.0, 0.0, 100.0]).unwrap();
        assert!(dnn_loss(&sure, &[0, 2]).unwrap() < 1e-12);
        assert!(dnn_loss(&zeros, &[0, 1, 4]).is_err());

        let logits = Tensor::new(vec![2, 2], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
        let per: f64 = (0..2).map(|i| dnn_loss(&logits.slice_outer(i, 1).unwrap(), &[i]).unwrap()).sum::<f64>() / 2.0;
        assert!((dnn_loss(&logits, &[0, 1]).unwrap() - per).abs() < 1e-12);
    }

    #[test]
    fn init_batch_is_projected_and_deterministic() {
        let (x, y) = init_batch([16, 3, 4, 4], 4, 7).unwrap();
        for s in x.data().chunks(48) {
            let mean = s.iter().map(|&v| v as f64).sum::<f64>() / 48.0;
            let var = s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 48.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
        assert!(y.iter().all(|&l| l < 4));
        assert_eq!(init_batch([16, 3, 4, 4], 4, 7).unwrap(), (x, y));
        assert!(init_batch([2, 1, 2, 2], 1, 0).is_err());
    }

    #[test]
    fn projection_is_idempotent_in_f64() {
        let mut x = Tensor::<f64>::new(vec![2, 5], vec![1.0, 2.0, 3.0, 4.0, 10.0, -3.0, 0.5, 0.25, 8.0, 1.0]).unwrap();
        project_unit(&mut x).unwrap();
        let once = x.clone();
        project_unit(&mut x).unwrap();
        for (a, b) in once.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let mut flat = Tensor::<f64>::new(vec![1, 3], vec![2.0; 3]).unwrap();
        assert!(project_unit(&mut flat).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        for bad in [
            DistillConfig { alpha: 0.0, beta: 0.0, ..Default::default() },
            DistillConfig { batch_size: 0, ..Default::default() },
            DistillConfig { iterations: 0, ..Default::default() },
            DistillConfig { alpha: -1.0, beta: 2.0, ..Default::default() },
            DistillConfig { lr: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn model_without_bn_rejected() {
        let m = Architecture::Linear.build([1, 2, 2], 2, 0).unwrap();
        assert!(matches!(distill(&m, &DistillConfig::default()), Err(Error::BnStatsUnavailable(_))));
    }

    /// BN directly on the (unit-normalized) input: running stats of mean 0
    /// and std 1 are already what the initial batch induces.
    fn matched_model() -> ModelGraph {
        ModelGraph::new(
            "matched",
            vec![
                Layer::BatchNorm2d(BatchNorm2d {
                    channels: 1,
                    gamma: vec![1.0],
                    beta: vec![0.0],
                    stats: BnStats { running_mean: vec![0.0], running_var: vec![1.0], momentum: 0.1 },
                }),
                Layer::Flatten,
                Layer::Linear(Linear {
                    in_features: 16,
                    out_features: 2,
                    weight: Weights::Float((0..32).map(|i| ((i * 7) % 5) as f32 * 0.1 - 0.2).collect()),
                    bias: vec![0.0; 2],
                }),
            ],
            2,
            [1, 4, 4],
        )
        .unwrap()
    }

    #[test]
    fn matched_stats_stay_near_floor() {
        let m = matched_model();
        let before = m.clone();
        let cfg = DistillConfig { batch_size: 8, iterations: 50, seed: 3, ..Default::default() };
        let out = distill(&m, &cfg).unwrap();
        assert!(out.initial_bn_loss() < 1e-8, "{}", out.initial_bn_loss());
        assert!(out.final_bn_loss <= 1.05 * out.initial_bn_loss() + 1e-8);
        assert_eq!(m, before);
        assert_eq!(out.history.len(), 51);
        assert!(out.history.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn save_and_load_roundtrip() {
        let m = Architecture::TinyCnn.build([1, 4, 4], 2, 0).unwrap();
        let cfg = DistillConfig { batch_size: 4, iterations: 3, seed: 1, ..Default::default() };
        let out = distill(&m, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_distilled(&out, dir.path()).unwrap();
        assert_eq!(load_distilled(dir.path()).unwrap(), out);
        let csv = fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert!(csv.starts_with("iteration,bn_loss,dnn_loss,total\n0,"));
        assert_eq!(csv.lines().count(), 5);

        let mut blob = fs::read(dir.path().join("inputs.bin")).unwrap();
        blob[0] ^= 1;
        fs::write(dir.path().join("inputs.bin"), &blob).unwrap();
        assert!(matches!(load_distilled(dir.path()), Err(Error::Checksum(_))));
    }
}
