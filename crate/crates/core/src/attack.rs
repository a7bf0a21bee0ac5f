//! Progressive bit search: rank bits inside each quantized layer by
//! gradient, then commit the single candidate flip (across layers) that
//! raises the true loss on the attack batch the most.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{evaluate, Split};
use crate::model::{Mode, ModelGraph, ParamId, ParamKind, Track};
use crate::quant::{self, apply_flip, attackable_layers, bit_gradients, model_hamming_distance, BitAddress, FlipRecord, QuantizedLayer};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Distilled inputs and labels; no access to real data.
    Bdfa,
    /// Real data with true labels.
    Bfa,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Bdfa => "bdfa",
            AttackMode::Bfa => "bfa",
        }
    }
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bdfa" => Ok(AttackMode::Bdfa),
            "bfa" => Ok(AttackMode::Bfa),
            _ => Err(Error::Config(format!("unknown attack mode `{s}` (expected bdfa or bfa)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Hamming budget C.
    pub max_flips: usize,
    /// Candidates per layer.
    pub k: usize,
    /// Stop once held-out accuracy is at or below this fraction.
    pub accuracy_floor: Option<f64>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { max_flips: 30, k: 1, accuracy_floor: None, seed: 0 }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_flips == 0 {
            return Err(Error::Config("attack.max_flips must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("attack.k must be at least 1".into()));
        }
        if let Some(f) = self.accuracy_floor {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("attack.accuracy_floor must lie in [0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy on the attack batch, batch norm in inference mode.
pub fn attack_loss(model: &ModelGraph, batch: &Split) -> Result<f64> {
    let logits = model.forward_eval(&batch.x)?;
    let mut tape = Tape::<f32>::new();
    let l = tape.constant(logits)?;
    let loss = tape.softmax_cross_entropy(l, &batch.y)?;
    Ok(tape.item(loss)? as f64)
}

/// Loss and `dL/db` for every attackable layer, in layer order.
pub fn layer_bit_gradients(model: &ModelGraph, batch: &Split) -> Result<(f64, Vec<(usize, Vec<f32>)>)> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(batch.x.clone())?;
    let pass = model.forward_on_tape(&mut tape, x, Mode::Eval, Track::Weights)?;
    let loss = tape.softmax_cross_entropy(pass.logits, &batch.y)?;
    let value = tape.item(loss)? as f64;
    tape.backward(loss)?;
    let mut out = Vec::new();
    for (layer, q) in model.quantized_layers() {
        let w = pass.param(ParamId { layer, kind: ParamKind::Weight }).expect("weights are parameters");
        let g = tape.grad(w).expect("weights are tracked");
        out.push((layer, bit_gradients(q, g)?));
    }
    Ok((value, out))
}

/// Top-`k` bits of one layer by `|dL/db|`, keeping only bits whose flip
/// direction raises the first-order loss estimate. Ties go to the lower
/// `(weight, bit)`.
pub fn rank_bits_in_layer(layer: usize, q: &QuantizedLayer, bit_grads: &[f32], k: usize) -> Result<Vec<BitAddress>> {
    let bits = q.bits() as usize;
    if bit_grads.len() != q.num_bits() {
        return Err(Error::shape("rank_bits_in_layer", format!("{} bit gradients for {} bits", bit_grads.len(), q.num_bits())));
    }
    let mut cands: Vec<(f32, usize)> = bit_grads
        .iter()
        .enumerate()
        .filter_map(|(j, &g)| {
            let set = (q.codes()[j / bits] as u8 >> (j % bits)) & 1 == 1;
            // Flipping 0 -> 1 moves b by +1, 1 -> 0 by -1.
            let estimate = if set { -g } else { g };
            (estimate > 0.0).then_some((g.abs(), j))
        })
        .collect();
    // Flat index order equals (weight, bit) order.
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cands.truncate(k);
    Ok(cands.into_iter().map(|(_, j)| BitAddress { layer, weight: j / bits, bit: (j % bits) as u8 }).collect())
}

/// Commits one flip. Candidates are widened per layer (doubling `k`) until
/// some candidate's true loss is at least the current loss, so the
/// committed loss sequence never decreases.
pub fn progressive_search_step(model: &mut ModelGraph, batch: &Split, cfg: &AttackConfig) -> Result<(FlipRecord, usize)> {
    let (loss_before, grads) = layer_bit_gradients(model, batch)?;
    let mut evaluations = 1;
    let max_bits = model.quantized_layers().map(|(_, q)| q.num_bits()).max().unwrap_or(0);
    let mut k = cfg.k;
    let mut tried = std::collections::BTreeSet::new();
    let mut best: Option<(f64, BitAddress)> = None;
    loop {
        let mut any = false;
        for (layer, g) in &grads {
            let q = model.quantized_layers().find(|(i, _)| i == layer).map(|(_, q)| q).unwrap();
            for addr in rank_bits_in_layer(*layer, q, g, k)? {
                if !tried.insert(addr) {
                    continue;
                }
                any = true;
                apply_flip(model, addr)?;
                let loss = attack_loss(model, batch);
                apply_flip(model, addr)?;
                evaluations += 1;
                let loss = match loss {
                    Ok(l) if l.is_finite() => l,
                    Ok(_) | Err(Error::NonFinite { .. } | Error::NonFiniteActivation { .. }) => {
                        log::warn!("discarding candidate {addr:?}: non-finite loss");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                // Strictly greater keeps the earliest (layer, weight, bit) on ties.
                if best.is_none_or(|(b, a)| loss > b || (loss == b && addr < a)) {
                    best = Some((loss, addr));
                }
            }
        }
        match best {
            Some((loss, _)) if loss >= loss_before => break,
            _ if !any || k >= max_bits => {
                return Err(Error::Stalled(match best {
                    Some((l, _)) => format!("no flip raises the loss above {loss_before:.6} (best {l:.6})"),
                    None => "no candidate bit in any layer".into(),
                }))
            }
            _ => k = (k * 2).min(max_bits),
        }
    }
    let (loss_after, address) = best.unwrap();
    let (code_before, code_after) = apply_flip(model, address)?;
    Ok((FlipRecord { address, code_before, code_after, loss_before, loss_after, accuracy_after: None }, evaluations))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    AccuracyFloor,
    Stalled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub mode: AttackMode,
    /// Victim name and its dataset tag, for labelling reports.
    #[serde(default)]
    pub network: String,
    #[serde(default)]
    pub dataset: String,
    pub config: AttackConfig,
    pub baseline_loss: f64,
    pub baseline_accuracy: Option<f64>,
    pub records: Vec<FlipRecord>,
    /// Attack-batch loss after each committed flip.
    pub losses: Vec<f64>,
    /// Held-out accuracy after each committed flip, when an evaluation set
    /// was given.
    pub accuracies: Option<Vec<f64>>,
    /// Hamming distance to the original model after each committed flip.
    pub hamming: Vec<u64>,
    pub evaluations: usize,
    pub stop: StopReason,
}

impl AttackTrace {
    pub fn final_hamming(&self) -> u64 {
        self.hamming.last().copied().unwrap_or(0)
    }

    /// Committed flips before held-out accuracy first drops to `threshold`
    /// or below; `None` if it never does.
    pub fn flips_to_accuracy(&self, threshold: f64) -> Option<usize> {
        if self.baseline_accuracy? <= threshold {
            return Some(0);
        }
        self.accuracies.as_ref()?.iter().position(|&a| a <= threshold).map(|i| i + 1)
    }

    /// `flip_index,loss,accuracy`; row 0 is the unmodified model.
    pub fn to_csv(&self) -> String {
        let fmt = |a: Option<f64>| a.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("flip_index,loss,accuracy\n");
        writeln!(out, "0,{},{}", self.baseline_loss, fmt(self.baseline_accuracy)).unwrap();
        for (i, loss) in self.losses.iter().enumerate() {
            let acc = self.accuracies.as_ref().map(|a| a[i]);
            writeln!(out, "{},{},{}", i + 1, loss, fmt(acc)).unwrap();
        }
        out
    }

    /// Writes `trace.json`, `trace.csv` and `flips.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| fs::write(dir.join(name), bytes).map_err(|e| Error::io(dir.join(name), e));
        write("trace.json", (serde_json::to_string_pretty(self)? + "\n").as_bytes())?;
        write("trace.csv", self.to_csv().as_bytes())?;
        let mut lines = Vec::new();
        quant::write_flip_records(&mut lines, &self.records)?;
        write("flips.jsonl", &lines)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join("trace.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Attacks a copy of `original` until the Hamming budget is spent, the
/// accuracy floor is reached, or no flip raises the loss. Returns the
/// perturbed model and its trace.
///
/// Re-selecting an already flipped bit lowers the Hamming distance, so the
/// loop runs on the true distance with a cap of `2 C` steps.
pub fn run_attack(
    original: &ModelGraph,
    batch: &Split,
    eval_set: Option<&Split>,
    mode: AttackMode,
    cfg: &AttackConfig,
) -> Result<(ModelGraph, AttackTrace)> {
    cfg.validate()?;
    if !original.is_quantized() {
        return Err(Error::Invalid("attack needs a quantized model".into()));
    }
    if attackable_layers(original).is_empty() {
        return Err(Error::Invalid("model has no attackable layers".into()));
    }
    if batch.y.is_empty() {
        return Err(Error::Invalid("attack batch is empty".into()));
    }
    let accuracy = |m: &ModelGraph| -> Result<Option<f64>> { eval_set.map(|s| evaluate(m, s).map(|r| r.accuracy)).transpose() };

    let mut model = original.clone();
    let baseline_accuracy = accuracy(&model)?;
    let mut trace = AttackTrace {
        mode,
        network: original.name.clone(),
        dataset: original.metadata.get("dataset").cloned().unwrap_or_default(),
        config: cfg.clone(),
        baseline_loss: attack_loss(&model, batch)?,
        baseline_accuracy,
        records: Vec::new(),
        losses: Vec::new(),
        accuracies: eval_set.map(|_| Vec::new()),
        hamming: Vec::new(),
        evaluations: 1,
        stop: StopReason::Budget,
    };
    if matches!((cfg.accuracy_floor, baseline_accuracy), (Some(f), Some(a)) if a <= f) {
        trace.stop = StopReason::AccuracyFloor;
        return Ok((model, trace));
    }

    let mut hamming = 0u64;
    let mut steps = 0;
    while hamming < cfg.max_flips as u64 && steps < 2 * cfg.max_flips {
        let (mut record, evals) = match progressive_search_step(&mut model, batch, cfg) {
            Ok(r) => r,
            Err(Error::Stalled(msg)) if !trace.records.is_empty() => {
                log::info!("attack stopped after {} flips: {msg}", trace.records.len());
                trace.stop = StopReason::Stalled;
                break;
            }
            Err(e) => return Err(e),
        };
        steps += 1;
        trace.evaluations += evals;
        hamming = model_hamming_distance(original, &model)?;
        let acc = accuracy(&model)?;
        record.accuracy_after = acc;
        log::debug!("flip {steps}: {:?} loss {:.4} acc {acc:?}", record.address, record.loss_after);
        trace.losses.push(record.loss_after);
        trace.hamming.push(hamming);
        if let (Some(list), Some(a)) = (trace.accuracies.as_mut(), acc) {
            list.push(a);
        }
        trace.records.push(record);
        if matches!((cfg.accuracy_floor, acc), (Some(f), Some(a)) if a <= f) {
            trace.stop = StopReason::AccuracyFloor;
            break;
        }
    }
    if hamming > cfg.max_flips as u64 {
        return Err(Error::Consistency(format!("budget exceeded: {hamming} > {}", cfg.max_flips)));
    }
    Ok((model, trace))
}

/// Re-applies a trace to a fresh copy of the original quantized model.
pub fn replay(original: &ModelGraph, trace: &AttackTrace) -> Result<ModelGraph> {
    let mut model = original.clone();
    quant::replay(&mut model, &trace.records)?;
    Ok(model)
}
