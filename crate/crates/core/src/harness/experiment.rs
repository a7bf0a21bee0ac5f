//! train -> quantize -> distill -> attack over several seeds, with an
//! aggregate accuracy-vs-flips table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, evaluate, load_cifar, load_toy_dataset, train, Dataset, EpochMetrics, Split, TrainConfig};
use crate::attack::{run_attack, AttackConfig, AttackMode, AttackTrace, StopReason};
use crate::distill::{distill, save_distilled, DistillConfig};
use crate::error::{Error, Result};
use crate::model::{save_model, Architecture, ModelGraph};
use crate::quant::{quantize_model, DEFAULT_BITS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// `blobs4`, `rings2`, `cifar10` or `cifar100`.
    pub name: String,
    /// Toy datasets only: total generated samples.
    pub samples: usize,
    /// CIFAR only: directory holding the binary files.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { name: "blobs4".into(), samples: 1000, path: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { architecture: Architecture::DeskCnn }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeSection {
    pub bits: u8,
}

impl Default for QuantizeSection {
    fn default() -> Self {
        QuantizeSection { bits: DEFAULT_BITS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub max_flips: usize,
    pub k: usize,
    pub accuracy_floor: Option<f64>,
    pub modes: Vec<AttackMode>,
    /// Real training samples handed to the BFA baseline.
    pub bfa_batch: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackConfig::default();
        AttackSection { max_flips: d.max_flips, k: d.k, accuracy_floor: None, modes: vec![AttackMode::Bdfa, AttackMode::Bfa], bfa_batch: 128 }
    }
}

impl AttackSection {
    pub fn config(&self, seed: u64) -> AttackConfig {
        AttackConfig { max_flips: self.max_flips, k: self.k, accuracy_floor: self.accuracy_floor, seed }
    }
}

/// Experiment description, read from TOML. Per-stage `seed` fields are
/// replaced by values derived from each experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub quantize: QuantizeSection,
    pub distill: DistillConfig,
    pub attack: AttackSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            seeds: (0..5).collect(),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            quantize: QuantizeSection::default(),
            distill: DistillConfig::default(),
            attack: AttackSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.attack.modes.is_empty() {
            return Err(Error::Config("attack.modes must not be empty".into()));
        }
        if self.attack.bfa_batch == 0 {
            return Err(Error::Config("attack.bfa_batch must be at least 1".into()));
        }
        self.train.validate()?;
        self.distill.validate()?;
        self.attack.config(0).validate()?;
        if !(crate::quant::MIN_BITS..=crate::quant::MAX_BITS).contains(&self.quantize.bits) {
            return Err(Error::Config(format!("quantize.bits must be in [2, 8], got {}", self.quantize.bits)));
        }
        Ok(())
    }
}

pub fn load_dataset(section: &DatasetSection, seed: u64) -> Result<Dataset> {
    match section.name.as_str() {
        "cifar10" | "cifar100" => {
            let path = section.path.as_ref().ok_or_else(|| Error::Config("dataset.path is required for CIFAR".into()))?;
            let d = load_cifar(path)?;
            if d.name != section.name {
                return Err(Error::Config(format!("{} holds {}, config asks for {}", path.display(), d.name, section.name)));
            }
            Ok(d)
        }
        name => load_toy_dataset(name, section.samples, seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeOutcome {
    pub final_accuracy: Option<f64>,
    pub final_hamming: u64,
    pub flips_to_threshold: Option<usize>,
    pub stop: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub clean_accuracy: Option<f64>,
    pub quantized_accuracy: Option<f64>,
    pub distill_initial_bn_loss: Option<f64>,
    pub distill_final_bn_loss: Option<f64>,
    pub train_history: Vec<EpochMetrics>,
    pub modes: BTreeMap<String, ModeOutcome>,
    /// First failing stage, if any; later stages of this seed did not run.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub network: String,
    pub dataset: String,
    /// Accuracy regarded as broken: 1.5 times random guessing.
    pub accuracy_threshold: f64,
    pub seeds: Vec<SeedOutcome>,
    /// Mean flips-to-threshold per mode over seeds that reached it.
    pub mean_flips_to_threshold: BTreeMap<String, Option<f64>>,
    pub aggregate: Vec<AggregateRow>,
}

/// One line of `aggregate.csv`: accuracy statistics over seeds after
/// `flips` committed flips. Accuracies are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub network: String,
    pub dataset: String,
    pub mode: String,
    pub flips: usize,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_min: f64,
    pub acc_max: f64,
    pub loss_mean: f64,
}

/// Accuracy statistics per mode and flip count. A trace that stopped
/// before `max_flips` holds its last value for the remaining counts.
pub fn aggregate(network: &str, dataset: &str, traces: &[&AttackTrace], max_flips: usize) -> Vec<AggregateRow> {
    let mut modes: Vec<AttackMode> = Vec::new();
    for t in traces {
        if !modes.contains(&t.mode) {
            modes.push(t.mode);
        }
    }
    let mut rows = Vec::new();
    for mode in modes {
        let of_mode: Vec<&&AttackTrace> = traces.iter().filter(|t| t.mode == mode && t.baseline_accuracy.is_some()).collect();
        if of_mode.is_empty() {
            continue;
        }
        for flips in 0..=max_flips {
            let at = |t: &AttackTrace| -> (f64, f64) {
                let accs = t.accuracies.as_deref().unwrap_or(&[]);
                match flips.min(t.losses.len()) {
                    0 => (t.baseline_accuracy.unwrap(), t.baseline_loss),
                    i => (accs[i - 1], t.losses[i - 1]),
                }
            };
            let points: Vec<(f64, f64)> = of_mode.iter().map(|t| at(t)).collect();
            let n = points.len() as f64;
            rows.push(AggregateRow {
                network: network.into(),
                dataset: dataset.into(),
                mode: mode.name().into(),
                flips,
                seeds: points.len(),
                acc_mean: points.iter().map(|p| p.0).sum::<f64>() / n,
                acc_min: points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
                acc_max: points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
                loss_mean: points.iter().map(|p| p.1).sum::<f64>() / n,
            });
        }
    }
    rows
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Builds and trains the victim for `seed` with the seed derivation used by
/// [`run_experiment`], so single stages reproduce an experiment's models.
pub fn train_victim(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<(ModelGraph, Vec<EpochMetrics>)> {
    let mut model = cfg.model.architecture.build(data.input_shape(), data.classes, derive_seed(seed, "init"))?;
    model.metadata.insert("dataset".into(), data.name.clone());
    model.metadata.insert("seed".into(), seed.to_string());
    let train_cfg = TrainConfig { seed: derive_seed(seed, "train"), ..cfg.train.clone() };
    let history = train(&mut model, data, &train_cfg)?;
    Ok((model, history))
}

/// The real-data batch of the BFA baseline: `size` shuffled training rows.
pub fn real_batch(data: &Dataset, size: usize, seed: u64) -> Result<Split> {
    let mut rows: Vec<usize> = (0..data.train.len()).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "bfa")));
    rows.truncate(size);
    data.train.select(&rows)
}

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    outcome: &mut SeedOutcome,
    traces: &mut Vec<AttackTrace>,
    classes: &mut Option<usize>,
) -> Result<()> {
    let data = load_dataset(&cfg.dataset, derive_seed(seed, "data"))?;
    *classes = Some(data.classes);
    let (model, history) = train_victim(cfg, &data, seed)?;
    outcome.train_history = history;
    outcome.clean_accuracy = Some(evaluate(&model, &data.test)?.accuracy);
    save_model(&model, dir.join("model"))?;

    let quantized = quantize_model(&model, cfg.quantize.bits)?;
    outcome.quantized_accuracy = Some(evaluate(&quantized, &data.test)?.accuracy);
    save_model(&quantized, dir.join("quantized"))?;

    let threshold = 1.5 / data.classes as f64;
    for &mode in &cfg.attack.modes {
        let batch = match mode {
            AttackMode::Bdfa => {
                let dcfg = DistillConfig { seed: derive_seed(seed, "distill"), ..cfg.distill.clone() };
                let distilled = distill(&quantized, &dcfg)?;
                outcome.distill_initial_bn_loss = Some(distilled.initial_bn_loss());
                outcome.distill_final_bn_loss = Some(distilled.final_bn_loss);
                save_distilled(&distilled, dir.join("distilled"))?;
                Split::new(distilled.x, distilled.y)?
            }
            AttackMode::Bfa => real_batch(&data, cfg.attack.bfa_batch, seed)?,
        };
        let acfg = cfg.attack.config(derive_seed(seed, "attack"));
        let (_, trace) = run_attack(&quantized, &batch, Some(&data.test), mode, &acfg)?;
        trace.save(dir.join(mode.name()))?;
        outcome.modes.insert(
            mode.name().into(),
            ModeOutcome {
                final_accuracy: trace.accuracies.as_ref().and_then(|a| a.last().copied()).or(trace.baseline_accuracy),
                final_hamming: trace.final_hamming(),
                flips_to_threshold: trace.flips_to_accuracy(threshold),
                stop: trace.stop,
            },
        );
        traces.push(trace);
    }
    Ok(())
}

/// Runs every seed into `out/seed-<s>/`, then writes `aggregate.csv`,
/// `report.json` and the resolved `config.toml`. A failing seed is
/// recorded and the remaining seeds still run.
pub fn run_experiment(cfg: &ExperimentConfig, out: impl AsRef<Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(out.join("config.toml"), e))?;

    let mut outcomes = Vec::new();
    let mut traces = Vec::new();
    let mut classes = None;
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed-{seed}"));
        let mut outcome = SeedOutcome {
            seed,
            clean_accuracy: None,
            quantized_accuracy: None,
            distill_initial_bn_loss: None,
            distill_final_bn_loss: None,
            train_history: Vec::new(),
            modes: BTreeMap::new(),
            error: None,
        };
        let mut seed_traces = Vec::new();
        let result = fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).and_then(|_| run_seed(cfg, seed, &dir, &mut outcome, &mut seed_traces, &mut classes));
        if let Err(e) = result {
            log::warn!("seed {seed} failed: {e}");
            outcome.error = Some(format!("{}: {e}", e.kind()));
        }
        write_json(&dir.join("outcome.json"), &outcome)?;
        traces.extend(seed_traces);
        outcomes.push(outcome);
    }

    let network = cfg.model.architecture.name();
    let refs: Vec<&AttackTrace> = traces.iter().collect();
    let rows = aggregate(network, &cfg.dataset.name, &refs, cfg.attack.max_flips);
    write_aggregate_csv(&rows, &out.join("aggregate.csv"))?;

    let mean_flips = cfg
        .attack
        .modes
        .iter()
        .map(|m| {
            let reached: Vec<f64> =
                outcomes.iter().filter_map(|o| o.modes.get(m.name())?.flips_to_threshold).map(|f| f as f64).collect();
            let mean = (!reached.is_empty()).then(|| reached.iter().sum::<f64>() / reached.len() as f64);
            (m.name().to_string(), mean)
        })
        .collect();
    let report = ExperimentReport {
        name: cfg.name.clone(),
        network: network.into(),
        dataset: cfg.dataset.name.clone(),
        accuracy_threshold: classes.map_or(f64::NAN, |k| 1.5 / k as f64),
        seeds: outcomes,
        mean_flips_to_threshold: mean_flips,
        aggregate: rows,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}
