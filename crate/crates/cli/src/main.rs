use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bdfa::attack::{run_attack, AttackMode};
use bdfa::distill::{distill, history_csv, load_distilled, save_distilled, DistillConfig};
use bdfa::harness::{
    derive_seed, evaluate, load_dataset, real_batch, run_experiment, train_victim, Dataset, ExperimentConfig, Split,
};
use bdfa::model::{load_model, save_model};
use bdfa::quant::{attackable_bits, quantize_model};
use bdfa::report::report_dir;
use bdfa::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bdfa", version, about = "Bit-flip attacks on quantized networks, with or without real data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment seed; single stages default to the first seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment config (TOML); its sections supply stage defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Also write the command's main data output to standard output.
    #[arg(long, global = true)]
    stdout: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a float victim on the configured dataset.
    Train {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Quantize a trained model to signed fixed-point codes.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bits: Option<u8>,
    },
    /// Synthesize an input batch from a model's BN statistics.
    Distill {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run the progressive bit search on a quantized model.
    Attack {
        #[arg(long, value_parser = ["bdfa", "bfa"])]
        mode: String,
        #[arg(long)]
        model: PathBuf,
        /// Distilled batch directory (bdfa only).
        #[arg(long)]
        distilled: Option<PathBuf>,
        #[arg(long)]
        max_flips: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        accuracy_floor: Option<f64>,
        /// Skip held-out accuracy; the trace then records losses only.
        #[arg(long)]
        no_eval: bool,
    },
    /// Held-out accuracy and loss of a model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Full pipeline over all configured seeds, followed by a report.
    Experiment,
    /// Render an SVG plot and a markdown table from an experiment or trace directory.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| usage("--out is required"))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn emit(common: &Common, text: &str) -> Result<()> {
    if common.stdout {
        let mut out = std::io::stdout().lock();
        out.write_all(text.as_bytes()).map_err(|e| Error::Io { path: "<stdout>".into(), source: e })?;
    }
    Ok(())
}

fn json(value: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seeds[0]);
    let data = |cfg: &ExperimentConfig| -> Result<Dataset> { load_dataset(&cfg.dataset, derive_seed(seed, "data")) };

    match cli.command {
        Command::Train { dataset, epochs } => {
            let out = require_out(common)?;
            if let Some(name) = dataset {
                cfg.dataset.name = name;
            }
            if let Some(epochs) = epochs {
                cfg.train.epochs = epochs;
            }
            cfg.validate()?;
            let data = data(&cfg)?;
            let (model, history) = train_victim(&cfg, &data, seed)?;
            let acc = evaluate(&model, &data.test)?;
            log::info!("trained {}: test accuracy {:.4}", model.name, acc.accuracy);
            save_model(&model, out)?;
            let text = json(&history)?;
            write_file(&out.join("history.json"), &text)?;
            emit(common, &text)
        }
        Command::Quantize { model, bits } => {
            let out = require_out(common)?;
            let bits = bits.unwrap_or(cfg.quantize.bits);
            let q = quantize_model(&load_model(&model)?, bits)?;
            save_model(&q, out)?;
            let summary = serde_json::json!({ "bits": bits, "attackable_bits": attackable_bits(&q) });
            emit(common, &json(&summary)?)
        }
        Command::Distill { model, iterations, batch_size } => {
            let out = require_out(common)?;
            let model = load_model(&model)?;
            let dcfg = DistillConfig {
                iterations: iterations.unwrap_or(cfg.distill.iterations),
                batch_size: batch_size.unwrap_or(cfg.distill.batch_size),
                seed: derive_seed(seed, "distill"),
                ..cfg.distill.clone()
            };
            let batch = distill(&model, &dcfg)?;
            log::info!("bn_loss {:.6} -> {:.6}", batch.initial_bn_loss(), batch.final_bn_loss);
            save_distilled(&batch, out)?;
            emit(common, &history_csv(&batch.history))
        }
        Command::Attack { mode, model, distilled, max_flips, k, accuracy_floor, no_eval } => {
            let mode: AttackMode = mode.parse()?;
            let mut section = cfg.attack.clone();
            section.max_flips = max_flips.unwrap_or(section.max_flips);
            section.k = k.unwrap_or(section.k);
            section.accuracy_floor = accuracy_floor.or(section.accuracy_floor);
            let acfg = section.config(derive_seed(seed, "attack"));
            acfg.validate()?;
            let out = require_out(common)?;
            let model = load_model(&model)?;

            let needs_data = mode == AttackMode::Bfa || !no_eval;
            let dataset = if needs_data { Some(data(&cfg)?) } else { None };
            let batch = match mode {
                AttackMode::Bdfa => {
                    let dir = distilled.ok_or_else(|| usage("--distilled is required for --mode bdfa"))?;
                    let d = load_distilled(dir)?;
                    Split::new(d.x, d.y)?
                }
                AttackMode::Bfa => real_batch(dataset.as_ref().unwrap(), section.bfa_batch, seed)?,
            };
            let eval = if no_eval { None } else { dataset.as_ref().map(|d| &d.test) };
            let (_, trace) = run_attack(&model, &batch, eval, mode, &acfg)?;
            log::info!("{} flips committed, stop: {:?}", trace.records.len(), trace.stop);
            trace.save(out)?;
            emit(common, &trace.to_csv())
        }
        Command::Evaluate { model } => {
            if common.out.is_none() && !common.stdout {
                return Err(usage("evaluate needs --out or --stdout"));
            }
            let model = load_model(&model)?;
            let data = data(&cfg)?;
            let r = evaluate(&model, &data.test)?;
            let text = json(&serde_json::json!({
                "dataset": data.name,
                "samples": data.test.len(),
                "accuracy": r.accuracy,
                "loss": r.loss,
            }))?;
            if let Some(out) = &common.out {
                write_file(&out.join("eval.json"), &text)?;
            }
            emit(common, &text)
        }
        Command::Experiment => {
            let out = require_out(common)?;
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            let report = run_experiment(&cfg, out)?;
            let failed: Vec<String> = report
                .seeds
                .iter()
                .filter_map(|s| s.error.as_ref().map(|e| format!("seed {}: {e}", s.seed)))
                .collect();
            if !report.aggregate.is_empty() {
                let r = report_dir(out)?;
                write_file(&out.join("report.svg"), &r.svg)?;
                write_file(&out.join("report.md"), &r.markdown)?;
                emit(common, &r.markdown)?;
            }
            if !failed.is_empty() {
                return Err(Error::Failed(format!(
                    "{} of {} seeds failed; {}",
                    failed.len(),
                    report.seeds.len(),
                    failed.join("; ")
                )));
            }
            Ok(())
        }
        Command::Report { dir } => {
            let out = common.out.clone().unwrap_or_else(|| dir.clone());
            let r = report_dir(&dir)?;
            write_file(&out.join("report.svg"), &r.svg)?;
            write_file(&out.join("report.md"), &r.markdown)?;
            emit(common, &r.markdown)
        }
    }
}
