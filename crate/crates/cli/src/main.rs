use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use seer_core::harness::data::{encode_dataset, load_dataset, save_dataset, split_dataset};
use seer_core::harness::metrics::{dump_features, evaluate_encoded};
use seer_core::harness::sweep::{sweep, sweep_to_csv, SweepParam};
use seer_core::harness::synth::make_synthetic;
use seer_core::harness::train::train_encoded;
use seer_core::harness::{AblationFlag, HyperParams};
use seer_core::model::SeerModel;
use seer_core::numerics::reports_to_csv;
use seer_core::verify::gradient_suite;

#[derive(Parser)]
#[command(name = "seer", about = "Multimodal fake-news detection harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file mirroring the hyperparameter field names; defaults
    /// apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<HyperParams> {
        match &self.config {
            None => Ok(HyperParams::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                Ok(HyperParams::from_json(&text)?)
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it to disk.
    Train {
        /// Dataset in JSONL form.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Ablation switches applied on top of the config file.
        #[arg(long = "ablation")]
        ablation: Vec<String>,
        /// Where to write the trained model (JSON).
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
        /// Optional precomputed-embedding cache (JSONL).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Write test-split metrics to this CSV instead of stdout.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Evaluate a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Write metrics to this CSV instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep lambda or k_experts over a value list.
    Sweep {
        /// "lambda" or "k_experts".
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 0,0.25,0.5.
        #[arg(long)]
        values: String,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        emotion_strength: f64,
        #[arg(long)]
        alignment_strength: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Model dim for the verification models (even, at least 4).
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write the report CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-sample feature vectors as long-format CSV.
    DumpFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_cache(
    path: Option<&Path>,
    hp: &HyperParams,
) -> Result<Option<std::collections::BTreeMap<String, seer_core::encoders::EmbeddingBundle>>> {
    match path {
        None => Ok(None),
        Some(p) => Ok(Some(seer_core::encoders::load_cache_map(p, hp)?)),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            data,
            config,
            ablation,
            out,
            embeddings,
            metrics_out,
        } => {
            let mut hp = config.load()?;
            for flag in &ablation {
                hp.ablation.insert(flag.parse::<AblationFlag>()?);
            }
            hp.validate()?;
            let items = load_dataset(&data, &hp)?;
            if items.is_empty() {
                bail!("dataset {} is empty", data.display());
            }
            let cache = load_cache(embeddings.as_deref(), &hp)?;
            let (train_items, val_items, test_items) = split_dataset(&items, &hp);
            let train_samples: Vec<_> = encode_dataset(&train_items, &hp, cache.as_ref())?
                .into_iter()
                .zip(train_items.iter().map(|i| i.label))
                .collect();
            let model = SeerModel::init(&hp)?;
            let outcome = train_encoded(model, &train_samples, &hp)?;
            eprintln!(
                "trained {} epochs on {} samples; loss {:.4} -> {:.4}",
                hp.epochs,
                train_items.len(),
                outcome.epoch_losses.first().copied().unwrap_or(f64::NAN),
                outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
            );
            if !val_items.is_empty() {
                let val_samples: Vec<_> = encode_dataset(&val_items, &hp, cache.as_ref())?
                    .into_iter()
                    .zip(val_items.iter().map(|i| i.label))
                    .collect();
                let val = evaluate_encoded(&outcome.model, &val_samples)?;
                eprintln!("val accuracy {:.4}", val.accuracy);
            }
            let eval_items = if test_items.is_empty() {
                eprintln!("no test split; reporting metrics on the training data");
                &train_items
            } else {
                &test_items
            };
            let eval_samples: Vec<_> = encode_dataset(eval_items, &hp, cache.as_ref())?
                .into_iter()
                .zip(eval_items.iter().map(|i| i.label))
                .collect();
            let metrics = evaluate_encoded(&outcome.model, &eval_samples)?;
            outcome.model.save(&out)?;
            eprintln!("model written to {}", out.display());
            emit(metrics_out.as_deref(), &metrics.to_csv())?;
        }
        Command::Eval {
            model,
            data,
            embeddings,
            out,
        } => {
            let model = SeerModel::load(&model)?;
            let items = load_dataset(&data, &model.hp)?;
            let cache = load_cache(embeddings.as_deref(), &model.hp)?;
            // evaluate the test split when the file carries one
            let (_, _, test_items) = split_dataset(&items, &model.hp);
            let eval_items = if items.iter().any(|i| i.split.is_some()) && !test_items.is_empty()
            {
                test_items
            } else {
                items
            };
            if eval_items.is_empty() {
                bail!("nothing to evaluate in {}", data.display());
            }
            let samples: Vec<_> = encode_dataset(&eval_items, &model.hp, cache.as_ref())?
                .into_iter()
                .zip(eval_items.iter().map(|i| i.label))
                .collect();
            let metrics = evaluate_encoded(&model, &samples)?;
            emit(out.as_deref(), &metrics.to_csv())?;
        }
        Command::Sweep {
            param,
            values,
            data,
            config,
            out,
        } => {
            let hp = config.load()?;
            let param: SweepParam = param.parse()?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>().context("parsing sweep values"))
                .collect::<Result<_>>()?;
            let items = load_dataset(&data, &hp)?;
            let rows = sweep(param, &values, &hp, &items)?;
            emit(out.as_deref(), &sweep_to_csv(param, &rows))?;
        }
        Command::Synth {
            n,
            emotion_strength,
            alignment_strength,
            out,
            seed,
            config,
        } => {
            let hp = config.load()?;
            let items = make_synthetic(n, emotion_strength, alignment_strength, seed, &hp)?;
            save_dataset(&out, &items)?;
            eprintln!("wrote {} items to {}", items.len(), out.display());
        }
        Command::Gradcheck {
            dim,
            tol,
            epsilon,
            heads,
            seed,
            out,
        } => {
            let reports = gradient_suite(dim, heads, seed, epsilon, tol)?;
            let failed = reports.iter().filter(|r| !r.pass).count();
            emit(out.as_deref(), &reports_to_csv(&reports))?;
            if failed > 0 {
                bail!("{failed} of {} parameter tensors failed", reports.len());
            }
            eprintln!("all {} parameter tensors verified", reports.len());
        }
        Command::DumpFeatures {
            model,
            data,
            out,
            embeddings,
        } => {
            let model = SeerModel::load(&model)?;
            let items = load_dataset(&data, &model.hp)?;
            if items.is_empty() {
                bail!("dataset {} is empty", data.display());
            }
            let cache = load_cache(embeddings.as_deref(), &model.hp)?;
            let bundles = encode_dataset(&items, &model.hp, cache.as_ref())?;
            let csv = dump_features(&model, &items, &bundles)?;
            std::fs::write(&out, csv)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("features written to {}", out.display());
        }
    }
    Ok(())
}
