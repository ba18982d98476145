//! Command-line surface of the `affect-mtl` binary.

mod commands;
pub mod config;
pub mod ensemble;
pub mod manifest;
pub mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::data::{write_predictions, FeatureShape, SyntheticConfig};
use crate::error::{Error, Result};

pub use commands::{
    cmd_evaluate, cmd_gen_synthetic, cmd_kfold, cmd_predict, cmd_split, fold_dir, fold_table, manifest_path,
    read_ids, EvaluateArgs, KfoldReport,
};
pub use config::{Paths, RunArgs, RunConfig};
pub use ensemble::{average, combine, concat_tasks, run_spec, EnsembleSpec, Strategy};
pub use manifest::Manifest;
pub use train::{best_epoch, cmd_train, train_run, BestEpoch, Dataset, EpochRecord, TrainSummary};

#[derive(Debug, Parser)]
#[command(name = "affect-mtl", version, about = "Multi-task affect recognition over backbone features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model, validating after every epoch.
    Train(RunArgs),
    /// Score a checkpoint on a labelled dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Run configuration whose model section the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a prediction CSV and its raw sidecar.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate: one training run per fold, then the averaged table.
    Kfold {
        #[command(flatten)]
        run: RunArgs,
        /// Folds when no plan file is given.
        #[arg(long, default_value_t = 6)]
        k: usize,
        /// Train only this fold (1-based); aggregation happens once all folds exist.
        #[arg(long)]
        only_fold: Option<usize>,
    },
    /// Combine member predictions under one submission strategy.
    Ensemble(EnsembleArgs),
    /// Generate a synthetic corpus with a hidden linear teacher.
    GenSynthetic {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        sentinel_fraction: f64,
        #[arg(long, default_value_t = 8)]
        n_videos: usize,
        #[arg(long, default_value_t = 16)]
        latent_dim: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a video-grouped fold plan.
    Split {
        /// Label CSV or feature container listing the ids.
        #[arg(long)]
        ids: PathBuf,
        /// Ids that form the last fold on their own.
        #[arg(long)]
        holdout: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
pub struct EnsembleArgs {
    /// JSON ensemble spec; flags below extend it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub strategy: Option<Strategy>,
    /// Whole-output member (prediction CSV, raw file or checkpoint); repeatable.
    #[arg(long = "member")]
    pub members: Vec<PathBuf>,
    #[arg(long)]
    pub au: Vec<PathBuf>,
    #[arg(long)]
    pub expr: Vec<PathBuf>,
    #[arg(long)]
    pub va: Vec<PathBuf>,
    /// Training run directories to pick best checkpoints from; repeatable.
    #[arg(long = "run")]
    pub runs: Vec<PathBuf>,
    /// Features the checkpoint members are run over.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

impl EnsembleArgs {
    pub fn resolve(&self) -> Result<EnsembleSpec> {
        let mut spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)?
            }
            None => EnsembleSpec::default(),
        };
        if self.strategy.is_some() {
            spec.strategy = self.strategy;
        }
        if self.features.is_some() {
            spec.features = self.features.clone();
        }
        if !self.runs.is_empty() {
            let features = spec
                .features
                .clone()
                .ok_or_else(|| Error::Ensemble("--run needs --features".into()))?;
            spec = EnsembleSpec::from_runs(spec.strategy()?, &self.runs, features)?;
        }
        spec.members.extend(self.members.iter().cloned());
        spec.au.extend(self.au.iter().cloned());
        spec.expr.extend(self.expr.iter().cloned());
        spec.va.extend(self.va.iter().cloned());
        spec.validate()?;
        Ok(spec)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let summary = cmd_train(&args.resolve()?)?;
            if let Some(best) = &summary.best_overall {
                println!("best epoch {} ({}), P_mtl {:.4}", best.epoch, best.checkpoint, best.score);
            }
        }
        Command::Evaluate {
            checkpoint,
            features,
            labels,
            config,
            batch_size,
            out,
        } => {
            let cfg = config.as_deref().map(RunConfig::from_toml_file).transpose()?;
            let args = EvaluateArgs {
                checkpoint: &checkpoint,
                features: &features,
                labels: &labels,
                expected: cfg.as_ref().map(|c| &c.model),
                batch_size,
            };
            print_json(&cmd_evaluate(&args, &out)?)?;
        }
        Command::Predict {
            checkpoint,
            features,
            batch_size,
            out,
        } => {
            let records = cmd_predict(&checkpoint, &features, &out, batch_size)?;
            println!("wrote {} predictions to {}", records.len(), out.display());
        }
        Command::Kfold { run, k, only_fold } => {
            if cmd_kfold(&run.resolve()?, k, only_fold)?.is_none() {
                println!("waiting for the remaining folds before aggregating");
            }
        }
        Command::Ensemble(args) => {
            let spec = args.resolve()?;
            let records = run_spec(&spec)?;
            write_predictions(&args.out, &records)?;
            let mut manifest = Manifest::new("ensemble", &spec, None)?;
            let files = spec.members.iter().chain(&spec.au).chain(&spec.expr).chain(&spec.va);
            let mut inputs: Vec<PathBuf> = files.cloned().collect();
            inputs.extend(spec.features.clone());
            inputs.sort();
            inputs.dedup();
            manifest.inputs(inputs.iter().map(|p| p.as_path()).filter(|p| p.is_file()))?;
            manifest.write(&manifest_path(&args.out))?;
            println!("wrote {} predictions to {}", records.len(), args.out.display());
        }
        Command::GenSynthetic {
            n,
            seed,
            sentinel_fraction,
            n_videos,
            latent_dim,
            noise_std,
            patches,
            channels,
            out,
        } => {
            let default = FeatureShape::default();
            let config = SyntheticConfig {
                shape: FeatureShape {
                    patches: patches.unwrap_or(default.patches),
                    channels: channels.unwrap_or(default.channels),
                },
                latent_dim,
                n_videos,
                sentinel_fraction,
                noise_std,
            };
            cmd_gen_synthetic(n, seed, &config, &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Split {
            ids,
            holdout,
            k,
            seed,
            out,
        } => {
            let plan = cmd_split(&ids, holdout.as_deref(), k, seed, &out)?;
            println!("fold sizes {:?}", plan.fold_sizes());
        }
    }
    Ok(())
}
