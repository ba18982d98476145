//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub pseudo_labels: Option<PathBuf>,
    pub val_features: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
    /// Fold plan written by `split`.
    pub folds: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            features: None,
            labels: None,
            pseudo_labels: None,
            val_features: None,
            val_labels: None,
            folds: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub train: TrainConfig,
    /// Held-out fold (1-based) when `paths.folds` is set.
    pub fold: Option<usize>,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.schedule()?;
        if self.fold == Some(0) {
            return Err(Error::InvalidArgument("folds are numbered from 1".into()));
        }
        Ok(())
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("missing {what} path")))
    }
}

/// Flags mirroring [`RunConfig`]; each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub pseudo_labels: Option<PathBuf>,
    #[arg(long)]
    pub val_features: Option<PathBuf>,
    #[arg(long)]
    pub val_labels: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long = "out")]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub warmup_epochs: Option<u32>,
    #[arg(long = "lr")]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_patches: Option<usize>,
    #[arg(long)]
    pub in_channels: Option<usize>,
    #[arg(long)]
    pub conv_hidden: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub ffn_hidden: Option<usize>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn set_opt<T: Clone>(slot: &mut Option<T>, value: &Option<T>) {
    if value.is_some() {
        *slot = value.clone();
    }
}

impl RunArgs {
    /// Config file (or defaults) with every given flag applied, validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::default(),
        };
        let p = &mut cfg.paths;
        set_opt(&mut p.features, &self.features);
        set_opt(&mut p.labels, &self.labels);
        set_opt(&mut p.pseudo_labels, &self.pseudo_labels);
        set_opt(&mut p.val_features, &self.val_features);
        set_opt(&mut p.val_labels, &self.val_labels);
        set_opt(&mut p.folds, &self.folds);
        set(&mut p.output_dir, &self.output_dir);
        set_opt(&mut cfg.fold, &self.fold);
        let t = &mut cfg.train;
        set(&mut t.batch_size, &self.batch_size);
        set(&mut t.epochs, &self.epochs);
        set(&mut t.warmup_epochs, &self.warmup_epochs);
        set(&mut t.base_lr, &self.base_lr);
        set(&mut t.seed, &self.seed);
        let m = &mut cfg.model;
        set(&mut m.n_patches, &self.n_patches);
        set(&mut m.in_channels, &self.in_channels);
        set(&mut m.conv_hidden, &self.conv_hidden);
        set(&mut m.d_model, &self.d_model);
        set(&mut m.n_heads, &self.n_heads);
        set(&mut m.ffn_hidden, &self.ffn_hidden);
        set(&mut m.n_blocks, &self.n_blocks);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.epochs, 6);
        assert_eq!(cfg.train.warmup_epochs, 5);
        assert_eq!(cfg.train.base_lr, 0.001);
        cfg.validate().unwrap();
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "fold = 2\n[train]\nepochs = 3\nwarmup_epochs = 1\nseed = 9\n[model]\nd_model = 32\n").unwrap();
        let args = RunArgs {
            config: Some(path),
            seed: Some(4),
            ..RunArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.seed, cfg.fold), (3, 4, Some(2)));
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.train.batch_size, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nepoch = 3\n").unwrap();
        assert!(RunConfig::from_toml_file(&path).is_err());
    }

    #[test]
    fn zero_epochs_is_nothing_to_train() {
        let args = RunArgs {
            epochs: Some(0),
            ..RunArgs::default()
        };
        assert!(args.resolve().unwrap_err().to_string().contains("nothing to train"));
    }
}
