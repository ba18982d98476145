//! Training runs: a checkpoint and validation report per epoch, plus the
//! best-epoch bookkeeping the ensemble strategies select from.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    compute_class_weights, ensure_unique_ids, load_all_features, load_labels, merge_pseudo_labels, FeatureMap,
    FeatureShape, FoldPlan, LabelRecord,
};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, Task};
use crate::model::{checkpoint, Model};
use crate::training::{align_labels, evaluate_model, FeatureSource, Subset, Trainer};

use super::config::RunConfig;
use super::manifest::Manifest;

/// Feature maps with index-aligned labels.
pub struct Dataset {
    pub features: Vec<FeatureMap>,
    pub labels: Vec<LabelRecord>,
}

impl Dataset {
    pub fn load(features: &Path, labels: &Path, pseudo: Option<&Path>, shape: FeatureShape) -> Result<Self> {
        let features = load_all_features(features, shape)?;
        ensure_unique_ids(features.iter().map(|f| f.id.as_str()))?;
        let mut records = load_labels(labels)?;
        if let Some(p) = pseudo {
            let (merged, warnings) = merge_pseudo_labels(&records, &load_labels(p)?);
            for w in warnings {
                eprintln!("warning: {w}");
            }
            records = merged;
        }
        let labels = align_labels(&features[..], &records)?;
        Ok(Self { features, labels })
    }

    /// Indices of the samples outside and inside fold `fold` (0-based).
    pub fn split(&self, plan: &FoldPlan, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= plan.k {
            return Err(Error::InvalidArgument(format!("fold {} out of range 1..={}", fold + 1, plan.k)));
        }
        plan.validate(self.features.iter().map(|f| f.id.as_str()))?;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, f) in self.features.iter().enumerate() {
            if plan.fold_of(&f.id) == Some(fold) {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument(format!("fold {} leaves an empty split", fold + 1)));
        }
        Ok((train, val))
    }

    pub fn subset(&self, indices: Vec<usize>) -> (Subset<'_, [FeatureMap]>, Vec<LabelRecord>) {
        let labels = indices.iter().map(|&i| self.labels[i].clone()).collect();
        (
            Subset {
                source: &self.features[..],
                indices,
            },
            labels,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// File name inside the run directory.
    pub checkpoint: String,
    pub mean_loss: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub checkpoint: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPerTask {
    pub au: BestEpoch,
    pub expr: BestEpoch,
    pub va: BestEpoch,
}

impl BestPerTask {
    pub fn get(&self, task: Task) -> &BestEpoch {
        match task {
            Task::Au => &self.au,
            Task::Expr => &self.expr,
            Task::Va => &self.va,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_overall: Option<BestEpoch>,
    pub best_per_task: Option<BestPerTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
}

pub const SUMMARY_FILE: &str = "summary.json";

impl TrainSummary {
    fn new(epochs: Vec<EpochRecord>, diverged: Option<String>) -> Self {
        let best = |score: &dyn Fn(&EvalReport) -> f64| best_epoch(&epochs, score);
        let best_overall = best(&|r| r.p_mtl);
        let best_per_task = match (
            best(&|r| r.task_score(Task::Au)),
            best(&|r| r.task_score(Task::Expr)),
            best(&|r| r.task_score(Task::Va)),
        ) {
            (Some(au), Some(expr), Some(va)) => Some(BestPerTask { au, expr, va }),
            _ => None,
        };
        Self {
            epochs,
            best_overall,
            best_per_task,
            diverged,
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(SUMMARY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(SUMMARY_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    /// Report of the epoch with the best overall score.
    pub fn best_report(&self) -> Option<&EvalReport> {
        let best = self.best_overall.as_ref()?;
        self.epochs.iter().find(|e| e.epoch == best.epoch).map(|e| &e.report)
    }
}

/// Highest-scoring epoch; ties go to the earlier epoch.
pub fn best_epoch(epochs: &[EpochRecord], score: impl Fn(&EvalReport) -> f64) -> Option<BestEpoch> {
    let mut best: Option<BestEpoch> = None;
    for e in epochs {
        let s = score(&e.report);
        if best.as_ref().is_none_or(|b| s > b.score) {
            best = Some(BestEpoch {
                epoch: e.epoch,
                checkpoint: e.checkpoint.clone(),
                score: s,
            });
        }
    }
    best
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.afck")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Trains on `train`, validating on `val` after every epoch, writing into `out_dir`.
pub fn train_run<S, V>(
    cfg: &RunConfig,
    train: (&S, &[LabelRecord]),
    val: (&V, &[LabelRecord]),
    out_dir: &Path,
) -> Result<TrainSummary>
where
    S: FeatureSource + ?Sized,
    V: FeatureSource + ?Sized,
{
    let (source, labels) = train;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let weights = compute_class_weights(labels);
    let model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), weights)?;
    let warmup = cfg.train.warmup_epochs;
    println!(
        "effective lr at warmup end (epoch {warmup}): {}",
        trainer.schedule().lr_at(f64::from(warmup))
    );

    let steps_path = out_dir.join("steps.jsonl");
    let file = File::create(&steps_path).map_err(|e| Error::io(&steps_path, e))?;
    let mut steps_log = BufWriter::new(file);
    let mut records = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let mut log_err = None;
        let outcome = trainer.run_epoch(source, labels, epoch, |s| {
            let line = serde_json::to_string(s).expect("step stats serialize");
            if let Err(e) = writeln!(steps_log, "{line}") {
                log_err.get_or_insert(e);
            }
        });
        if let Some(e) = log_err {
            return Err(Error::io(&steps_path, e));
        }
        let stats = match outcome {
            Ok(stats) => stats,
            Err(Error::Divergence(msg)) => {
                steps_log.flush().map_err(|e| Error::io(&steps_path, e))?;
                TrainSummary::new(records, Some(msg.clone())).write(out_dir)?;
                let kept = match epoch {
                    0 => "no checkpoint was written".to_string(),
                    e => format!("last good checkpoint {}", out_dir.join(checkpoint_name(e as usize)).display()),
                };
                return Err(Error::Divergence(format!("{msg}; {kept}")));
            }
            Err(e) => return Err(e),
        };
        let n = epoch as usize + 1;
        let name = checkpoint_name(n);
        checkpoint::save(&out_dir.join(&name), &trainer.model, cfg.train.seed, Some(n))?;
        let report = evaluate_model(&trainer.model, val.0, val.1, cfg.train.batch_size)?;
        write_json(&out_dir.join(format!("epoch_{n:03}.report.json")), &report)?;
        let mean_loss = stats.iter().map(|s| s.loss).sum::<f64>() / stats.len() as f64;
        println!(
            "epoch {n}/{}  loss {mean_loss:.4}  P_au {:.4}  P_expr {:.4}  P_va {:.4}  P_mtl {:.4}",
            cfg.train.epochs, report.p_au, report.p_expr, report.p_va, report.p_mtl
        );
        records.push(EpochRecord {
            epoch: n,
            checkpoint: name,
            mean_loss,
            report,
        });
    }
    steps_log.flush().map_err(|e| Error::io(&steps_path, e))?;
    let summary = TrainSummary::new(records, None);
    summary.write(out_dir)?;
    Ok(summary)
}

fn existing<'a>(paths: impl IntoIterator<Item = &'a Option<PathBuf>>) -> Vec<&'a Path> {
    paths.into_iter().filter_map(|p| p.as_deref()).collect()
}

/// `train`: loads the data named by `cfg`, picks the validation split and runs.
///
/// Validation uses, in order of preference: the held-out fold of a fold plan,
/// a separate validation set, or the training set itself.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let p = &cfg.paths;
    let shape = FeatureShape {
        patches: cfg.model.n_patches,
        channels: cfg.model.in_channels,
    };
    let data = Dataset::load(
        cfg.require(&p.features, "features")?,
        cfg.require(&p.labels, "labels")?,
        p.pseudo_labels.as_deref(),
        shape,
    )?;
    let out = p.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), cfg)?;
    let mut manifest = Manifest::new("train", cfg, Some(cfg.train.seed))?;
    manifest.inputs(existing([
        &p.features,
        &p.labels,
        &p.pseudo_labels,
        &p.val_features,
        &p.val_labels,
        &p.folds,
    ]))?;
    manifest.write(&out.join("manifest.json"))?;

    if let Some(folds) = &p.folds {
        let fold = cfg
            .fold
            .ok_or_else(|| Error::InvalidArgument("a fold plan needs --fold".into()))?;
        let (train_idx, val_idx) = data.split(&FoldPlan::load(folds)?, fold - 1)?;
        let (train, train_labels) = data.subset(train_idx);
        let (val, val_labels) = data.subset(val_idx);
        return train_run(cfg, (&train, &train_labels), (&val, &val_labels), out);
    }
    if let Some(vf) = &p.val_features {
        let val = Dataset::load(vf, cfg.require(&p.val_labels, "validation labels")?, None, shape)?;
        return train_run(
            cfg,
            (&data.features[..], &data.labels),
            (&val.features[..], &val.labels),
            out,
        );
    }
    eprintln!("note: no validation set given; reporting on the training set");
    train_run(
        cfg,
        (&data.features[..], &data.labels),
        (&data.features[..], &data.labels),
        out,
    )
}
