//! Evaluation, prediction export, fold orchestration, corpus generation and fold planning.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    ensure_unique_ids, gen_synthetic, kfold_split, load_all_features, load_features, load_labels, save_features,
    split_with_holdout, write_labels, write_predictions, FeatureMap, FeatureShape, FoldPlan, PredictionRecord,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{fold_aggregate, EvalReport};
use crate::model::{checkpoint, Model, ModelConfig};
use crate::training::{evaluate_model, predict_all};

use super::config::RunConfig;
use super::manifest::Manifest;
use super::train::{train_run, Dataset, TrainSummary, SUMMARY_FILE};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// `<output>.manifest.json`, next to a command's main output file.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<Model<f32>> {
    let (model, _) = match expected {
        Some(cfg) => checkpoint::load_for(path, cfg)?,
        None => checkpoint::load(path)?,
    };
    Ok(model)
}

fn input_shape(model: &Model<f32>) -> FeatureShape {
    FeatureShape {
        patches: model.config().n_patches,
        channels: model.config().in_channels,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub features: &'a Path,
    pub labels: &'a Path,
    /// Architecture the checkpoint must match.
    pub expected: Option<&'a ModelConfig>,
    pub batch_size: usize,
}

/// Full-set report of a checkpoint on a labelled dataset, written to `out`.
pub fn cmd_evaluate(args: &EvaluateArgs<'_>, out: &Path) -> Result<EvalReport> {
    let model = load_model(args.checkpoint, args.expected)?;
    let data = Dataset::load(args.features, args.labels, None, input_shape(&model))?;
    let report = evaluate_model(&model, &data.features[..], &data.labels, args.batch_size)?;
    write_json(out, &report)?;
    let mut manifest = Manifest::new("evaluate", args, None)?;
    manifest.inputs([args.checkpoint, args.features, args.labels])?;
    manifest.write(&manifest_path(out))?;
    Ok(report)
}

/// One prediction row per feature map, in input order, plus the raw sidecar.
pub fn cmd_predict(checkpoint: &Path, features: &Path, out: &Path, batch_size: usize) -> Result<Vec<PredictionRecord>> {
    let model = load_model(checkpoint, None)?;
    let maps = load_all_features(features, input_shape(&model))?;
    ensure_unique_ids(maps.iter().map(|m| m.id.as_str()))?;
    let records = predict_all(&model, &maps[..], batch_size)?;
    write_predictions(out, &records)?;
    let mut manifest = Manifest::new(
        "predict",
        &serde_json::json!({"checkpoint": checkpoint, "features": features, "batch_size": batch_size}),
        None,
    )?;
    manifest.inputs([checkpoint, features])?;
    manifest.write(&manifest_path(out))?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KfoldReport {
    /// Validation report of each fold's best-overall epoch.
    pub folds: Vec<EvalReport>,
    pub best_epochs: Vec<usize>,
    pub average: EvalReport,
}

/// Per-fold sub-scores and their average, one row per fold.
pub fn fold_table(report: &KfoldReport) -> String {
    let mut s = format!("{:<8} {:>7} {:>7} {:>7} {:>7}\n", "Val Set", "P_au", "P_expr", "P_va", "P_mtl");
    let rows = report
        .folds
        .iter()
        .enumerate()
        .map(|(i, r)| (format!("Fold{}", i + 1), r))
        .chain(std::iter::once(("Average".to_string(), &report.average)));
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{name:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.p_au, r.p_expr, r.p_va, r.p_mtl
        );
    }
    s
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold}"))
}

/// Trains one model per fold (all folds, or only `only_fold`, 1-based) under
/// `cfg.paths.output_dir`. Once every fold directory holds a summary, the
/// fold reports are aggregated into `kfold.json` and returned.
///
/// The fold plan comes from `cfg.paths.folds`, or is generated from the
/// feature ids with `k` folds and the training seed and saved as `folds.json`,
/// so separate processes running one fold each agree on it.
pub fn cmd_kfold(cfg: &RunConfig, k: usize, only_fold: Option<usize>) -> Result<Option<KfoldReport>> {
    cfg.validate()?;
    let p = &cfg.paths;
    let out = p.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
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
    let plan_path = match &p.folds {
        Some(path) => path.clone(),
        None => {
            let path = out.join("folds.json");
            if !path.exists() {
                kfold_split(data.features.iter().map(|f| f.id.as_str()), k, cfg.train.seed)?.save(&path)?;
            }
            path
        }
    };
    let plan = FoldPlan::load(&plan_path)?;
    plan.validate(data.features.iter().map(|f| f.id.as_str()))?;
    if let Some(f) = only_fold {
        if f == 0 || f > plan.k {
            return Err(Error::InvalidArgument(format!("--only-fold must lie in 1..={}", plan.k)));
        }
    }
    let mut manifest = Manifest::new("kfold", cfg, Some(cfg.train.seed))?;
    let inputs = [&p.features, &p.labels, &p.pseudo_labels];
    manifest.inputs(inputs.into_iter().filter_map(|x| x.as_deref()).chain([plan_path.as_path()]))?;
    manifest.write(&out.join("manifest.json"))?;

    for fold in 1..=plan.k {
        if only_fold.is_some_and(|f| f != fold) {
            continue;
        }
        println!("fold {fold}/{}", plan.k);
        let dir = fold_dir(out, fold);
        let mut fold_cfg = cfg.clone();
        fold_cfg.fold = Some(fold);
        fold_cfg.paths.folds = Some(plan_path.clone());
        fold_cfg.paths.output_dir = dir.clone();
        let (train_idx, val_idx) = data.split(&plan, fold - 1)?;
        let (train, train_labels) = data.subset(train_idx);
        let (val, val_labels) = data.subset(val_idx);
        write_json(&dir.join("config.json"), &fold_cfg)?;
        train_run(&fold_cfg, (&train, &train_labels), (&val, &val_labels), &dir)?;
    }

    if (1..=plan.k).any(|f| !fold_dir(out, f).join(SUMMARY_FILE).exists()) {
        return Ok(None);
    }
    let mut folds = Vec::with_capacity(plan.k);
    let mut best_epochs = Vec::with_capacity(plan.k);
    for f in 1..=plan.k {
        let summary = TrainSummary::load(&fold_dir(out, f))?;
        let report = summary
            .best_report()
            .ok_or_else(|| Error::InvalidArgument(format!("fold {f} recorded no epochs")))?;
        folds.push(report.clone());
        best_epochs.push(summary.best_overall.as_ref().map_or(0, |b| b.epoch));
    }
    let report = KfoldReport {
        average: fold_aggregate(&folds)?,
        folds,
        best_epochs,
    };
    write_json(&out.join("kfold.json"), &report)?;
    print!("{}", fold_table(&report));
    Ok(Some(report))
}

/// Writes `features.aff` and `labels.csv` of a generated corpus into `out_dir`.
pub fn cmd_gen_synthetic(n: usize, seed: u64, config: &SyntheticConfig, out_dir: &Path) -> Result<()> {
    let corpus = gen_synthetic(n, seed, config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let maps: Vec<FeatureMap> = corpus.all_features();
    save_features(&out_dir.join("features.aff"), config.shape, &maps)?;
    write_labels(&out_dir.join("labels.csv"), &corpus.labels)?;
    let manifest = Manifest::new(
        "gen-synthetic",
        &serde_json::json!({"n": n, "config": config}),
        Some(seed),
    )?;
    manifest.write(&out_dir.join("manifest.json"))
}

/// Ids of a label CSV, or of a feature container.
pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "csv") {
        return Ok(load_labels(path)?.into_iter().map(|l| l.id).collect());
    }
    load_features(path)?.map(|r| r.map(|m| m.id)).collect()
}

/// Video-grouped fold plan over the ids in `ids_from`; ids in `holdout`
/// (if given) form the last fold on their own.
pub fn cmd_split(ids_from: &Path, holdout: Option<&Path>, k: usize, seed: u64, out: &Path) -> Result<FoldPlan> {
    let ids = read_ids(ids_from)?;
    ensure_unique_ids(ids.iter().map(String::as_str))?;
    let plan = match holdout {
        Some(h) => {
            let held = read_ids(h)?;
            split_with_holdout(ids.iter().map(String::as_str), held.iter().map(String::as_str), k, seed)?
        }
        None => kfold_split(ids.iter().map(String::as_str), k, seed)?,
    };
    plan.save(out)?;
    let mut manifest = Manifest::new(
        "split",
        &serde_json::json!({"ids": ids_from, "holdout": holdout, "k": k}),
        Some(seed),
    )?;
    manifest.inputs(std::iter::once(ids_from).chain(holdout))?;
    manifest.write(&manifest_path(out))?;
    Ok(plan)
}
