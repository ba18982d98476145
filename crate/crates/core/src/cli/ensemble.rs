//! Submission strategies. Members are averaged on raw logits and VA values;
//! thresholds and arg-max are applied only when the CSV is written.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::data::{load_all_features, read_raw_predictions, raw_sidecar_path, FeatureShape, PredictionRecord};
use crate::error::{Error, Result};
use crate::metrics::Task;
use crate::model::checkpoint;
use crate::training::predict_all;

use super::train::TrainSummary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    BestOverall,
    BestPerTask,
    KfoldBestOverall,
    KfoldBestPerTask,
    Meta,
}

impl Strategy {
    /// Members per list: whole-output members, or members per task.
    pub fn member_count(self) -> usize {
        match self {
            Strategy::BestOverall | Strategy::BestPerTask => 1,
            Strategy::KfoldBestOverall | Strategy::KfoldBestPerTask => 6,
            Strategy::Meta => 4,
        }
    }

    pub fn per_task(self) -> bool {
        matches!(self, Strategy::BestPerTask | Strategy::KfoldBestPerTask)
    }
}

/// Member artifacts of one ensemble. Each entry is a prediction CSV (read
/// through its raw sidecar), a raw `.raw` file, or an `.afck` checkpoint,
/// which is run over `features`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    pub strategy: Option<Strategy>,
    /// Whole-output members (best-overall, kfold-best-overall, meta).
    pub members: Vec<PathBuf>,
    /// Per-task members (best-per-task, kfold-best-per-task).
    pub au: Vec<PathBuf>,
    pub expr: Vec<PathBuf>,
    pub va: Vec<PathBuf>,
    pub features: Option<PathBuf>,
}

impl EnsembleSpec {
    pub fn strategy(&self) -> Result<Strategy> {
        self.strategy
            .ok_or_else(|| Error::Ensemble("no strategy given".into()))
    }

    /// Checks that the member lists match the strategy.
    pub fn validate(&self) -> Result<()> {
        let s = self.strategy()?;
        let want = s.member_count();
        let count = |what: &str, list: &[PathBuf]| {
            if list.len() == want {
                Ok(())
            } else {
                Err(Error::Ensemble(format!(
                    "{s:?} needs {want} {what} member(s), got {}",
                    list.len()
                )))
            }
        };
        let whole = [("whole-output", &self.members)];
        let tasks = [("au", &self.au), ("expr", &self.expr), ("va", &self.va)];
        let (used, unused) = if s.per_task() {
            (&tasks[..], &whole[..])
        } else {
            (&whole[..], &tasks[..])
        };
        for (name, list) in used {
            count(name, list)?;
        }
        if let Some((name, _)) = unused.iter().find(|(_, l)| !l.is_empty()) {
            return Err(Error::Ensemble(format!("{s:?} takes no {name} members")));
        }
        Ok(())
    }

    /// Fills members with checkpoints chosen from training-run summaries: one
    /// run directory for the single-run strategies, six fold directories for
    /// the fold strategies.
    pub fn from_runs(strategy: Strategy, runs: &[PathBuf], features: PathBuf) -> Result<Self> {
        if strategy == Strategy::Meta {
            return Err(Error::Ensemble(
                "meta combines prediction files of the other four strategies".into(),
            ));
        }
        if runs.len() != strategy.member_count() {
            return Err(Error::Ensemble(format!(
                "{strategy:?} needs {} run directories, got {}",
                strategy.member_count(),
                runs.len()
            )));
        }
        let mut spec = Self {
            strategy: Some(strategy),
            features: Some(features),
            ..Self::default()
        };
        for dir in runs {
            let summary = TrainSummary::load(dir)?;
            let missing = || Error::Ensemble(format!("{}: run recorded no epochs", dir.display()));
            if strategy.per_task() {
                let best = summary.best_per_task.as_ref().ok_or_else(missing)?;
                spec.au.push(dir.join(&best.au.checkpoint));
                spec.expr.push(dir.join(&best.expr.checkpoint));
                spec.va.push(dir.join(&best.va.checkpoint));
            } else {
                let best = summary.best_overall.as_ref().ok_or_else(missing)?;
                spec.members.push(dir.join(&best.checkpoint));
            }
        }
        Ok(spec)
    }
}

fn check_same_ids(first: &[PredictionRecord], other: &[PredictionRecord]) -> Result<HashMap<String, usize>> {
    let index: HashMap<String, usize> = other.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
    if index.len() != other.len() {
        return Err(Error::Ensemble("duplicate ids in a member".into()));
    }
    if other.len() != first.len() || first.iter().any(|r| !index.contains_key(&r.id)) {
        return Err(Error::Ensemble(format!(
            "members cover different id sets ({} vs {} records)",
            first.len(),
            other.len()
        )));
    }
    Ok(index)
}

/// Element-wise mean of the members' raw outputs, in the first member's id order.
pub fn average(members: &[Vec<PredictionRecord>]) -> Result<Vec<PredictionRecord>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Ensemble("no members to average".into()))?;
    let indices = members
        .iter()
        .map(|m| check_same_ids(first, m))
        .collect::<Result<Vec<_>>>()?;
    let n = members.len() as f64;
    let out = first
        .iter()
        .map(|r| {
            let rows: Vec<&PredictionRecord> = members
                .iter()
                .zip(&indices)
                .map(|(m, idx)| &m[idx[&r.id]])
                .collect();
            let mean = |get: &dyn Fn(&PredictionRecord) -> f32| {
                (rows.iter().map(|r| f64::from(get(r))).sum::<f64>() / n) as f32
            };
            PredictionRecord {
                id: r.id.clone(),
                au_logits: std::array::from_fn(|j| mean(&|r| r.au_logits[j])),
                expr_logits: std::array::from_fn(|k| mean(&|r| r.expr_logits[k])),
                va: std::array::from_fn(|c| mean(&|r| r.va[c])),
            }
        })
        .collect();
    Ok(out)
}

/// AU outputs from `au`, expression from `expr`, VA from `va`, in `au`'s order.
pub fn concat_tasks(
    au: &[PredictionRecord],
    expr: &[PredictionRecord],
    va: &[PredictionRecord],
) -> Result<Vec<PredictionRecord>> {
    let ei = check_same_ids(au, expr)?;
    let vi = check_same_ids(au, va)?;
    Ok(au
        .iter()
        .map(|r| PredictionRecord {
            id: r.id.clone(),
            au_logits: r.au_logits,
            expr_logits: expr[ei[&r.id]].expr_logits,
            va: va[vi[&r.id]].va,
        })
        .collect())
}

/// Combined outputs for already loaded members.
///
/// `members` holds whole-output sets; `tasks` holds per-task sets for the
/// per-task strategies.
pub fn combine(
    strategy: Strategy,
    members: &[Vec<PredictionRecord>],
    tasks: Option<[&[Vec<PredictionRecord>]; 3]>,
) -> Result<Vec<PredictionRecord>> {
    if strategy.per_task() {
        let [au, expr, va] = tasks.ok_or_else(|| Error::Ensemble(format!("{strategy:?} needs per-task members")))?;
        for (task, list) in Task::ALL.iter().zip([au, expr, va]) {
            if list.len() != strategy.member_count() {
                return Err(Error::Ensemble(format!(
                    "{strategy:?} needs {} {} member(s), got {}",
                    strategy.member_count(),
                    task.name(),
                    list.len()
                )));
            }
        }
        return concat_tasks(&average(au)?, &average(expr)?, &average(va)?);
    }
    if members.len() != strategy.member_count() {
        return Err(Error::Ensemble(format!(
            "{strategy:?} needs {} member(s), got {}",
            strategy.member_count(),
            members.len()
        )));
    }
    average(members)
}

/// Loads members, running checkpoints at most once each.
struct MemberLoader<'a> {
    features: Option<&'a Path>,
    cache: HashMap<PathBuf, Vec<PredictionRecord>>,
}

impl MemberLoader<'_> {
    fn load(&mut self, path: &Path) -> Result<Vec<PredictionRecord>> {
        if let Some(hit) = self.cache.get(path) {
            return Ok(hit.clone());
        }
        let records = match path.extension().and_then(|e| e.to_str()) {
            Some("afck") => {
                let features = self
                    .features
                    .ok_or_else(|| Error::Ensemble("checkpoint members need a features file".into()))?;
                let (model, _) = checkpoint::load::<f32>(path)?;
                let cfg = model.config();
                let shape = FeatureShape {
                    patches: cfg.n_patches,
                    channels: cfg.in_channels,
                };
                let maps = load_all_features(features, shape)?;
                predict_all(&model, &maps[..], 64)?
            }
            Some("raw") => read_raw_predictions(path)?,
            _ => read_raw_predictions(&raw_sidecar_path(path))?,
        };
        self.cache.insert(path.to_path_buf(), records.clone());
        Ok(records)
    }

    fn load_all(&mut self, paths: &[PathBuf]) -> Result<Vec<Vec<PredictionRecord>>> {
        paths.iter().map(|p| self.load(p)).collect()
    }
}

/// Loads every member of `spec` and combines them.
pub fn run_spec(spec: &EnsembleSpec) -> Result<Vec<PredictionRecord>> {
    spec.validate()?;
    let strategy = spec.strategy()?;
    let mut loader = MemberLoader {
        features: spec.features.as_deref(),
        cache: HashMap::new(),
    };
    if strategy.per_task() {
        let au = loader.load_all(&spec.au)?;
        let expr = loader.load_all(&spec.expr)?;
        let va = loader.load_all(&spec.va)?;
        return combine(strategy, &[], Some([&au, &expr, &va]));
    }
    combine(strategy, &loader.load_all(&spec.members)?, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, base: f32) -> PredictionRecord {
        PredictionRecord {
            id: id.into(),
            au_logits: std::array::from_fn(|j| base + j as f32 * 0.25 - 1.0),
            expr_logits: std::array::from_fn(|k| base * (k as f32 - 3.0)),
            va: [base.tanh(), -base.tanh() / 2.0],
        }
    }

    fn set(base: f32) -> Vec<PredictionRecord> {
        vec![rec("v/1", base), rec("v/2", base + 0.3), rec("v/3", -base)]
    }

    #[test]
    fn identical_members_reproduce_the_member() {
        let one = set(0.7);
        for strategy in [Strategy::BestOverall, Strategy::KfoldBestOverall, Strategy::Meta] {
            let members = vec![one.clone(); strategy.member_count()];
            assert_eq!(combine(strategy, &members, None).unwrap(), one);
        }
        for strategy in [Strategy::BestPerTask, Strategy::KfoldBestPerTask] {
            let members = vec![one.clone(); strategy.member_count()];
            let out = combine(strategy, &[], Some([&members, &members, &members])).unwrap();
            assert_eq!(out, one);
        }
    }

    #[test]
    fn per_task_concatenation_takes_each_head_from_its_member() {
        let (a, b, c) = (set(0.1), set(0.5), set(-0.9));
        let out = combine(
            Strategy::BestPerTask,
            &[],
            Some([std::slice::from_ref(&a), std::slice::from_ref(&b), std::slice::from_ref(&c)]),
        )
        .unwrap();
        for i in 0..3 {
            assert_eq!(out[i].au_logits, a[i].au_logits);
            assert_eq!(out[i].expr_logits, b[i].expr_logits);
            assert_eq!(out[i].va, c[i].va);
        }
    }

    #[test]
    fn averaging_aligns_by_id() {
        let a = set(1.0);
        let mut b = set(3.0);
        b.reverse();
        let out = average(&[a.clone(), b]).unwrap();
        assert_eq!(out[0].id, "v/1");
        assert_eq!(out[0].au_logits[0], 1.0);
        assert_eq!(out[2].expr_logits[0], 6.0);
    }

    #[test]
    fn mismatched_ids_and_counts_are_rejected() {
        let a = set(1.0);
        let mut b = set(1.0);
        b[2].id = "v/9".into();
        assert!(average(&[a.clone(), b]).is_err());
        assert!(combine(Strategy::KfoldBestOverall, &[a.clone(), a.clone()], None).is_err());
        let spec = EnsembleSpec {
            strategy: Some(Strategy::BestPerTask),
            members: vec!["x.csv".into()],
            ..EnsembleSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
