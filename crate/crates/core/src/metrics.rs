//! Evaluation scores: per-AU F1, macro expression F1, VA concordance and the
//! composite multi-task score.

use serde::{Deserialize, Serialize};

use crate::data::{LabelRecord, PredictionRecord};
use crate::error::{Error, Result};
use crate::losses::ccc;
use crate::model::{N_AU, N_EXPR};

/// Confusion counts of a binary decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    /// `2TP / (2TP + FP + FN)`, or 0 when nothing is positive on either side.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

pub fn f1_binary(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "f1: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        c.record(p, t);
    }
    Ok(c.f1())
}

/// One-vs-rest F1 per class and their mean.
pub fn f1_macro_expr(pred: &[usize], truth: &[usize]) -> Result<([f64; N_EXPR], f64)> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "f1: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = [Confusion::default(); N_EXPR];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= N_EXPR || t >= N_EXPR {
            return Err(Error::InvalidArgument(format!("expression class {} outside 0..7", p.max(t))));
        }
        for (k, c) in counts.iter_mut().enumerate() {
            c.record(p == k, t == k);
        }
    }
    let per_class = counts.map(|c| c.f1());
    let macro_f1 = per_class.iter().sum::<f64>() / N_EXPR as f64;
    Ok((per_class, macro_f1))
}

/// Mean of valence and arousal CCC over the whole set. Returns `(p_va, ccc_v, ccc_a)`.
pub fn p_va(pred_v: &[f64], pred_a: &[f64], truth_v: &[f64], truth_a: &[f64]) -> Result<(f64, f64, f64)> {
    let ccc_v = ccc(pred_v, truth_v)?;
    let ccc_a = ccc(pred_a, truth_a)?;
    Ok(((ccc_v + ccc_a) / 2.0, ccc_v, ccc_a))
}

pub fn p_mtl(p_au: f64, p_expr: f64, p_va: f64) -> f64 {
    p_au + p_expr + p_va
}

/// Valid and invalid label counts of one task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub valid: usize,
    pub invalid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_au_f1: [f64; N_AU],
    pub per_expr_f1: [f64; N_EXPR],
    pub ccc_v: f64,
    pub ccc_a: f64,
    pub p_au: f64,
    pub p_expr: f64,
    pub p_va: f64,
    pub p_mtl: f64,
    #[serde(default)]
    pub counts: TaskCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub au: LabelCounts,
    pub expr: LabelCounts,
    pub va: LabelCounts,
}

impl EvalReport {
    pub fn from_parts(per_au_f1: [f64; N_AU], per_expr_f1: [f64; N_EXPR], ccc_v: f64, ccc_a: f64) -> Self {
        let p_au = per_au_f1.iter().sum::<f64>() / N_AU as f64;
        let p_expr = per_expr_f1.iter().sum::<f64>() / N_EXPR as f64;
        let p_va = (ccc_v + ccc_a) / 2.0;
        Self {
            per_au_f1,
            per_expr_f1,
            ccc_v,
            ccc_a,
            p_au,
            p_expr,
            p_va,
            p_mtl: p_mtl(p_au, p_expr, p_va),
            counts: TaskCounts::default(),
        }
    }

    /// A report known only through its three sub-scores.
    pub fn from_scores(p_au: f64, p_expr: f64, p_va: f64) -> Self {
        Self {
            per_au_f1: [p_au; N_AU],
            per_expr_f1: [p_expr; N_EXPR],
            ccc_v: p_va,
            ccc_a: p_va,
            p_au,
            p_expr,
            p_va,
            p_mtl: p_mtl(p_au, p_expr, p_va),
            counts: TaskCounts::default(),
        }
    }

    /// Sub-score of one task.
    pub fn task_score(&self, task: Task) -> f64 {
        match task {
            Task::Au => self.p_au,
            Task::Expr => self.p_expr,
            Task::Va => self.p_va,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Au,
    Expr,
    Va,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Au, Task::Expr, Task::Va];

    pub fn name(self) -> &'static str {
        match self {
            Task::Au => "au",
            Task::Expr => "expr",
            Task::Va => "va",
        }
    }
}

/// Scores predictions against labels matched by id. Invalid labels are
/// dropped before thresholding.
pub fn evaluate(predictions: &[PredictionRecord], labels: &[LabelRecord]) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<&str, &PredictionRecord> =
        predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut au = [Confusion::default(); N_AU];
    let mut expr_pred = Vec::new();
    let mut expr_truth = Vec::new();
    let (mut pv, mut pa, mut tv, mut ta) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut counts = TaskCounts::default();
    for l in labels {
        let p = by_id
            .get(l.id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no prediction for id {:?}", l.id)))?;
        match l.au {
            Some(truth) => {
                counts.au.valid += 1;
                for (j, (&d, &t)) in p.au_decisions().iter().zip(&truth).enumerate() {
                    au[j].record(d, t);
                }
            }
            None => counts.au.invalid += 1,
        }
        match l.expr {
            Some(e) => {
                counts.expr.valid += 1;
                expr_pred.push(p.expr_class());
                expr_truth.push(e.code());
            }
            None => counts.expr.invalid += 1,
        }
        match l.va {
            Some([v, a]) => {
                counts.va.valid += 1;
                pv.push(p.va[0] as f64);
                pa.push(p.va[1] as f64);
                tv.push(v as f64);
                ta.push(a as f64);
            }
            None => counts.va.invalid += 1,
        }
    }
    if counts.au.valid == 0 {
        return Err(Error::UndefinedMetric("no valid AU labels".into()));
    }
    if counts.expr.valid == 0 {
        return Err(Error::UndefinedMetric("no valid expression labels".into()));
    }
    let per_au = au.map(|c| c.f1());
    let (per_expr, _) = f1_macro_expr(&expr_pred, &expr_truth)?;
    let (_, ccc_v, ccc_a) = p_va(&pv, &pa, &tv, &ta)?;
    let mut report = EvalReport::from_parts(per_au, per_expr, ccc_v, ccc_a);
    report.counts = counts;
    Ok(report)
}

/// Field-wise arithmetic mean of several reports.
pub fn fold_aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("fold_aggregate needs at least one report".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut counts = TaskCounts::default();
    for r in reports {
        for (acc, c) in [
            (&mut counts.au, r.counts.au),
            (&mut counts.expr, r.counts.expr),
            (&mut counts.va, r.counts.va),
        ] {
            acc.valid += c.valid;
            acc.invalid += c.invalid;
        }
    }
    Ok(EvalReport {
        per_au_f1: std::array::from_fn(|j| mean(&|r| r.per_au_f1[j])),
        per_expr_f1: std::array::from_fn(|k| mean(&|r| r.per_expr_f1[k])),
        ccc_v: mean(&|r| r.ccc_v),
        ccc_a: mean(&|r| r.ccc_a),
        p_au: mean(&|r| r.p_au),
        p_expr: mean(&|r| r.p_expr),
        p_va: mean(&|r| r.p_va),
        p_mtl: mean(&|r| r.p_mtl),
        counts,
    })
}
