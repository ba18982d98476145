//! Task losses with class balancing and invalid-label masking.
//!
//! Invalid samples are removed with a row gather before any arithmetic, so
//! their predictions have no path to the loss at all.

use serde::{Deserialize, Serialize};

use crate::data::LabelRecord;
use crate::error::{Error, Result};
use crate::model::{Outputs, N_AU, N_EXPR};
use crate::tensorcore::{Graph, Scalar, Tensor, Var};

/// Guard added to the CCC denominator.
pub const CCC_EPS: f64 = 1e-8;

/// Lower and upper clamp for class-balancing weights.
pub const WEIGHT_CLAMP: (f64, f64) = (0.01, 100.0);

/// Positive-class weights per AU and per-class expression weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub au_pos_weight: [f64; N_AU],
    pub expr_weight: [f64; N_EXPR],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self {
            au_pos_weight: [1.0; N_AU],
            expr_weight: [1.0; N_EXPR],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self
            .au_pos_weight
            .iter()
            .chain(&self.expr_weight)
            .all(|w| w.is_finite() && *w > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("class weights must be finite and positive".into()))
        }
    }
}

/// Per-sample validity of each task's label.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidityMask {
    pub va: Vec<bool>,
    pub expr: Vec<bool>,
    pub au: Vec<bool>,
}

impl ValidityMask {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a LabelRecord>) -> Self {
        let mut m = Self::default();
        for l in labels {
            m.va.push(l.va.is_some());
            m.expr.push(l.expr.is_some());
            m.au.push(l.au.is_some());
        }
        m
    }
}

/// One task's loss. `empty` marks a batch with no valid label for the task,
/// in which case `value` is a constant zero.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    pub value: Var,
    pub empty: bool,
}

fn zero<T: Scalar>(g: &mut Graph<T>) -> TaskLoss {
    TaskLoss {
        value: g.constant(Tensor::scalar(T::zero())),
        empty: true,
    }
}

fn valid_rows<X>(targets: &[Option<X>]) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.as_ref().map(|_| i))
        .collect()
}

/// Weighted binary cross-entropy over the units of every valid sample,
/// `P·y·softplus(-x) + (1-y)·softplus(x)`, averaged over samples and units.
pub fn loss_au<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[Option<&[bool]>],
    pos_weight: &[f64],
) -> Result<TaskLoss> {
    let [b, units] = g.shape(logits);
    if targets.len() != b || pos_weight.len() != units {
        return Err(Error::shape("loss_au", &[b, units], &[targets.len(), pos_weight.len()]));
    }
    let rows = valid_rows(targets);
    if rows.is_empty() {
        return Ok(zero(g));
    }
    let mut pos = Vec::with_capacity(rows.len() * units);
    let mut neg = Vec::with_capacity(rows.len() * units);
    for &r in &rows {
        let y = targets[r].expect("valid row");
        if y.len() != units {
            return Err(Error::shape("loss_au", &[b, units], &[r, y.len()]));
        }
        for (u, &on) in y.iter().enumerate() {
            pos.push(if on { T::lit(pos_weight[u]) } else { T::zero() });
            neg.push(if on { T::zero() } else { T::one() });
        }
    }
    let x = g.select_rows(logits, &rows)?;
    let neg_x = g.scale(x, -T::one());
    let sp_pos = g.softplus(neg_x);
    let sp_neg = g.softplus(x);
    let pos = g.constant(Tensor::new(rows.len(), units, pos)?);
    let neg = g.constant(Tensor::new(rows.len(), units, neg)?);
    let a = g.mul(sp_pos, pos)?;
    let c = g.mul(sp_neg, neg)?;
    let terms = g.add(a, c)?;
    Ok(TaskLoss {
        value: g.mean_all(terms),
        empty: false,
    })
}

/// Weighted cross-entropy, `-P[y]·log softmax(x)[y]`, averaged over valid samples.
pub fn loss_expr<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[Option<usize>],
    class_weight: &[f64],
) -> Result<TaskLoss> {
    let [b, classes] = g.shape(logits);
    if targets.len() != b || class_weight.len() != classes {
        return Err(Error::shape("loss_expr", &[b, classes], &[targets.len(), class_weight.len()]));
    }
    let rows = valid_rows(targets);
    if rows.is_empty() {
        return Ok(zero(g));
    }
    let mut picks = Vec::with_capacity(rows.len());
    let mut weights = Vec::with_capacity(rows.len());
    for &r in &rows {
        let y = targets[r].expect("valid row");
        if y >= classes {
            return Err(Error::InvalidArgument(format!(
                "expression label {y} outside 0..{classes} (sample {r})"
            )));
        }
        picks.push(y);
        weights.push(T::lit(-class_weight[y]));
    }
    let x = g.select_rows(logits, &rows)?;
    let log_p = g.log_softmax_rows(x);
    let picked = g.pick_cols(log_p, &picks)?;
    let w = g.constant(Tensor::new(rows.len(), 1, weights)?);
    let weighted = g.mul(picked, w)?;
    Ok(TaskLoss {
        value: g.mean_all(weighted),
        empty: false,
    })
}

/// Concordance correlation coefficient between two `n×1` columns, on the graph.
pub fn ccc_var<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let [n, _] = g.shape(x);
    let mx = g.mean_all(x);
    let my = g.mean_all(y);
    let ex = g.expand(mx, n, 1)?;
    let ey = g.expand(my, n, 1)?;
    let xc = g.sub(x, ex)?;
    let yc = g.sub(y, ey)?;
    let xy = g.mul(xc, yc)?;
    let cov = g.mean_all(xy);
    let xx = g.mul(xc, xc)?;
    let vx = g.mean_all(xx);
    let yy = g.mul(yc, yc)?;
    let vy = g.mean_all(yy);
    let dm = g.sub(mx, my)?;
    let dm2 = g.mul(dm, dm)?;
    let eps = g.constant(Tensor::scalar(T::lit(CCC_EPS)));
    let denom = g.add(vx, vy)?;
    let denom = g.add(denom, dm2)?;
    let denom = g.add(denom, eps)?;
    let num = g.scale(cov, T::lit(2.0));
    g.div(num, denom)
}

/// `2 - CCC_valence - CCC_arousal` over the valid samples; needs at least two.
pub fn loss_va<T: Scalar>(g: &mut Graph<T>, pred: Var, targets: &[Option<[f32; 2]>]) -> Result<TaskLoss> {
    let [b, c] = g.shape(pred);
    if targets.len() != b || c != 2 {
        return Err(Error::shape("loss_va", &[b, c], &[targets.len(), 2]));
    }
    let rows = valid_rows(targets);
    if rows.len() < 2 {
        return Ok(zero(g));
    }
    let p = g.select_rows(pred, &rows)?;
    let mut total = g.constant(Tensor::scalar(T::lit(2.0)));
    for col in 0..2 {
        let pc = g.slice_cols(p, col, col + 1)?;
        let truth: Vec<T> = rows
            .iter()
            .map(|&r| T::lit(f64::from(targets[r].expect("valid row")[col])))
            .collect();
        let tc = g.constant(Tensor::new(rows.len(), 1, truth)?);
        let c = ccc_var(g, pc, tc)?;
        total = g.sub(total, c)?;
    }
    Ok(TaskLoss {
        value: total,
        empty: false,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub au: TaskLoss,
    pub expr: TaskLoss,
    pub va: TaskLoss,
}

/// Unweighted sum of the three task losses over a batch of stacked outputs.
pub fn loss_total<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &Outputs,
    labels: &[&LabelRecord],
    weights: &ClassWeights,
) -> Result<LossBreakdown> {
    let au_targets: Vec<Option<&[bool]>> = labels.iter().map(|l| l.au.as_ref().map(|a| &a[..])).collect();
    let expr_targets: Vec<Option<usize>> = labels.iter().map(|l| l.expr.map(|e| e.code())).collect();
    let va_targets: Vec<Option<[f32; 2]>> = labels.iter().map(|l| l.va).collect();
    let au = loss_au(g, outputs.au, &au_targets, &weights.au_pos_weight)?;
    let expr = loss_expr(g, outputs.expr, &expr_targets, &weights.expr_weight)?;
    let va = loss_va(g, outputs.va, &va_targets)?;
    let total = g.add(au.value, expr.value)?;
    let total = g.add(total, va.value)?;
    Ok(LossBreakdown { total, au, expr, va })
}

/// CCC of two equal-length series with population moments.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("ccc: lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedMetric(format!("ccc needs at least 2 samples, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    let (cov, vx, vy) = (cov / n, vx / n, vy / n);
    Ok(2.0 * cov / (vx + vy + (mx - my) * (mx - my) + CCC_EPS))
}
