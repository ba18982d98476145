//! Feature and label ingestion, prediction files, fold planning and the
//! synthetic corpus.

mod features;
mod folds;
mod labels;
mod predictions;
pub mod synthetic;

pub use features::{load_all_features, load_features, save_features, FeatureMap, FeatureReader, FeatureShape};
pub use folds::{kfold_split, split_with_holdout, video_prefix, FoldPlan};
pub use labels::{
    load_labels, merge_pseudo_labels, parse_labels, write_labels, Expression, LabelRecord, LabelSource, LabelSources,
    AU_SENTINEL, EXPR_SENTINEL, LABEL_HEADER, VA_SENTINEL,
};
pub use predictions::{
    ensure_unique_ids, raw_sidecar_path, read_raw_predictions, write_prediction_csv, write_predictions,
    write_raw_predictions, PredictionRecord,
};
pub use synthetic::{gen_synthetic, SyntheticConfig, SyntheticCorpus};

use crate::losses::{ClassWeights, WEIGHT_CLAMP};
use crate::model::{N_AU, N_EXPR};

fn clamp_weight(w: f64) -> f64 {
    w.clamp(WEIGHT_CLAMP.0, WEIGHT_CLAMP.1)
}

/// AU positive weights (negatives / positives per unit) and inverse-frequency
/// expression weights over the valid labels, clamped to the weight range.
pub fn compute_class_weights(labels: &[LabelRecord]) -> ClassWeights {
    let mut pos = [0usize; N_AU];
    let mut neg = [0usize; N_AU];
    let mut class_counts = [0usize; N_EXPR];
    for l in labels {
        if let Some(au) = l.au {
            for (j, &on) in au.iter().enumerate() {
                if on {
                    pos[j] += 1;
                } else {
                    neg[j] += 1;
                }
            }
        }
        if let Some(e) = l.expr {
            class_counts[e.code()] += 1;
        }
    }

    let au_pos_weight = std::array::from_fn(|j| match (pos[j], neg[j]) {
        (0, 0) => 1.0,
        (0, _) => WEIGHT_CLAMP.1,
        (p, n) => clamp_weight(n as f64 / p as f64),
    });
    let n_valid: usize = class_counts.iter().sum();
    let expr_weight = std::array::from_fn(|k| {
        if n_valid == 0 {
            1.0
        } else if class_counts[k] == 0 {
            WEIGHT_CLAMP.1
        } else {
            clamp_weight(n_valid as f64 / (N_EXPR as f64 * class_counts[k] as f64))
        }
    });
    ClassWeights {
        au_pos_weight,
        expr_weight,
    }
}
