use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Video an image belongs to: the id up to its last `/`.
pub fn video_prefix(id: &str) -> Result<&str> {
    match id.rfind('/') {
        Some(i) if i > 0 => Ok(&id[..i]),
        _ => Err(Error::InvalidArgument(format!("id {id:?} carries no video prefix"))),
    }
}

/// Assignment of every image id to a fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.get(id).copied()
    }

    /// Frame count per fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Checks that ids are covered exactly once, folds are in range, and videos are not split.
    pub fn validate<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut seen = 0;
        let mut video_fold: BTreeMap<&str, usize> = BTreeMap::new();
        for id in ids {
            seen += 1;
            let fold = self
                .fold_of(id)
                .ok_or_else(|| Error::InvalidArgument(format!("id {id:?} missing from fold plan")))?;
            if fold >= self.k {
                return Err(Error::InvalidArgument(format!("id {id:?} in fold {fold} >= k={}", self.k)));
            }
            let video = video_prefix(id)?;
            if let Some(&prev) = video_fold.get(video) {
                if prev != fold {
                    return Err(Error::InvalidArgument(format!("video {video:?} split across folds")));
                }
            } else {
                video_fold.insert(video, fold);
            }
        }
        if seen != self.folds.len() {
            return Err(Error::InvalidArgument(format!(
                "fold plan has {} ids, dataset has {seen}",
                self.folds.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn group_by_video<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<BTreeMap<&'a str, Vec<&'a str>>> {
    let mut videos: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for id in ids {
        videos.entry(video_prefix(id)?).or_default().push(id);
    }
    Ok(videos)
}

/// Greedy balanced assignment of whole videos to `k` folds.
///
/// Videos are shuffled by `seed`, stably sorted by descending frame count, and
/// each goes to the currently smallest fold (lowest index on ties).
pub fn kfold_split<'a>(ids: impl IntoIterator<Item = &'a str>, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let videos = group_by_video(ids)?;
    if k > videos.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} exceeds the number of videos ({})",
            videos.len()
        )));
    }
    let mut order: Vec<(&str, Vec<&str>)> = videos.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|v| std::cmp::Reverse(v.1.len()));

    let mut sizes = vec![0usize; k];
    let mut folds = BTreeMap::new();
    for (_, frames) in order {
        let target = (0..k).min_by_key(|&f| (sizes[f], f)).expect("k > 0");
        sizes[target] += frames.len();
        for id in frames {
            folds.insert(id.to_string(), target);
        }
    }
    Ok(FoldPlan { k, folds })
}

/// Splits the training ids into `k - 1` folds and assigns every held-out
/// validation id to the last fold.
pub fn split_with_holdout<'a>(
    train_ids: impl IntoIterator<Item = &'a str>,
    holdout_ids: impl IntoIterator<Item = &'a str>,
    k: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument("holdout split needs k >= 2".into()));
    }
    let mut plan = kfold_split(train_ids, k - 1, seed)?;
    plan.k = k;
    for id in holdout_ids {
        if plan.folds.insert(id.to_string(), k - 1).is_some() {
            return Err(Error::InvalidArgument(format!("id {id:?} in both train and holdout")));
        }
    }
    Ok(plan)
}
