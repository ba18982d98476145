//! Synthetic corpus with a hidden linear teacher, for desk-scale training runs.
//!
//! Every image has a latent `z ~ N(0, I)`. Its features are a fixed random
//! linear lift of `z` plus Gaussian noise, and its labels come from linear
//! functions of `z`:
//!
//! * AU `j` is on when `w_j·z + b_j > 0`, so its positive rate is `Φ(b_j/‖w_j‖)`.
//! * Expression logits are `k·(u·z) + c_k` for a unit vector `u`; the arg-max is
//!   the interval of `u·z ~ N(0, 1)` between consecutive thresholds.
//! * Valence/arousal are `tanh(a·z + d)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{N_AU, N_EXPR, N_VA};
use crate::tensorcore::Tensor;

use super::{Expression, FeatureMap, FeatureShape, LabelRecord, LabelSources};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub shape: FeatureShape,
    pub latent_dim: usize,
    pub n_videos: usize,
    /// Probability that each task label of an image is replaced by its sentinel.
    pub sentinel_fraction: f64,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            shape: FeatureShape::default(),
            latent_dim: 16,
            n_videos: 8,
            sentinel_fraction: 0.1,
            noise_std: 0.1,
        }
    }
}

/// Parameters of the hidden labeling functions.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub au_weights: Vec<Vec<f64>>,
    pub au_bias: [f64; N_AU],
    pub expr_direction: Vec<f64>,
    /// Increasing boundaries between consecutive classes along `expr_direction`.
    pub expr_thresholds: [f64; N_EXPR - 1],
    pub va_weights: Vec<Vec<f64>>,
    pub va_bias: [f64; N_VA],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

impl Teacher {
    fn draw(latent_dim: usize, rng: &mut impl Rng) -> Self {
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
        let scale = 1.0 / (latent_dim as f64).sqrt();

        let au_weights: Vec<Vec<f64>> = (0..N_AU).map(|_| gaussian_vec(rng, latent_dim, 1.0)).collect();
        let au_bias = std::array::from_fn(|j| {
            let rate: f64 = rng.gen_range(0.25..0.75);
            let norm = dot(&au_weights[j], &au_weights[j]).sqrt();
            norm * std_normal.inverse_cdf(rate)
        });

        let mut u = gaussian_vec(rng, latent_dim, 1.0);
        let norm = dot(&u, &u).sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let raw: Vec<f64> = (0..N_EXPR).map(|_| 1.0 + rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let mut cum = 0.0;
        let expr_thresholds = std::array::from_fn(|k| {
            cum += raw[k] / total;
            std_normal.inverse_cdf(cum)
        });

        let va_weights = (0..N_VA).map(|_| gaussian_vec(rng, latent_dim, 0.8 * scale)).collect();
        let va_bias = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
        Self {
            au_weights,
            au_bias,
            expr_direction: u,
            expr_thresholds,
            va_weights,
            va_bias,
        }
    }

    pub fn au_logits(&self, z: &[f64]) -> [f64; N_AU] {
        std::array::from_fn(|j| dot(&self.au_weights[j], z) + self.au_bias[j])
    }

    /// Linear logits whose arg-max is the threshold interval of `u·z`.
    pub fn expr_logits(&self, z: &[f64]) -> [f64; N_EXPR] {
        let s = dot(&self.expr_direction, z);
        let mut offset = 0.0;
        std::array::from_fn(|k| {
            if k > 0 {
                offset -= self.expr_thresholds[k - 1];
            }
            k as f64 * s + offset
        })
    }

    /// Analytic probability that AU `j` is on.
    pub fn au_rate(&self, j: usize) -> f64 {
        let norm = dot(&self.au_weights[j], &self.au_weights[j]).sqrt();
        Normal::new(0.0, 1.0).expect("valid normal").cdf(self.au_bias[j] / norm)
    }

    /// Analytic probability of each expression class.
    pub fn expr_rates(&self) -> [f64; N_EXPR] {
        let n = Normal::new(0.0, 1.0).expect("valid normal");
        std::array::from_fn(|k| {
            let hi = if k + 1 < N_EXPR { n.cdf(self.expr_thresholds[k]) } else { 1.0 };
            let lo = if k > 0 { n.cdf(self.expr_thresholds[k - 1]) } else { 0.0 };
            hi - lo
        })
    }

    pub fn va(&self, z: &[f64]) -> [f64; N_VA] {
        std::array::from_fn(|i| (dot(&self.va_weights[i], z) + self.va_bias[i]).tanh())
    }

    pub fn label(&self, id: String, z: &[f64]) -> LabelRecord {
        let au = self.au_logits(z).map(|l| l > 0.0);
        let logits = self.expr_logits(z);
        let mut best = 0;
        for k in 1..N_EXPR {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        let va = self.va(z).map(|v| v as f32);
        LabelRecord {
            id,
            va: Some(va),
            expr: Expression::from_code(best),
            au: Some(au),
            source: LabelSources::default(),
        }
    }
}

/// A generated dataset. Features are produced on demand from the stored latents.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub teacher: Teacher,
    pub latents: Vec<Vec<f64>>,
    pub labels: Vec<LabelRecord>,
    lift: Vec<f32>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.id.as_str())
    }

    /// Features of image `i`; deterministic in `(seed, i)`.
    pub fn features(&self, i: usize) -> FeatureMap {
        let shape = self.config.shape;
        let n = shape.patches * shape.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_f00d);
        rng.set_stream(i as u64 + 1);
        let noise = self.config.noise_std as f32;
        let mut data: Vec<f32> = (0..n)
            .map(|_| noise * rng.sample::<f32, _>(StandardNormal))
            .collect();
        for (k, &zk) in self.latents[i].iter().enumerate() {
            let row = &self.lift[k * n..(k + 1) * n];
            let zk = zk as f32;
            for (d, &l) in data.iter_mut().zip(row) {
                *d += zk * l;
            }
        }
        let patches = Tensor::new(shape.patches, shape.channels, data).expect("positive shape");
        FeatureMap::new(self.labels[i].id.clone(), patches).expect("finite features")
    }

    pub fn all_features(&self) -> Vec<FeatureMap> {
        (0..self.len()).map(|i| self.features(i)).collect()
    }
}

/// Splits `n` frames into `videos` contiguous runs with random, non-zero lengths.
fn video_lengths(n: usize, videos: usize, rng: &mut impl Rng) -> Vec<usize> {
    let weights: Vec<f64> = (0..videos).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    let spare = n - videos;
    let mut lengths: Vec<usize> = weights
        .iter()
        .map(|w| 1 + (w / total * spare as f64).floor() as usize)
        .collect();
    let mut assigned: usize = lengths.iter().sum();
    let mut i = 0;
    while assigned < n {
        lengths[i % videos] += 1;
        assigned += 1;
        i += 1;
    }
    lengths
}

pub fn gen_synthetic(n_samples: usize, seed: u64, config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&config.sentinel_fraction) {
        return Err(Error::InvalidArgument("sentinel_fraction must lie in [0, 1]".into()));
    }
    if config.latent_dim == 0 || config.n_videos == 0 {
        return Err(Error::InvalidArgument("latent_dim and n_videos must be positive".into()));
    }
    let videos = config.n_videos.min(n_samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Teacher::draw(config.latent_dim, &mut rng);

    let n = config.shape.patches * config.shape.channels;
    let lift_scale = (1.0 / config.latent_dim as f64).sqrt() as f32;
    let lift: Vec<f32> = (0..config.latent_dim * n)
        .map(|_| lift_scale * rng.sample::<f32, _>(StandardNormal))
        .collect();

    let lengths = video_lengths(n_samples, videos, &mut rng);
    let mut latents = Vec::with_capacity(n_samples);
    let mut labels = Vec::with_capacity(n_samples);
    for (v, &len) in lengths.iter().enumerate() {
        for f in 0..len {
            let z = gaussian_vec(&mut rng, config.latent_dim, 1.0);
            let mut label = teacher.label(format!("video{v:03}/{f:05}"), &z);
            if rng.gen_bool(config.sentinel_fraction) {
                label.va = None;
            }
            if rng.gen_bool(config.sentinel_fraction) {
                label.expr = None;
            }
            if rng.gen_bool(config.sentinel_fraction) {
                label.au = None;
            }
            latents.push(z);
            labels.push(label);
        }
    }
    Ok(SyntheticCorpus {
        config: config.clone(),
        seed,
        teacher,
        latents,
        labels,
        lift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            shape: FeatureShape { patches: 3, channels: 5 },
            n_videos: 4,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_synthetic(20, 5, &small()).unwrap();
        let b = gen_synthetic(20, 5, &small()).unwrap();
        assert_eq!(a.labels, b.labels);
        for i in 0..20 {
            assert_eq!(a.features(i), b.features(i));
        }
        let c = gen_synthetic(20, 6, &small()).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn zero_sentinel_fraction_keeps_all_labels() {
        let cfg = SyntheticConfig {
            sentinel_fraction: 0.0,
            ..small()
        };
        let c = gen_synthetic(50, 1, &cfg).unwrap();
        assert!(c.labels.iter().all(|l| l.va.is_some() && l.expr.is_some() && l.au.is_some()));
    }

    #[test]
    fn videos_are_contiguous_and_cover_samples() {
        let c = gen_synthetic(37, 2, &small()).unwrap();
        assert_eq!(c.len(), 37);
        let mut videos: Vec<&str> = c.ids().map(|id| id.split('/').next().unwrap()).collect();
        videos.dedup();
        assert_eq!(videos.len(), 4);
    }

    #[test]
    fn expression_logits_pick_threshold_interval() {
        let c = gen_synthetic(200, 3, &small()).unwrap();
        let t = &c.teacher;
        for z in &c.latents {
            let s = dot(&t.expr_direction, z);
            let interval = t.expr_thresholds.iter().filter(|&&th| th < s).count();
            let label = t.label("x/1".into(), z);
            assert_eq!(label.expr.unwrap().code(), interval);
        }
    }

    #[test]
    fn label_marginals_match_teacher() {
        let cfg = SyntheticConfig {
            sentinel_fraction: 0.0,
            ..small()
        };
        let n = 10_000;
        let c = gen_synthetic(n, 9, &cfg).unwrap();
        let within = |count: usize, p: f64| {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            (count as f64 - n as f64 * p).abs() <= 3.0 * sigma
        };
        for j in 0..N_AU {
            let on = c.labels.iter().filter(|l| l.au.unwrap()[j]).count();
            assert!(within(on, c.teacher.au_rate(j)), "AU {j}: {on}");
        }
        let rates = c.teacher.expr_rates();
        for (k, &p) in rates.iter().enumerate() {
            let hits = c.labels.iter().filter(|l| l.expr.unwrap().code() == k).count();
            assert!(within(hits, p), "class {k}: {hits} vs {p}");
        }
    }

    #[test]
    fn rejects_empty_corpus() {
        assert!(gen_synthetic(0, 1, &small()).is_err());
    }
}
