//! Mini-batch training, batched inference and evaluation.

use std::any::Any;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMap, FeatureShape, LabelRecord, PredictionRecord, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::losses::{loss_total, ClassWeights};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Model, N_AU, N_EXPR, N_VA};
use crate::tensorcore::{Adam, Graph, LrSchedule, Scalar, Tensor};

/// Random access to feature maps by position.
pub trait FeatureSource {
    fn len(&self) -> usize;
    fn shape(&self) -> FeatureShape;
    fn id(&self, i: usize) -> &str;
    /// Writes the row-major features of sample `i` into `out`.
    fn write_features(&self, i: usize, out: &mut [f32]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FeatureSource for [FeatureMap] {
    fn len(&self) -> usize {
        <[FeatureMap]>::len(self)
    }

    fn shape(&self) -> FeatureShape {
        self.first().map(FeatureMap::shape).unwrap_or_default()
    }

    fn id(&self, i: usize) -> &str {
        &self[i].id
    }

    fn write_features(&self, i: usize, out: &mut [f32]) {
        out.copy_from_slice(self[i].patches.data());
    }
}

impl FeatureSource for SyntheticCorpus {
    fn len(&self) -> usize {
        SyntheticCorpus::len(self)
    }

    fn shape(&self) -> FeatureShape {
        self.config.shape
    }

    fn id(&self, i: usize) -> &str {
        &self.labels[i].id
    }

    fn write_features(&self, i: usize, out: &mut [f32]) {
        out.copy_from_slice(self.features(i).patches.data());
    }
}

/// A view of selected samples of another source.
pub struct Subset<'a, S: ?Sized> {
    pub source: &'a S,
    pub indices: Vec<usize>,
}

impl<S: FeatureSource + ?Sized> FeatureSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn shape(&self) -> FeatureShape {
        self.source.shape()
    }

    fn id(&self, i: usize) -> &str {
        self.source.id(self.indices[i])
    }

    fn write_features(&self, i: usize, out: &mut [f32]) {
        self.source.write_features(self.indices[i], out)
    }
}

/// Labels in the order of `source`, matched by id.
pub fn align_labels<S: FeatureSource + ?Sized>(source: &S, labels: &[LabelRecord]) -> Result<Vec<LabelRecord>> {
    let by_id: HashMap<&str, &LabelRecord> = labels.iter().map(|l| (l.id.as_str(), l)).collect();
    (0..source.len())
        .map(|i| {
            let id = source.id(i);
            by_id
                .get(id)
                .map(|l| (*l).clone())
                .ok_or_else(|| Error::InvalidArgument(format!("no label for feature id {id:?}")))
        })
        .collect()
}

/// Batch matrices are large; their memory is handed back after each pass and reused.
#[derive(Default)]
struct Staging {
    spare: Vec<f32>,
}

impl Staging {
    fn stack<T: Scalar, S: FeatureSource + ?Sized>(&mut self, source: &S, indices: &[usize]) -> Result<Tensor<T>> {
        let shape = source.shape();
        let block = shape.patches * shape.channels;
        let mut data = std::mem::take(&mut self.spare);
        data.resize(block * indices.len(), 0.0);
        for (chunk, &i) in data.chunks_exact_mut(block).zip(indices) {
            source.write_features(i, chunk);
        }
        let stacked = Tensor::new(indices.len() * shape.patches, shape.channels, data)?;
        Ok(stacked.into_cast())
    }

    fn recycle<T: Scalar>(&mut self, used: Tensor<T>) {
        let boxed: Box<dyn Any> = Box::new(used);
        if let Ok(t) = boxed.downcast::<Tensor<f32>>() {
            self.spare = t.into_data();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u32,
    pub warmup_epochs: u32,
    pub base_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 6,
            warmup_epochs: 5,
            base_lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<LrSchedule> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("nothing to train: epochs = 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        LrSchedule::new(self.base_lr, self.warmup_epochs, self.epochs)
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
    pub loss_au: f64,
    pub loss_expr: f64,
    pub loss_va: f64,
}

/// Model, optimizer and schedule of one training run.
pub struct Trainer<T> {
    pub model: Model<T>,
    adam: Adam<T>,
    schedule: LrSchedule,
    config: TrainConfig,
    weights: ClassWeights,
    staging: Staging,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, weights: ClassWeights) -> Result<Self> {
        let schedule = config.schedule()?;
        weights.validate()?;
        let adam = Adam::new(model.params());
        Ok(Self {
            model,
            adam,
            schedule,
            config,
            weights,
            staging: Staging::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps()
    }

    /// Sample order of one epoch, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, n: usize, epoch: u32) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::from(epoch) + 1);
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer update on the samples `indices`, at schedule position `progress` (in epochs).
    pub fn step<S: FeatureSource + ?Sized>(
        &mut self,
        source: &S,
        labels: &[LabelRecord],
        indices: &[usize],
        progress: f64,
        epoch: u32,
    ) -> Result<StepStats> {
        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g, true);
        let x = g.constant(self.staging.stack(source, indices)?);
        let out = self.model.forward_batch(&mut g, &p, x, indices.len())?;
        let batch_labels: Vec<&LabelRecord> = indices.iter().map(|&i| &labels[i]).collect();
        let losses = loss_total(&mut g, &out, &batch_labels, &self.weights)?;
        let read = |g: &Graph<T>, v| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        let loss = read(&g, losses.total);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss is {loss} at step {}", self.adam.steps() + 1)));
        }
        let stats = StepStats {
            step: self.adam.steps() + 1,
            epoch,
            lr: self.schedule.lr_at(progress),
            loss,
            loss_au: read(&g, losses.au.value),
            loss_expr: read(&g, losses.expr.value),
            loss_va: read(&g, losses.va.value),
        };
        g.backward(losses.total)?;
        let grads = self.model.params().gradients(&mut g, &p);
        self.adam.step(self.model.params_mut(), &grads, stats.lr)?;
        self.staging.recycle(g.into_value(x));
        Ok(stats)
    }

    /// Runs epoch `epoch` (0-based) over every sample; `on_step` sees each update.
    pub fn run_epoch<S: FeatureSource + ?Sized>(
        &mut self,
        source: &S,
        labels: &[LabelRecord],
        epoch: u32,
        mut on_step: impl FnMut(&StepStats),
    ) -> Result<Vec<StepStats>> {
        if labels.len() != source.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature maps but {} label records",
                source.len(),
                labels.len()
            )));
        }
        if source.is_empty() {
            return Err(Error::InvalidArgument("nothing to train: empty dataset".into()));
        }
        let order = self.epoch_order(source.len(), epoch);
        let steps = self.config.steps_per_epoch(source.len());
        let mut stats = Vec::with_capacity(steps);
        for (k, batch) in order.chunks(self.config.batch_size).enumerate() {
            let progress = f64::from(epoch) + (k + 1) as f64 / steps as f64;
            let s = self.step(source, labels, batch, progress, epoch)?;
            on_step(&s);
            stats.push(s);
        }
        Ok(stats)
    }
}

/// Raw outputs for every sample, in source order.
pub fn predict_all<T: Scalar, S: FeatureSource + ?Sized>(
    model: &Model<T>,
    source: &S,
    batch_size: usize,
) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::with_capacity(source.len());
    let all: Vec<usize> = (0..source.len()).collect();
    let mut staging = Staging::default();
    for chunk in all.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let x = g.constant(staging.stack(source, chunk)?);
        let o = model.forward_batch(&mut g, &p, x, chunk.len())?;
        let to_f32 = |v: T| v.to_f32().unwrap_or(f32::NAN);
        for (r, &i) in chunk.iter().enumerate() {
            let row = |v| -> Vec<f32> { g.value(v).row(r).iter().map(|&x| to_f32(x)).collect() };
            let mut rec = PredictionRecord {
                id: source.id(i).to_string(),
                au_logits: [0.0; N_AU],
                expr_logits: [0.0; N_EXPR],
                va: [0.0; N_VA],
            };
            rec.au_logits.copy_from_slice(&row(o.au));
            rec.expr_logits.copy_from_slice(&row(o.expr));
            rec.va.copy_from_slice(&row(o.va));
            out.push(rec);
        }
        staging.recycle(g.into_value(x));
    }
    Ok(out)
}

/// Full-set report of `model` on `source` with index-aligned `labels`.
pub fn evaluate_model<T: Scalar, S: FeatureSource + ?Sized>(
    model: &Model<T>,
    source: &S,
    labels: &[LabelRecord],
    batch_size: usize,
) -> Result<EvalReport> {
    if source.is_empty() {
        return Err(Error::UndefinedMetric("empty evaluation set".into()));
    }
    let preds = predict_all(model, source, batch_size)?;
    evaluate(&preds, labels)
}

/// Mean training loss over `source` without updating anything.
pub fn dataset_loss<T: Scalar, S: FeatureSource + ?Sized>(
    model: &Model<T>,
    source: &S,
    labels: &[LabelRecord],
    weights: &ClassWeights,
    batch_size: usize,
) -> Result<f64> {
    let all: Vec<usize> = (0..source.len()).collect();
    let mut total = 0.0;
    let mut batches = 0;
    let mut staging = Staging::default();
    for chunk in all.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let x = g.constant(staging.stack(source, chunk)?);
        let o = model.forward_batch(&mut g, &p, x, chunk.len())?;
        let batch_labels: Vec<&LabelRecord> = chunk.iter().map(|&i| &labels[i]).collect();
        let l = loss_total(&mut g, &o, &batch_labels, weights)?;
        total += g.value(l.total).item().to_f64().unwrap_or(f64::NAN);
        batches += 1;
        staging.recycle(g.into_value(x));
    }
    Ok(total / batches.max(1) as f64)
}
