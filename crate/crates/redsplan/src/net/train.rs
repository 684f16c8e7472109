//! Training loop: minibatched cross-entropy with Adam updates and
//! decoupled weight decay. Deterministic for a given seed.

use serde::{Deserialize, Serialize};

use super::baselines::{baseline_loss_and_grads, BaselineParams};
use super::deepset::{loss_and_grads_batch, RedsGrads, RedsParams};
use super::{FeatureSplit, NetError};
use crate::data::Dataset;
use crate::miqp::BinaryAssignment;
use crate::rng::substream;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Full-scale preset (small batches, long schedule).
    pub fn full_scale() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 128,
            epochs: 1500,
            weight_decay: 1e-5,
        }
    }

    /// Full-scale preset with large batches.
    pub fn full_scale_large_batch() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 1024,
            epochs: 1500,
            weight_decay: 1e-5,
        }
    }

    /// Small-data preset that converges in minutes on a laptop core.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 60,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update with decoupled weight decay.
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / b1c;
            let vh = self.v[i] / b2c;
            params[i] -= lr * (mh / (vh.sqrt() + self.eps) + weight_decay * params[i]);
        }
    }
}

/// Training views of a dataset.
pub(crate) fn dataset_views(ds: &Dataset) -> (Vec<FeatureSplit>, Vec<&BinaryAssignment>) {
    let feats = ds
        .records
        .iter()
        .map(|r| FeatureSplit::from_params(&r.params))
        .collect();
    let labels = ds.records.iter().map(|r| &r.labels).collect();
    (feats, labels)
}

/// Trains an equivariant network on an expert-labeled dataset.
pub fn train(
    mut params: RedsParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(RedsParams, TrainLog), NetError> {
    if dataset.records.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let horizon = dataset.records[0].horizon;
    let (features, labels) = dataset_views(dataset);

    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len());
    let mut log = TrainLog::default();

    let mut order: Vec<usize> = (0..dataset.records.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = substream(seed, "train-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch_feats: Vec<FeatureSplit> =
                chunk.iter().map(|&i| features[i].clone()).collect();
            let batch_labels: Vec<&BinaryAssignment> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads, _) =
                loss_and_grads_batch(&params, &batch_feats, &batch_labels, horizon)?;
            if !loss.is_finite() {
                return Err(NetError::Diverged { epoch, loss });
            }
            let g = grads.flatten();
            adam.step(&mut flat, &g, cfg.lr, cfg.weight_decay);
            params.assign(&flat);
            epoch_loss += loss;
            batches += 1.0;
        }
        log.epoch_losses.push(epoch_loss / batches);
    }
    Ok((params, log))
}

/// Cross-entropy loss and gradient of one batch (the module-level
/// operation; training uses it internally).
pub fn loss_and_grads(
    params: &RedsParams,
    features: &[FeatureSplit],
    labels: &[&BinaryAssignment],
    horizon: usize,
) -> Result<(f64, RedsGrads), NetError> {
    let (loss, grads, _) = loss_and_grads_batch(params, features, labels, horizon)?;
    Ok((loss, grads))
}

/// Trains a baseline on the same data.
pub fn train_baseline(
    mut params: BaselineParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(BaselineParams, TrainLog), NetError> {
    if dataset.records.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let horizon = dataset.records[0].horizon;

    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len());
    let mut log = TrainLog::default();

    let mut order: Vec<usize> = (0..dataset.records.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = substream(seed, "train-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let scen: Vec<&crate::model::PlannerParams> =
                chunk.iter().map(|&i| &dataset.records[i].params).collect();
            let labs: Vec<&BinaryAssignment> =
                chunk.iter().map(|&i| &dataset.records[i].labels).collect();
            let (loss, grads, _) = baseline_loss_and_grads(&params, &scen, &labs, horizon)?;
            if !loss.is_finite() {
                return Err(NetError::Diverged { epoch, loss });
            }
            let g = grads.flatten();
            adam.step(&mut flat, &g, cfg.lr, cfg.weight_decay);
            params.assign(&flat);
            epoch_loss += loss;
            batches += 1.0;
        }
        log.epoch_losses.push(epoch_loss / batches);
    }
    Ok((params, log))
}
