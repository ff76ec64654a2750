use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward, loss_gradient};
use super::params::Parameters;
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHparams {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHparams {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the epoch's examples, measured before each update.
    pub mean_loss: f64,
    /// Accuracy of the predictions made during the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub history: Vec<EpochStats>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &Parameters) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, m)| m.data.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step);
        let bc2 = 1.0 - BETA2.powi(self.step);
        let grads = grads.tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = &grads[i].1.data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Mini-batch Adam on mean cross-entropy over every parameter. Shuffling is
/// driven by `hp.seed`; `params` is copied, never mutated.
pub fn train(params: &Parameters, train_set: &Dataset, hp: &TrainHparams) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::InvalidDataset("empty training set".into()));
    }
    if hp.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut params = params.clone();
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(hp.epochs);

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, batch) in order.chunks(hp.batch_size).enumerate() {
            let mut acc: Option<Parameters> = None;
            for &i in batch {
                let inst = &train_set.instances[i];
                let lg = loss_gradient(&params, &inst.tokens(), inst.label)?;
                let (loss, grads) = (lg.loss, lg.grads);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        instance: inst.id.clone(),
                    });
                }
                loss_sum += loss;
                if lg.predicted == inst.label {
                    correct += 1;
                }
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (dst, (_, src)) in a.tensors_mut().into_iter().zip(grads.tensors()) {
                            dst.add_assign(src);
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for t in grads.tensors_mut() {
                for v in &mut t.data {
                    *v *= scale;
                }
            }
            adam.update(&mut params, &grads, hp.lr);
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            accuracy: correct as f64 / train_set.len() as f64,
        });
    }
    Ok(TrainOutcome { params, history })
}

pub fn predictions(params: &Parameters, data: &Dataset) -> Result<Vec<usize>> {
    data.iter()
        .map(|i| Ok(forward(params, &i.tokens(), None)?.predicted))
        .collect()
}

pub fn accuracy(params: &Parameters, data: &Dataset) -> Result<f64> {
    let preds = predictions(params, data)?;
    let correct = preds
        .iter()
        .zip(data.iter())
        .filter(|(p, i)| **p == i.label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
