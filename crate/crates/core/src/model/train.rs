use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{d_loss_d_logit, log_loss, Labels};
use super::{round_f32, Gradients, ModelParams};
use crate::error::{Error, Result};
use crate::features::FeatureBundle;

/// One training instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub bundle: FeatureBundle,
    pub labels: Labels,
}

pub type TrainingBatch<'a> = &'a [&'a Example];

/// Examples per partial gradient sum; fixed so results do not depend on the
/// thread count.
const GRADIENT_CHUNK: usize = 32;

/// Mean weighted log loss over the batch and its gradient.
pub fn loss_and_gradients(params: &ModelParams, batch: &[&Example]) -> Result<(f64, Gradients)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Config("empty training batch".into()));
    }
    let w = params.config().loss_weights;
    let partials = batch
        .par_chunks(GRADIENT_CHUNK)
        .map(|part| -> Result<(f64, Gradients)> {
            let mut grads = params.zero_grads();
            let mut total = 0.0;
            for ex in part {
                let trace = params.forward_trace(&ex.bundle)?;
                let y = ex.labels.as_array();
                let mut d = [0.0; 3];
                for j in 0..3 {
                    total += w[j] * log_loss(trace.probs[j], y[j]);
                    d[j] = d_loss_d_logit(trace.probs[j], y[j], w[j], n);
                }
                params.backward(&ex.bundle, &trace, d, &mut grads);
            }
            Ok((total, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut total, mut grads) = iter.next().expect("non-empty batch");
    for (t, g) in iter {
        total += t;
        grads.add_assign(&g);
    }
    Ok((total / n as f64, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.zero_grads().data;
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.data[i]);
            for j in 0..tensor.data.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = c.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.epsilon);
                tensor.data[j] = round_f32(tensor.data[j] - update);
            }
        }
    }
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(params: &mut ModelParams, batch: &[&Example], opt: &mut Adam) -> Result<f64> {
    let (loss, grads) = loss_and_gradients(params, batch)?;
    for (t, g) in params.tensors.iter().zip(&grads.data) {
        if let Some(index) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: t.name.clone(),
                index,
            });
        }
    }
    opt.apply(params, &grads);
    if !params.is_finite() {
        return Err(Error::NonFiniteGradient {
            tensor: "parameters after update".into(),
            index: 0,
        });
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seed of the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 256,
            adam: AdamConfig {
                learning_rate: 2e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.adam.learning_rate >= 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size)
    }
}

/// Example order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// 1-based global step.
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

/// Mini-batch training continuing from `opt.step`, so a run resumed from a
/// saved model and optimizer state replays the same batches.
pub fn fit(
    params: &mut ModelParams,
    opt: &mut Adam,
    examples: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&ModelParams, &Adam, StepInfo) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let per_epoch = cfg.steps_per_epoch(examples.len());
    let total = (per_epoch * cfg.epochs) as u64;
    while opt.step < total {
        let epoch = opt.step as usize / per_epoch;
        let batch = opt.step as usize % per_epoch;
        let order = epoch_order(examples.len(), cfg.seed, epoch);
        let chunk = &order[batch * cfg.batch_size..((batch + 1) * cfg.batch_size).min(order.len())];
        let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let loss = train_step(params, &refs, opt)?;
        on_step(params, opt, StepInfo { step: opt.step, epoch, loss })?;
    }
    Ok(())
}
