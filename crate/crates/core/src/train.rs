//! Loss, optimizer, metrics and the mini-batch training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::ForecastModel;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Drives batch order and dropout masks. Model initialization has its
    /// own seed in the model spec.
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    /// Batch 64, learning rate 0.001, seed 1111, 50 epochs.
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 50,
            seed: 1111,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.adam.learning_rate.is_nan() || self.adam.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::config("beta", "moment decay rates must lie in [0, 1)"));
        }
        if self.adam.eps.is_nan() || self.adam.eps <= 0.0 {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }
}

/// Mean squared error between two equal-length vectors.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Usage(format!(
            "mse_loss needs equal nonempty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Mean squared error as a graph node, averaged over every entry.
pub fn mse_node<S: Scalar>(g: &mut Graph<S>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Usage(format!(
            "mse_loss shapes differ: {:?} vs {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// One bias-corrected adaptive-moment update; `step` counts from 1.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, grads: &[Vec<S>], cfg: &AdamConfig, step: u64) -> Result<()> {
    if step == 0 {
        return Err(Error::Usage("adam step counter starts at 1".into()));
    }
    if grads.len() != params.len() {
        return Err(Error::Usage(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
    let exp = i32::try_from(step).unwrap_or(i32::MAX);
    let c1 = S::of(1.0 - cfg.beta1.powi(exp));
    let c2 = S::of(1.0 - cfg.beta2.powi(exp));
    let (lr, eps) = (S::of(cfg.learning_rate), S::of(cfg.eps));
    for (p, g) in params.iter_mut().zip(grads) {
        if g.len() != p.data.len() {
            return Err(Error::shape("adam_step", &p.shape, &[g.len()]));
        }
        for (((w, m), v), &gv) in p
            .data
            .iter_mut()
            .zip(p.first_moment.iter_mut())
            .zip(p.second_moment.iter_mut())
            .zip(g)
        {
            *m = b1 * *m + one_b1 * gv;
            *v = b2 * *v + one_b2 * gv * gv;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Root mean squared error over all entries of `M x tau` predictions.
pub fn rmse(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    Ok(mean_of(preds, truths, |d| d * d)?.sqrt())
}

/// Mean absolute error over all entries of `M x tau` predictions.
pub fn mae(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    mean_of(preds, truths, f64::abs)
}

fn mean_of(preds: &[Vec<f64>], truths: &[Vec<f64>], f: impl Fn(f64) -> f64) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::Usage(format!(
                "prediction of length {} against truth of length {}",
                p.len(),
                t.len()
            )));
        }
        total += p.iter().zip(t).map(|(a, b)| f(a - b)).sum::<f64>();
        count += p.len();
    }
    if count == 0 {
        return Err(Error::Usage("metrics need at least one entry".into()));
    }
    Ok(total / count as f64)
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

/// Seed of the batch order for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Sample order of one epoch: a seeded permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    order
}

/// Mini-batch trainer: holds the optimizer step counter across epochs so
/// callers can interleave evaluation between epochs.
pub struct Trainer<'a, S> {
    model: &'a mut ForecastModel<S>,
    config: TrainConfig,
    step: u64,
    epoch: usize,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(model: &'a mut ForecastModel<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            step: 0,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &ForecastModel<S> {
        self.model
    }

    /// One pass over `samples` in a seeded order. Returns the mean of the
    /// batch losses weighted by batch size, i.e. the per-sample mean.
    pub fn run_epoch(&mut self, samples: &[WindowSample]) -> Result<f64> {
        check_samples(self.model, samples)?;
        let order = epoch_order(samples.len(), self.config.seed, self.epoch);
        let spec = self.model.spec().clone();
        let mut weighted = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let dropout_seed = epoch_seed(self.config.seed ^ 0x5EED, self.epoch) ^ b as u64;
            let mut g = if spec.dropout > 0.0 {
                Graph::training(dropout_seed)
            } else {
                Graph::new()
            };
            let bind = self.model.params().bind(&mut g, true)?;
            let windows: Vec<&[f64]> = batch.iter().map(|&i| samples[i].input.as_slice()).collect();
            let input = self.model.pack_batch(&mut g, &windows)?;
            let mut target = vec![S::zero(); spec.horizon * batch.len()];
            for (j, &i) in batch.iter().enumerate() {
                for (s, &v) in samples[i].target.iter().enumerate() {
                    target[s * batch.len() + j] = S::of(v);
                }
            }
            let target = g.constant(&[spec.horizon, batch.len()], target)?;
            let out = self.model.forward_graph(&mut g, &bind, input)?;
            let loss = mse_node(&mut g, out.prediction, target)?;
            let value = g.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {value} at epoch {}",
                    self.epoch + 1
                )));
            }
            g.backward(loss)?;
            let grads = self.model.params().gradients(&g, &bind);
            self.step += 1;
            adam_step(self.model.params_mut(), &grads, &self.config.adam, self.step)?;
            weighted += value * batch.len() as f64;
        }
        self.epoch += 1;
        Ok(weighted / samples.len() as f64)
    }
}

fn check_samples<S: Scalar>(model: &ForecastModel<S>, samples: &[WindowSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::config("samples", "no training windows"));
    }
    let spec = model.spec();
    let per = spec.channels() * spec.window;
    for s in samples {
        if s.input.len() != per {
            return Err(Error::shape(
                "training window",
                &[s.input.len()],
                &[spec.channels(), spec.window],
            ));
        }
        if s.target.len() != spec.horizon {
            return Err(Error::shape("training target", &[s.target.len()], &[spec.horizon]));
        }
    }
    Ok(())
}

/// Trains for `config.epochs` epochs. Zero epochs leaves the model as is.
pub fn train<S: Scalar>(
    model: &mut ForecastModel<S>,
    samples: &[WindowSample],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        config.validate()?;
        return Ok(history);
    }
    check_samples(model, samples)?;
    let mut trainer = Trainer::new(model, config.clone())?;
    for _ in 0..config.epochs {
        let start = Instant::now();
        history.train_loss.push(trainer.run_epoch(samples)?);
        history.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(history)
}

/// Predictions for every sample, in sample order.
pub fn predict_samples<S: Scalar>(model: &ForecastModel<S>, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>> {
    let windows: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    model.predict_batch(&windows, 256)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
}

pub fn evaluate<S: Scalar>(model: &ForecastModel<S>, samples: &[WindowSample]) -> Result<Metrics> {
    let preds = predict_samples(model, samples)?;
    let truths: Vec<Vec<f64>> = samples.iter().map(|s| s.target.clone()).collect();
    Ok(Metrics {
        rmse: rmse(&preds, &truths)?,
        mae: mae(&preds, &truths)?,
    })
}

#[cfg(test)]
mod tests;
