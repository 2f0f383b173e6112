use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::ShapeDataset;
use super::net::RefNet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefNetTrainConfig {
    /// Number of minibatch updates.
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RefNetTrainConfig {
    fn default() -> Self {
        RefNetTrainConfig {
            steps: 1500,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainReport {
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
}

/// Fraction of images the network classifies correctly.
pub fn accuracy(net: &RefNet, data: &ShapeDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let correct = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(x, &y)| Ok((net.forward(x)?.predicted_class() == y as usize) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

/// Minibatch SGD with momentum on softmax cross-entropy. Parameters are
/// rounded to `f32` at the end so the in-memory network equals its checkpoint.
pub fn train_refnet(
    net: &mut RefNet,
    data: &ShapeDataset,
    cfg: &RefNetTrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if cfg.steps == 0 || !cfg.lr.is_finite() || cfg.lr <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::invalid(
            "steps and batch_size must be >= 1 and lr > 0",
        ));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::invalid("momentum must be in [0, 1)"));
    }
    if let Some(&bad) = data
        .labels
        .iter()
        .find(|&&l| l as usize >= net.config().n_classes)
    {
        return Err(Error::invalid(format!(
            "label {bad} exceeds network classes"
        )));
    }
    let initial_accuracy = accuracy(net, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut velocity = vec![0.0; net.params().len()];
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        // Per-sample gradients in parallel, summed in batch order.
        let per_sample = batch
            .par_iter()
            .map(|&i| net.backward_params(&data.images[i], data.labels[i] as usize))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; velocity.len()];
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l * scale;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b * scale;
            }
        }
        last_loss = loss;
        for ((p, v), g) in net.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v - cfg.lr * g;
            *p += *v;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("training loss diverged".into()));
        }
    }
    net.round_to_f32();
    Ok(TrainReport {
        initial_accuracy,
        final_accuracy: accuracy(net, data)?,
        final_loss: last_loss,
    })
}
