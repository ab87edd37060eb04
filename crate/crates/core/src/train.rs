//! Shared epoch loop: shuffled minibatches, per-epoch mean loss, and a
//! parameter snapshot at the lowest epoch loss.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10_000,
            batch_size: 4096,
            lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Param, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, Param, "batch_size must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Param, "lr must be positive");
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_loss: f64,
}

impl TrainLog {
    /// `epoch,loss` CSV, one row per epoch (1-based).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, l));
        }
        s
    }
}

/// A model that can take one optimizer step on a minibatch.
pub trait Trainable {
    fn train_step(&mut self, batch: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<f64>;
    fn snapshot(&self) -> Vec<f64>;
    fn restore(&mut self, params: &[f64]) -> Result<()>;
}

/// Runs `cfg.epochs` epochs over the rows of `data` and leaves `model` at the
/// parameters of the epoch with the lowest mean training loss.
pub fn fit<M: Trainable>(model: &mut M, data: ArrayView2<f64>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainLog> {
    cfg.validate()?;
    let n = data.nrows();
    ensure!(n > 0, Data, "no training rows");
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog {
        best_loss: f64::INFINITY,
        ..TrainLog::default()
    };
    let mut best = model.snapshot();
    let mut batch = Array2::<f64>::zeros((0, data.ncols()));
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if batch.nrows() != chunk.len() {
                batch = Array2::zeros((chunk.len(), data.ncols()));
            }
            for (mut dst, &i) in batch.axis_iter_mut(Axis(0)).zip(chunk) {
                dst.assign(&data.row(i));
            }
            let loss = model.train_step(batch.view(), rng)?;
            total += loss * chunk.len() as f64;
        }
        let epoch_loss = total / n as f64;
        log.epoch_losses.push(epoch_loss);
        if epoch_loss < log.best_loss {
            log.best_loss = epoch_loss;
            log.best_epoch = epoch;
            best = model.snapshot();
        }
        log::debug!("epoch {} loss {epoch_loss:.6}", epoch + 1);
    }
    model.restore(&best)?;
    Ok(log)
}
