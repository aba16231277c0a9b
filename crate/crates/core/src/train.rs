//! Training loop: SGD over a dataset under a stash policy, with per-epoch
//! metrics and ledger peaks. Single-threaded by contract; everything is
//! deterministic for a fixed seed.

use std::time::Instant;

use crate::dataset::SyntheticDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::softmax_cross_entropy;
use crate::stash::{MemoryLedger, StashPolicy};
use crate::tensor::DenseTensor;

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub policy: StashPolicy,
}

/// Metrics for one epoch.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Fraction of training samples classified correctly (argmax of the
    /// logits computed during the training pass, before each update).
    pub accuracy: f64,
    /// Peak live stash bytes within the epoch.
    pub peak_stash_bytes: u64,
    pub wall_seconds: f64,
}

/// Full outcome of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub model: Model<f32>,
    pub ledger: MemoryLedger,
}

/// Train `model` on the synthetic dataset. Batches walk the dataset in
/// order (samples are class-balanced round-robin), so two runs with equal
/// seeds and configs produce bit-identical parameters.
pub fn train(
    mut model: Model<f32>,
    dataset: &SyntheticDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.batch_size > dataset.num_samples {
        return Err(Error::InvalidInput(format!(
            "batch size {} invalid for dataset of {}",
            cfg.batch_size, dataset.num_samples
        )));
    }
    let batches = dataset.num_samples / cfg.batch_size;
    if batches == 0 {
        return Err(Error::InvalidInput("dataset smaller than one batch".into()));
    }
    let mut ledger = MemoryLedger::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        ledger.reset_peak();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for b in 0..batches {
            let (x, labels) = dataset.batch(b * cfg.batch_size, cfg.batch_size)?;
            let logits = model.forward(x, &cfg.policy, &mut ledger)?;
            correct += count_correct(&logits, &labels);
            seen += labels.len();
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            loss_sum += f64::from(loss);
            let grads = model.backward(&grad, &mut ledger)?;
            debug_assert_eq!(ledger.live_bytes(), 0);
            model.apply_sgd(&grads, cfg.learning_rate)?;
        }
        epochs.push(EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            accuracy: correct as f64 / seen as f64,
            peak_stash_bytes: ledger.peak_bytes(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { epochs, model, ledger })
}

fn count_correct(logits: &DenseTensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(bi, &label)| {
            let row = &logits.data()[bi * k..(bi + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            argmax == label
        })
        .count()
}
