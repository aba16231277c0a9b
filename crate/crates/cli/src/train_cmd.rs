//! Desk-scale training under a stash policy, emitting per-epoch metrics.

use std::path::Path;

use bitstash_core::analyzer::{
    analyze_model, fp16_band_check, load_model_spec, SparsitySource, Table, FP16_BAND_PCT,
};
use bitstash_core::dataset::{read_idx_images, read_idx_labels, SyntheticDataset};
use bitstash_core::footprint::improvement_pct;
use bitstash_core::model::{LayerKind, Model};
use bitstash_core::nn::softmax_cross_entropy;
use bitstash_core::stash::{MemoryLedger, StashFormat};
use bitstash_core::tensor::{DenseTensor, Precision};
use bitstash_core::train::{train, EpochMetrics, TrainConfig};
use bitstash_core::{Error, Result};

use crate::args::{OutputFormat, TrainArgs};
use crate::CommandOutput;

pub fn render(epochs: &[EpochMetrics], format: OutputFormat) -> String {
    let mut table =
        Table::new(&["epoch", "loss", "accuracy", "peak_stash_bytes", "wall_seconds"]);
    for e in epochs {
        table.push_row(vec![
            e.epoch.to_string(),
            // Full-precision loss: byte-identical CSV cells mean
            // bit-identical training trajectories.
            format!("{}", e.loss),
            format!("{}", e.accuracy),
            e.peak_stash_bytes.to_string(),
            format!("{:.3}", e.wall_seconds),
        ]);
    }
    match format {
        OutputFormat::Csv => table.to_csv(),
        OutputFormat::Md => table.to_markdown(),
    }
}

fn dump_params(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    for v in model.flat_params() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Train on IDX image/label files (shape must match the spec input).
fn train_idx(
    mut model: Model<f32>,
    images: &DenseTensor<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(Vec<EpochMetrics>, Model<f32>)> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let sample_elems: usize = images.shape()[1..].iter().product();
    let batches = n / cfg.batch_size;
    let mut ledger = MemoryLedger::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = std::time::Instant::now();
        ledger.reset_peak();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for b in 0..batches {
            let offset = b * cfg.batch_size;
            let mut shape = images.shape().to_vec();
            shape[0] = cfg.batch_size;
            let data =
                images.data()[offset * sample_elems..(offset + cfg.batch_size) * sample_elems]
                    .to_vec();
            let x = DenseTensor::new(shape, data)?;
            let batch_labels = &labels[offset..offset + cfg.batch_size];
            let logits = model.forward(x, &cfg.policy, &mut ledger)?;
            let k = logits.shape()[1];
            correct += batch_labels
                .iter()
                .enumerate()
                .filter(|(bi, &label)| {
                    let row = &logits.data()[bi * k..(bi + 1) * k];
                    row.iter()
                        .enumerate()
                        .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                        .map(|(i, _)| i)
                        == Some(label)
                })
                .count();
            let (loss, grad) = softmax_cross_entropy(&logits, batch_labels)?;
            loss_sum += f64::from(loss);
            let grads = model.backward(&grad, &mut ledger)?;
            model.apply_sgd(&grads, cfg.learning_rate)?;
        }
        epochs.push(EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            accuracy: correct as f64 / (batches * cfg.batch_size) as f64,
            peak_stash_bytes: ledger.peak_bytes(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((epochs, model))
}

pub fn cmd_train(args: &TrainArgs) -> Result<CommandOutput> {
    let spec = load_model_spec(&args.spec)?;
    let policy = args.policy.to_policy()?;
    let batch = args.batch.unwrap_or(spec.batch_size);
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: batch,
        learning_rate: args.lr,
        policy,
    };
    let model: Model<f32> = spec.build_model(args.seed)?;

    let (epochs, final_model) = match (&args.data_idx, &args.labels_idx) {
        (Some(images_path), Some(labels_path)) => {
            let images = read_idx_images(images_path)?;
            let labels = read_idx_labels(labels_path)?;
            let shape = images.tensor.shape();
            let expected = [shape[1], shape[2], shape[3]];
            if expected != spec.input_shape {
                return Err(Error::InvalidInput(format!(
                    "IDX image shape {expected:?} does not match spec input {:?}",
                    spec.input_shape
                )));
            }
            train_idx(model, &images.tensor, &labels, &cfg)?
        }
        _ => {
            let classes = spec
                .layers
                .iter()
                .rev()
                .find_map(|k| match k {
                    LayerKind::Linear { out_features, .. } => Some(*out_features),
                    _ => None,
                })
                .unwrap_or(4);
            let dataset = SyntheticDataset::new(args.seed, args.samples, classes, spec.input_shape)?;
            let outcome = train(model, &dataset, &cfg)?;
            (outcome.epochs, outcome.model)
        }
    };

    if let Some(path) = &args.params_out {
        dump_params(&final_model, path)?;
    }

    let mut output = CommandOutput::new(render(&epochs, args.output.format));
    // The bitmap+fp16 combination has a reported saving band; runs outside
    // it are density-dependent and get a labeled warning.
    if policy.format == StashFormat::Bitmap
        && policy.value_precision == Precision::Fp16
        && policy.interval() == 1
    {
        if let Some(last) = epochs.last() {
            let dense_baseline =
                analyze_model(&spec, &SparsitySource::Assumed)?.total_dense_fp32_bytes;
            let reduction = improvement_pct(dense_baseline, last.peak_stash_bytes);
            if !fp16_band_check(reduction) {
                output.warnings.push(format!(
                    "out-of-band: bitmap+fp16 reduction {:.2}% vs dense fp32 lies outside the \
                     {}-{}% band (density-dependent)",
                    reduction, FP16_BAND_PCT.0, FP16_BAND_PCT.1
                ));
            }
        }
    }
    Ok(output)
}
