//! Histogram of absolute activation values over one forward pass.

use bitstash_core::analyzer::{activation_histogram, load_model_spec, Table};
use bitstash_core::dataset::SyntheticDataset;
use bitstash_core::model::{LayerKind, Model};
use bitstash_core::{Error, Result};

use crate::args::{HistArgs, OutputFormat};
use crate::CommandOutput;

/// Pruning thresholds whose below-threshold mass is always reported.
pub const REPORTED_THRESHOLDS: [f64; 4] = [0.0, 0.01, 0.05, 0.1];

pub fn cmd_hist(args: &HistArgs) -> Result<CommandOutput> {
    let spec = load_model_spec(&args.spec)?;
    let edges: Vec<f64> = args
        .edges
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad bin edge \"{s}\"")))
        })
        .collect::<Result<_>>()?;

    let model: Model<f32> = spec.build_model(args.seed)?;
    let classes = spec
        .layers
        .iter()
        .rev()
        .find_map(|k| match k {
            LayerKind::Linear { out_features, .. } => Some(*out_features),
            _ => None,
        })
        .unwrap_or(4);
    let dataset = SyntheticDataset::new(args.seed, spec.batch_size, classes, spec.input_shape)?;
    let (batch, _) = dataset.batch(0, spec.batch_size)?;
    let report = activation_histogram(&model, batch, &edges, &REPORTED_THRESHOLDS)?;

    let mut bins = Table::new(&["bin_start", "bin_end", "count", "fraction"]);
    for (i, &count) in report.counts.iter().enumerate() {
        bins.push_row(vec![
            format!("{}", report.bin_edges[i]),
            format!("{}", report.bin_edges[i + 1]),
            count.to_string(),
            format!("{:.6}", count as f64 / report.total as f64),
        ]);
    }
    let mut thresholds = Table::new(&["threshold", "fraction_below"]);
    for (t, frac) in &report.threshold_fractions {
        thresholds.push_row(vec![format!("{t}"), format!("{frac:.6}")]);
    }

    let text = match args.output.format {
        OutputFormat::Csv => format!("{}\n{}", bins.to_csv(), thresholds.to_csv()),
        OutputFormat::Md => format!(
            "## |activation| histogram ({}, {} values)\n\n{}\n## Below-threshold mass\n\n{}",
            spec.name,
            report.total,
            bins.to_markdown(),
            thresholds.to_markdown()
        ),
    };
    Ok(CommandOutput::new(text))
}
