//! Per-layer footprint analysis and storage-strategy comparison.

use bitstash_core::analyzer::{
    analyze_model, fp16_band_check, load_model_spec, strategy_compare, SparsitySource,
    StrategyRow, Table, FP16_BAND_PCT,
};
use bitstash_core::footprint::{format_2dp, format_mib};
use bitstash_core::stash::StashPolicy;
use bitstash_core::tensor::Precision;
use bitstash_core::Result;

use crate::args::{FootprintArgs, OutputFormat};
use crate::CommandOutput;

/// The strategy sweep tabulated by the command: plain formats, the fp16
/// combination, prune thresholds, and checkpoint intervals {2, 4, 8}.
pub fn standard_policies() -> Vec<StashPolicy> {
    let mut policies = vec![
        StashPolicy::dense_fp32(),
        StashPolicy::bitmap_fp32(),
        StashPolicy::bitmap_fp32().with_precision(Precision::Fp16),
    ];
    for t in [0.01f32, 0.05, 0.1] {
        policies.push(StashPolicy::bitmap_fp32().with_threshold(t));
    }
    for m in [2usize, 4, 8] {
        policies.push(StashPolicy::dense_fp32().with_checkpoint_m(m));
        policies.push(StashPolicy::bitmap_fp32().with_checkpoint_m(m));
    }
    policies
}

pub fn cmd_footprint(args: &FootprintArgs) -> Result<CommandOutput> {
    let spec = load_model_spec(&args.spec)?;
    let source = if args.live {
        SparsitySource::Live { seed: args.seed }
    } else {
        SparsitySource::Assumed
    };
    let analysis = analyze_model(&spec, &source)?;

    let mut layers = Table::new(&[
        "layer",
        "kind",
        "elements",
        "nnz",
        "density",
        "density_source",
        "dense_fp32_bytes",
        "bitmap_fp32_bytes",
        "bitmap_fp16_bytes",
        "coo_int64_bytes",
        "dense_fp32_mib",
        "bitmap_fp32_mib",
    ]);
    for r in &analysis.layers {
        layers.push_row(vec![
            r.layer_id.to_string(),
            r.kind.clone(),
            r.activation_elements.to_string(),
            r.nnz.to_string(),
            format!("{:.4}", r.density),
            r.density_source.to_string(),
            r.dense_fp32_bytes.to_string(),
            r.bitmap_fp32_bytes.to_string(),
            r.bitmap_fp16_bytes.to_string(),
            r.coo_int64_bytes.to_string(),
            format_mib(r.dense_fp32_bytes),
            format_mib(r.bitmap_fp32_bytes),
        ]);
    }

    let mut kinds = Table::new(&["kind", "elements", "dense_fp32_bytes", "bitmap_fp32_bytes"]);
    for (kind, (elements, dense, bitmap)) in &analysis.totals_by_kind {
        kinds.push_row(vec![
            kind.clone(),
            elements.to_string(),
            dense.to_string(),
            bitmap.to_string(),
        ]);
    }

    let rows = strategy_compare(&spec, &standard_policies(), &source)?;
    let mut strategies = Table::new(&["policy", "total_stash_bytes", "total_mib", "reduction_pct"]);
    for r in &rows {
        strategies.push_row(vec![
            r.label.clone(),
            r.total_bytes.to_string(),
            format_mib(r.total_bytes),
            format_2dp(r.reduction_pct),
        ]);
    }

    let text = match args.output.format {
        OutputFormat::Csv => format!(
            "{}\n{}\n{}",
            layers.to_csv(),
            kinds.to_csv(),
            strategies.to_csv()
        ),
        OutputFormat::Md => format!(
            "## Per-layer activations ({})\n\n{}\n## Totals by layer kind\n\n{}\n## Strategies\n\n{}",
            spec.name,
            layers.to_markdown(),
            kinds.to_markdown(),
            strategies.to_markdown()
        ),
    };
    let mut output = CommandOutput::new(text);
    output.warnings.extend(band_warnings(&rows));
    Ok(output)
}

/// Out-of-band warnings for any bitmap+fp16 strategy rows.
pub fn band_warnings(rows: &[StrategyRow]) -> Vec<String> {
    rows.iter()
        .filter(|r| r.label.starts_with("bitmap_fp16") && !fp16_band_check(r.reduction_pct))
        .map(|r| {
            format!(
                "out-of-band: {} reduction {:.2}% lies outside the {}-{}% band \
                 (density-dependent)",
                r.label, r.reduction_pct, FP16_BAND_PCT.0, FP16_BAND_PCT.1
            )
        })
        .collect()
}
