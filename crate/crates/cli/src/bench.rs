//! Compression benchmark: six reference convolution-activation shapes at
//! batch 16, swept over five non-zero density levels. For each cell an
//! activation with exactly that density is synthesized, compressed, and
//! priced both by the closed-form footprint and by the live ledger charge
//! (the two must agree byte-for-byte).

use bitstash_core::bitmap::compress;
use bitstash_core::dataset::synthesize_with_density;
use bitstash_core::footprint::{
    footprint_bitmap, footprint_dense, format_2dp, format_mib, improvement_pct,
};
use bitstash_core::stash::{stash_store, MemoryLedger, StashPolicy};
use bitstash_core::tensor::Precision;
use bitstash_core::Result;
use bitstash_core::analyzer::Table;

use crate::args::{BenchArgs, OutputFormat};
use crate::CommandOutput;

/// The reference convolution activation shapes: (channels, width, height).
pub const BENCH_CONFIGS: [(usize, usize, usize); 6] =
    [(3, 224, 224), (7, 112, 112), (64, 56, 56), (128, 28, 28), (256, 14, 14), (512, 7, 7)];

/// Swept non-zero percentages.
pub const BENCH_DENSITIES: [u32; 5] = [0, 25, 50, 75, 100];

pub const BENCH_BATCH: usize = 16;

/// One benchmark cell.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub elements: u64,
    pub nonzero_pct: u32,
    pub dense_bytes: u64,
    pub bitmap_bytes: u64,
    /// Live bytes charged by the ledger when the compressed activation was
    /// stashed; equals `bitmap_bytes` by the footprint law.
    pub ledger_bytes: u64,
    pub improvement_pct: f64,
}

/// Run all 30 cells.
pub fn run_bench(seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(BENCH_CONFIGS.len() * BENCH_DENSITIES.len());
    for (ci, &(c, w, h)) in BENCH_CONFIGS.iter().enumerate() {
        for (di, &pct) in BENCH_DENSITIES.iter().enumerate() {
            let shape = vec![BENCH_BATCH, c, h, w];
            let n: usize = shape.iter().product();
            let nnz = n * pct as usize / 100;
            let activation =
                synthesize_with_density(seed ^ ((ci * 8 + di) as u64), shape, nnz)?;

            let compressed = compress(&activation, Precision::Fp32)?;
            debug_assert_eq!(compressed.nnz(), nnz);
            let mut ledger = MemoryLedger::new();
            let handle = stash_store(&mut ledger, &StashPolicy::bitmap_fp32(), 0, &activation)?;

            let dense_bytes = footprint_dense(n as u64, Precision::Fp32);
            let bitmap_bytes = footprint_bitmap(nnz as u64, n as u64, Precision::Fp32)?;
            rows.push(BenchRow {
                channels: c,
                width: w,
                height: h,
                elements: n as u64,
                nonzero_pct: pct,
                dense_bytes,
                bitmap_bytes,
                ledger_bytes: handle.charged_bytes,
                improvement_pct: improvement_pct(dense_bytes, bitmap_bytes),
            });
        }
    }
    Ok(rows)
}

pub fn render(rows: &[BenchRow], format: OutputFormat) -> String {
    let mut table = Table::new(&[
        "batch",
        "channels",
        "width",
        "height",
        "elements",
        "nonzero_pct",
        "dense_mib",
        "bitmap_mib",
        "improvement_pct",
        "dense_bytes",
        "bitmap_bytes",
        "ledger_bytes",
    ]);
    for r in rows {
        table.push_row(vec![
            BENCH_BATCH.to_string(),
            r.channels.to_string(),
            r.width.to_string(),
            r.height.to_string(),
            r.elements.to_string(),
            r.nonzero_pct.to_string(),
            format_mib(r.dense_bytes),
            format_mib(r.bitmap_bytes),
            format_2dp(r.improvement_pct),
            r.dense_bytes.to_string(),
            r.bitmap_bytes.to_string(),
            r.ledger_bytes.to_string(),
        ]);
    }
    match format {
        OutputFormat::Csv => table.to_csv(),
        OutputFormat::Md => table.to_markdown(),
    }
}

pub fn cmd_bench(args: &BenchArgs) -> Result<CommandOutput> {
    let rows = run_bench(args.seed)?;
    Ok(CommandOutput::new(render(&rows, args.output.format)))
}
