//! Operation-count comparison: multiply-accumulates re-executed by
//! checkpoint recomputation versus elements moved by stash compression.
//! A platform-independent proxy for the runtime trade-off.

use bitstash_core::analyzer::{load_model_spec, ModelSpec, Table};
use bitstash_core::stash::plan_segments;
use bitstash_core::Result;

use crate::args::{OpcountArgs, OutputFormat};
use crate::CommandOutput;

/// One row of the op-count table.
#[derive(Debug, Clone)]
pub struct OpCountRow {
    pub m: usize,
    pub forward_macs: u64,
    /// MACs re-executed during backward recomputation per training step.
    pub recompute_macs: u64,
    /// Elements touched by compress + decompress per step: 2n per stored
    /// layer (both algorithms are single-pass).
    pub stash_element_moves: u64,
    pub macs_per_element_moved: f64,
}

/// Compute the table for each checkpoint interval.
pub fn opcount(spec: &ModelSpec, m_values: &[usize]) -> Result<Vec<OpCountRow>> {
    let per_layer_macs = spec.forward_macs_per_layer()?;
    let shapes = spec.layer_input_shapes()?;
    let elements: Vec<u64> = shapes.iter().map(|s| s.iter().product::<usize>() as u64).collect();
    let forward_macs: u64 = per_layer_macs.iter().sum();
    let mut rows = Vec::with_capacity(m_values.len());
    for &m in m_values {
        // Segment [start, end): the inputs of layers start+1..end are
        // recomputed, i.e. layers start..end-1 run forward again.
        let recompute_macs: u64 = plan_segments(spec.layers.len(), m)
            .into_iter()
            .map(|seg| per_layer_macs[seg.start..seg.end.saturating_sub(1)].iter().sum::<u64>())
            .sum();
        let stash_element_moves: u64 =
            (0..spec.layers.len()).filter(|i| i % m == 0).map(|i| 2 * elements[i]).sum();
        rows.push(OpCountRow {
            m,
            forward_macs,
            recompute_macs,
            stash_element_moves,
            macs_per_element_moved: recompute_macs as f64 / stash_element_moves as f64,
        });
    }
    Ok(rows)
}

pub fn render(rows: &[OpCountRow], format: OutputFormat) -> String {
    let mut table = Table::new(&[
        "checkpoint_m",
        "forward_macs",
        "recompute_macs",
        "stash_element_moves",
        "macs_per_element_moved",
    ]);
    for r in rows {
        table.push_row(vec![
            r.m.to_string(),
            r.forward_macs.to_string(),
            r.recompute_macs.to_string(),
            r.stash_element_moves.to_string(),
            format!("{:.3}", r.macs_per_element_moved),
        ]);
    }
    match format {
        OutputFormat::Csv => table.to_csv(),
        OutputFormat::Md => table.to_markdown(),
    }
}

pub fn cmd_opcount(args: &OpcountArgs) -> Result<CommandOutput> {
    let spec = load_model_spec(&args.spec)?;
    let rows = opcount(&spec, &args.m)?;
    Ok(CommandOutput::new(render(&rows, args.output.format)))
}
