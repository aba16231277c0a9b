//! Activation stash policies and the byte-exact memory ledger.
//!
//! The ledger counts exactly the formula bytes of live stash payloads plus
//! declared recomputation buffers. It is an analytic stand-in for process
//! memory measurement: footprint claims become exact assertions instead of
//! platform-noisy samples.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;

use crate::bitmap::{compress, decompress, prune, BitmapTensor};
use crate::error::{Error, Result};
use crate::f16::f16_round_trip;
use crate::footprint::footprint_dense;
use crate::tensor::{DenseTensor, Precision};

// ── Policy ──────────────────────────────────────────────────────────────

/// Storage format for stashed activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StashFormat {
    Dense,
    Bitmap,
}

impl StashFormat {
    pub const fn label(self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::Bitmap => "bitmap",
        }
    }
}

/// The strategy product: format x prune threshold x value precision x
/// optional checkpoint interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StashPolicy {
    pub format: StashFormat,
    /// Values with `|v| < prune_threshold` are zeroed before storage; 0 = off.
    pub prune_threshold: f32,
    pub value_precision: Precision,
    /// Store only every m-th layer's input; intermediate activations are
    /// recomputed during the backward pass. `None` or 1 = no checkpointing.
    pub checkpoint_every_m: Option<NonZeroUsize>,
    /// Stash only the positivity mask for ReLU layers (their backward needs
    /// nothing else). Off by default so the full compress path is exercised.
    pub relu_mask_only: bool,
}

impl StashPolicy {
    pub fn new(
        format: StashFormat,
        prune_threshold: f32,
        value_precision: Precision,
        checkpoint_every_m: Option<NonZeroUsize>,
    ) -> Result<Self> {
        if prune_threshold < 0.0 || prune_threshold.is_nan() {
            return Err(Error::InvalidInput(format!(
                "prune threshold must be >= 0, got {prune_threshold}"
            )));
        }
        Ok(Self {
            format,
            prune_threshold,
            value_precision,
            checkpoint_every_m,
            relu_mask_only: false,
        })
    }

    pub fn dense_fp32() -> Self {
        Self {
            format: StashFormat::Dense,
            prune_threshold: 0.0,
            value_precision: Precision::Fp32,
            checkpoint_every_m: None,
            relu_mask_only: false,
        }
    }

    pub fn bitmap_fp32() -> Self {
        Self { format: StashFormat::Bitmap, ..Self::dense_fp32() }
    }

    pub fn with_threshold(self, t: f32) -> Self {
        Self { prune_threshold: t, ..self }
    }

    pub fn with_precision(self, p: Precision) -> Self {
        Self { value_precision: p, ..self }
    }

    pub fn with_checkpoint_m(self, m: usize) -> Self {
        Self { checkpoint_every_m: NonZeroUsize::new(m), ..self }
    }

    /// Effective checkpoint interval; 1 means every layer is stored.
    pub fn interval(&self) -> usize {
        self.checkpoint_every_m.map_or(1, NonZeroUsize::get)
    }

    pub fn label(&self) -> String {
        let mut s = format!("{}_{}", self.format.label(), self.value_precision.label());
        if self.prune_threshold > 0.0 {
            s.push_str(&format!("_t{}", self.prune_threshold));
        }
        if self.interval() > 1 {
            s.push_str(&format!("_m{}", self.interval()));
        }
        s
    }
}

// ── Handles ─────────────────────────────────────────────────────────────

/// What a stash handle actually holds.
#[derive(Debug, Clone)]
pub enum StashPayload {
    Dense(DenseTensor<f32>),
    Bitmap(BitmapTensor),
    /// Positivity mask for a ReLU input: one bit per element, no values.
    /// Restores to a 0/1 indicator tensor (sufficient for ReLU backward).
    Mask { shape: Vec<usize>, bits: Vec<u8> },
    /// Layer inside a checkpoint segment: nothing stored, recompute later.
    CheckpointMarker { segment_id: usize },
}

/// One stored activation, charged to the ledger until restored.
#[derive(Debug, Clone)]
pub struct StashHandle {
    pub layer_id: usize,
    pub payload: StashPayload,
    pub charged_bytes: u64,
}

impl StashHandle {
    pub fn is_marker(&self) -> bool {
        matches!(self.payload, StashPayload::CheckpointMarker { .. })
    }

    /// Non-zero count of the stored payload, when one exists.
    pub fn stored_nnz(&self) -> Option<u64> {
        match &self.payload {
            StashPayload::Dense(t) => {
                Some(t.data().iter().filter(|&&v| v != 0.0).count() as u64)
            }
            StashPayload::Bitmap(b) => Some(b.nnz() as u64),
            StashPayload::Mask { bits, .. } => {
                Some(bits.iter().map(|b| u64::from(b.count_ones())).sum())
            }
            StashPayload::CheckpointMarker { .. } => None,
        }
    }
}

// ── Ledger ──────────────────────────────────────────────────────────────

/// Byte-exact accounting of live stash storage with peak tracking.
#[derive(Debug, Default, Clone)]
pub struct MemoryLedger {
    live_bytes: u64,
    peak_bytes: u64,
    total_charged: u64,
    total_credited: u64,
    /// Bytes charged by the most recent store per layer.
    per_layer: BTreeMap<usize, u64>,
}

/// Read-only snapshot of a ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerReport {
    pub live_bytes: u64,
    pub peak_bytes: u64,
    pub per_layer: Vec<(usize, u64)>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, layer: Option<usize>, bytes: u64) {
        self.live_bytes += bytes;
        self.total_charged += bytes;
        if let Some(id) = layer {
            self.per_layer.insert(id, bytes);
        }
        if self.live_bytes > self.peak_bytes {
            self.peak_bytes = self.live_bytes;
        }
    }

    pub fn credit(&mut self, bytes: u64) {
        debug_assert!(bytes <= self.live_bytes, "credit exceeds live bytes");
        self.live_bytes = self.live_bytes.saturating_sub(bytes);
        self.total_credited += bytes;
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    pub fn total_charged(&self) -> u64 {
        self.total_charged
    }

    pub fn total_credited(&self) -> u64 {
        self.total_credited
    }

    /// Restart peak tracking from the current live level.
    pub fn reset_peak(&mut self) {
        self.peak_bytes = self.live_bytes;
    }

    pub fn report(&self) -> LedgerReport {
        LedgerReport {
            live_bytes: self.live_bytes,
            peak_bytes: self.peak_bytes,
            per_layer: self.per_layer.iter().map(|(&k, &v)| (k, v)).collect(),
        }
    }
}

// ── Store / restore ─────────────────────────────────────────────────────

/// Run an activation through the stash pipeline (prune, then precision
/// conversion, then compression) and charge the ledger with its formula
/// bytes. Layers that are not checkpoint boundaries get a zero-byte marker.
pub fn stash_store(
    ledger: &mut MemoryLedger,
    policy: &StashPolicy,
    layer_id: usize,
    activation: &DenseTensor<f32>,
) -> Result<StashHandle> {
    if activation.is_empty() {
        return Err(Error::InvalidInput("cannot stash an empty activation".into()));
    }
    let m = policy.interval();
    if m > 1 && layer_id % m != 0 {
        ledger.charge(Some(layer_id), 0);
        return Ok(StashHandle {
            layer_id,
            payload: StashPayload::CheckpointMarker { segment_id: layer_id / m },
            charged_bytes: 0,
        });
    }

    let pruned = prune(activation, policy.prune_threshold)?;
    let (payload, bytes) = match policy.format {
        StashFormat::Bitmap => {
            // Compression converts to the target precision itself; a value
            // that rounds to fp16 zero is dropped from the bitmap.
            let b = compress(&pruned, policy.value_precision)?;
            let bytes = b.storage_bytes();
            (StashPayload::Bitmap(b), bytes)
        }
        StashFormat::Dense => {
            let stored = match policy.value_precision {
                Precision::Fp32 => pruned,
                Precision::Fp16 => pruned.map(f16_round_trip),
            };
            let bytes = footprint_dense(stored.numel() as u64, policy.value_precision);
            (StashPayload::Dense(stored), bytes)
        }
    };
    ledger.charge(Some(layer_id), bytes);
    Ok(StashHandle { layer_id, payload, charged_bytes: bytes })
}

/// Stash only the positivity mask of a ReLU input: `ceil(n/8)` bytes, no
/// values. Falls back to a checkpoint marker on non-boundary layers exactly
/// like [`stash_store`].
pub fn stash_store_relu_mask(
    ledger: &mut MemoryLedger,
    policy: &StashPolicy,
    layer_id: usize,
    activation: &DenseTensor<f32>,
) -> Result<StashHandle> {
    if activation.is_empty() {
        return Err(Error::InvalidInput("cannot stash an empty activation".into()));
    }
    let m = policy.interval();
    if m > 1 && layer_id % m != 0 {
        ledger.charge(Some(layer_id), 0);
        return Ok(StashHandle {
            layer_id,
            payload: StashPayload::CheckpointMarker { segment_id: layer_id / m },
            charged_bytes: 0,
        });
    }
    let pruned = prune(activation, policy.prune_threshold)?;
    let n = pruned.numel();
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (i, &v) in pruned.data().iter().enumerate() {
        if v > 0.0 {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    let bytes = bits.len() as u64;
    ledger.charge(Some(layer_id), bytes);
    Ok(StashHandle {
        layer_id,
        payload: StashPayload::Mask { shape: pruned.shape().to_vec(), bits },
        charged_bytes: bytes,
    })
}

/// Restore a stashed activation to dense working precision and credit the
/// ledger. Consumes the handle: a second restore cannot be expressed.
///
/// Checkpoint markers carry no data; the caller must recompute the segment
/// instead (see the model's backward pass).
pub fn stash_restore(ledger: &mut MemoryLedger, handle: StashHandle) -> Result<DenseTensor<f32>> {
    let restored = match handle.payload {
        StashPayload::Dense(t) => t,
        StashPayload::Bitmap(b) => decompress(&b)?,
        StashPayload::Mask { shape, bits } => DenseTensor::from_fn(shape, |i| {
            f32::from((bits[i / 8] >> (i % 8)) & 1)
        }),
        StashPayload::CheckpointMarker { segment_id } => {
            return Err(Error::ProtocolViolation(format!(
                "layer {} is a checkpoint marker (segment {segment_id}); \
                 its activation must be recomputed, not restored",
                handle.layer_id
            )));
        }
    };
    ledger.credit(handle.charged_bytes);
    Ok(restored)
}

// ── Checkpoint planning ─────────────────────────────────────────────────

/// Layer indices whose inputs are stored under checkpoint-every-m:
/// `{0, m, 2m, ...}`. With `m >= num_layers` only layer 0 is stored.
pub fn plan_checkpoints(num_layers: usize, m: usize) -> Vec<usize> {
    if m == 0 {
        return Vec::new();
    }
    (0..num_layers).step_by(m).collect()
}

/// Half-open layer ranges forming the `ceil(L/m)` checkpoint segments.
pub fn plan_segments(num_layers: usize, m: usize) -> Vec<std::ops::Range<usize>> {
    plan_checkpoints(num_layers, m)
        .into_iter()
        .map(|start| start..(start + m).min(num_layers))
        .collect()
}
