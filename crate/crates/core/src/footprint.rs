//! Closed-form memory footprints for dense, bitmap, and COO storage.
//!
//! All sizes are exact byte counts. Bitmap storage rounds the presence bits
//! up to whole bytes (`ceil(n/8)`); sub-byte addressing does not exist.

use crate::error::{Error, Result};
use crate::tensor::Precision;

/// Index width for the COO comparison format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexWidth {
    Int32,
    Int64,
}

impl IndexWidth {
    pub const fn bytes(self) -> u64 {
        match self {
            Self::Int32 => 4,
            Self::Int64 => 8,
        }
    }
}

/// Bytes to store `n` values densely at the given precision.
pub fn footprint_dense(n: u64, precision: Precision) -> u64 {
    n * precision.bytes_per_value()
}

/// Bytes to store `nnz` non-zeros out of `n` values in the bitmap format:
/// one presence bit per element plus the packed non-zero values.
pub fn footprint_bitmap(nnz: u64, n: u64, precision: Precision) -> Result<u64> {
    if nnz > n {
        return Err(Error::InvalidInput(format!("nnz {nnz} exceeds element count {n}")));
    }
    Ok(nnz * precision.bytes_per_value() + n.div_ceil(8))
}

/// Bytes to store `nnz` non-zeros in coordinate-list form: each value plus a
/// full index tuple of `ndim` fixed-point indices.
pub fn footprint_coo(nnz: u64, ndim: u32, width: IndexWidth, precision: Precision) -> Result<u64> {
    if ndim == 0 {
        return Err(Error::InvalidInput("COO footprint requires at least one dimension".into()));
    }
    Ok((precision.bytes_per_value() + width.bytes() * u64::from(ndim)) * nnz)
}

/// Non-zero density below which the bitmap format beats dense storage at the
/// same precision. Solves bitmap == dense: `d* = (bpv - 1/8) / bpv`.
pub fn breakeven_density_bitmap(precision: Precision) -> f64 {
    let bpv = precision.bytes_per_value() as f64;
    (bpv - 0.125) / bpv
}

/// Byte counts for one activation under the three storage formats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootprintReport {
    pub dense_bytes: u64,
    pub bitmap_bytes: u64,
    pub coo_bytes: u64,
    /// `100 * (dense - bitmap) / dense`; negative when bitmap loses.
    pub improvement_pct: f64,
}

impl FootprintReport {
    pub fn new(dense_bytes: u64, bitmap_bytes: u64, coo_bytes: u64) -> Self {
        let improvement_pct = improvement_pct(dense_bytes, bitmap_bytes);
        Self { dense_bytes, bitmap_bytes, coo_bytes, improvement_pct }
    }
}

/// Percentage saved by `compressed` relative to `baseline`.
pub fn improvement_pct(baseline: u64, compressed: u64) -> f64 {
    100.0 * (baseline as f64 - compressed as f64) / baseline as f64
}

/// Bytes as binary mebibytes (2^20 bytes).
pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 20) as f64
}

/// Round to two decimals with ties away from zero, e.g. -3.125 -> "-3.13".
pub fn format_2dp(value: f64) -> String {
    format!("{:.2}", (value * 100.0).round() / 100.0)
}

/// MiB with two decimals, the presentation used in all reports.
pub fn format_mib(bytes: u64) -> String {
    format_2dp(mib(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_matches_reference_rows() {
        // 16x3x224x224 and 16x64x56x56 convolution inputs.
        assert_eq!(footprint_dense(2_408_448, Precision::Fp32), 9_633_792);
        assert_eq!(format_mib(9_633_792), "9.19");
        assert_eq!(format_mib(footprint_dense(3_211_264, Precision::Fp32)), "12.25");
        assert_eq!(footprint_dense(8, Precision::Fp16), 16);
    }

    #[test]
    fn bitmap_matches_reference_rows() {
        let n = 2_408_448;
        let empty = footprint_bitmap(0, n, Precision::Fp32).unwrap();
        assert_eq!(empty, 301_056);
        assert_eq!(format_mib(empty), "0.29");
        assert_eq!(format_2dp(improvement_pct(footprint_dense(n, Precision::Fp32), empty)), "96.88");

        let half = footprint_bitmap(n / 2, n, Precision::Fp32).unwrap();
        assert_eq!(half, 5_117_952);
        assert_eq!(format_mib(half), "4.88");
        assert_eq!(format_2dp(improvement_pct(footprint_dense(n, Precision::Fp32), half)), "46.88");

        // Fully dense: the presence bits cost exactly 1/32 extra.
        let full = footprint_bitmap(n, n, Precision::Fp32).unwrap();
        let pct = improvement_pct(footprint_dense(n, Precision::Fp32), full);
        assert_eq!(pct, -3.125);
        assert_eq!(format_2dp(pct), "-3.13");
    }

    #[test]
    fn bitmap_rejects_nnz_over_n() {
        assert!(footprint_bitmap(9, 8, Precision::Fp32).is_err());
    }

    #[test]
    fn bitmap_rounds_bits_up_to_bytes() {
        assert_eq!(footprint_bitmap(0, 1, Precision::Fp32).unwrap(), 1);
        assert_eq!(footprint_bitmap(0, 9, Precision::Fp32).unwrap(), 2);
    }

    #[test]
    fn coo_single_element() {
        assert_eq!(footprint_coo(1, 4, IndexWidth::Int64, Precision::Fp32).unwrap(), 36);
        assert!(footprint_coo(1, 0, IndexWidth::Int64, Precision::Fp32).is_err());
    }

    #[test]
    fn coo_breakeven_against_dense() {
        // Int32, 4-d: (4 + 16) * nnz == 4n at nnz = n/5, i.e. 20% non-zero.
        let n = 100u64;
        let at = footprint_coo(n / 5, 4, IndexWidth::Int32, Precision::Fp32).unwrap();
        assert_eq!(at, footprint_dense(n, Precision::Fp32));
        // Int64, 4-d: (4 + 32) * nnz == 4n at nnz = n/9.
        let n = 90u64;
        let at = footprint_coo(n / 9, 4, IndexWidth::Int64, Precision::Fp32).unwrap();
        assert_eq!(at, footprint_dense(n, Precision::Fp32));
    }

    #[test]
    fn breakeven_density_values() {
        assert_eq!(breakeven_density_bitmap(Precision::Fp32), 0.96875);
        assert_eq!(breakeven_density_bitmap(Precision::Fp16), 0.9375);
        // Consistency: at the breakeven density the two formats cost the same.
        for n in [32u64, 64, 256, 1024] {
            let nnz = (breakeven_density_bitmap(Precision::Fp32) * n as f64) as u64;
            assert_eq!(
                footprint_bitmap(nnz, n, Precision::Fp32).unwrap(),
                footprint_dense(n, Precision::Fp32)
            );
        }
    }

    #[test]
    fn improvement_is_linear_in_density() {
        // improvement(d) == 100 * (1 - d - 1/32) for fp32 when n % 8 == 0.
        let n = 1_605_632u64;
        let expected = ["96.88", "71.88", "46.88", "21.88", "-3.13"];
        for (i, d) in [0.0, 0.25, 0.5, 0.75, 1.0].iter().enumerate() {
            let nnz = (d * n as f64) as u64;
            let bitmap = footprint_bitmap(nnz, n, Precision::Fp32).unwrap();
            let pct = improvement_pct(footprint_dense(n, Precision::Fp32), bitmap);
            assert_eq!(pct, 100.0 * (1.0 - d - 1.0 / 32.0));
            assert_eq!(format_2dp(pct), expected[i]);
        }
    }

    #[test]
    fn two_decimal_ties_round_away_from_zero() {
        assert_eq!(format_2dp(6.125), "6.13");
        assert_eq!(format_2dp(-3.125), "-3.13");
        assert_eq!(format_2dp(3.0625), "3.06");
        assert_eq!(format_2dp(0.095703125), "0.10");
    }
}
