//! The sparse bitmap storage format.
//!
//! A compressed activation holds one presence bit per element plus the
//! non-zero values packed in flattened row-major order. The format is for
//! stashing only; no arithmetic is defined on it.

use crate::error::{Error, Result};
use crate::f16::{f16_bits_to_f32, f32_to_f16_bits};
use crate::footprint::footprint_bitmap;
use crate::tensor::{DenseTensor, Precision};

/// Non-zero values at their stored width.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueStore {
    Fp32(Vec<f32>),
    Fp16(Vec<u16>),
}

impl ValueStore {
    pub fn len(&self) -> usize {
        match self {
            Self::Fp32(v) => v.len(),
            Self::Fp16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Compressed activation: shape, presence bitmap, packed non-zero values.
///
/// Invariants upheld by construction:
/// - `popcount(bits) == values.len()`
/// - bit `i` is set iff flattened element `i` is non-zero at the stored
///   precision
/// - every stored value is non-zero
#[derive(Debug, Clone, PartialEq)]
pub struct BitmapTensor {
    shape: Vec<usize>,
    /// `ceil(n/8)` bytes, bit `i` at `bits[i / 8] >> (i % 8)`.
    bits: Vec<u8>,
    values: ValueStore,
}

impl BitmapTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of set bits == number of stored values.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn precision(&self) -> Precision {
        match self.values {
            ValueStore::Fp32(_) => Precision::Fp32,
            ValueStore::Fp16(_) => Precision::Fp16,
        }
    }

    pub fn values(&self) -> &ValueStore {
        &self.values
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.bits[i / 8] >> (i % 8)) & 1 == 1
    }

    /// Formula bytes occupied by this payload: values plus packed bits.
    pub fn storage_bytes(&self) -> u64 {
        // Cannot fail: nnz <= numel by construction.
        footprint_bitmap(self.nnz() as u64, self.numel() as u64, self.precision()).unwrap()
    }

    /// Flat binary record: magic "BTSH", u8 precision tag, u8 ndim,
    /// little-endian u32 dims, packed bitmap bytes, values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + self.bits.len());
        out.extend_from_slice(b"BTSH");
        out.push(match self.precision() {
            Precision::Fp32 => 0,
            Precision::Fp16 => 1,
        });
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.bits);
        match &self.values {
            ValueStore::Fp32(vals) => {
                for v in vals {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            ValueStore::Fp16(vals) => {
                for v in vals {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parse a record produced by [`to_bytes`](Self::to_bytes), validating
    /// every structural invariant.
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptStash(msg.to_string());
        if data.len() < 6 {
            return Err(corrupt("record shorter than header"));
        }
        if &data[0..4] != b"BTSH" {
            return Err(corrupt("bad magic"));
        }
        let precision = match data[4] {
            0 => Precision::Fp32,
            1 => Precision::Fp16,
            t => return Err(Error::CorruptStash(format!("unknown precision tag {t}"))),
        };
        let ndim = data[5] as usize;
        if ndim == 0 {
            return Err(corrupt("zero-dimensional shape"));
        }
        let mut pos = 6;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let end = pos + 4;
            let Some(raw) = data.get(pos..end) else {
                return Err(corrupt("truncated shape"));
            };
            let d = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
            if d == 0 {
                return Err(corrupt("zero dimension size"));
            }
            shape.push(d);
            pos = end;
        }
        let n: usize = shape.iter().product();
        let nbytes = n.div_ceil(8);
        let Some(bits) = data.get(pos..pos + nbytes) else {
            return Err(corrupt("truncated bitmap"));
        };
        let bits = bits.to_vec();
        pos += nbytes;
        // Padding bits past n must be clear.
        for i in n..nbytes * 8 {
            if (bits[i / 8] >> (i % 8)) & 1 == 1 {
                return Err(corrupt("padding bits set"));
            }
        }
        let nnz: usize = bits.iter().map(|b| b.count_ones() as usize).sum();
        let vwidth = precision.bytes_per_value() as usize;
        if data.len() - pos != nnz * vwidth {
            return Err(Error::CorruptStash(format!(
                "expected {} value bytes for {} set bits, found {}",
                nnz * vwidth,
                nnz,
                data.len() - pos
            )));
        }
        let values = match precision {
            Precision::Fp32 => {
                let mut vals = Vec::with_capacity(nnz);
                for chunk in data[pos..].chunks_exact(4) {
                    let v = f32::from_le_bytes(chunk.try_into().unwrap());
                    if v == 0.0 {
                        return Err(corrupt("stored value is zero"));
                    }
                    vals.push(v);
                }
                ValueStore::Fp32(vals)
            }
            Precision::Fp16 => {
                let mut vals = Vec::with_capacity(nnz);
                for chunk in data[pos..].chunks_exact(2) {
                    let v = u16::from_le_bytes(chunk.try_into().unwrap());
                    if v & 0x7FFF == 0 {
                        return Err(corrupt("stored value is zero"));
                    }
                    vals.push(v);
                }
                ValueStore::Fp16(vals)
            }
        };
        Ok(Self { shape, bits, values })
    }
}

/// Compress a dense activation into the bitmap format, storing values at the
/// requested precision.
///
/// A bit is set iff the element is non-zero *as stored*: exact comparison,
/// -0.0 counts as zero, and fp16 conversion is applied before the test so a
/// value that underflows to zero is dropped rather than stored as a zero.
/// Single pass, O(n).
pub fn compress(dense: &DenseTensor<f32>, precision: Precision) -> Result<BitmapTensor> {
    if dense.is_empty() {
        return Err(Error::InvalidInput("cannot compress an empty tensor".into()));
    }
    let n = dense.numel();
    let mut bits = vec![0u8; n.div_ceil(8)];
    let values = match precision {
        Precision::Fp32 => {
            let mut vals = Vec::new();
            for (i, &v) in dense.data().iter().enumerate() {
                if v != 0.0 {
                    bits[i / 8] |= 1 << (i % 8);
                    vals.push(v);
                }
            }
            ValueStore::Fp32(vals)
        }
        Precision::Fp16 => {
            let mut vals = Vec::new();
            for (i, &v) in dense.data().iter().enumerate() {
                let h = f32_to_f16_bits(v);
                if h & 0x7FFF != 0 {
                    bits[i / 8] |= 1 << (i % 8);
                    vals.push(h);
                }
            }
            ValueStore::Fp16(vals)
        }
    };
    Ok(BitmapTensor { shape: dense.shape().to_vec(), bits, values })
}

/// Expand a bitmap tensor back to dense working precision (f32).
///
/// Element `i` is `values[rank(i)]` where `rank` counts set bits before `i`,
/// and 0.0 elsewhere; fp16 values widen exactly. Single pass, O(n).
pub fn decompress(b: &BitmapTensor) -> Result<DenseTensor<f32>> {
    let n = b.numel();
    let popcount: usize = b.bits.iter().map(|x| x.count_ones() as usize).sum();
    if popcount != b.values.len() {
        return Err(Error::CorruptStash(format!(
            "bitmap has {popcount} set bits but {} values",
            b.values.len()
        )));
    }
    let mut data = vec![0.0f32; n];
    match &b.values {
        ValueStore::Fp32(vals) => {
            let mut j = 0;
            for (i, slot) in data.iter_mut().enumerate() {
                if b.bit(i) {
                    *slot = vals[j];
                    j += 1;
                }
            }
        }
        ValueStore::Fp16(vals) => {
            let mut j = 0;
            for (i, slot) in data.iter_mut().enumerate() {
                if b.bit(i) {
                    *slot = f16_bits_to_f32(vals[j]);
                    j += 1;
                }
            }
        }
    }
    DenseTensor::new(b.shape.clone(), data)
}

/// Zero every element with `|v| < threshold` (strict; a value equal to the
/// threshold is kept). Threshold 0 is the identity.
pub fn prune(dense: &DenseTensor<f32>, threshold: f32) -> Result<DenseTensor<f32>> {
    if threshold < 0.0 || threshold.is_nan() {
        return Err(Error::InvalidInput(format!("prune threshold must be >= 0, got {threshold}")));
    }
    Ok(dense.map(|v| if v.abs() < threshold { 0.0 } else { v }))
}

/// Fraction of exactly-zero elements.
pub fn sparsity(dense: &DenseTensor<f32>) -> Result<f64> {
    if dense.is_empty() {
        return Err(Error::InvalidInput("sparsity of an empty tensor is undefined".into()));
    }
    let zeros = dense.data().iter().filter(|&&v| v == 0.0).count();
    Ok(zeros as f64 / dense.numel() as f64)
}

/// Fraction of non-zero elements (`1 - sparsity`).
pub fn density(dense: &DenseTensor<f32>) -> Result<f64> {
    Ok(1.0 - sparsity(dense)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bits_equal_f32;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(shape: &[usize], data: &[f32]) -> DenseTensor<f32> {
        DenseTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Seeded random tensor with roughly the requested non-zero density.
    fn random_sparse(seed: u64, shape: &[usize], density: f64) -> DenseTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape.to_vec(), |_| {
            if rng.gen::<f64>() < density {
                // Strictly non-zero draw.
                (rng.gen::<f32>() - 0.5) * 4.0 + 0.25
            } else {
                0.0
            }
        })
    }

    #[test]
    fn compress_all_zeros() {
        let b = compress(&dense(&[2, 2], &[0.0; 4]), Precision::Fp32).unwrap();
        assert_eq!(b.nnz(), 0);
        assert_eq!(b.bits, vec![0u8]);
    }

    #[test]
    fn compress_hand_trace() {
        // [[0, 1.5], [2.0, 0]] flattens row-major to bits 0110.
        let b = compress(&dense(&[2, 2], &[0.0, 1.5, 2.0, 0.0]), Precision::Fp32).unwrap();
        assert_eq!(
            (b.bit(0), b.bit(1), b.bit(2), b.bit(3)),
            (false, true, true, false)
        );
        assert_eq!(b.values(), &ValueStore::Fp32(vec![1.5, 2.0]));
        assert_eq!(b.shape(), &[2, 2]);
    }

    #[test]
    fn compress_rejects_empty() {
        let t = DenseTensor::<f32>::zeros(vec![0, 3]);
        assert!(matches!(compress(&t, Precision::Fp32), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn negative_zero_counts_as_zero() {
        let b = compress(&dense(&[2], &[-0.0, 1.0]), Precision::Fp32).unwrap();
        assert_eq!(b.nnz(), 1);
        assert!(!b.bit(0));
    }

    #[test]
    fn fp16_underflow_is_dropped_from_the_bitmap() {
        // 1e-9 rounds to fp16 zero; it must not occupy a value slot.
        let b = compress(&dense(&[3], &[1e-9, 1.0, -1e-12]), Precision::Fp16).unwrap();
        assert_eq!(b.nnz(), 1);
        assert!(!b.bit(0) && b.bit(1) && !b.bit(2));
        let d = decompress(&b).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn decompress_hand_trace() {
        let b = compress(&dense(&[2, 2], &[0.0, 1.5, 2.0, 0.0]), Precision::Fp32).unwrap();
        let d = decompress(&b).unwrap();
        assert_eq!(d.data(), &[0.0, 1.5, 2.0, 0.0]);
        let empty = compress(&dense(&[2, 2], &[0.0; 4]), Precision::Fp32).unwrap();
        assert_eq!(decompress(&empty).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn decompress_detects_popcount_mismatch() {
        let mut b = compress(&dense(&[4], &[1.0, 0.0, 2.0, 0.0]), Precision::Fp32).unwrap();
        b.bits[0] |= 1 << 3; // flip a spurious presence bit
        assert!(matches!(decompress(&b), Err(Error::CorruptStash(_))));
    }

    #[test]
    fn roundtrip_relu_like_tensor_is_bit_exact() {
        let x = random_sparse(7, &[16, 3, 8, 8], 0.5);
        let b = compress(&x, Precision::Fp32).unwrap();
        let y = decompress(&b).unwrap();
        assert!(bits_equal_f32(&x, &y));
    }

    #[test]
    fn roundtrip_1000_seeded_sparse_tensors() {
        for seed in 0..1000u64 {
            let density = (seed % 11) as f64 / 10.0;
            let x = random_sparse(seed, &[3, 5, 4], density);
            let y = decompress(&compress(&x, Precision::Fp32).unwrap()).unwrap();
            assert!(bits_equal_f32(&x, &y), "seed {seed}");
        }
    }

    #[test]
    fn fp16_roundtrip_within_half_precision_rounding() {
        let x = random_sparse(11, &[4, 4, 4], 0.6);
        let b = compress(&x, Precision::Fp16).unwrap();
        let y = decompress(&b).unwrap();
        for (&orig, &rt) in x.data().iter().zip(y.data()) {
            let err = (rt as f64 - orig as f64).abs();
            assert!(err <= 2.0f64.powi(-11) * orig.abs() as f64 + 1e-30, "{orig} -> {rt}");
        }
    }

    #[test]
    fn storage_bytes_matches_formula() {
        let x = random_sparse(3, &[7, 9], 0.4);
        let b = compress(&x, Precision::Fp32).unwrap();
        assert_eq!(b.storage_bytes(), b.nnz() as u64 * 4 + ((7 * 9 + 7) / 8) as u64);
    }

    #[test]
    fn prune_hand_trace_keeps_equal_magnitude() {
        let x = dense(&[2, 2], &[0.005, -0.2, 0.01, 0.5]);
        let p = prune(&x, 0.01).unwrap();
        assert_eq!(p.data(), &[0.0, -0.2, 0.01, 0.5]);
    }

    #[test]
    fn prune_zero_threshold_is_identity() {
        let x = random_sparse(5, &[6, 6], 0.7);
        assert!(bits_equal_f32(&prune(&x, 0.0).unwrap(), &x));
    }

    #[test]
    fn prune_rejects_negative_threshold() {
        let x = dense(&[1], &[1.0]);
        assert!(matches!(prune(&x, -0.1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn prune_sweep_sparsity_is_monotone() {
        let x = random_sparse(9, &[8, 8, 4], 0.9).map(|v| v * 0.08);
        let mut last = -1.0;
        for t in [0.0f32, 0.01, 0.05, 0.1] {
            let s = sparsity(&prune(&x, t).unwrap()).unwrap();
            assert!(s >= last, "threshold {t}");
            last = s;
        }
    }

    #[test]
    fn sparsity_basics() {
        assert_eq!(sparsity(&dense(&[2, 2], &[0.0; 4])).unwrap(), 1.0);
        assert_eq!(sparsity(&dense(&[2, 2], &[0.0, 1.0, 2.0, 0.0])).unwrap(), 0.5);
        assert!(sparsity(&DenseTensor::<f32>::zeros(vec![0])).is_err());
    }

    #[test]
    fn relu_of_gaussian_is_half_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = DenseTensor::from_fn(vec![100, 100], |_| {
            // Sum of uniforms approximates a symmetric-around-zero draw.
            let u: f32 = (0..4).map(|_| rng.gen::<f32>() - 0.5).sum();
            u.max(0.0)
        });
        let s = sparsity(&x).unwrap();
        assert!((s - 0.5).abs() < 0.05, "sparsity {s}");
    }

    #[test]
    fn serialization_roundtrip() {
        let x = random_sparse(21, &[3, 4, 5], 0.5);
        for precision in [Precision::Fp32, Precision::Fp16] {
            let b = compress(&x, precision).unwrap();
            let restored = BitmapTensor::from_bytes(&b.to_bytes()).unwrap();
            assert_eq!(restored, b);
        }
    }

    #[test]
    fn serialization_rejects_corruption() {
        let b = compress(&random_sparse(2, &[4, 4], 0.5), Precision::Fp32).unwrap();
        let bytes = b.to_bytes();
        assert!(BitmapTensor::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(BitmapTensor::from_bytes(&bad_magic).is_err());
        let mut bad_tag = bytes.clone();
        bad_tag[4] = 9;
        assert!(BitmapTensor::from_bytes(&bad_tag).is_err());
    }

    #[test]
    fn payloads_are_send_and_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<BitmapTensor>();
        assert_send_sync::<DenseTensor<f32>>();
    }

    #[test]
    fn concurrent_compression_is_safe() {
        let xs: Vec<_> = (0..4).map(|s| random_sparse(s, &[8, 8], 0.5)).collect();
        let handles: Vec<_> = xs
            .into_iter()
            .map(|x| {
                std::thread::spawn(move || {
                    let b = compress(&x, Precision::Fp32).unwrap();
                    bits_equal_f32(&decompress(&b).unwrap(), &x)
                })
            })
            .collect();
        for h in handles {
            assert!(h.join().unwrap());
        }
    }
}
