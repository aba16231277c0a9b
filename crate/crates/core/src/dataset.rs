//! Synthetic training data and an optional IDX-format loader.
//!
//! The synthetic task is four-way (or k-way) classification of "band"
//! images: class `c` lights up the c-th horizontal band with positive noise
//! and leaves the rest of the image exactly zero. The classes are linearly
//! separable by construction and the zero background gives the inputs a
//! known sparsity, so layer-0 stashes compress well.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Deterministic synthetic classification dataset.
///
/// Regeneration from the same seed is bit-identical; sample `i` is drawn
/// from PRNG stream `i` so samples are independent of batching.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub num_samples: usize,
    pub classes: usize,
    /// Image shape `[channels, height, width]`.
    pub image_shape: [usize; 3],
}

impl SyntheticDataset {
    pub fn new(seed: u64, num_samples: usize, classes: usize, image_shape: [usize; 3]) -> Result<Self> {
        let [_, h, _] = image_shape;
        if classes == 0 || h < classes {
            return Err(Error::InvalidInput(format!(
                "need at least one image row per class: {h} rows, {classes} classes"
            )));
        }
        if num_samples == 0 {
            return Err(Error::InvalidInput("dataset must have at least one sample".into()));
        }
        Ok(Self { seed, num_samples, classes, image_shape })
    }

    /// Label of sample `i`: round-robin so every batch is class-balanced.
    pub fn label(&self, i: usize) -> usize {
        i % self.classes
    }

    /// Generate sample `i` as a `[C, H, W]` tensor.
    pub fn sample(&self, i: usize) -> DenseTensor<f32> {
        let [c, h, w] = self.image_shape;
        let label = self.label(i);
        let band = h / self.classes;
        let (row_lo, row_hi) = if label == self.classes - 1 {
            (label * band, h) // last band absorbs the remainder rows
        } else {
            (label * band, (label + 1) * band)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        DenseTensor::from_fn(vec![c, h, w], |flat| {
            let row = (flat / w) % h;
            if row >= row_lo && row < row_hi {
                // Strictly positive so the band never contains exact zeros.
                0.5 + rng.gen::<f32>()
            } else {
                0.0
            }
        })
    }

    /// Stack samples `start..start+batch` into a `[B, C, H, W]` tensor with
    /// their labels.
    pub fn batch(&self, start: usize, batch: usize) -> Result<(DenseTensor<f32>, Vec<usize>)> {
        if start + batch > self.num_samples {
            return Err(Error::InvalidInput(format!(
                "batch {start}..{} exceeds dataset size {}",
                start + batch,
                self.num_samples
            )));
        }
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(batch * c * h * w);
        let mut labels = Vec::with_capacity(batch);
        for i in start..start + batch {
            data.extend_from_slice(self.sample(i).data());
            labels.push(self.label(i));
        }
        Ok((DenseTensor::new(vec![batch, c, h, w], data)?, labels))
    }
}

/// Synthesize a tensor with exactly `nnz` non-zero elements at seeded
/// positions (values drawn from `[0.5, 1.5)`).
pub fn synthesize_with_density(seed: u64, shape: Vec<usize>, nnz: usize) -> Result<DenseTensor<f32>> {
    let n: usize = shape.iter().product();
    if nnz > n {
        return Err(Error::InvalidInput(format!("nnz {nnz} exceeds element count {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<u32> = (0..n as u32).collect();
    let mut data = vec![0.0f32; n];
    // Partial Fisher-Yates: the first nnz slots become the chosen positions.
    for i in 0..nnz {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
        data[indices[i] as usize] = 0.5 + rng.gen::<f32>();
    }
    DenseTensor::new(shape, data)
}

// ── IDX loader ──────────────────────────────────────────────────────────

/// Decoded IDX image file as `[N, C, H, W]` floats in `[0, 1]`.
pub struct IdxImages {
    pub tensor: DenseTensor<f32>,
}

/// Read an IDX image file (unsigned-byte type): 3-d files become
/// single-channel `[N, 1, H, W]`, 4-d files keep their channel dimension.
pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    let raw = read_all(path)?;
    let (dims, data) = parse_idx_u8(&raw)?;
    let shape = match dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [n, c, h, w] => vec![*n, *c, *h, *w],
        other => {
            return Err(Error::InvalidInput(format!(
                "expected 3-d or 4-d IDX image file, got {} dimensions",
                other.len()
            )));
        }
    };
    let tensor =
        DenseTensor::new(shape, data.iter().map(|&b| f32::from(b) / 255.0).collect())?;
    Ok(IdxImages { tensor })
}

/// Read an IDX label file (1-d unsigned bytes).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let raw = read_all(path)?;
    let (dims, data) = parse_idx_u8(&raw)?;
    if dims.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "expected 1-d IDX label file, got {} dimensions",
            dims.len()
        )));
    }
    Ok(data.iter().map(|&b| b as usize).collect())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

/// IDX header: two zero bytes, a type code (0x08 = unsigned byte), the
/// dimension count, then big-endian u32 sizes and the payload.
fn parse_idx_u8(raw: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if raw.len() < 4 || raw[0] != 0 || raw[1] != 0 {
        return Err(Error::InvalidInput("not an IDX file (bad magic)".into()));
    }
    if raw[2] != 0x08 {
        return Err(Error::InvalidInput(format!(
            "unsupported IDX element type {:#04x} (only unsigned byte is supported)",
            raw[2]
        )));
    }
    let ndim = raw[3] as usize;
    let header = 4 + 4 * ndim;
    if raw.len() < header {
        return Err(Error::InvalidInput("truncated IDX header".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 4 + 4 * d;
        dims.push(u32::from_be_bytes(raw[off..off + 4].try_into().unwrap()) as usize);
    }
    let expected: usize = dims.iter().product();
    let data = &raw[header..];
    if data.len() != expected {
        return Err(Error::InvalidInput(format!(
            "IDX payload holds {} bytes but dimensions imply {expected}",
            data.len()
        )));
    }
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitmap::sparsity;
    use crate::tensor::bits_equal_f32;

    fn dataset() -> SyntheticDataset {
        SyntheticDataset::new(77, 64, 4, [8, 32, 32]).unwrap()
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = dataset();
        let b = dataset();
        for i in [0usize, 5, 63] {
            assert!(bits_equal_f32(&a.sample(i), &b.sample(i)));
        }
    }

    #[test]
    fn samples_have_band_sparsity() {
        let ds = dataset();
        for i in 0..4 {
            let s = ds.sample(i);
            // One band of four is populated: density exactly 0.25.
            assert_eq!(sparsity(&s).unwrap(), 0.75, "sample {i}");
        }
    }

    #[test]
    fn bands_are_disjoint_across_classes() {
        let ds = dataset();
        let a = ds.sample(0); // class 0
        let b = ds.sample(1); // class 1
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(*x == 0.0 || *y == 0.0);
        }
    }

    #[test]
    fn batches_stack_in_order() {
        let ds = dataset();
        let (batch, labels) = ds.batch(0, 8).unwrap();
        assert_eq!(batch.shape(), &[8, 8, 32, 32]);
        assert_eq!(labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert!(ds.batch(60, 8).is_err());
    }

    #[test]
    fn synthesized_density_is_exact() {
        for nnz in [0usize, 1, 100, 255, 256] {
            let t = synthesize_with_density(5, vec![16, 16], nnz).unwrap();
            let actual = t.data().iter().filter(|&&v| v != 0.0).count();
            assert_eq!(actual, nnz);
        }
        assert!(synthesize_with_density(5, vec![4], 5).is_err());
    }

    #[test]
    fn idx_roundtrip() {
        // 2 images of 2x3 unsigned bytes.
        let mut file = vec![0u8, 0, 0x08, 3];
        file.extend_from_slice(&2u32.to_be_bytes());
        file.extend_from_slice(&2u32.to_be_bytes());
        file.extend_from_slice(&3u32.to_be_bytes());
        file.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 204, 153, 102, 51, 0]);
        let dir = std::env::temp_dir().join("bitstash_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let img_path = dir.join("images.idx");
        std::fs::write(&img_path, &file).unwrap();
        let images = read_idx_images(&img_path).unwrap();
        assert_eq!(images.tensor.shape(), &[2, 1, 2, 3]);
        assert_eq!(images.tensor.data()[0], 0.0);
        assert_eq!(images.tensor.data()[5], 1.0);

        let mut labels = vec![0u8, 0, 0x08, 1];
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[3, 1]);
        let lbl_path = dir.join("labels.idx");
        std::fs::write(&lbl_path, &labels).unwrap();
        assert_eq!(read_idx_labels(&lbl_path).unwrap(), vec![3, 1]);
    }

    #[test]
    fn idx_rejects_malformed_files() {
        let dir = std::env::temp_dir().join("bitstash_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.idx");
        std::fs::write(&p, [9u8, 9, 9, 9]).unwrap();
        assert!(read_idx_images(&p).is_err());
        // Truncated payload.
        let mut file = vec![0u8, 0, 0x08, 1];
        file.extend_from_slice(&5u32.to_be_bytes());
        file.extend_from_slice(&[1, 2]);
        std::fs::write(&p, &file).unwrap();
        assert!(read_idx_labels(&p).is_err());
    }
}
