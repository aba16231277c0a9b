//! Dense N-dimensional tensors with explicit shape and row-major layout.

use num_traits::Float;

use crate::error::{Error, Result};

/// Storage width for stashed activation values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    /// IEEE binary32, 4 bytes per value.
    Fp32,
    /// IEEE binary16, 2 bytes per value.
    Fp16,
}

impl Precision {
    pub const fn bytes_per_value(self) -> u64 {
        match self {
            Self::Fp32 => 4,
            Self::Fp16 => 2,
        }
    }

    pub const fn label(self) -> &'static str {
        match self {
            Self::Fp32 => "fp32",
            Self::Fp16 => "fp16",
        }
    }
}

/// N-dimensional array of scalars, row-major (last dimension fastest).
///
/// `F` is `f32` for training and `f64` for the finite-difference oracle;
/// the two are never mixed within one run.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> DenseTensor<F> {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(Error::InvalidInput("tensor shape must have at least one dimension".into()));
        }
        if numel != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {:?} implies {} elements but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![F::zero(); numel] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape, data: (0..numel).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Same data under a new shape; element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Map every element through `f`, keeping the shape.
    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Interpret as `[batch, channels, height, width]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            other => Err(Error::InvalidInput(format!("expected 4-d tensor, got shape {other:?}"))),
        }
    }

    /// Interpret as `[batch, features]`, flattening trailing dimensions.
    pub fn dims2_flat(&self) -> Result<[usize; 2]> {
        if self.shape.is_empty() {
            return Err(Error::InvalidInput("expected at least 1-d tensor".into()));
        }
        let b = self.shape[0];
        let f: usize = self.shape[1..].iter().product();
        Ok([b, f])
    }
}

/// Bit-exact equality; `PartialEq` on floats would treat -0.0 == 0.0.
pub fn bits_equal_f32(a: &DenseTensor<f32>, b: &DenseTensor<f32>) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let r = DenseTensor::new(vec![2, 3], vec![0.0f32; 5]);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_sized_dims_are_allowed_but_empty() {
        let t = DenseTensor::<f32>::zeros(vec![0, 4]);
        assert!(t.is_empty());
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn reshape_preserves_row_major_data() {
        let t = DenseTensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshaped(vec![4]).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(t.reshaped(vec![3]).is_err());
    }

    #[test]
    fn dims2_flattens_trailing() {
        let t = DenseTensor::<f32>::zeros(vec![2, 3, 4]);
        assert_eq!(t.dims2_flat().unwrap(), [2, 12]);
    }
}
