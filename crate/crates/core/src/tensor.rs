//! Dense row-major `f32` tensors and their on-disk container.
//!
//! Tensor files are a fixed little-endian layout:
//!
//! | field   | size          |
//! |---------|---------------|
//! | magic   | 4 bytes `SNTF` |
//! | version | u32 (= 1)     |
//! | rank    | u32           |
//! | dims    | rank × u32    |
//! | data    | Π dims × f32  |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"SNTF";
const TENSOR_VERSION: u32 = 1;

/// Dense n-dimensional array of `f32` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Input(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar_vec(values: &[f32]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the trailing (channel) axis; 1 for rank-0 tensors.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Leading-axis batch extent, treating the tensor as `[batch, ...sample]`.
    pub fn batch_size(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Borrow sample `i` of a batched tensor.
    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.shape[1..].iter().product::<usize>();
        &self.data[i * per..(i + 1) * per]
    }

    /// Copy sample `i` out of a batched tensor as an unbatched tensor.
    pub fn sample_tensor(&self, i: usize) -> Tensor {
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.sample(i).to_vec(),
        }
    }

    /// Stacks equally shaped samples along a new leading batch axis.
    pub fn stack(sample_shape: &[usize], samples: &[&[f32]]) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            if s.len() != per {
                return Err(Error::Input(format!(
                    "cannot stack sample of {} values into shape {sample_shape:?}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Tensor { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Input(format!("tensor file: {msg}"));
        if bytes.len() < 12 || &bytes[0..4] != TENSOR_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        if word(4)? != TENSOR_VERSION {
            return Err(bad("unsupported version"));
        }
        let rank = word(8)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for k in 0..rank {
            shape.push(word(12 + 4 * k)? as usize);
        }
        let start = 12 + 4 * rank;
        let n: usize = shape.iter().product();
        if bytes.len() != start + 4 * n {
            return Err(bad("payload length does not match shape"));
        }
        let mut data = Vec::with_capacity(n);
        for (k, chunk) in bytes[start..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(bad(&format!(
                    "non-finite value at byte offset {}",
                    start + 4 * k
                )));
            }
            data.push(v);
        }
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes)
    }
}

/// Largest absolute difference divided by the largest reference magnitude.
///
/// Elementwise relative error is meaningless next to relu zeros, so the
/// deviation is measured against the scale of the whole reference tensor.
pub fn max_relative_deviation(actual: &[f32], reference: &[f32]) -> f64 {
    let scale = reference
        .iter()
        .fold(0.0f64, |m, &v| m.max(f64::from(v).abs()))
        .max(1e-12);
    let diff = actual.iter().zip(reference).fold(0.0f64, |m, (&a, &b)| {
        m.max((f64::from(a) - f64::from(b)).abs())
    });
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn bytes_roundtrip_is_exact() {
        let t = Tensor::new(vec![2, 1, 3], vec![0.1, -2.5, 3e-8, 7.0, 1e30, -0.0]).unwrap();
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_nan_payload() {
        let t = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        let err = Tensor::from_bytes(&t.to_bytes()).unwrap_err();
        assert!(err.to_string().contains("byte offset 20"), "{err}");
    }

    #[test]
    fn stack_and_sample() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let t = Tensor::stack(&[2], &[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.sample(1), &b);
        assert_eq!(t.sample_tensor(0).shape(), &[2]);
    }
}
