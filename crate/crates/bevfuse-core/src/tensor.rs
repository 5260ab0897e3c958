//! Dense row-major f64 tensor.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::Stream;

/// Dense n-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "Tensor::new",
                detail: alloc::format!("shape {shape:?} wants {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Uniform values in [lo, hi) drawn from `stream`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, stream: &mut Stream) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| stream.uniform_in(lo, hi)).collect();
        Tensor { shape: shape.to_vec(), data }
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

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        let mut stride = 1;
        for i in (0..idx.len()).rev() {
            debug_assert!(idx[i] < self.shape[i]);
            off += idx[i] * stride;
            stride *= self.shape[i];
        }
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite { op, detail: "tensor contains NaN or Inf".to_string() })
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| crate::mathf::abs(a - b))
            .fold(0.0, f64::max)
    }

    /// Flat binary encoding: magic "BEVT", u32 rank, u32 dims, f64 payload,
    /// all little-endian. Used for checkpoints and fixtures.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(b"BEVT");
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decode one tensor from `bytes`, returning it and the bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let bad = |detail: &str| CoreError::Data { detail: detail.to_string() };
        if bytes.len() < 8 || &bytes[0..4] != b"BEVT" {
            return Err(bad("missing BEVT magic"));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut off = 8;
        if bytes.len() < off + 4 * rank {
            return Err(bad("truncated dims"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let n: usize = shape.iter().product();
        if bytes.len() < off + 8 * n {
            return Err(bad("truncated payload"));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        Ok((Tensor { shape, data }, off))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;
    use proptest::prelude::*;

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::new(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
    }

    #[test]
    fn encode_layout_matches_contract() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let b = t.encode();
        assert_eq!(&b[0..4], b"BEVT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[16..24].try_into().unwrap()), 1.5);
    }

    proptest! {
        #[test]
        fn roundtrip(seed in 0u64..1000, rank in 1usize..4) {
            let mut s = Stream::new(seed, StreamId::Instances);
            let shape: Vec<usize> = (0..rank).map(|_| 1 + s.below(5)).collect();
            let t = Tensor::rand_uniform(&shape, -10.0, 10.0, &mut s);
            let (back, used) = Tensor::decode(&t.encode()).unwrap();
            prop_assert_eq!(used, t.encode().len());
            prop_assert_eq!(back, t);
        }
    }
}
