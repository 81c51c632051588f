//! Dense `f64` tensors, a recording tape for reverse-mode gradients, the
//! AdamW optimizer and a finite-difference gradient checker.
//!
//! Storage is row-major and flat. Most operations treat a tensor as a matrix
//! whose column count is the trailing extent and whose row count is the
//! product of the leading extents.

mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_many};
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use tape::{AttentionLayout, Gradients, Graph, Var};

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Lower clamp applied to every argument of a logarithm.
pub const LOG_EPS: f64 = 1e-12;

const TENSOR_MAGIC: &[u8; 4] = b"PFNT";
const TENSOR_FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) && !values.is_empty() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the trailing extent.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    /// Allocates (or clears) the gradient accumulator.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let n = self.values.len();
        let acc = self.grad.get_or_insert_with(|| vec![0.0; n]);
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                left: self.shape.clone(),
                right: vec![axis],
            });
        }
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.values.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..n).map(|j| self.values[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (self.values[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Serializes to the `PFNT` binary layout: magic, `u16` version, `u8`
    /// rank, `u32` extents and `f64` values, all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", self.shape.len())));
        }
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.shape.len() as u8])?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut ver = [0u8; 2];
        r.read_exact(&mut ver)?;
        let ver = u16::from_le_bytes(ver);
        if ver != TENSOR_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported tensor format version {ver}")));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        Tensor::new(shape, values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(7 + 4 * self.shape.len() + 8 * self.values.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn zero_grad_clears_accumulator() {
        let mut t = Tensor::scalar(1.0);
        t.accumulate_grad(&[3.0]);
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        for v in t.softmax(0).unwrap().values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::new(vec![2], vec![0.0, 2f64.ln()]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.values()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.values()[1] - 2.0 / 3.0).abs() < 1e-15);
        let t = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!(s.values().iter().all(|v| v.is_finite()));
        assert_eq!(s.values()[0], 1.0);
        assert!(s.values()[1] < 1e-300);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert_eq!(s.values(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn serialization_header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"PFNT");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 2);
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[15..23].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 4 + 2 + 1 + 8 + 16);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Tensor::scalar(1.0).to_bytes();
        bytes[0] = b'X';
        assert!(Tensor::read_from(&mut bytes.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn serialization_round_trips(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let values: Vec<f64> = (0..rows * cols)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1)) as f64).sin() * 1e3)
                .collect();
            let t = Tensor::matrix(rows, cols, values).unwrap();
            let back = Tensor::read_from(&mut t.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(t, back);
        }

        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let n = xs.len();
            let t = Tensor::new(vec![n], xs.clone()).unwrap();
            let shifted = Tensor::new(vec![n], xs.iter().map(|x| x + shift).collect()).unwrap();
            let a = t.softmax(0).unwrap();
            let b = shifted.softmax(0).unwrap();
            let sum: f64 = a.values().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
