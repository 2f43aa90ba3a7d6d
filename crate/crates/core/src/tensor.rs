//! Dense row-major tensor of 64-bit reals.
//!
//! This is the universal value type of the crate. Design constraints:
//!
//! - 64-bit elements throughout; the measurement harness asserts residuals
//!   near 1e-8 that 32-bit arithmetic cannot guarantee.
//! - Fixed summation order in every contraction. No SIMD reassociation, no
//!   blocking; results are bitwise reproducible across runs and platforms.
//! - Non-finite values are an error surfaced to the caller, never silently
//!   propagated. Constructors and arithmetic validate their outputs.
//! - Tensors are immutable values in practice: operations build new tensors.
//!   Shared read-only access across threads is safe.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// What a `reduce` call computes along its axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Sum of squared elements.
    SqNorm,
}

/// Dense multidimensional array. `shape` dimensions are all positive and
/// `data.len() == product(shape)`; a rank-0 tensor holds one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dot product with ascending-index accumulation.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// `y[i] += a · x[i]`.
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.len() {
        y[i] += a * x[i];
    }
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(Error::domain("Tensor::new", format!("zero dimension in {shape:?}")));
        }
        if shape_len(shape) != data.len() {
            return Err(Error::domain(
                "Tensor::new",
                format!("shape {:?} needs {} elements, got {}", shape, shape_len(shape), data.len()),
            ));
        }
        let t = Tensor { shape: shape.to_vec(), data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape_len(shape)] }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        assert!(value.is_finite(), "non-finite fill value");
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![value; shape_len(shape)] }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Tensor {
        assert!(value.is_finite(), "non-finite scalar");
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[f64]) -> Tensor {
        Tensor::new(&[values.len()], values.to_vec()).expect("finite vector")
    }

    /// Rank-2 tensor from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::domain("Tensor::from_rows", "ragged rows"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(&[r, c], data)
    }

    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in &mut t.data {
            *v = rng.uniform(lo, hi);
        }
        t
    }

    pub fn random_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in &mut t.data {
            *v = rng.normal();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable element access. The caller is responsible for keeping values
    /// finite; library entry points re-validate where it matters.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// True when this tensor carries exactly one element (rank 0 or any
    /// all-ones shape); such tensors broadcast against any operand.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Reinterpret the same data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) || shape_len(shape) != self.data.len() {
            return Err(Error::domain(
                "reshape",
                format!("cannot view {} elements as {:?}", self.data.len(), shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    // --- rank-2 helpers ------------------------------------------------

    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        let cols = self.cols();
        self.data[r * cols + c]
    }

    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Matrix product with a fixed i-k-j loop order. For each output element
    /// the contraction index is accumulated in ascending order, so results
    /// match a naive triple loop bitwise.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for j in 0..n {
                    o_row[j] += a * b_row[j];
                }
            }
        }
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    /// Reduce along one axis; the output drops that axis from the shape.
    pub fn reduce(&self, axis: usize, kind: Reduction) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::domain(
                "reduce",
                format!("axis {} out of range for rank {}", axis, self.rank()),
            ));
        }
        let axis_len = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = self.shape.clone();
        out_shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let base = (o * axis_len + a) * inner;
                for i in 0..inner {
                    let v = self.data[base + i];
                    out[o * inner + i] += match kind {
                        Reduction::Sum | Reduction::Mean => v,
                        Reduction::SqNorm => v * v,
                    };
                }
            }
        }
        if kind == Reduction::Mean {
            for v in &mut out {
                *v /= axis_len as f64;
            }
        }
        let t = Tensor { shape: out_shape, data: out };
        t.ensure_finite("reduce")?;
        Ok(t)
    }

    // --- whole-tensor scalar reductions --------------------------------

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sqnorm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sqnorm().sqrt()
    }

    /// Infinity norm.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    // --- elementwise arithmetic ----------------------------------------

    fn zip_with(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let out = if self.shape == rhs.shape {
            let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
            Tensor { shape: self.shape.clone(), data }
        } else if rhs.is_scalar() {
            let b = rhs.data[0];
            let data = self.data.iter().map(|&a| f(a, b)).collect();
            Tensor { shape: self.shape.clone(), data }
        } else if self.is_scalar() {
            let a = self.data[0];
            let data = rhs.data.iter().map(|&b| f(a, b)).collect();
            Tensor { shape: rhs.shape.clone(), data }
        } else {
            return Err(Error::shape(op, &self.shape, &rhs.shape));
        };
        out.ensure_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    /// Elementwise division. A zero anywhere in the divisor is an error;
    /// the result is never Inf.
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        if rhs.data.contains(&0.0) {
            return Err(Error::ZeroDivisor { op: "div" });
        }
        self.zip_with(rhs, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&a| a * c).collect();
        let out = Tensor { shape: self.shape.clone(), data };
        out.ensure_finite("scale")?;
        Ok(out)
    }

    // --- flat binary serialization -------------------------------------

    /// Little-endian dump: `u32` rank, `u64` dims, then row-major `f64`s.
    pub fn write_binary<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`Tensor::write_binary`]; validates shape and finiteness.
    pub fn read_binary<R: std::io::Read>(r: &mut R) -> Result<Tensor> {
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank > 8 {
            return Err(Error::domain("Tensor::read_binary", format!("implausible rank {rank}")));
        }
        let mut u64buf = [0u8; 8];
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let len = shape_len(&shape);
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        Tensor::new(&shape, data)
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data.iter().map(|&a| a.tanh()).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&a| if a >= 0.0 { a } else { alpha * a })
            .collect();
        Tensor { shape: self.shape.clone(), data }
    }
}
