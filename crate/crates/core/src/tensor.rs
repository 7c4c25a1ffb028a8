//! Dense row-major tensors over a generic scalar.
//!
//! Tensors are plain `(shape, data)` pairs with value semantics. Every
//! operation validates shapes and finiteness and returns `Result`; nothing
//! here panics on bad numeric input. Rank-0 tensors (empty shape, one
//! element) represent scalars.
//!
//! Data movement (pooling taps, im2col patches, broadcasts, permutes, row
//! picks) is expressed through [`IndexMap`]s from [`crate::layout`] via
//! [`TensorBase::gather`] and [`TensorBase::scatter_add`], which are exact
//! adjoints of each other. Keeping all movement in one primitive pair is what
//! lets the autodiff tape differentiate arbitrary compositions of them.

use crate::error::{Error, Result};
use crate::layout::IndexMap;
use crate::scalar::Real;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

/// Formats a shape as `2x3x4` (rank-0 as `scalar`) for error messages.
pub fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> TensorBase<F> {
    /// Builds a tensor, validating element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "tensor::new",
                format!(
                    "shape {} implies {} elements, got {}",
                    fmt_shape(&shape),
                    numel_of(&shape),
                    data.len()
                ),
            ));
        }
        let t = TensorBase { shape, data };
        t.assert_finite("tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        TensorBase {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n = numel_of(&shape);
        TensorBase {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar_value(value: F) -> Self {
        TensorBase {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "tensor::item",
                format!("expected one element, shape is {}", fmt_shape(&self.shape)),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!(
                    "lhs {} vs rhs {}",
                    fmt_shape(&self.shape),
                    fmt_shape(&other.shape)
                ),
            ))
        }
    }

    fn zip_map(&self, other: &Self, op: &str, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = TensorBase {
            shape: self.shape.clone(),
            data,
        };
        out.assert_finite(op)?;
        Ok(out)
    }

    fn map(&self, op: &str, f: impl Fn(F) -> F) -> Result<Self> {
        let out = TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        };
        out.assert_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Self> {
        self.map("neg", |x| -x)
    }

    pub fn abs(&self) -> Result<Self> {
        self.map("abs", |x| x.abs())
    }

    pub fn relu(&self) -> Result<Self> {
        self.map("relu", |x| if x > F::zero() { x } else { F::zero() })
    }

    pub fn exp(&self) -> Result<Self> {
        self.map("exp", |x| x.exp())
    }

    /// Natural logarithm; requires strictly positive input.
    pub fn ln(&self) -> Result<Self> {
        if self.data.iter().any(|&x| x <= F::zero()) {
            return Err(Error::numeric("log", "input must be strictly positive"));
        }
        self.map("log", |x| x.ln())
    }

    /// Square root; requires non-negative input.
    pub fn sqrt(&self) -> Result<Self> {
        if self.data.iter().any(|&x| x < F::zero()) {
            return Err(Error::numeric("sqrt", "input must be non-negative"));
        }
        self.map("sqrt", |x| x.sqrt())
    }

    pub fn add_scalar(&self, c: F) -> Result<Self> {
        self.map("add_scalar", |x| x + c)
    }

    pub fn mul_scalar(&self, c: F) -> Result<Self> {
        self.map("mul_scalar", |x| x * c)
    }

    /// Elementwise sign in `{-1, 0, +1}`.
    pub fn sign(&self) -> Result<Self> {
        self.map("sign", |x| {
            if x > F::zero() {
                F::one()
            } else if x < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        })
    }

    /// Elementwise indicator of strict positivity (the ReLU derivative).
    pub fn step(&self) -> Result<Self> {
        self.map("step", |x| if x > F::zero() { F::one() } else { F::zero() })
    }

    /// Per-row maximum of a 2-D tensor, broadcast back to the input shape.
    pub fn row_max_broadcast(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape(
                "row_max",
                format!("expected rank 2, got {}", fmt_shape(&self.shape)),
            ));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        if cols == 0 {
            return Err(Error::invalid("row_max", "zero columns"));
        }
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut m = row[0];
            for &x in &row[1..] {
                if x > m {
                    m = x;
                }
            }
            for c in 0..cols {
                data[r * cols + c] = m;
            }
        }
        Ok(TensorBase {
            shape: self.shape.clone(),
            data,
        })
    }

    /// 2-D matrix product with a fixed accumulation order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "expected rank-2 operands, got {} and {}",
                    fmt_shape(&self.shape),
                    fmt_shape(&other.shape)
                ),
            ));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {} vs {}", k, k2),
            ));
        }
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut data[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    out_row[j] = out_row[j] + a * b_row[j];
                }
            }
        }
        let out = TensorBase {
            shape: vec![m, n],
            data,
        };
        out.assert_finite("matmul")?;
        Ok(out)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected rank 2, got {}", fmt_shape(&self.shape)),
            ));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(TensorBase {
            shape: vec![c, r],
            data,
        })
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if numel_of(&shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "{} has {} elements, target {} needs {}",
                    fmt_shape(&self.shape),
                    self.numel(),
                    fmt_shape(&shape),
                    numel_of(&shape)
                ),
            ));
        }
        Ok(TensorBase {
            shape,
            data: self.data.clone(),
        })
    }

    /// Sum of all elements in data order, as a rank-0 tensor.
    pub fn sum_all(&self) -> Self {
        let mut acc = F::zero();
        for &x in &self.data {
            acc += x;
        }
        TensorBase {
            shape: vec![],
            data: vec![acc],
        }
    }

    /// Reads elements through an index map: `out[i] = self[map.indices[i]]`,
    /// with the sentinel index reading zero.
    pub fn gather(&self, map: &IndexMap) -> Result<Self> {
        if self.shape != map.src_shape {
            return Err(Error::shape(
                "gather",
                format!(
                    "tensor {} vs map source {}",
                    fmt_shape(&self.shape),
                    fmt_shape(&map.src_shape)
                ),
            ));
        }
        let mut data = Vec::with_capacity(map.indices.len());
        for &idx in &map.indices {
            if idx == IndexMap::ZERO {
                data.push(F::zero());
            } else {
                data.push(self.data[idx]);
            }
        }
        Ok(TensorBase {
            shape: map.dst_shape.clone(),
            data,
        })
    }

    /// Adjoint of [`gather`](Self::gather): accumulates `self` (shaped like
    /// the map destination) back into a zero tensor of the map source shape.
    /// Accumulation order is the destination's data order, so the result is
    /// deterministic even when several destination slots hit one source slot.
    pub fn scatter_add(&self, map: &IndexMap) -> Result<Self> {
        if self.shape != map.dst_shape {
            return Err(Error::shape(
                "scatter_add",
                format!(
                    "tensor {} vs map destination {}",
                    fmt_shape(&self.shape),
                    fmt_shape(&map.dst_shape)
                ),
            ));
        }
        let mut data = vec![F::zero(); numel_of(&map.src_shape)];
        for (i, &idx) in map.indices.iter().enumerate() {
            if idx != IndexMap::ZERO {
                data[idx] += self.data[i];
            }
        }
        Ok(TensorBase {
            shape: map.src_shape.clone(),
            data,
        })
    }

    /// Widens to `f64` data for reporting and serialization.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }
}
