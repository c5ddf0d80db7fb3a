//! Dense row-major `f64` tensors and the handful of operations the rest of the
//! crate is built on.

mod io;
mod svd;

pub use io::{read_mpot, read_mpot_bytes, write_mpot, write_mpot_bytes, MPOT_MAGIC, MPOT_VERSION};
pub use svd::{svd_truncated, SvdResult, JACOBI_MAX_SWEEPS, JACOBI_TOL};

use crate::error::{Error, Result};

/// An n-dimensional array of `f64` stored in row-major order (last index fastest).
///
/// Order-0 tensors are not representable; a scalar is a one-element order-1 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidDims(dims.to_vec()));
    }
    Ok(dims.iter().product())
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = checked_len(&dims)?;
        if len != data.len() {
            return Err(Error::SizeMismatch {
                expected: len,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let len = checked_len(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// 2-d tensor from a list of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(vec![n_rows, n_cols], rows.concat())
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = checked_len(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        let n = values.len();
        Self::from_fn(&[n, n], |k| if k / n == k % n { values[k / n] } else { 0.0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    /// `(rows, cols)` of a 2-d tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::ShapeMismatch(format!(
                "expected a 2-d tensor, got dims {other:?}"
            ))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Reinterpret the element sequence under new dims. At most one entry may be `-1`,
    /// which is inferred from the element count.
    pub fn reshape(&self, new_dims: &[i64]) -> Result<Self> {
        let len = self.data.len();
        let wildcards = new_dims.iter().filter(|&&d| d == -1).count();
        let bad = || Error::BadWildcard {
            dims: new_dims.to_vec(),
            len,
        };
        if wildcards > 1 || new_dims.iter().any(|&d| d == 0 || d < -1) {
            return Err(bad());
        }
        let known: usize = new_dims
            .iter()
            .filter(|&&d| d != -1)
            .map(|&d| d as usize)
            .product();
        let dims: Vec<usize> = if wildcards == 1 {
            if known == 0 || !len.is_multiple_of(known) || len / known == 0 {
                return Err(bad());
            }
            new_dims
                .iter()
                .map(|&d| if d == -1 { len / known } else { d as usize })
                .collect()
        } else {
            new_dims.iter().map(|&d| d as usize).collect()
        };
        let expected: usize = dims.iter().product();
        if expected != len {
            return Err(Error::SizeMismatch { expected, got: len });
        }
        Ok(Self {
            dims,
            data: self.data.clone(),
        })
    }

    /// Same as [`reshape`](Self::reshape) with fully specified dims.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        let d: Vec<i64> = dims.iter().map(|&x| x as i64).collect();
        self.reshape(&d)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.shape2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            dims: vec![c, r],
            data: out,
        })
    }

    /// General axis permutation: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let n = self.dims.len();
        let mut seen = vec![false; n];
        if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::ShapeMismatch(format!(
                "invalid permutation {axes:?} for order {n}"
            )));
        }
        let in_strides = strides(&self.dims);
        let out_dims: Vec<usize> = axes.iter().map(|&a| self.dims[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; n];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[src]);
            for k in (0..n).rev() {
                idx[k] += 1;
                src += src_strides[k];
                if idx[k] < out_dims[k] {
                    break;
                }
                src -= src_strides[k] * idx[k];
                idx[k] = 0;
            }
        }
        Ok(Self {
            dims: out_dims,
            data: out,
        })
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "axpy: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Row-major strides for `dims`.
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * dims[k + 1];
    }
    s
}

/// Fixed-order pairwise summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    // scale to avoid overflow/underflow in the squares
    let scale = t.max_abs();
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let squares: Vec<f64> = t.data.iter().map(|x| (x / scale) * (x / scale)).collect();
    scale * pairwise_sum(&squares).sqrt()
}

/// Standard matrix product with `f64` accumulation.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (m, k) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul: [{m}, {k}] x [{k2}, {n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    DenseTensor::new(vec![m, n], out)
}

/// Frobenius distance between two same-shaped tensors divided by the norm of `reference`.
pub fn rel_frobenius_error(reference: &DenseTensor, other: &DenseTensor) -> Result<f64> {
    let diff = reference.sub(other)?;
    let denom = frobenius_norm(reference);
    let num = frobenius_norm(&diff);
    Ok(if denom == 0.0 { num } else { num / denom })
}
