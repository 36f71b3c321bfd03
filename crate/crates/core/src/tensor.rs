//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. `shape.iter().product() == data.len()` always holds;
/// a rank-0 tensor holds exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::new([rows.len(), cols], data)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("dims2", &self.shape, &[0, 0])),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> S {
        let cols = self.shape[self.rank() - 1];
        self.data[row * cols + col]
    }

    pub fn row(&self, row: usize) -> &[S] {
        let cols = self.shape[self.rank() - 1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn item(&self) -> Result<S> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::dim("item", &self.shape, &[1]))
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
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

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise bit equality (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Self::new([m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new([c, r], out)
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum of each slice.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() || self.shape[axis] == 0 {
            return Err(Error::dim("softmax", &self.shape, &[axis]));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| self.data[at(j)]).fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for j in 0..len {
                    let e = (self.data[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        Self::new(self.shape.clone(), out)
    }

    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (r, c) = self.dims2()?;
        if c == 0 {
            return Err(Error::dim("argmax_rows", &self.shape, &[1]));
        }
        Ok((0..r)
            .map(|i| {
                let row = self.row(i);
                // first maximum wins on ties
                (1..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_tn_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}
