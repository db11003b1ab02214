// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f64` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit reals.
///
/// `data.len()` always equals the product of `shape`. Most of the crate works
/// on rank-2 tensors; attention maps are rank-3 `[heads, rows, cols]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::from_vec(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(r > 0 && c > 0, "empty matrix");
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            shape: vec![r, c],
            data: rows.concat(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "zero-sized tensor {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn row_vector(v: Vec<f64>) -> Self {
        assert!(!v.is_empty());
        Self {
            shape: vec![1, v.len()],
            data: v,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// `(batch, rows, cols)` of a rank-3 tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.rank(), 3, "expected rank 3, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let (_, cols) = self.dims2();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let (_, cols) = self.dims2();
        self.data.chunks(cols).map(<[f64]>::to_vec).collect()
    }

    /// Matrix `b` of a rank-3 tensor, as a new rank-2 tensor.
    pub fn slab(&self, b: usize) -> Tensor {
        let (_, r, c) = self.dims3();
        Tensor {
            shape: vec![r, c],
            data: self.data[b * r * c..(b + 1) * r * c].to_vec(),
        }
    }

    /// Stacks equally shaped matrices along a new leading axis.
    pub fn stack(mats: &[Tensor]) -> Result<Tensor> {
        let first = mats
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero matrices".into()))?;
        let (r, c) = first.dims2();
        let mut data = Vec::with_capacity(mats.len() * r * c);
        for m in mats {
            if m.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &m.shape));
            }
            data.extend_from_slice(&m.data);
        }
        Tensor::from_vec(vec![mats.len(), r, c], data)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Matrix product.
    ///
    /// Accepts `[m×k]·[k×n]`, or a batched left operand `[h×m×k]` against
    /// either `[h×k×n]` or a shared `[k×n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        match (self.rank(), rhs.rank()) {
            (2, 2) => {
                let (m, k) = self.dims2();
                let (k2, n) = rhs.dims2();
                if k != k2 {
                    return Err(Error::shape("matmul", &self.shape, &rhs.shape));
                }
                Ok(Tensor {
                    shape: vec![m, n],
                    data: gemm(&self.data, &rhs.data, m, k, n),
                })
            }
            (3, 2) | (3, 3) => {
                let (h, m, k) = self.dims3();
                let (rh, k2, n) = if rhs.rank() == 3 {
                    rhs.dims3()
                } else {
                    let (k2, n) = rhs.dims2();
                    (h, k2, n)
                };
                if k != k2 || rh != h {
                    return Err(Error::shape("matmul", &self.shape, &rhs.shape));
                }
                let mut data = Vec::with_capacity(h * m * n);
                for b in 0..h {
                    let lhs = &self.data[b * m * k..(b + 1) * m * k];
                    let r = if rhs.rank() == 3 {
                        &rhs.data[b * k * n..(b + 1) * k * n]
                    } else {
                        &rhs.data[..]
                    };
                    data.extend(gemm(lhs, r, m, k, n));
                }
                Ok(Tensor {
                    shape: vec![h, m, n],
                    data,
                })
            }
            _ => Err(Error::shape("matmul", &self.shape, &rhs.shape)),
        }
    }

    /// Softmax over the last axis, with the row maximum subtracted first.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let q = *self.shape.last().expect("rank >= 1");
        if q == 0 {
            return Err(Error::InvalidInput("softmax over an empty axis".into()));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(q) {
            softmax_in_place(row);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}
