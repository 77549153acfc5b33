//! Dense row-major `f64` tensors and the matrix kernels everything else uses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking `product(shape) == data.len()` and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("shape {shape:?} must be non-empty and positive")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value {} at flat index {pos}", data[pos])));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::matrix(r, c, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    /// A single row vector `1 × len`.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent; for a matrix this is the column count.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert!(self.is_matrix(), "expected a matrix, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_slice_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols()).map(<[f64]>::to_vec).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Self::from_parts_unchecked(shape.to_vec(), self.data.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts_unchecked(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts_unchecked(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul_elem", |a, b| a * b)
    }

    /// Adds `bias` (length = cols) to every row.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<Self> {
        let c = self.cols();
        if bias.len() != c {
            return Err(Error::Dimension {
                op: "add_row_vector",
                left: self.shape.clone(),
                right: vec![bias.len()],
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Column means of a matrix, accumulated in row order. Deviations are
    /// summed relative to the first row, so a constant column returns its
    /// value exactly.
    pub fn column_means(&self) -> Vec<f64> {
        let (r, c) = self.dims2();
        let first = &self.data[..c];
        let mut acc = vec![0.0; c];
        for row in self.data.chunks(c).skip(1) {
            for ((a, v), f) in acc.iter_mut().zip(row).zip(first) {
                *a += v - f;
            }
        }
        acc.iter().zip(first).map(|(a, f)| f + a / r as f64).collect()
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows needs at least one part".into()))?;
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if !p.is_matrix() || p.cols() != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts_unchecked(vec![rows, c], data))
    }

    /// Rows `indices` of a matrix, in the given order.
    pub fn column_sums(&self) -> Vec<f64> {
        let c = self.cols();
        let mut acc = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row_slice(i));
        }
        Self::from_parts_unchecked(vec![indices.len(), c], data)
    }

    /// Square matrix made symmetric by averaging with its transpose.
    pub fn symmetrized(&self) -> Self {
        let (n, m) = self.dims2();
        assert_eq!(n, m, "symmetrize needs a square matrix");
        let mut out = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }
}

/// `C = A·B` for matrices `m×k` and `k×p`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k) = a.dims2();
    let p = b.cols();
    let mut out = vec![0.0; m * p];
    matmul_into(&a.data, &b.data, &mut out, m, k, p);
    Ok(Tensor::from_parts_unchecked(vec![m, p], out))
}

/// `C = A·Bᵀ` for matrices `m×k` and `p×k`, without materializing `Bᵀ`.
pub fn matmul_transb(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "matmul_transb",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k) = a.dims2();
    let p = b.rows();
    let mut out = vec![0.0; m * p];
    matmul_transb_into(&a.data, &b.data, &mut out, m, k, p);
    Ok(Tensor::from_parts_unchecked(vec![m, p], out))
}

/// Raw kernel: `out[m×p] = a[m×k]·b[k×p]`. `out` is overwritten.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * p..(t + 1) * p];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Raw kernel: `out[m×p] = a[m×k]·b[p×k]ᵀ`.
pub fn matmul_transb_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            out[i * p + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// Row-wise softmax of `λ·X` with max subtraction.
pub fn row_softmax(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Domain(format!("softmax temperature must be positive, got {temperature}")));
    }
    if !x.is_finite() {
        return Err(Error::Domain("softmax input contains non-finite values".into()));
    }
    let mut out = x.clone();
    softmax_rows_in_place(out.data_mut(), x.cols(), temperature);
    Ok(out)
}

/// In-place row softmax over rows of width `cols`.
pub fn softmax_rows_in_place(data: &mut [f64], cols: usize, temperature: f64) {
    for row in data.chunks_mut(cols) {
        softmax_slice(row, temperature);
    }
}

pub fn softmax_slice(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (temperature * (*v - max)).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Spatial layout `h × w` of the `l` tokens in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    /// Square grid inferred from the token count.
    pub fn square(l: usize) -> Result<Self> {
        let s = (l as f64).sqrt().round() as usize;
        if s * s != l || l == 0 {
            return Err(Error::Shape(format!("{l} tokens do not form a square grid")));
        }
        Ok(Self { h: s, w: s })
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn check_ratio(&self, r: usize) -> Result<()> {
        if r == 0 || self.h % r != 0 || self.w % r != 0 {
            return Err(Error::Shape(format!(
                "grid {}x{} is not divisible by downsample ratio {r}",
                self.h, self.w
            )));
        }
        Ok(())
    }
}

/// Mean pooling over non-overlapping `r×r` blocks of a frame laid out on `grid`.
pub fn spatial_downsample(z: &Tensor, grid: Grid, r: usize) -> Result<Tensor> {
    if !z.is_matrix() || z.rows() != grid.tokens() {
        return Err(Error::Shape(format!(
            "frame with shape {:?} does not match grid {}x{}",
            z.shape(),
            grid.h,
            grid.w
        )));
    }
    grid.check_ratio(r)?;
    if r == 1 {
        return Ok(z.clone());
    }
    let d = z.cols();
    let (oh, ow) = (grid.h / r, grid.w / r);
    let inv = 1.0 / (r * r) as f64;
    let mut out = vec![0.0; oh * ow * d];
    for by in 0..oh {
        for bx in 0..ow {
            let orow = &mut out[(by * ow + bx) * d..(by * ow + bx + 1) * d];
            for dy in 0..r {
                for dx in 0..r {
                    let src = (by * r + dy) * grid.w + bx * r + dx;
                    for (o, v) in orow.iter_mut().zip(z.row_slice(src)) {
                        *o += v;
                    }
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![oh * ow, d], out))
}

/// Same as [`spatial_downsample`] with a square grid inferred from the row count.
pub fn spatial_downsample_square(z: &Tensor, r: usize) -> Result<Tensor> {
    spatial_downsample(z, Grid::square(z.rows())?, r)
}

pub fn frobenius_norm(w: &Tensor) -> f64 {
    w.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
