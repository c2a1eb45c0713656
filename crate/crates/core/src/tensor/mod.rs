//! Dense N-way tensors and the multilinear primitives used by the rest of the
//! crate.
//!
//! Layout: data is stored first-index-slowest (row-major generalised to N
//! modes). Mode numbers in the public API are 1-based.
//!
//! Unfolding convention: `unfold(t, n)` has `I_n` rows; its columns enumerate
//! the remaining modes in increasing mode order with the earliest remaining
//! mode varying fastest. Under this convention
//!
//! ```text
//! unfold(G x_1 A x_2 P2 ... x_N PN, 1) = A * unfold(G, 1) * (PN ⊗ ... ⊗ P2)^T
//! ```
//!
//! and [`vec`] (earliest mode fastest) is the row of `unfold(G, 1)` when
//! `G` has a leading extent of one.

mod linalg;
mod matrix;

pub use linalg::{leading_left_singular_vectors, thin_qr};
pub use matrix::{kronecker, Matrix};

use std::fmt;

use crate::error::{Error, Result};

/// Highest tensor order accepted by the constructors.
pub const MAX_ORDER: usize = 8;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} entries, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("NaN at tensor entry {bad}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Tensor { shape, data: vec![0.0; n] })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    /// Value at a multi-index (0-based).
    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| v * s).collect())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape, self.shape
            )));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Order-2 view as a matrix (lossless).
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.order() != 2 {
            return Err(Error::shape(format!("order-{} tensor is not a matrix", self.order())));
        }
        Ok(Matrix::from_parts(self.shape[0], self.shape[1], self.data.clone()))
    }

    /// Keeps only the listed samples (indices along mode 1), in order.
    pub fn select_mode1(&self, rows: &[usize]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::shape("cannot select zero samples"));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::shape(format!("sample {r} out of range")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Keeps the listed indices along a 1-based mode.
    pub fn select_mode(&self, mode: usize, keep: &[usize]) -> Result<Tensor> {
        check_mode(self, mode)?;
        let n = mode - 1;
        let left: usize = self.shape[..n].iter().product();
        let ext = self.shape[n];
        let right: usize = self.shape[n + 1..].iter().product();
        let mut data = Vec::with_capacity(left * keep.len() * right);
        for l in 0..left {
            for &k in keep {
                if k >= ext {
                    return Err(Error::shape(format!("index {k} out of range for mode {mode}")));
                }
                let start = (l * ext + k) * right;
                data.extend_from_slice(&self.data[start..start + right]);
            }
        }
        let mut shape = self.shape.clone();
        shape[n] = keep.len();
        validate_shape(&shape)?;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Sum of absolute values of each slice along a 1-based mode.
    pub fn slice_abs_sums(&self, mode: usize) -> Vec<f64> {
        self.slice_reduce(mode, f64::abs)
    }

    /// Sum of squares of each slice along a 1-based mode.
    pub fn slice_energies(&self, mode: usize) -> Vec<f64> {
        self.slice_reduce(mode, |v| v * v)
    }

    fn slice_reduce(&self, mode: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = mode - 1;
        let left: usize = self.shape[..n].iter().product();
        let ext = self.shape[n];
        let right: usize = self.shape[n + 1..].iter().product();
        let mut out = vec![0.0; ext];
        for l in 0..left {
            for (k, acc) in out.iter_mut().enumerate() {
                let start = (l * ext + k) * right;
                *acc += self.data[start..start + right].iter().map(|&v| f(v)).sum::<f64>();
            }
        }
        out
    }

    /// Negates the slice `index` along a 1-based mode in place.
    pub(crate) fn negate_slice(&mut self, mode: usize, index: usize) {
        let n = mode - 1;
        let left: usize = self.shape[..n].iter().product();
        let ext = self.shape[n];
        let right: usize = self.shape[n + 1..].iter().product();
        for l in 0..left {
            let start = (l * ext + index) * right;
            for v in &mut self.data[start..start + right] {
                *v = -*v;
            }
        }
    }
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Self {
        Tensor::from_parts(vec![m.rows(), m.cols()], m.into_data())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor {:?} {:?}", self.shape, &self.data[..self.data.len().min(16)])
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor order must be at least 1"));
    }
    if shape.len() > MAX_ORDER {
        return Err(Error::shape(format!(
            "tensor order {} exceeds the supported maximum of {MAX_ORDER}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

fn check_mode(t: &Tensor, mode: usize) -> Result<()> {
    if mode == 0 || mode > t.order() {
        return Err(Error::shape(format!(
            "mode {mode} out of range for order-{} tensor",
            t.order()
        )));
    }
    Ok(())
}

/// Column strides of the mode-`n` unfolding for every mode (0 for `n` itself).
fn unfold_col_strides(shape: &[usize], n: usize) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for (m, &ext) in shape.iter().enumerate() {
        if m != n {
            strides[m] = s;
            s *= ext;
        }
    }
    strides
}

/// Mode-`mode` unfolding (1-based mode).
pub fn unfold(t: &Tensor, mode: usize) -> Result<Matrix> {
    check_mode(t, mode)?;
    let n = mode - 1;
    let rows = t.shape[n];
    let cols = t.len() / rows;
    let col_strides = unfold_col_strides(&t.shape, n);
    let mut out = vec![0.0; t.len()];
    let mut idx = vec![0usize; t.order()];
    for &v in &t.data {
        let col: usize = idx.iter().zip(&col_strides).map(|(i, s)| i * s).sum();
        out[idx[n] * cols + col] = v;
        increment(&mut idx, &t.shape);
    }
    Ok(Matrix::from_parts(rows, cols, out))
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<Tensor> {
    validate_shape(shape)?;
    if mode == 0 || mode > shape.len() {
        return Err(Error::shape(format!("mode {mode} out of range for shape {shape:?}")));
    }
    let n = mode - 1;
    let total: usize = shape.iter().product();
    if m.rows() != shape[n] || m.rows() * m.cols() != total {
        return Err(Error::shape(format!(
            "{}x{} matrix cannot fold into {shape:?} along mode {mode}",
            m.rows(),
            m.cols()
        )));
    }
    let cols = m.cols();
    let col_strides = unfold_col_strides(shape, n);
    let mut data = vec![0.0; total];
    let mut idx = vec![0usize; shape.len()];
    for slot in data.iter_mut() {
        let col: usize = idx.iter().zip(&col_strides).map(|(i, s)| i * s).sum();
        *slot = m.data()[idx[n] * cols + col];
        increment(&mut idx, shape);
    }
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for m in (0..shape.len()).rev() {
        idx[m] += 1;
        if idx[m] < shape[m] {
            return;
        }
        idx[m] = 0;
    }
}

/// Vectorisation with the earliest mode varying fastest.
pub fn vec(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    let mut strides = vec![0; t.order()];
    let mut s = 1;
    for (m, &ext) in t.shape.iter().enumerate() {
        strides[m] = s;
        s *= ext;
    }
    let mut idx = vec![0usize; t.order()];
    for &v in &t.data {
        let pos: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[pos] = v;
        increment(&mut idx, &t.shape);
    }
    out
}

/// Mode-n product `t x_mode m`; `m` must have `I_mode` columns.
pub fn mode_n_product(t: &Tensor, m: &Matrix, mode: usize) -> Result<Tensor> {
    check_mode(t, mode)?;
    let n = mode - 1;
    let ext = t.shape[n];
    if m.cols() != ext {
        return Err(Error::shape(format!(
            "mode-{mode} product needs {ext} columns, matrix is {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let left: usize = t.shape[..n].iter().product();
    let right: usize = t.shape[n + 1..].iter().product();
    let out_ext = m.rows();
    let mut out = vec![0.0; left * out_ext * right];
    for l in 0..left {
        let src = &t.data[l * ext * right..(l + 1) * ext * right];
        let dst = &mut out[l * out_ext * right..(l + 1) * out_ext * right];
        for j in 0..out_ext {
            let dst_row = &mut dst[j * right..(j + 1) * right];
            for i in 0..ext {
                let a = m.get(j, i);
                if a == 0.0 {
                    continue;
                }
                for (d, &s) in dst_row.iter_mut().zip(&src[i * right..(i + 1) * right]) {
                    *d += a * s;
                }
            }
        }
    }
    let mut shape = t.shape.clone();
    shape[n] = out_ext;
    Ok(Tensor::from_parts(shape, out))
}

/// Sequential mode products over distinct modes, applied in the given order.
pub fn multilinear_product(t: &Tensor, factors: &[(usize, &Matrix)]) -> Result<Tensor> {
    let mut seen = [false; MAX_ORDER + 1];
    for &(mode, _) in factors {
        if mode <= MAX_ORDER && std::mem::replace(&mut seen[mode], true) {
            return Err(Error::invalid(format!("mode {mode} given twice")));
        }
    }
    let mut out = t.clone();
    for &(mode, m) in factors {
        out = mode_n_product(&out, m, mode)?;
    }
    Ok(out)
}

pub fn frobenius_norm(t: &Tensor) -> f64 {
    t.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Contraction over the shared sample mode: `C[m, i2..iN] = Σ_s y[s,m] x[s, i2..iN]`.
pub fn cross_covariance(x: &Tensor, y: &Matrix) -> Result<Tensor> {
    let samples = x.shape[0];
    if y.rows() != samples {
        return Err(Error::shape(format!(
            "x has {samples} samples but y has {} rows",
            y.rows()
        )));
    }
    let m = y.cols();
    let stride = x.len() / samples;
    let mut out = vec![0.0; m * stride];
    for s in 0..samples {
        let xs = &x.data[s * stride..(s + 1) * stride];
        for r in 0..m {
            let w = y.get(s, r);
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out[r * stride..(r + 1) * stride].iter_mut().zip(xs) {
                *o += w * v;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[0] = m;
    Ok(Tensor::from_parts(shape, out))
}

/// Outer product of vectors (test and generator utility).
pub fn outer(vectors: &[&[f64]]) -> Result<Tensor> {
    let shape: Vec<usize> = vectors.iter().map(|v| v.len()).collect();
    validate_shape(&shape)?;
    let mut data = vec![1.0];
    for v in vectors {
        data = data.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect();
    }
    Ok(Tensor::from_parts(shape, data))
}
