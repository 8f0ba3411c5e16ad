//! Dense row-major `f64` tensors and the handful of kernels the optimizer needs.
//!
//! Matrices are 2-D tensors. Vectorization (`vec`) is column-major: the
//! columns of a matrix are stacked on top of each other.

mod conv;
mod linalg;

pub use conv::{fold_conv_add, unfold_conv, unfold_conv_into, ConvGeometry};
pub use linalg::{solve_spd, sym_eig_min, sym_eigenvalues, Cholesky};

use crate::flops;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    Shape { op: &'static str, expected: String, found: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("matrix is not positive definite (pivot {index} = {pivot:e}); raise the damping")]
    Indefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the buffer matches the shape and that
    /// every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "Tensor::new",
                expected: format!("{} elements for shape {:?}", n, shape),
                found: format!("{} elements", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for kernels whose output shape is correct by
    /// construction. Finiteness is still the caller's job.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::InvalidArgument("ragged rows".into()));
        }
        Self::matrix(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_parts(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    /// Column vector `n × 1`.
    pub fn column(values: &[f64]) -> Self {
        Self::from_parts(vec![values.len(), 1], values.to_vec())
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

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                expected: format!("{} elements", self.data.len()),
                found: format!("{:?}", shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }

    /// Column-major vectorization of a matrix.
    pub fn vec(&self) -> Vec<f64> {
        self.transpose().data
    }

    /// Inverse of [`Tensor::vec`].
    pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Tensor> {
        if v.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "unvec",
                expected: format!("{}", rows * cols),
                found: format!("{}", v.len()),
            });
        }
        Ok(Tensor::from_fn(rows, cols, |i, j| v[j * rows + i]))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("sub", other, |a, b| a - b)
    }

    fn zip(&self, op: &'static str, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self, other)?;
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        finite(op, Tensor::from_parts(self.shape.clone(), data))
    }

    /// Frobenius / Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Sums each column of a matrix, giving a vector of length `cols`.
    pub fn col_sums(&self) -> Vec<f64> {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::Shape { op, expected: format!("{:?}", a.shape), found: format!("{:?}", b.shape) });
    }
    Ok(())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if !t.is_matrix() {
        return Err(TensorError::Shape { op, expected: "a matrix".into(), found: format!("{:?}", t.shape) });
    }
    Ok(())
}

pub(crate) fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.data.iter().all(|v| v.is_finite()) {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Raw strided gemm: `c = a · b` with explicit (row, col) strides for the
/// operands. Counts `r·k·c` multiply-adds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    r: usize,
    k: usize,
    c: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    out: &mut [f64],
) {
    debug_assert!(out.len() >= r * c);
    flops::add((r * k * c) as u64);
    if r == 0 || c == 0 {
        return;
    }
    if k == 0 {
        out[..r * c].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: slice lengths cover the strided extents; checked by callers
    // through the shape logic of the public wrappers.
    unsafe {
        matrixmultiply::dgemm(
            r,
            k,
            c,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            c as isize,
            1,
        );
    }
}

fn inner_mismatch(op: &'static str, left: usize, right: usize) -> TensorError {
    TensorError::Shape { op, expected: format!("inner dimension {}", left), found: format!("{}", right) }
}

/// `a · b` for `a: r×k`, `b: k×c`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul", a)?;
    require_matrix("matmul", b)?;
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(inner_mismatch("matmul", k, b.rows()));
    }
    let mut out = vec![0.0; r * c];
    gemm_strided(r, k, c, &a.data, k as isize, 1, &b.data, c as isize, 1, 0.0, &mut out);
    finite("matmul", Tensor::from_parts(vec![r, c], out))
}

/// `aᵀ · b` for `a: k×r`, `b: k×c`, without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul_tn", a)?;
    require_matrix("matmul_tn", b)?;
    let (k, r, c) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(inner_mismatch("matmul_tn", k, b.rows()));
    }
    let mut out = vec![0.0; r * c];
    gemm_strided(r, k, c, &a.data, 1, r as isize, &b.data, c as isize, 1, 0.0, &mut out);
    finite("matmul_tn", Tensor::from_parts(vec![r, c], out))
}

/// `a · bᵀ` for `a: r×k`, `b: c×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix("matmul_nt", a)?;
    require_matrix("matmul_nt", b)?;
    let (r, k, c) = (a.rows(), a.cols(), b.rows());
    if b.cols() != k {
        return Err(inner_mismatch("matmul_nt", k, b.cols()));
    }
    let mut out = vec![0.0; r * c];
    gemm_strided(r, k, c, &a.data, k as isize, 1, &b.data, 1, k as isize, 0.0, &mut out);
    finite("matmul_nt", Tensor::from_parts(vec![r, c], out))
}

/// Elementwise product. Counts one multiply per entry.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("hadamard", a, b)?;
    flops::add(a.len() as u64);
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    finite("hadamard", Tensor::from_parts(a.shape.clone(), data))
}

/// Column-wise Khatri-Rao product `𝓘 ∗ 𝓖`.
///
/// Column `j` of the result is `vec(𝓘[:,j] · 𝓖[:,j]ᵀ)` (column-major), so entry
/// `a + b·d_i` holds `𝓘[a,j]·𝓖[b,j]`. This is the per-sample gradient of a
/// linear layer, i.e. `J = (𝓘 ∗ 𝓖)ᵀ`.
pub fn khatri_rao_cols(i_mat: &Tensor, g_mat: &Tensor) -> Result<Tensor> {
    require_matrix("khatri_rao_cols", i_mat)?;
    require_matrix("khatri_rao_cols", g_mat)?;
    let m = i_mat.cols();
    if g_mat.cols() != m {
        return Err(TensorError::Shape {
            op: "khatri_rao_cols",
            expected: format!("{} columns", m),
            found: format!("{} columns", g_mat.cols()),
        });
    }
    let (di, d_o) = (i_mat.rows(), g_mat.rows());
    flops::add((di * d_o * m) as u64);
    let mut out = vec![0.0; di * d_o * m];
    for b in 0..d_o {
        for a in 0..di {
            let row = (a + b * di) * m;
            for j in 0..m {
                out[row + j] = i_mat.data[a * m + j] * g_mat.data[b * m + j];
            }
        }
    }
    finite("khatri_rao_cols", Tensor::from_parts(vec![di * d_o, m], out))
}
