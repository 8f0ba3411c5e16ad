//! Jacobian-vector products from cached `𝓘`, `𝓖`, never forming `J`.

use super::{FisherError, Result};
use crate::flops;
use crate::net::{BatchCache, LayerCache, NetError, Params};
use crate::tensor::{gemm_strided, hadamard, matmul, matmul_tn, Tensor, TensorError};

thread_local! {
    static CORRUPT_VJP: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Mutation hook for smoke-testing the verification suites: runs `f` with
/// every VJP on this thread returning the negated product.
#[doc(hidden)]
pub fn with_corrupted_vjp<R>(f: impl FnOnce() -> R) -> R {
    let prev = CORRUPT_VJP.with(|c| c.replace(true));
    let out = f();
    CORRUPT_VJP.with(|c| c.set(prev));
    out
}

fn maybe_corrupt(t: Tensor) -> Tensor {
    if CORRUPT_VJP.with(|c| c.get()) {
        t.scale(-1.0)
    } else {
        t
    }
}

fn shape_err(op: &'static str, expected: String, found: String) -> FisherError {
    FisherError::Tensor(TensorError::Shape { op, expected, found })
}

/// `J·vec(v)` for a dense layer: `v₁ = vᵀ𝓘`, `v₂ = v₁ ⊙ 𝓖`, then column
/// sums, giving one entry per sample.
pub fn jvp_dense(input: &Tensor, grad_out: &Tensor, v: &Tensor) -> Result<Vec<f64>> {
    if v.shape() != [input.rows(), grad_out.rows()] {
        return Err(shape_err(
            "jvp_dense",
            format!("[{}, {}]", input.rows(), grad_out.rows()),
            format!("{:?}", v.shape()),
        ));
    }
    let v1 = matmul_tn(v, input)?;
    let v2 = hadamard(&v1, grad_out)?;
    Ok(v2.col_sums())
}

/// `Jᵀ·v` for a dense layer: `𝓘 · (v1ᵀ ⊙ 𝓖ᵀ)`, a `d_i × d_o` matrix.
pub fn vjp_dense(input: &Tensor, grad_out: &Tensor, v: &[f64]) -> Result<Tensor> {
    let m = input.cols();
    if v.len() != m || grad_out.cols() != m {
        return Err(shape_err("vjp_dense", format!("{} samples", m), format!("{}", v.len())));
    }
    let d_o = grad_out.rows();
    flops::add((m * d_o) as u64);
    let scaled = Tensor::from_fn(m, d_o, |j, b| v[j] * grad_out.get(b, j));
    Ok(maybe_corrupt(matmul(input, &scaled)?))
}

fn conv_dims(unfolded: &Tensor, grad_out: &Tensor, spatial: usize) -> Result<usize> {
    if spatial == 0 || !unfolded.rows().is_multiple_of(spatial) || grad_out.rows() != unfolded.rows() {
        return Err(shape_err(
            "conv cache",
            format!("row counts divisible by S={}", spatial),
            format!("{} and {}", unfolded.rows(), grad_out.rows()),
        ));
    }
    Ok(unfolded.rows() / spatial)
}

/// `[J·vec(ĝ)]_i = 1ᵀ(G_i·ĝᵀ ⊙ I_i)1` for every sample, with `ĝ` the
/// `F × c_out` reshaped parameter-space vector.
pub fn jvp_conv(unfolded: &Tensor, grad_out: &Tensor, spatial: usize, g_hat: &Tensor) -> Result<Vec<f64>> {
    let m = conv_dims(unfolded, grad_out, spatial)?;
    let (f, c) = (unfolded.cols(), grad_out.cols());
    if g_hat.shape() != [f, c] {
        return Err(shape_err("jvp_conv", format!("[{}, {}]", f, c), format!("{:?}", g_hat.shape())));
    }
    let rows = m * spatial;
    let mut proj = vec![0.0; rows * f];
    // G · ĝᵀ over all samples at once: (m·S × c) · (c × F)
    gemm_strided(rows, c, f, grad_out.data(), c as isize, 1, g_hat.data(), 1, c as isize, 0.0, &mut proj);
    flops::add((rows * f) as u64);
    let ud = unfolded.data();
    Ok((0..m)
        .map(|i| {
            let lo = i * spatial * f;
            let hi = lo + spatial * f;
            proj[lo..hi].iter().zip(&ud[lo..hi]).map(|(a, b)| a * b).sum()
        })
        .collect())
}

/// `Jᵀv = Σᵢ I_iᵀ(G_i·vᵢ)`, an `F × c_out` matrix.
pub fn vjp_conv(unfolded: &Tensor, grad_out: &Tensor, spatial: usize, v: &[f64]) -> Result<Tensor> {
    let m = conv_dims(unfolded, grad_out, spatial)?;
    if v.len() != m {
        return Err(shape_err("vjp_conv", format!("{} samples", m), format!("{}", v.len())));
    }
    let c = grad_out.cols();
    let mut scaled = grad_out.data().to_vec();
    for (i, chunk) in scaled.chunks_exact_mut(spatial * c).enumerate() {
        chunk.iter_mut().for_each(|x| *x *= v[i]);
    }
    flops::add((m * spatial * c) as u64);
    let scaled = Tensor::matrix(m * spatial, c, scaled)?;
    Ok(maybe_corrupt(matmul_tn(unfolded, &scaled)?))
}

/// Borrowed view of one layer's cached `𝓘`, `𝓖` that knows how to apply
/// `J` and `Jᵀ`.
#[derive(Debug, Clone, Copy)]
pub enum LayerJacobian<'a> {
    Dense { input: &'a Tensor, grad_out: &'a Tensor },
    Conv { unfolded: &'a Tensor, grad_out: &'a Tensor, spatial: usize },
}

impl<'a> LayerJacobian<'a> {
    /// View of layer `l`, valid only if `cache` came from a complete
    /// forward+backward on the current `params`.
    pub fn from_cache(cache: &'a BatchCache, params: &Params, l: usize) -> Result<Self> {
        Self::from_layer_cache(cache.layer(params, l)?)
    }

    /// View without the freshness check; the caller vouches for the cache.
    pub fn from_layer_cache(lc: &'a LayerCache) -> Result<Self> {
        let grad_out = lc.grad_out().ok_or(FisherError::Net(NetError::IncompleteCache))?;
        Ok(match lc {
            LayerCache::Dense { input, .. } => LayerJacobian::Dense { input, grad_out },
            LayerCache::Conv { geom, unfolded, .. } => {
                LayerJacobian::Conv { unfolded, grad_out, spatial: geom.spatial() }
            }
        })
    }

    pub fn batch(&self) -> usize {
        match *self {
            LayerJacobian::Dense { input, .. } => input.cols(),
            LayerJacobian::Conv { unfolded, spatial, .. } => unfolded.rows() / spatial,
        }
    }

    /// Shape of the layer's weight matrix.
    pub fn param_shape(&self) -> (usize, usize) {
        match *self {
            LayerJacobian::Dense { input, grad_out } => (input.rows(), grad_out.rows()),
            LayerJacobian::Conv { unfolded, grad_out, .. } => (unfolded.cols(), grad_out.cols()),
        }
    }

    pub fn jvp(&self, v: &Tensor) -> Result<Vec<f64>> {
        match *self {
            LayerJacobian::Dense { input, grad_out } => jvp_dense(input, grad_out, v),
            LayerJacobian::Conv { unfolded, grad_out, spatial } => jvp_conv(unfolded, grad_out, spatial, v),
        }
    }

    pub fn vjp(&self, v: &[f64]) -> Result<Tensor> {
        match *self {
            LayerJacobian::Dense { input, grad_out } => vjp_dense(input, grad_out, v),
            LayerJacobian::Conv { unfolded, grad_out, spatial } => vjp_conv(unfolded, grad_out, spatial, v),
        }
    }

    /// `JJᵀ` by covariance factorization.
    pub fn gram(&self) -> Result<Tensor> {
        match *self {
            LayerJacobian::Dense { input, grad_out } => Ok(super::covfactor_dense(input, grad_out)?.gram),
            LayerJacobian::Conv { unfolded, grad_out, spatial } => super::covfactor_conv(unfolded, grad_out, spatial),
        }
    }

    /// Materialized `J` (`m × rows·cols`, rows are `vec` of per-sample
    /// gradients). Costs `m·d_i·d_o` for dense and `m·S·F·c_out` for conv.
    pub fn explicit(&self) -> Result<Tensor> {
        match *self {
            LayerJacobian::Dense { input, grad_out } => {
                Ok(crate::tensor::khatri_rao_cols(input, grad_out)?.transpose())
            }
            LayerJacobian::Conv { unfolded, grad_out, spatial } => {
                let m = self.batch();
                let (f, c) = (unfolded.cols(), grad_out.cols());
                let mut rows = Vec::with_capacity(m * f * c);
                let mut block = vec![0.0; f * c];
                for i in 0..m {
                    let ui = &unfolded.data()[i * spatial * f..];
                    let gi = &grad_out.data()[i * spatial * c..];
                    gemm_strided(f, spatial, c, ui, 1, f as isize, gi, c as isize, 1, 0.0, &mut block);
                    rows.extend(Tensor::from_parts(vec![f, c], block.clone()).vec());
                }
                Ok(Tensor::matrix(m, f * c, rows)?)
            }
        }
    }
}
