//! Gram matrices `JJᵀ` from covariance factors of the cached layer values.

use super::{FisherError, Result};
use crate::flops;
use crate::tensor::{gemm_strided, hadamard, matmul_tn, Tensor, TensorError};

/// Covariance factors of a dense layer and their Hadamard product.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFactors {
    /// `𝓘ᵀ𝓘`
    pub c1: Tensor,
    /// `𝓖ᵀ𝓖`
    pub c2: Tensor,
    /// `c1 ⊙ c2 = JJᵀ`
    pub gram: Tensor,
}

/// `JJᵀ = (𝓘ᵀ𝓘) ⊙ (𝓖ᵀ𝓖)`. Costs `m²·d_i + m²·d_o + m²` multiply-adds.
pub fn covfactor_dense(input: &Tensor, grad_out: &Tensor) -> Result<DenseFactors> {
    if input.cols() != grad_out.cols() {
        return Err(FisherError::Tensor(TensorError::Shape {
            op: "covfactor_dense",
            expected: format!("{} samples", input.cols()),
            found: format!("{} samples", grad_out.cols()),
        }));
    }
    let c1 = matmul_tn(input, input)?;
    let c2 = matmul_tn(grad_out, grad_out)?;
    let gram = hadamard(&c1, &c2)?;
    Ok(DenseFactors { c1, c2, gram })
}

/// Shared kernel for every blocked factorization. `a` holds `m` stacked
/// `nc × na` blocks, `b` holds `m` stacked `nc × nb` blocks. Returns
/// `gram[i,j] = Σ_{c,c'} (A_i A_jᵀ)[c,c'] · (B_i B_jᵀ)[c,c']`.
///
/// Works one sample row at a time so only `nc × m·nc` scratch is live.
/// Costs `m²·nc²·(na + nb) + m²·nc²` multiply-adds.
pub(crate) fn blocked_gram(a: &[f64], na: usize, b: &[f64], nb: usize, m: usize, nc: usize) -> Result<Tensor> {
    let width = m * nc;
    let mut ca = vec![0.0; nc * width];
    let mut cb = vec![0.0; nc * width];
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        // row block i of (stacked A)(stacked A)ᵀ, and likewise for B
        gemm_strided(nc, na, width, &a[i * nc * na..], na as isize, 1, a, 1, na as isize, 0.0, &mut ca);
        gemm_strided(nc, nb, width, &b[i * nc * nb..], nb as isize, 1, b, 1, nb as isize, 0.0, &mut cb);
        for j in 0..m {
            let mut s = 0.0;
            for c in 0..nc {
                let lo = c * width + j * nc;
                s += ca[lo..lo + nc].iter().zip(&cb[lo..lo + nc]).map(|(x, y)| x * y).sum::<f64>();
            }
            gram[i * m + j] = s;
        }
        flops::add((m * nc * nc) as u64);
    }
    crate::tensor::finite("blocked gram", Tensor::from_parts(vec![m, m], gram)).map_err(Into::into)
}

fn conv_batch(unfolded: &Tensor, grad_out: &Tensor, spatial: usize) -> Result<usize> {
    if spatial == 0 || !unfolded.rows().is_multiple_of(spatial) || grad_out.rows() != unfolded.rows() {
        return Err(FisherError::Tensor(TensorError::Shape {
            op: "covfactor_conv",
            expected: format!("stacked blocks of S={} rows", spatial),
            found: format!("{} input rows, {} derivative rows", unfolded.rows(), grad_out.rows()),
        }));
    }
    Ok(unfolded.rows() / spatial)
}

/// Conv Gram `gram[i,j] = Σ_{s,s'} (I_iI_jᵀ ⊙ G_iG_jᵀ)[s,s']` from stacked
/// per-sample blocks (`(m·S) × F` inputs, `(m·S) × c_out` derivatives).
///
/// The `m × m × S × S` covariance tensors are never materialized. Costs
/// `m²·S²·(F + c_out) + m²·S²` multiply-adds.
pub fn covfactor_conv(unfolded: &Tensor, grad_out: &Tensor, spatial: usize) -> Result<Tensor> {
    let m = conv_batch(unfolded, grad_out, spatial)?;
    blocked_gram(unfolded.data(), unfolded.cols(), grad_out.data(), grad_out.cols(), m, spatial)
}

/// Stacks per-sample `I_i` (`S × F`) and `G_i` (`S × c_out`) matrices,
/// rejecting ragged shapes, and factors them.
pub fn covfactor_conv_samples(inputs: &[Tensor], grads: &[Tensor]) -> Result<Tensor> {
    let (unfolded, grad_out, spatial) = stack_samples(inputs, grads)?;
    covfactor_conv(&unfolded, &grad_out, spatial)
}

/// Stacks per-sample conv blocks into the cache layout.
pub fn stack_samples(inputs: &[Tensor], grads: &[Tensor]) -> Result<(Tensor, Tensor, usize)> {
    let ragged = |what: &str, i: usize, found: &[usize], want: String| {
        FisherError::Tensor(TensorError::Shape {
            op: "covfactor_conv",
            expected: want,
            found: format!("{} {} has shape {:?}", what, i, found),
        })
    };
    if inputs.is_empty() || inputs.len() != grads.len() {
        return Err(FisherError::Tensor(TensorError::Shape {
            op: "covfactor_conv",
            expected: "equal, non-zero sample counts".into(),
            found: format!("{} inputs, {} derivatives", inputs.len(), grads.len()),
        }));
    }
    let (s, f, c) = (inputs[0].rows(), inputs[0].cols(), grads[0].cols());
    let mut a = Vec::with_capacity(inputs.len() * s * f);
    let mut b = Vec::with_capacity(inputs.len() * s * c);
    for (i, (x, g)) in inputs.iter().zip(grads).enumerate() {
        if x.shape() != [s, f] {
            return Err(ragged("input", i, x.shape(), format!("[{}, {}]", s, f)));
        }
        if g.shape() != [s, c] {
            return Err(ragged("derivative", i, g.shape(), format!("[{}, {}]", s, c)));
        }
        a.extend_from_slice(x.data());
        b.extend_from_slice(g.data());
    }
    let m = inputs.len();
    Ok((Tensor::matrix(m * s, f, a)?, Tensor::matrix(m * s, c, b)?, s))
}

/// Materialized covariance tensors `[C₁]_{i,j} = I_iI_jᵀ`, `[C₂]_{i,j} =
/// G_iG_jᵀ`, both `m × m × S × S`. Test and inspection use only.
pub fn conv_covariance_tensors(unfolded: &Tensor, grad_out: &Tensor, spatial: usize) -> Result<(Tensor, Tensor)> {
    let m = conv_batch(unfolded, grad_out, spatial)?;
    let build = |t: &Tensor| -> Result<Tensor> {
        let k = t.cols();
        let mut out = vec![0.0; m * m * spatial * spatial];
        for i in 0..m {
            for j in 0..m {
                let dst = &mut out[(i * m + j) * spatial * spatial..][..spatial * spatial];
                gemm_strided(
                    spatial,
                    k,
                    spatial,
                    &t.data()[i * spatial * k..],
                    k as isize,
                    1,
                    &t.data()[j * spatial * k..],
                    1,
                    k as isize,
                    0.0,
                    dst,
                );
            }
        }
        Ok(Tensor::new(vec![m, m, spatial, spatial], out)?)
    };
    Ok((build(unfolded)?, build(grad_out)?))
}

/// `gram[i,j] = Σ_{s,s'} [C₁ ⊙ C₂]_{i,j,s,s'}` over materialized tensors.
pub fn reduce_covariance_tensors(c1: &Tensor, c2: &Tensor) -> Result<Tensor> {
    let shape = c1.shape();
    if shape.len() != 4 || shape != c2.shape() || shape[0] != shape[1] || shape[2] != shape[3] {
        return Err(FisherError::Tensor(TensorError::Shape {
            op: "reduce_covariance_tensors",
            expected: "two equal [m, m, S, S] tensors".into(),
            found: format!("{:?} and {:?}", shape, c2.shape()),
        }));
    }
    let m = shape[0];
    let block = shape[2] * shape[3];
    let prod = hadamard(c1, c2)?;
    let gram = prod.data().chunks_exact(block.max(1)).map(|c| c.iter().sum()).collect::<Vec<f64>>();
    Ok(Tensor::matrix(m, m, gram)?)
}
