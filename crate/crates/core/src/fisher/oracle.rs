//! Explicit-Jacobian reference routes, for small layers and for cost
//! comparison.

use super::products::LayerJacobian;
use super::{FisherError, Result};
use crate::flops;
use crate::tensor::{gemm_strided, matmul_nt, matmul_tn, solve_spd, Cholesky, Tensor};

/// `JJᵀ` through the per-sample gradients.
///
/// Dense layers stream over output units so memory stays at `m·d_i`; the
/// count is still `m·d_i·d_o` to form the gradients plus `m²·d_i·d_o` for
/// the inner products. Conv layers form `J` (`m·S·F·c_out + m²·F·c_out`).
pub fn explicit_gram(jac: &LayerJacobian) -> Result<Tensor> {
    match *jac {
        LayerJacobian::Dense { input, grad_out } => {
            let (di, m) = (input.rows(), input.cols());
            let mut gram = vec![0.0; m * m];
            let mut block = vec![0.0; m * di];
            for b in 0..grad_out.rows() {
                // rows of J restricted to output unit b: J_b[j, a] = 𝓘[a,j]·𝓖[b,j]
                let gb = grad_out.row(b);
                for (j, &gv) in gb.iter().enumerate() {
                    for a in 0..di {
                        block[j * di + a] = input.data()[a * m + j] * gv;
                    }
                }
                flops::add((m * di) as u64);
                gemm_strided(m, di, m, &block, di as isize, 1, &block, 1, di as isize, 1.0, &mut gram);
            }
            Ok(Tensor::matrix(m, m, gram)?)
        }
        LayerJacobian::Conv { .. } => {
            let j = jac.explicit()?;
            Ok(matmul_nt(&j, &j)?)
        }
    }
}

fn check_cap(jac: &LayerJacobian, cap: usize) -> Result<usize> {
    let (r, c) = jac.param_shape();
    if r * c > cap {
        return Err(FisherError::TooLarge { size: r * c, cap });
    }
    Ok(r * c)
}

/// Explicit damped Fisher block `JᵀJ/m + αI` (`p × p`, `p = rows·cols`).
pub fn dense_damped_fisher(jac: &LayerJacobian, alpha: f64, cap: usize) -> Result<Tensor> {
    let p = check_cap(jac, cap)?;
    let j = jac.explicit()?;
    let mut f = matmul_tn(&j, &j)?.scale(1.0 / jac.batch() as f64);
    for i in 0..p {
        f.set(i, i, f.get(i, i) + alpha);
    }
    Ok(f)
}

/// `(JᵀJ/m + αI)⁻¹`, explicit.
pub fn dense_block_inverse(jac: &LayerJacobian, alpha: f64, cap: usize) -> Result<Tensor> {
    let f = dense_damped_fisher(jac, alpha, cap)?;
    Ok(Cholesky::factor(&f)?.inverse()?)
}

/// `(JᵀJ/m + αI)⁻¹·g` by a dense `p × p` solve; `g` in parameter shape.
pub fn dense_direction(jac: &LayerJacobian, g: &Tensor, alpha: f64, cap: usize) -> Result<Tensor> {
    let f = dense_damped_fisher(jac, alpha, cap)?;
    let x = solve_spd(&f, &Tensor::column(&g.vec()))?;
    Ok(Tensor::unvec(x.data(), g.rows(), g.cols())?)
}
