//! Covariance factorization for any layer whose per-sample gradient is a
//! contraction of an input tensor and a derivative tensor over a set of
//! shared ("common") dimensions.
//!
//! Per sample, the input tensor `𝓘̂` is indexed by (common, independent)
//! dimensions and the derivative tensor `𝓖` by (common, free). The
//! per-sample gradient is `Σ_common 𝓘̂ ⊗ 𝓖`, so
//!
//! ```text
//! gram[i,j] = Σ_{c,c'} C₁[i,j,c,c'] · C₂[i,j,c,c']
//! C₁[i,j,c,c'] = Σ_independent 𝓘̂[i,c,·] 𝓘̂[j,c',·]
//! C₂[i,j,c,c'] = Σ_free        𝓖[i,c,·] 𝓖[j,c',·]
//! ```
//!
//! A dense layer has no common dimension; a convolution's common dimension
//! is the output spatial grid.

use super::factor::blocked_gram;
use super::products::LayerJacobian;
use super::{FisherError, Result};
use crate::tensor::Tensor;
use std::collections::HashSet;

/// Named dimension sets describing one layer's gradient structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneralLayerSchema {
    common: Vec<(String, usize)>,
    independent: Vec<(String, usize)>,
    free: (String, usize),
}

impl GeneralLayerSchema {
    /// Dimension names must be distinct across all three sets and every size
    /// positive. An empty `independent` set is rejected.
    pub fn new(common: &[(&str, usize)], independent: &[(&str, usize)], free: (&str, usize)) -> Result<Self> {
        if independent.is_empty() {
            return Err(FisherError::Schema("at least one independent dimension is required".into()));
        }
        let mut seen = HashSet::new();
        for &(name, size) in common.iter().chain(independent).chain(std::iter::once(&free)) {
            if size == 0 {
                return Err(FisherError::Schema(format!("dimension '{}' has size 0", name)));
            }
            if !seen.insert(name) {
                return Err(FisherError::Schema(format!("dimension '{}' appears more than once", name)));
            }
        }
        let own = |v: &[(&str, usize)]| v.iter().map(|&(n, s)| (n.to_string(), s)).collect();
        Ok(Self { common: own(common), independent: own(independent), free: (free.0.to_string(), free.1) })
    }

    /// Fully connected layer: no common dimension.
    pub fn dense(d_in: usize, d_out: usize) -> Result<Self> {
        Self::new(&[], &[("in", d_in)], ("out", d_out))
    }

    /// Convolution: the common dimension is the output position, the
    /// independent dimension is the filter support.
    pub fn conv(spatial: usize, patch: usize, c_out: usize) -> Result<Self> {
        Self::new(&[("position", spatial)], &[("patch", patch)], ("channel", c_out))
    }

    pub fn common_size(&self) -> usize {
        self.common.iter().map(|d| d.1).product()
    }

    pub fn independent_size(&self) -> usize {
        self.independent.iter().map(|d| d.1).product()
    }

    pub fn free_size(&self) -> usize {
        self.free.1
    }

    /// Expected shape of `𝓘̂` for `m` samples: `[m, common.., independent..]`.
    pub fn input_shape(&self, m: usize) -> Vec<usize> {
        let mut s = vec![m];
        s.extend(self.common.iter().chain(&self.independent).map(|d| d.1));
        s
    }

    /// Expected shape of `𝓖` for `m` samples: `[m, common.., free]`.
    pub fn grad_shape(&self, m: usize) -> Vec<usize> {
        let mut s = vec![m];
        s.extend(self.common.iter().map(|d| d.1));
        s.push(self.free.1);
        s
    }
}

/// Gram matrix through the general factorization. Costs
/// `m²·N_C²·(N_I + N_v) + m²·N_C²` multiply-adds.
pub fn covfactor_general(schema: &GeneralLayerSchema, input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let m = input.shape().first().copied().unwrap_or(0);
    if input.shape() != schema.input_shape(m).as_slice() {
        return Err(FisherError::Schema(format!(
            "input tensor has shape {:?}, schema expects {:?}",
            input.shape(),
            schema.input_shape(m)
        )));
    }
    if grad.shape() != schema.grad_shape(m).as_slice() {
        return Err(FisherError::Schema(format!(
            "derivative tensor has shape {:?}, schema expects {:?}",
            grad.shape(),
            schema.grad_shape(m)
        )));
    }
    blocked_gram(input.data(), schema.independent_size(), grad.data(), schema.free_size(), m, schema.common_size())
}

/// Rewrites a layer's cached values into the general layout.
pub fn general_unfold(jac: &LayerJacobian) -> Result<(GeneralLayerSchema, Tensor, Tensor)> {
    let m = jac.batch();
    match *jac {
        LayerJacobian::Dense { input, grad_out } => {
            let schema = GeneralLayerSchema::dense(input.rows(), grad_out.rows())?;
            Ok((schema, input.transpose(), grad_out.transpose()))
        }
        LayerJacobian::Conv { unfolded, grad_out, spatial } => {
            let schema = GeneralLayerSchema::conv(spatial, unfolded.cols(), grad_out.cols())?;
            let i_hat = unfolded.clone().reshape(&schema.input_shape(m))?;
            let g = grad_out.clone().reshape(&schema.grad_shape(m))?;
            Ok((schema, i_hat, g))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_specialization() {
        let (schema, i_hat, g) = general_unfold(&LayerJacobian::Dense {
            input: &Tensor::identity(2),
            grad_out: &Tensor::filled(&[1, 2], 1.0),
        })
        .unwrap();
        assert_eq!(covfactor_general(&schema, &i_hat, &g).unwrap(), Tensor::identity(2));
    }

    #[test]
    fn conv_specialization() {
        let i = Tensor::column(&[1.0, 2.0]);
        let g = Tensor::column(&[3.0, 4.0]);
        let (schema, i_hat, g_t) =
            general_unfold(&LayerJacobian::Conv { unfolded: &i, grad_out: &g, spatial: 2 }).unwrap();
        assert_eq!(covfactor_general(&schema, &i_hat, &g_t).unwrap().data(), &[121.0]);
    }

    #[test]
    fn scalar_instance() {
        let schema = GeneralLayerSchema::new(&[("c", 1)], &[("i", 1)], ("v", 1)).unwrap();
        let i_hat = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let g = Tensor::new(vec![1, 1, 1], vec![-2.0]).unwrap();
        assert_eq!(covfactor_general(&schema, &i_hat, &g).unwrap().data(), &[36.0]);
    }

    #[test]
    fn inconsistent_schemas() {
        assert!(GeneralLayerSchema::new(&[("a", 2)], &[("a", 3)], ("v", 1)).is_err());
        assert!(GeneralLayerSchema::new(&[], &[("a", 0)], ("v", 1)).is_err());
        assert!(GeneralLayerSchema::new(&[], &[], ("v", 1)).is_err());
        let schema = GeneralLayerSchema::dense(3, 2).unwrap();
        let err = covfactor_general(&schema, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 2])).unwrap_err();
        assert!(matches!(err, FisherError::Schema(_)));
    }
}
