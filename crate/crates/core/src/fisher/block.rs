use super::products::LayerJacobian;
use super::{covfactor_dense, FisherError, Result};
use crate::flops;
use crate::net::LayerCache;
use crate::tensor::{Cholesky, Tensor, TensorError};

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(FisherError::InvalidDamping(alpha))
    }
}

/// Cholesky factor of `JJᵀ/m + αI`.
#[derive(Debug, Clone)]
pub struct DampedGram {
    chol: Cholesky,
    alpha: f64,
    batch: usize,
}

impl DampedGram {
    /// Factors `gram/m + αI` with `m = gram.rows()`.
    pub fn new(gram: &Tensor, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let m = gram.rows();
        let inv_m = 1.0 / m as f64;
        let mut damped = gram.scale(inv_m);
        for i in 0..m {
            damped.set(i, i, damped.get(i, i) + alpha);
        }
        let chol = Cholesky::factor(&damped).map_err(|e| match e {
            TensorError::Indefinite { index, pivot } => FisherError::Damping { alpha, index, pivot },
            other => other.into(),
        })?;
        Ok(Self { chol, alpha, batch: m })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn factor(&self) -> &Cholesky {
        &self.chol
    }

    /// `(1/α)(g − (1/m)·Jᵀ(JJᵀ/m + αI)⁻¹·J·g)`, i.e. `(JᵀJ/m + αI)⁻¹g`,
    /// with `J` applied through `jac`.
    pub fn direction(&self, jac: &LayerJacobian, g: &Tensor) -> Result<Tensor> {
        if jac.batch() != self.batch {
            return Err(FisherError::BatchMismatch { factor: self.batch, current: jac.batch() });
        }
        let jg = jac.jvp(g)?;
        let s = self.chol.solve_vec(&jg)?;
        let back = jac.vjp(&s)?;
        let (inv_a, inv_m) = (1.0 / self.alpha, 1.0 / self.batch as f64);
        flops::add(g.len() as u64);
        let data = g.data().iter().zip(back.data()).map(|(gi, bi)| inv_a * (gi - inv_m * bi)).collect();
        Ok(crate::tensor::finite("woodbury direction", Tensor::new(g.shape().to_vec(), data)?)?)
    }
}

/// One-shot Woodbury solve from an assembled Gram.
pub fn woodbury_direction(gram: &Tensor, jac: &LayerJacobian, g: &Tensor, alpha: f64) -> Result<Tensor> {
    DampedGram::new(gram, alpha)?.direction(jac, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshDecision {
    Refresh,
    Reuse,
}

/// Which batch's `𝓘`, `𝓖` the Jacobian products use while the Gram factor
/// is stale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StaleReuse {
    /// Products use the current batch; only the damped factor is stale.
    #[default]
    CurrentBatch,
    /// Products use the batch the factor was built from, so the step is the
    /// exact inverse of that batch's damped block applied to the current
    /// gradient.
    RefreshBatch,
}

/// Refresh when `k mod freq == 0` or when the block holds no factor yet.
/// A frequency of 0 is treated as 1.
pub fn refresh_policy(block: &FisherBlock, k: usize, freq: usize) -> RefreshDecision {
    if block.damped.is_none() || k.is_multiple_of(freq.max(1)) {
        RefreshDecision::Refresh
    } else {
        RefreshDecision::Reuse
    }
}

/// Per-layer curvature state of the optimizer.
#[derive(Debug, Clone)]
pub struct FisherBlock {
    layer: usize,
    alpha: f64,
    factors: Option<(Tensor, Tensor)>,
    gram: Option<Tensor>,
    damped: Option<DampedGram>,
    snapshot: Option<LayerCache>,
    staleness: usize,
    refreshes: usize,
    flops: u64,
}

impl FisherBlock {
    pub fn new(layer: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            layer,
            alpha,
            factors: None,
            gram: None,
            damped: None,
            snapshot: None,
            staleness: 0,
            refreshes: 0,
            flops: 0,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Dense layers only: `(𝓘ᵀ𝓘, 𝓖ᵀ𝓖)` from the last refresh.
    pub fn factors(&self) -> Option<(&Tensor, &Tensor)> {
        self.factors.as_ref().map(|(a, b)| (a, b))
    }

    pub fn gram(&self) -> Option<&Tensor> {
        self.gram.as_ref()
    }

    pub fn damped(&self) -> Option<&DampedGram> {
        self.damped.as_ref()
    }

    /// Iterations since the last refresh.
    pub fn staleness(&self) -> usize {
        self.staleness
    }

    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    /// Multiply-adds spent by this block so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Rebuilds the factors, Gram and damped factor from `cache`.
    pub fn refresh(&mut self, cache: &LayerCache, keep_snapshot: bool) -> Result<()> {
        let jac = LayerJacobian::from_layer_cache(cache)?;
        let (built, n) = flops::measure(|| -> Result<_> {
            let (factors, gram) = match jac {
                LayerJacobian::Dense { input, grad_out } => {
                    let f = covfactor_dense(input, grad_out)?;
                    (Some((f.c1, f.c2)), f.gram)
                }
                LayerJacobian::Conv { .. } => (None, jac.gram()?),
            };
            let damped = DampedGram::new(&gram, self.alpha)?;
            Ok((factors, gram, damped))
        });
        self.flops += n;
        let (factors, gram, damped) = built?;
        self.factors = factors;
        self.gram = Some(gram);
        self.damped = Some(damped);
        self.snapshot = keep_snapshot.then(|| cache.clone());
        self.staleness = 0;
        self.refreshes += 1;
        Ok(())
    }

    /// Preconditioned direction for iteration `k`: refreshes per
    /// [`refresh_policy`] (or when the batch size changed), then applies the
    /// damped inverse to `g`.
    pub fn step(&mut self, k: usize, freq: usize, cache: &LayerCache, g: &Tensor, reuse: StaleReuse) -> Result<Tensor> {
        let current = LayerJacobian::from_layer_cache(cache)?;
        let resized = self.damped.as_ref().is_some_and(|d| d.batch() != current.batch());
        if resized || refresh_policy(self, k, freq) == RefreshDecision::Refresh {
            self.refresh(cache, reuse == StaleReuse::RefreshBatch)?;
        } else {
            self.staleness += 1;
        }
        let damped = self.damped.as_ref().expect("refreshed above");
        let jac = match (&self.snapshot, reuse) {
            (Some(old), StaleReuse::RefreshBatch) => LayerJacobian::from_layer_cache(old)?,
            _ => current,
        };
        let (dir, n) = flops::measure(|| damped.direction(&jac, g));
        self.flops += n;
        dir
    }
}
