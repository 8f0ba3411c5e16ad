//! Optimizers: SGD with momentum, TENGraD (Woodbury-inverted Fisher blocks)
//! and a dense exact-NGD reference for small layers.
//!
//! All three share the update
//!
//! ```text
//! buffer ← μ·buffer + (direction + λ_wd·W)
//! W      ← W − η·buffer
//! ```
//!
//! where `direction` is the raw gradient (SGD) or the damped block inverse
//! applied to it (TENGraD, exact NGD).

use crate::fisher::{dense_direction, FisherBlock, FisherError, LayerJacobian, StaleReuse};
use crate::flops;
use crate::net::{BatchCache, NetError, Params};
use crate::tensor::Tensor;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid optimizer setting `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgd,
    TenGrad,
    ExactNgd,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::TenGrad => "tengrad",
            Method::ExactNgd => "exact-ngd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Some(Method::Sgd),
            "tengrad" => Some(Method::TenGrad),
            "exact-ngd" | "exact_ngd" | "ngd" => Some(Method::ExactNgd),
            _ => None,
        }
    }
}

/// Default parameter-count cap per layer for the dense exact-NGD route.
pub const EXACT_NGD_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub method: Method,
    pub lr: f64,
    pub damping: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations between Gram refreshes (TENGraD).
    pub inversion_freq: usize,
    pub stale_reuse: StaleReuse,
    pub exact_cap: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            method: Method::TenGrad,
            lr: 0.01,
            damping: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            inversion_freq: 100,
            stale_reuse: StaleReuse::CurrentBatch,
            exact_cap: EXACT_NGD_CAP,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { method: Method::Sgd, lr, damping: 0.0, ..Self::default() }
    }

    pub fn tengrad(lr: f64, damping: f64) -> Self {
        Self { method: Method::TenGrad, lr, damping, ..Self::default() }
    }

    pub fn exact_ngd(lr: f64, damping: f64) -> Self {
        Self { method: Method::ExactNgd, lr, damping, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(OptimError::Config { field, reason: reason.into() });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative and finite");
        }
        if self.method != Method::Sgd && !(self.damping > 0.0 && self.damping.is_finite()) {
            return bad("damping", "must be positive for natural-gradient methods");
        }
        if self.inversion_freq == 0 {
            return bad("inversion_freq", "must be at least 1");
        }
        Ok(())
    }
}

/// Mutable optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct OptimState {
    buffers: Vec<Tensor>,
    blocks: Vec<FisherBlock>,
    k: usize,
    flops: u64,
    elapsed: Duration,
}

impl OptimState {
    pub fn new(config: &OptimConfig, params: &Params) -> Result<Self> {
        config.validate()?;
        let buffers = params.layers().iter().map(|w| Tensor::zeros(w.shape())).collect();
        let blocks = if config.method == Method::TenGrad {
            (0..params.num_layers())
                .map(|l| FisherBlock::new(l, config.damping))
                .collect::<std::result::Result<_, _>>()?
        } else {
            Vec::new()
        };
        Ok(Self { buffers, blocks, k: 0, flops: 0, elapsed: Duration::ZERO })
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.k
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn blocks(&self) -> &[FisherBlock] {
        &self.blocks
    }

    /// Multiply-adds spent inside optimizer steps.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Wall time spent inside optimizer steps.
    pub fn elapsed(&self) -> Duration {
        self.elapsed
    }

    fn timed<R>(&mut self, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let start = Instant::now();
        let before = flops::count();
        let out = f(self);
        self.flops += flops::count() - before;
        self.elapsed += start.elapsed();
        out
    }
}

fn check_shapes(params: &Params, grads: &[Tensor], state: &OptimState) -> Result<()> {
    let ok = grads.len() == params.num_layers()
        && state.buffers.len() == params.num_layers()
        && grads.iter().zip(params.layers()).all(|(g, w)| g.shape() == w.shape());
    if ok {
        Ok(())
    } else {
        Err(OptimError::Config { field: "grads", reason: "gradients, buffers and parameters disagree in shape".into() })
    }
}

fn apply(params: &mut Params, dirs: &[Tensor], state: &mut OptimState, config: &OptimConfig) {
    let (mu, wd, lr) = (config.momentum, config.weight_decay, config.lr);
    for (l, dir) in dirs.iter().enumerate() {
        let buf = state.buffers[l].data_mut();
        let w = params.layer_mut(l).data_mut();
        for ((b, &d), wi) in buf.iter_mut().zip(dir.data()).zip(w.iter_mut()) {
            *b = mu * *b + (d + wd * *wi);
            *wi -= lr * *b;
        }
    }
    state.k += 1;
}

/// Heavy-ball SGD step on the raw gradients.
pub fn sgd_step(params: &mut Params, grads: &[Tensor], state: &mut OptimState, config: &OptimConfig) -> Result<()> {
    check_shapes(params, grads, state)?;
    state.timed(|s| {
        apply(params, grads, s, config);
        Ok(())
    })
}

/// Per-layer Woodbury directions for the current iteration, refreshing
/// Gram factors on schedule. Does not touch the parameters.
pub fn tengrad_directions(
    params: &Params,
    cache: &BatchCache,
    grads: &[Tensor],
    state: &mut OptimState,
    config: &OptimConfig,
) -> Result<Vec<Tensor>> {
    check_shapes(params, grads, state)?;
    if state.blocks.len() != params.num_layers() {
        return Err(OptimError::Config { field: "method", reason: "state was not built for TENGraD".into() });
    }
    let k = state.k;
    state.timed(|s| {
        s.blocks
            .iter_mut()
            .zip(grads)
            .enumerate()
            .map(|(l, (block, g))| {
                let lc = cache.layer(params, l)?;
                Ok(block.step(k, config.inversion_freq, lc, g, config.stale_reuse)?)
            })
            .collect()
    })
}

/// TENGraD step: Woodbury directions, then momentum and weight decay.
pub fn tengrad_step(
    params: &mut Params,
    cache: &BatchCache,
    grads: &[Tensor],
    state: &mut OptimState,
    config: &OptimConfig,
) -> Result<()> {
    let dirs = tengrad_directions(params, cache, grads, state, config)?;
    state.timed(|s| {
        apply(params, &dirs, s, config);
        Ok(())
    })
}

/// Directions `(F_l + αI)⁻¹g_l` from explicitly formed Fisher blocks.
pub fn exact_ngd_directions(
    params: &Params,
    cache: &BatchCache,
    grads: &[Tensor],
    config: &OptimConfig,
) -> Result<Vec<Tensor>> {
    if config.damping.is_nan() || config.damping <= 0.0 {
        return Err(OptimError::Config { field: "damping", reason: "must be positive".into() });
    }
    grads
        .iter()
        .enumerate()
        .map(|(l, g)| {
            let jac = LayerJacobian::from_cache(cache, params, l)?;
            Ok(dense_direction(&jac, g, config.damping, config.exact_cap)?)
        })
        .collect()
}

/// Dense exact-NGD step; errors if any layer exceeds `config.exact_cap`.
pub fn exact_ngd_step(
    params: &mut Params,
    cache: &BatchCache,
    grads: &[Tensor],
    state: &mut OptimState,
    config: &OptimConfig,
) -> Result<()> {
    check_shapes(params, grads, state)?;
    let dirs = state.timed(|_| exact_ngd_directions(params, cache, grads, config))?;
    state.timed(|s| {
        apply(params, &dirs, s, config);
        Ok(())
    })
}

/// Dispatches on `config.method`. SGD ignores `cache`.
pub fn step(
    params: &mut Params,
    cache: &BatchCache,
    grads: &[Tensor],
    state: &mut OptimState,
    config: &OptimConfig,
) -> Result<()> {
    match config.method {
        Method::Sgd => sgd_step(params, grads, state, config),
        Method::TenGrad => tengrad_step(params, cache, grads, state, config),
        Method::ExactNgd => exact_ngd_step(params, cache, grads, state, config),
    }
}
