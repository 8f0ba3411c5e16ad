//! Full-batch convergence laboratory for single-output squared-error
//! networks.
//!
//! The update is `W_l ← W_l − η·(J_lᵀJ_l/n + αI)⁻¹·J_lᵀ(u − y)/n` for every
//! layer, where `J_l` is the Jacobian of the network outputs (not the loss)
//! with respect to `vec(W_l)`. Along the way the run records the layer Gram
//! spectra and drift quantities that the linear-rate guarantee depends on.

use crate::fisher::{DampedGram, FisherError, LayerJacobian};
use crate::net::{backward, forward, NetError, NetworkSpec, Params};
use crate::tensor::{matmul_nt, sym_eig_min, sym_eigenvalues, Tensor, TensorError};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConvError {
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("convergence runs need a single-output squared-error network: {0}")]
    Setup(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConvError>;

/// Step size, damping and assumed drift constant of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub eta: f64,
    pub alpha: f64,
    pub k_max: usize,
    /// Jacobian-stability constant `C ∈ (0, ½]`.
    pub c: f64,
}

/// Step-size and damping limits of the linear-rate guarantee, evaluated at a
/// measured `λ₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremBounds {
    pub lambda0: f64,
    pub n: usize,
    pub layers: usize,
    pub alpha: f64,
    pub c: f64,
    /// `4λ₀/(9n)`
    pub alpha_max: f64,
    /// `λ₀/(λ₀ + (9/4)·n·α)`
    pub gamma: f64,
    /// `(2Lγ − 1 − 2C√L·γ)/(L + C√L·γ)²`
    pub eta_max: f64,
    /// `min(η_max, 0.99)`: the contraction `1 − η` is only meaningful below 1.
    pub eta: f64,
}

impl TheoremBounds {
    /// `λ₀ > 0`, `η_max > 0` and `α ≤ α_max`.
    pub fn feasible(&self) -> bool {
        self.lambda0 > 0.0 && self.eta_max > 0.0 && self.alpha <= self.alpha_max
    }
}

/// Largest usable step size.
pub const ETA_CAP: f64 = 0.99;

/// Evaluates the bounds. A non-positive `λ₀` is reported through
/// [`TheoremBounds::feasible`] rather than as an error; `γ` is then 0.
pub fn theorem_bounds(lambda0: f64, n: usize, layers: usize, alpha: f64, c: f64) -> TheoremBounds {
    let nf = n as f64;
    let l = layers as f64;
    let gamma = if lambda0 > 0.0 { lambda0 / (lambda0 + 2.25 * nf * alpha) } else { 0.0 };
    let cs = c * l.sqrt() * gamma;
    let eta_max = (2.0 * l * gamma - 1.0 - 2.0 * cs) / (l + cs).powi(2);
    TheoremBounds {
        lambda0,
        n,
        layers,
        alpha,
        c,
        alpha_max: 4.0 * lambda0 / (9.0 * nf),
        gamma,
        eta_max,
        eta: eta_max.min(ETA_CAP),
    }
}

/// Per-iteration record of a full-batch run. Index `k` runs over
/// `0..=k_max` (or up to the divergence point).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    pub eta: f64,
    pub alpha: f64,
    pub c: f64,
    pub n: usize,
    /// `min_l λ_min(J_l J_lᵀ)` at `k = 0`.
    pub lambda0: f64,
    pub residual_sq: Vec<f64>,
    pub loss: Vec<f64>,
    pub rate_bound: Vec<f64>,
    /// `lambda_min[k][l]` for layer `l`.
    pub lambda_min: Vec<Vec<f64>>,
    pub param_drift: Vec<f64>,
    /// Spectral norm of the block-diagonal Jacobian change, i.e. the largest
    /// per-layer spectral norm.
    pub jac_drift: Vec<f64>,
    /// First iteration whose update produced non-finite values.
    pub diverged_at: Option<usize>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.residual_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual_sq.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.lambda_min.first().map_or(0, Vec::len)
    }

    /// `min_l λ_min(G_l(k))`.
    pub fn lambda_min_block(&self, k: usize) -> f64 {
        self.lambda_min[k].iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("k,residual_sq,loss,rate_bound");
        for l in 1..=self.layers() {
            h.push_str(&format!(",lambda_min_l{}", l));
        }
        h.push_str(",param_drift,jac_drift,a1_flag,a2_flag,lemma2_flag");
        h
    }

    /// Writes the trace with the monitor flags of `report`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let report = assumption_monitor(self);
        writeln!(out, "{}", self.csv_header())?;
        for k in 0..self.len() {
            write!(out, "{},{},{},{}", k, self.residual_sq[k], self.loss[k], self.rate_bound[k])?;
            for v in &self.lambda_min[k] {
                write!(out, ",{}", v)?;
            }
            let f = &report.flags[k];
            writeln!(
                out,
                ",{},{},{},{},{}",
                self.param_drift[k], self.jac_drift[k], f.param_drift as u8, f.jac_drift as u8, f.lemma2 as u8
            )?;
        }
        Ok(())
    }
}

fn spectral_norm(delta: &Tensor) -> Result<f64> {
    let gram = matmul_nt(delta, delta)?;
    let top = sym_eigenvalues(&gram)?.last().copied().unwrap_or(0.0);
    Ok(top.max(0.0).sqrt())
}

fn residual(u: &Tensor, y: &[f64]) -> Vec<f64> {
    u.data().iter().zip(y).map(|(a, b)| a - b).collect()
}

/// Smallest eigenvalue over layers of the output-Jacobian Grams `J_lJ_lᵀ`
/// at `params`.
pub fn initial_lambda0(spec: &NetworkSpec, params: &Params, x: &Tensor) -> Result<f64> {
    let (_, mut cache) = forward(spec, params, x)?;
    backward(spec, params, &mut cache, &Tensor::filled(&[1, x.cols()], 1.0))?;
    let mut lambda0 = f64::INFINITY;
    for l in 0..params.num_layers() {
        let gram = LayerJacobian::from_cache(&cache, params, l)?.gram()?;
        lambda0 = lambda0.min(sym_eig_min(&gram)?);
    }
    Ok(lambda0)
}

/// Runs full-batch block natural gradient descent on `(x, y)` and records
/// the trace. `x` is `d × n`; `y` holds one target per sample.
pub fn full_batch_ngd_run(
    spec: &NetworkSpec,
    init: &Params,
    x: &Tensor,
    y: &[f64],
    settings: RunSettings,
) -> Result<ConvergenceTrace> {
    if spec.output_len() != 1 || spec.loss() != crate::net::LossKind::SquaredError {
        return Err(ConvError::Setup(format!("{} outputs with {:?} loss", spec.output_len(), spec.loss())));
    }
    let n = x.cols();
    if y.len() != n || n == 0 {
        return Err(ConvError::Setup(format!("{} targets for {} samples", y.len(), n)));
    }
    let mut params = init.clone();
    let w0 = params.flatten();
    let seed = Tensor::filled(&[1, n], 1.0);
    let inv_n = 1.0 / n as f64;
    let mut jac0: Vec<Tensor> = Vec::new();
    let mut trace = ConvergenceTrace {
        eta: settings.eta,
        alpha: settings.alpha,
        c: settings.c,
        n,
        lambda0: f64::NAN,
        residual_sq: Vec::new(),
        loss: Vec::new(),
        rate_bound: Vec::new(),
        lambda_min: Vec::new(),
        param_drift: Vec::new(),
        jac_drift: Vec::new(),
        diverged_at: None,
    };
    for k in 0..=settings.k_max {
        let (u, mut cache) = match forward(spec, &params, x) {
            Ok(v) => v,
            Err(NetError::Numeric { .. }) => {
                trace.diverged_at = Some(k);
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let r = residual(&u, y);
        let res_sq: f64 = r.iter().map(|v| v * v).sum();
        if !res_sq.is_finite() {
            trace.diverged_at = Some(k);
            break;
        }
        // output Jacobian: back-propagate a unit seed for every sample
        backward(spec, &params, &mut cache, &seed)?;
        let mut grams = Vec::with_capacity(params.num_layers());
        let mut lmins = Vec::with_capacity(params.num_layers());
        let mut jdrift = 0.0f64;
        for l in 0..params.num_layers() {
            let jac = LayerJacobian::from_cache(&cache, &params, l)?;
            let gram = jac.gram()?;
            lmins.push(sym_eig_min(&gram)?);
            let j = jac.explicit()?;
            if k == 0 {
                jac0.push(j);
            } else {
                jdrift = jdrift.max(spectral_norm(&j.sub(&jac0[l])?)?);
            }
            grams.push((gram, jac));
        }
        if k == 0 {
            trace.lambda0 = lmins.iter().copied().fold(f64::INFINITY, f64::min);
        }
        let r0 = trace.residual_sq.first().copied().unwrap_or(res_sq);
        let drift = params.flatten().iter().zip(&w0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        trace.residual_sq.push(res_sq);
        trace.loss.push(0.5 * res_sq);
        trace.rate_bound.push((1.0 - settings.eta).powi(k as i32) * r0);
        trace.lambda_min.push(lmins);
        trace.param_drift.push(drift);
        trace.jac_drift.push(jdrift);
        if k == settings.k_max {
            break;
        }
        let mut dirs = Vec::with_capacity(grams.len());
        for (gram, jac) in &grams {
            let g = jac.vjp(&r)?.scale(inv_n);
            let damped = DampedGram::new(gram, settings.alpha)?;
            dirs.push(damped.direction(jac, &g)?);
        }
        drop(grams);
        let mut finite = true;
        for (l, d) in dirs.iter().enumerate() {
            let w = params.layer_mut(l).data_mut();
            for (wi, di) in w.iter_mut().zip(d.data()) {
                *wi -= settings.eta * di;
                finite &= wi.is_finite();
            }
        }
        if !finite {
            trace.diverged_at = Some(k + 1);
            break;
        }
    }
    Ok(trace)
}

/// Monitor outcome at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorFlags {
    /// `‖W(k) − W(0)‖₂ ≤ 3λ₀^{-1/2}‖y − u(0)‖₂`
    pub param_drift: bool,
    /// `‖Ĵ(k) − Ĵ(0)‖₂ ≤ (C/3)λ₀^{1/2}`
    pub jac_drift: bool,
    /// `λ_min(Ĝ(k)) ≥ (4/9)λ₀` whenever the parameter-drift condition holds.
    pub lemma2: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorReport {
    pub flags: Vec<MonitorFlags>,
    pub first_param_drift_violation: Option<usize>,
    pub first_jac_drift_violation: Option<usize>,
    pub first_lemma2_violation: Option<usize>,
    /// Smallest `C` consistent with the observed Jacobian drift,
    /// `3·max_k drift / √λ₀`.
    pub smallest_c: f64,
}

impl MonitorReport {
    pub fn clean(&self) -> bool {
        self.first_param_drift_violation.is_none()
            && self.first_jac_drift_violation.is_none()
            && self.first_lemma2_violation.is_none()
    }

    pub fn summary(&self) -> String {
        if self.clean() {
            return "clean".into();
        }
        let part = |name: &str, v: Option<usize>| v.map(|k| format!("{} violated first at k={}", name, k));
        [
            part("parameter drift", self.first_param_drift_violation),
            part("jacobian drift", self.first_jac_drift_violation),
            part("gram eigenvalue", self.first_lemma2_violation),
        ]
        .into_iter()
        .flatten()
        .collect::<Vec<_>>()
        .join("; ")
    }
}

/// Checks the drift conditions and the Gram eigenvalue lower bound at every
/// recorded iteration.
pub fn assumption_monitor(trace: &ConvergenceTrace) -> MonitorReport {
    let l0 = trace.lambda0;
    let r0 = trace.residual_sq.first().copied().unwrap_or(0.0).sqrt();
    let param_limit = 3.0 * r0 / l0.sqrt();
    let jac_limit = trace.c / 3.0 * l0.sqrt();
    let flags: Vec<MonitorFlags> = (0..trace.len())
        .map(|k| {
            let a1 = trace.param_drift[k] <= param_limit;
            MonitorFlags {
                param_drift: a1,
                jac_drift: trace.jac_drift[k] <= jac_limit,
                lemma2: !a1 || trace.lambda_min_block(k) >= 4.0 / 9.0 * l0,
            }
        })
        .collect();
    let first = |f: fn(&MonitorFlags) -> bool| flags.iter().position(|x| !f(x));
    let max_drift = trace.jac_drift.iter().copied().fold(0.0, f64::max);
    MonitorReport {
        first_param_drift_violation: first(|f| f.param_drift),
        first_jac_drift_violation: first(|f| f.jac_drift),
        first_lemma2_violation: first(|f| f.lemma2),
        smallest_c: 3.0 * max_drift / l0.sqrt(),
        flags,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateCheck {
    /// Largest `k*` with `r(k) ≤ (1−η)^k·r(0)` for every `k ≤ k*`; `None` if
    /// the trace is empty.
    pub holds_through: Option<usize>,
    pub holds_all: bool,
    /// `bound / residual` per iteration (infinite at zero residual).
    pub margin: Vec<f64>,
}

/// Relative slack for round-off in the bound comparison.
pub const RATE_REL_TOL: f64 = 1e-12;

/// Compares residuals with `(1−η)^k·r(0)`. A residual at or below `floor`
/// counts as satisfied; pass 0 for the strict check.
pub fn rate_check(residual_sq: &[f64], eta: f64, floor: f64) -> RateCheck {
    let r0 = residual_sq.first().copied().unwrap_or(0.0);
    let mut holds_through = None;
    let mut broken = false;
    let margin = residual_sq
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let bound = (1.0 - eta).powi(k as i32) * r0;
            if !broken && (r <= bound * (1.0 + RATE_REL_TOL) || r <= floor) {
                holds_through = Some(k);
            } else {
                broken = true;
            }
            if r == 0.0 {
                f64::INFINITY
            } else {
                bound / r
            }
        })
        .collect();
    RateCheck { holds_through, holds_all: !broken, margin }
}

/// Residual floor from floating-point resolution of `n` outputs near
/// targets of size `y_scale`: `n·(64·ε·max(1, y_scale))²`.
pub fn roundoff_floor(n: usize, y_scale: f64) -> f64 {
    n as f64 * (64.0 * f64::EPSILON * y_scale.max(1.0)).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerSpec, LossKind};

    #[test]
    fn bound_examples() {
        assert_eq!(theorem_bounds(0.3, 10, 2, 0.0, 0.5).gamma, 1.0);
        let b = theorem_bounds(1.0, 1, 1, 4.0 / 9.0, 0.5);
        assert!((b.alpha_max - 4.0 / 9.0).abs() < 1e-16);
        assert!((b.gamma - 0.5).abs() < 1e-15);
        let b = theorem_bounds(2.0, 5, 1, 0.0, 0.0);
        assert_eq!(b.eta_max, 1.0);
        assert_eq!(b.eta, ETA_CAP);
        assert!(!theorem_bounds(0.0, 5, 2, 0.01, 0.5).feasible());
    }

    #[test]
    fn rate_examples() {
        let eta = 0.2;
        assert!(rate_check(&[0.0; 5], eta, 0.0).holds_all);
        let exact: Vec<f64> = (0..6).map(|k| 3.0 * (1.0 - eta).powi(k)).collect();
        let rc = rate_check(&exact, eta, 0.0);
        assert!(rc.holds_all);
        assert!(rc.margin.iter().all(|m| (m - 1.0).abs() < 1e-12));
        let slow: Vec<f64> = (0..6).map(|k| 3.0 * (1.0 - eta / 2.0).powi(k)).collect();
        assert_eq!(rate_check(&slow, eta, 0.0).holds_through, Some(0));
    }

    #[test]
    fn linear_model_solves_in_one_step() {
        // 3 samples in 4 dimensions: under-determined, exact fit exists
        let spec = NetworkSpec::new(
            [4, 1, 1],
            vec![LayerSpec::Dense { d_in: 4, d_out: 1, bias: false }],
            LossKind::SquaredError,
        )
        .unwrap();
        let x = Tensor::from_rows(&[&[1.0, 0.0, 0.5], &[0.0, 1.0, 0.5], &[0.0, 0.0, 0.5], &[0.0, 0.0, 0.5]]).unwrap();
        let p = Params::from_weights(vec![Tensor::column(&[0.1, -0.2, 0.3, 0.0])]);
        let settings = RunSettings { eta: 1.0, alpha: 1e-9, k_max: 1, c: 0.5 };
        let t = full_batch_ngd_run(&spec, &p, &x, &[1.0, -1.0, 2.0], settings).unwrap();
        assert!(t.residual_sq[1] < 1e-12 * t.residual_sq[0]);

        let (u, _) = forward(&spec, &p, &x).unwrap();
        let t = full_batch_ngd_run(&spec, &p, &x, u.data(), RunSettings { k_max: 3, ..settings }).unwrap();
        assert!(t.residual_sq.iter().all(|&r| r == 0.0));
        let report = assumption_monitor(&t);
        assert!(report.flags[0].param_drift && report.flags[0].jac_drift && report.flags[0].lemma2);
    }
}
