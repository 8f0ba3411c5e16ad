use super::config::RatesConfig;
use super::data::{gen_synthetic, Labels, Teacher};
use super::{HarnessError, Result};
use crate::convlab::{
    assumption_monitor, full_batch_ngd_run, initial_lambda0, rate_check, roundoff_floor, theorem_bounds,
    ConvergenceTrace, MonitorReport, RateCheck, RunSettings, TheoremBounds,
};
use crate::net::{LayerSpec, LossKind, NetworkSpec, Params};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Offset between a data seed and the matching initialization seed.
const INIT_SEED_OFFSET: u64 = 0x5eed;

/// Bias-free `d → width → 1` ReLU network with squared error.
pub fn rates_network(d: usize, width: usize) -> Result<NetworkSpec> {
    Ok(NetworkSpec::new(
        [d, 1, 1],
        vec![
            LayerSpec::Dense { d_in: d, d_out: width, bias: false },
            LayerSpec::Relu,
            LayerSpec::Dense { d_in: width, d_out: 1, bias: false },
        ],
        LossKind::SquaredError,
    )?)
}

#[derive(Debug, Clone)]
pub struct RatesOutcome {
    pub seed: u64,
    pub bounds: TheoremBounds,
    /// Residual level below which the bound comparison is not meaningful.
    pub floor: f64,
    /// `None` when the bounds admit no positive step.
    pub trace: Option<ConvergenceTrace>,
    pub rate: Option<RateCheck>,
    pub monitor: Option<MonitorReport>,
}

impl RatesOutcome {
    /// Whether the residual stayed under `(1−η)^k·r(0)` for every recorded
    /// `k` through `k_max`.
    pub fn rate_holds(&self, k_max: usize) -> bool {
        match (&self.trace, &self.rate) {
            (Some(t), Some(r)) => t.diverged_at.is_none() && t.len() == k_max + 1 && r.holds_all,
            _ => false,
        }
    }

    pub fn summary(&self, k_max: usize) -> String {
        let b = &self.bounds;
        let head = format!(
            "seed {}: lambda0 {:.4e} alpha {:.3e} gamma {:.4} eta {:.4}",
            self.seed, b.lambda0, b.alpha, b.gamma, b.eta
        );
        match (&self.trace, &self.rate, &self.monitor) {
            (Some(t), Some(r), Some(m)) => format!(
                "{} | rate {} (holds through k={}) final residual {:.3e} | monitors: {} (smallest C {:.3})",
                head,
                if self.rate_holds(k_max) { "holds" } else { "broken" },
                r.holds_through.map_or("-".into(), |k| k.to_string()),
                t.residual_sq.last().copied().unwrap_or(f64::NAN),
                m.summary(),
                m.smallest_c
            ),
            _ => format!("{} | infeasible: no positive step size", head),
        }
    }
}

/// Runs one seed: data and initialization from `seed`, damping
/// `min(config.alpha, 4λ₀/(9n))`, step from the bounds at `config.c`.
pub fn run_rates_seed(config: &RatesConfig, seed: u64) -> Result<RatesOutcome> {
    let teacher = Teacher::Mlp { hidden: config.teacher_hidden.clone(), outputs: 1 };
    let data = gen_synthetic(config.n, config.d, &teacher, 0.0, seed)?;
    let y = match &data.labels {
        Labels::Values(v) => v.data().to_vec(),
        Labels::Classes { .. } => unreachable!("synthetic data has values"),
    };
    let x = data.features.transpose();
    let spec = rates_network(config.d, config.width)?;
    let init = Params::init(&spec, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(INIT_SEED_OFFSET)));
    let lambda0 = initial_lambda0(&spec, &init, &x)?;
    let n = config.n;
    let alpha = config.alpha.min(4.0 * lambda0 / (9.0 * n as f64));
    let bounds = theorem_bounds(lambda0, n, init.num_layers(), alpha, config.c);
    let floor = roundoff_floor(n, y.iter().fold(0.0, |a: f64, v| a.max(v.abs())));
    if !bounds.feasible() || alpha <= 0.0 {
        return Ok(RatesOutcome { seed, bounds, floor, trace: None, rate: None, monitor: None });
    }
    let settings = RunSettings { eta: bounds.eta, alpha, k_max: config.k_max, c: config.c };
    let trace = full_batch_ngd_run(&spec, &init, &x, &y, settings)?;
    let rate = rate_check(&trace.residual_sq, bounds.eta, floor);
    let monitor = assumption_monitor(&trace);
    if let Some(dir) = &config.output_dir {
        let path = dir.join(format!("rates-seed{}.csv", seed));
        let wrap = |e: std::io::Error| HarnessError::from(e).context(format!("writing {}", path.display()));
        std::fs::create_dir_all(dir).map_err(wrap)?;
        let file = std::fs::File::create(&path).map_err(wrap)?;
        trace.write_csv(std::io::BufWriter::new(file))?;
    }
    Ok(RatesOutcome { seed, bounds, floor, trace: Some(trace), rate: Some(rate), monitor: Some(monitor) })
}

/// Runs seeds `config.seed .. config.seed + config.seeds`.
pub fn run_rates(config: &RatesConfig) -> Result<Vec<RatesOutcome>> {
    config.validate()?;
    (0..config.seeds as u64)
        .map(|i| {
            let seed = config.seed.wrapping_add(i);
            run_rates_seed(config, seed).map_err(|e| e.context(format!("rates seed {}", seed)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_contracts() {
        let config = RatesConfig { n: 8, d: 12, width: 32, k_max: 40, seeds: 1, ..RatesConfig::default() };
        let out = run_rates(&config).unwrap();
        let o = &out[0];
        assert!(o.bounds.lambda0 > 0.0);
        let t = o.trace.as_ref().unwrap();
        assert_eq!(t.len(), 41);
        assert!(t.residual_sq[40] < t.residual_sq[0]);
    }
}
