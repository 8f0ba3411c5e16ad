//! Coordinate search over the learning-rate, damping and weight-decay grid.

use super::config::ExperimentConfig;
use super::data::Dataset;
use super::experiment::run_experiment_on;
use super::Result;
use crate::optim::{Method, OptimConfig};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrid {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub damping: Vec<f64>,
    pub momentum: f64,
}

/// The built-in sweep.
pub fn grid_preset() -> HyperGrid {
    HyperGrid {
        lr: vec![0.001, 0.003, 0.01, 0.03, 0.1, 0.3],
        weight_decay: vec![0.001, 0.003, 0.01, 0.03, 0.1, 0.3],
        damping: vec![0.001, 0.003, 0.01, 0.03, 0.1, 0.2, 0.3],
        momentum: 0.9,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best: OptimConfig,
    pub best_score: f64,
    /// `(lr, weight_decay, damping, score)` for every evaluated point, in
    /// evaluation order.
    pub evaluated: Vec<(f64, f64, f64, f64)>,
}

/// Applies `f` to every item on up to `jobs` worker threads. Results keep
/// the input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every item ran")).collect()
}

type Point = (usize, usize, usize);

/// Tunes `config.optim` by coordinate search over `grid`, scoring each point
/// by the final training loss after `config.tune.epochs` epochs (lower is
/// better; failed or non-finite runs score `+∞`). Damping is only searched
/// for natural-gradient methods.
pub fn tune(
    config: &ExperimentConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    grid: &HyperGrid,
    jobs: usize,
) -> Result<TuneResult> {
    let start = |values: &[f64], target: f64| {
        values
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
            .map_or(0, |(i, _)| i)
    };
    let mut at: Point = (start(&grid.lr, 0.03), start(&grid.weight_decay, 0.001), start(&grid.damping, 0.03));
    let search_damping = config.optim.method != Method::Sgd;
    let mut scores: BTreeMap<Point, f64> = BTreeMap::new();
    let mut evaluated = Vec::new();
    let mut probe = config.clone();
    probe.epochs = config.tune.epochs;
    probe.output = None;
    probe.schedule = super::Schedule::Constant;
    let optim_at = |p: Point| OptimConfig {
        lr: grid.lr[p.0],
        weight_decay: grid.weight_decay[p.1],
        damping: if search_damping { grid.damping[p.2] } else { config.optim.damping },
        momentum: grid.momentum,
        ..config.optim.clone()
    };

    for _ in 0..config.tune.rounds.max(1) {
        let before = at;
        for coord in 0..3 {
            let len = [grid.lr.len(), grid.weight_decay.len(), grid.damping.len()][coord];
            if coord == 2 && !search_damping {
                continue;
            }
            let candidates: Vec<Point> = (0..len)
                .map(|i| match coord {
                    0 => (i, at.1, at.2),
                    1 => (at.0, i, at.2),
                    _ => (at.0, at.1, i),
                })
                .filter(|p| !scores.contains_key(p))
                .collect();
            let results = parallel_map(&candidates, jobs, |&p| {
                let mut c = probe.clone();
                c.optim = optim_at(p);
                match run_experiment_on(&c, train, test) {
                    Ok(t) => t.final_record().map_or(f64::INFINITY, |r| r.train_loss),
                    Err(_) => f64::INFINITY,
                }
            });
            for (p, s) in candidates.into_iter().zip(results) {
                let s = if s.is_finite() { s } else { f64::INFINITY };
                scores.insert(p, s);
                let o = optim_at(p);
                evaluated.push((o.lr, o.weight_decay, o.damping, s));
            }
            let best = (0..len)
                .map(|i| match coord {
                    0 => (i, at.1, at.2),
                    1 => (at.0, i, at.2),
                    _ => (at.0, at.1, i),
                })
                .min_by(|a, b| scores[a].total_cmp(&scores[b]).then(a.cmp(b)))
                .expect("non-empty grid");
            if scores[&best] < scores[&at] || !scores.contains_key(&at) {
                at = best;
            }
        }
        if at == before {
            break;
        }
    }
    Ok(TuneResult { best: optim_at(at), best_score: scores.get(&at).copied().unwrap_or(f64::INFINITY), evaluated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..37).collect();
        assert_eq!(parallel_map(&items, 4, |x| x * x), items.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn sgd_tuning_skips_damping() {
        let text = "[data]\nn = 32\nd = 4\n[optim]\nmethod = sgd\n[run]\nepochs = 1\nbatch_size = 8\n[tune]\nepochs = 1\nrounds = 1\n";
        let config = ExperimentConfig::parse(text, Path::new(".")).unwrap();
        let (train, _) = super::super::prepare_data(&config).unwrap();
        let grid =
            HyperGrid { lr: vec![0.01, 0.1], weight_decay: vec![0.0, 0.01], damping: vec![1.0, 2.0], momentum: 0.5 };
        let r = tune(&config, &train, None, &grid, 2).unwrap();
        assert_eq!(r.evaluated.len(), 3);
        assert!(r.evaluated.iter().all(|e| e.2 == config.optim.damping));
        assert!(r.best_score.is_finite());
    }
}
