//! A flat sectioned key-value format:
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Keys are looked up as `section.key`. Unknown sections or keys are errors,
//! and every diagnostic names the offending field.

use super::{HarnessError, Result};
use crate::fisher::StaleReuse;
use crate::optim::{Method, OptimConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Environment variable that replaces the configured run seed.
pub const SEED_ENV: &str = "TENGRAD_SEED";

#[derive(Debug, Clone, Default)]
pub struct Ini {
    entries: BTreeMap<String, (String, usize)>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| HarnessError::Config {
                    field: line.into(),
                    line: Some(line_no),
                    msg: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| HarnessError::Config {
                field: line.into(),
                line: Some(line_no),
                msg: "expected `key = value`".into(),
            })?;
            if section.is_empty() {
                return Err(HarnessError::Config {
                    field: key.trim().into(),
                    line: Some(line_no),
                    msg: "key outside of any section".into(),
                });
            }
            let field = format!("{}.{}", section, key.trim());
            if entries.insert(field.clone(), (value.trim().to_string(), line_no)).is_some() {
                return Err(HarnessError::Config { field, line: Some(line_no), msg: "duplicate key".into() });
            }
        }
        Ok(Ini { entries, used: Default::default() })
    }

    pub fn raw(&self, field: &str) -> Option<&str> {
        self.used.borrow_mut().insert(field.to_string());
        self.entries.get(field).map(|(v, _)| v.as_str())
    }

    fn line(&self, field: &str) -> Option<usize> {
        self.entries.get(field).map(|(_, l)| *l)
    }

    pub fn error(&self, field: &str, msg: impl Into<String>) -> HarnessError {
        HarnessError::Config { field: field.into(), line: self.line(field), msg: msg.into() }
    }

    pub fn get<T: FromStr>(&self, field: &str) -> Result<Option<T>> {
        match self.raw(field) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.error(field, format!("cannot parse `{}` as {}", v, std::any::type_name::<T>()))),
        }
    }

    pub fn get_or<T: FromStr>(&self, field: &str, default: T) -> Result<T> {
        Ok(self.get(field)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, field: &str) -> Result<T> {
        self.get(field)?.ok_or_else(|| self.error(field, "missing"))
    }

    pub fn list<T: FromStr>(&self, field: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.raw(field) else {
            return Ok(None);
        };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| self.error(field, format!("cannot parse list item `{}`", s.trim()))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fails on the first key no accessor has asked for.
    pub fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(self.error(k, "unknown key")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        n: usize,
        d: usize,
        noise: f64,
        /// Hidden widths of the teacher; empty means a linear teacher.
        teacher_hidden: Vec<usize>,
        outputs: usize,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        /// Keep only the first `subset` training samples.
        subset: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkPreset {
    /// Three strided convolutions and a hidden dense layer, for 28×28 images.
    Desk3c1f,
    Mlp {
        hidden: Vec<usize>,
        bias: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant,
    /// Halve the learning rate every `E` epochs.
    HalveEvery(usize),
    /// Multiply by 0.1 after each listed epoch.
    DecayAt(Vec<usize>),
}

impl Schedule {
    /// Learning rate for (zero-based) `epoch`.
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::HalveEvery(e) => base * 0.5f64.powi((epoch / e) as i32),
            Schedule::DecayAt(at) => base * 0.1f64.powi(at.iter().filter(|&&a| epoch >= a).count() as i32),
        }
    }

    fn check(&self, epochs: usize) -> std::result::Result<(), String> {
        match self {
            Schedule::Constant => Ok(()),
            Schedule::HalveEvery(0) => Err("halving period must be at least 1".into()),
            Schedule::HalveEvery(e) if *e > epochs => Err(format!("halving period {} exceeds {} epochs", e, epochs)),
            Schedule::DecayAt(at) => match at.iter().find(|&&a| a == 0 || a > epochs) {
                Some(a) => Err(format!("decay epoch {} outside 1..={}", a, epochs)),
                None if at.windows(2).any(|w| w[0] >= w[1]) => Err("decay epochs must increase".into()),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// Parses `constant`, `halve-every:E` or `decay-at:E1,E2,...`.
pub fn parse_schedule(s: &str) -> Option<Schedule> {
    let s = s.trim();
    if s == "constant" {
        return Some(Schedule::Constant);
    }
    if let Some(e) = s.strip_prefix("halve-every:") {
        return e.trim().parse().ok().map(Schedule::HalveEvery);
    }
    let at = s.strip_prefix("decay-at:")?;
    at.split(',').map(|v| v.trim().parse().ok()).collect::<Option<Vec<_>>>().map(Schedule::DecayAt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    /// Epochs per tuning run.
    pub epochs: usize,
    /// Passes of coordinate search over the grid.
    pub rounds: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self { epochs: 2, rounds: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Fraction of the training data held out for evaluation when no test
    /// files are given.
    pub eval_split: f64,
    pub network: NetworkPreset,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub tune: TuneConfig,
}

impl ExperimentConfig {
    /// Reads a config file. Relative paths inside resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::from(e).context(format!("reading {}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::parse(text)?;
        let path = |field: &str| -> Result<Option<PathBuf>> { Ok(ini.get::<String>(field)?.map(|p| base.join(p))) };

        let source: String = ini.get_or("data.source", "synthetic".to_string())?;
        let data = match source.as_str() {
            "synthetic" => DataSource::Synthetic {
                n: ini.require("data.n")?,
                d: ini.require("data.d")?,
                noise: ini.get_or("data.noise", 0.0)?,
                teacher_hidden: ini.list("data.teacher_hidden")?.unwrap_or_default(),
                outputs: ini.get_or("data.outputs", 1)?,
                seed: ini.get_or("data.seed", 0)?,
            },
            "idx" => DataSource::Idx {
                train_images: path("data.train_images")?.ok_or_else(|| ini.error("data.train_images", "missing"))?,
                train_labels: path("data.train_labels")?.ok_or_else(|| ini.error("data.train_labels", "missing"))?,
                test_images: path("data.test_images")?,
                test_labels: path("data.test_labels")?,
                subset: ini.get("data.subset")?,
            },
            other => return Err(ini.error("data.source", format!("unknown source `{}`", other))),
        };
        let eval_split = ini.get_or("data.eval_split", 0.0)?;

        let preset: String = ini.get_or(
            "network.preset",
            if matches!(data, DataSource::Idx { .. }) { "desk3c1f" } else { "mlp" }.to_string(),
        )?;
        let network = match preset.as_str() {
            "desk3c1f" => NetworkPreset::Desk3c1f,
            "mlp" => NetworkPreset::Mlp {
                hidden: ini.list("network.hidden")?.unwrap_or_default(),
                bias: ini.get_or("network.bias", true)?,
            },
            other => return Err(ini.error("network.preset", format!("unknown preset `{}`", other))),
        };

        let mut optim = OptimConfig::default();
        if let Some(m) = ini.get::<String>("optim.method")? {
            optim.method =
                Method::parse(&m).ok_or_else(|| ini.error("optim.method", format!("unknown method `{}`", m)))?;
        }
        optim.lr = ini.get_or("optim.lr", optim.lr)?;
        optim.damping = ini.get_or("optim.damping", optim.damping)?;
        optim.momentum = ini.get_or("optim.momentum", optim.momentum)?;
        optim.weight_decay = ini.get_or("optim.weight_decay", optim.weight_decay)?;
        optim.inversion_freq = ini.get_or("optim.inversion_freq", optim.inversion_freq)?;
        optim.exact_cap = ini.get_or("optim.exact_cap", optim.exact_cap)?;
        if let Some(r) = ini.get::<String>("optim.stale_reuse")? {
            optim.stale_reuse = match r.as_str() {
                "current-batch" => StaleReuse::CurrentBatch,
                "refresh-batch" => StaleReuse::RefreshBatch,
                _ => return Err(ini.error("optim.stale_reuse", format!("unknown mode `{}`", r))),
            };
        }

        let schedule = match ini.get::<String>("run.schedule")? {
            None => Schedule::Constant,
            Some(s) => parse_schedule(&s).ok_or_else(|| ini.error("run.schedule", format!("cannot parse `{}`", s)))?,
        };
        let tune = TuneConfig {
            epochs: ini.get_or("tune.epochs", TuneConfig::default().epochs)?,
            rounds: ini.get_or("tune.rounds", TuneConfig::default().rounds)?,
        };
        let seed = ini.get_or("run.seed", 0)?;
        optim.seed = seed;
        let config = ExperimentConfig {
            data,
            eval_split,
            network,
            optim,
            epochs: ini.require("run.epochs")?,
            batch_size: ini.require("run.batch_size")?,
            schedule,
            output: path("run.output")?,
            seed,
            tune,
        };
        ini.reject_unknown()?;
        config.validate().map_err(|e| match e {
            HarnessError::Config { field, msg, .. } => ini.error(&field, msg),
            e => e,
        })?;
        Ok(config)
    }

    /// Number of training samples known before loading, if any.
    pub fn known_train_len(&self) -> Option<usize> {
        let n = match &self.data {
            DataSource::Synthetic { n, .. } => Some(*n),
            DataSource::Idx { subset, .. } => *subset,
        }?;
        Some(self.train_len_after_split(n))
    }

    pub(crate) fn train_len_after_split(&self, n: usize) -> usize {
        if self.holds_out() {
            n - (self.eval_split * n as f64).round() as usize
        } else {
            n
        }
    }

    pub(crate) fn holds_out(&self) -> bool {
        self.eval_split > 0.0 && !matches!(self.data, DataSource::Idx { test_images: Some(_), .. })
    }

    /// Checks every invariant; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        use HarnessError as E;
        match &self.data {
            DataSource::Synthetic { n, d, noise, outputs, .. } => {
                if *n == 0 {
                    return Err(E::field("data.n", "must be at least 1"));
                }
                if *d == 0 {
                    return Err(E::field("data.d", "must be at least 1"));
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(E::field("data.noise", "must be non-negative and finite"));
                }
                if *outputs == 0 {
                    return Err(E::field("data.outputs", "must be at least 1"));
                }
                if self.network == NetworkPreset::Desk3c1f {
                    return Err(E::field("network.preset", "desk3c1f needs 28×28 image data"));
                }
            }
            DataSource::Idx { test_images, test_labels, subset, .. } => {
                if test_images.is_some() != test_labels.is_some() {
                    return Err(E::field("data.test_labels", "test images and labels must be given together"));
                }
                if *subset == Some(0) {
                    return Err(E::field("data.subset", "must be at least 1"));
                }
            }
        }
        if !(0.0..1.0).contains(&self.eval_split) {
            return Err(E::field("data.eval_split", "must lie in [0, 1)"));
        }
        if let NetworkPreset::Mlp { hidden, .. } = &self.network {
            if hidden.contains(&0) {
                return Err(E::field("network.hidden", "widths must be at least 1"));
            }
        }
        self.optim.validate().map_err(|e| match e {
            crate::optim::OptimError::Config { field, reason } => E::field(format!("optim.{}", field), reason),
            e => e.into(),
        })?;
        if self.batch_size == 0 {
            return Err(E::field("run.batch_size", "must be at least 1"));
        }
        if let Some(n) = self.known_train_len() {
            if self.batch_size > n {
                return Err(E::field(
                    "run.batch_size",
                    format!("{} exceeds the {} training samples", self.batch_size, n),
                ));
            }
        }
        self.schedule.check(self.epochs).map_err(|m| E::field("run.schedule", m))?;
        if self.tune.epochs == 0 {
            return Err(E::field("tune.epochs", "must be at least 1"));
        }
        Ok(())
    }

    /// Replaces the seed with `TENGRAD_SEED` when that is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().map_err(|_| HarnessError::field(SEED_ENV, format!("cannot parse `{}`", v)))?;
            self.seed = seed;
            self.optim.seed = seed;
        }
        Ok(())
    }
}

/// Settings for the convergence-rate driver.
#[derive(Debug, Clone, PartialEq)]
pub struct RatesConfig {
    pub n: usize,
    pub d: usize,
    pub width: usize,
    pub teacher_hidden: Vec<usize>,
    pub k_max: usize,
    /// Number of seeds, run as `seed, seed+1, ...`.
    pub seeds: usize,
    pub seed: u64,
    /// Damping candidate; the run uses `min(alpha, 4λ₀/(9n))`.
    pub alpha: f64,
    pub c: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RatesConfig {
    fn default() -> Self {
        Self {
            n: 32,
            d: 48,
            width: 256,
            teacher_hidden: vec![64],
            k_max: 500,
            seeds: 5,
            seed: 0,
            alpha: 0.001,
            c: 0.5,
            output_dir: None,
        }
    }
}

impl RatesConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::from(e).context(format!("reading {}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("."))).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::parse(text)?;
        let d = RatesConfig::default();
        let cfg = RatesConfig {
            n: ini.get_or("rates.n", d.n)?,
            d: ini.get_or("rates.d", d.d)?,
            width: ini.get_or("rates.width", d.width)?,
            teacher_hidden: ini.list("rates.teacher_hidden")?.unwrap_or(d.teacher_hidden),
            k_max: ini.get_or("rates.k_max", d.k_max)?,
            seeds: ini.get_or("rates.seeds", d.seeds)?,
            seed: ini.get_or("rates.seed", d.seed)?,
            alpha: ini.get_or("rates.alpha", d.alpha)?,
            c: ini.get_or("rates.c", d.c)?,
            output_dir: ini.get::<String>("rates.output_dir")?.map(|p| base.join(p)),
        };
        ini.reject_unknown()?;
        cfg.validate().map_err(|e| match e {
            HarnessError::Config { field, msg, .. } => ini.error(&field, msg),
            e => e,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(HarnessError::field(f, m));
        if self.n == 0 {
            return bad("rates.n", "must be at least 1");
        }
        if self.d == 0 {
            return bad("rates.d", "must be at least 1");
        }
        if self.width == 0 {
            return bad("rates.width", "must be at least 1");
        }
        if self.seeds == 0 {
            return bad("rates.seeds", "must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("rates.alpha", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.c) {
            return bad("rates.c", "must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| HarnessError::field(SEED_ENV, format!("cannot parse `{}`", v)))?;
        }
        Ok(())
    }
}
