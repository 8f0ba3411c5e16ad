use super::config::{DataSource, ExperimentConfig, NetworkPreset};
use super::data::{gen_synthetic, load_idx, Dataset, Labels, Teacher};
use super::{HarnessError, Result};
use crate::fisher::{dense_block_inverse, LayerJacobian};
use crate::flops;
use crate::net::{accuracy, backward, forward, loss_and_grad, LayerSpec, LossKind, NetworkSpec, Params, Targets};
use crate::optim::{step, OptimState};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

pub const TRACE_HEADER: &str = "epoch,iter,wall_ms,flops,train_loss,train_acc,test_loss,test_acc";

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 500;

/// One evaluation point. Accuracies are NaN for regression targets and the
/// test columns are NaN when there is no evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer iterations completed.
    pub iter: usize,
    /// Training time so far, evaluation excluded.
    pub wall_ms: f64,
    /// Multiply-adds spent on training so far.
    pub flops: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    /// Row 0 evaluates the initial parameters.
    pub epochs: Vec<EpochRecord>,
    /// Mini-batch loss at every iteration, before the update.
    pub iter_loss: Vec<f64>,
}

impl RunTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", TRACE_HEADER)?;
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{:.3},{},{:e},{},{:e},{}",
                r.epoch, r.iter, r.wall_ms, r.flops, r.train_loss, r.train_acc, r.test_loss, r.test_acc
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    /// Parses a trace CSV written by [`RunTrace::write_csv`].
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(HarnessError::Format { path: "trace".into(), offset: 0, msg: "unexpected header".into() });
        }
        let mut epochs = Vec::new();
        let mut offset = TRACE_HEADER.len() as u64 + 1;
        for line in lines {
            let bad = || HarnessError::Format { path: "trace".into(), offset, msg: format!("bad row `{}`", line) };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                iter: f[1].parse().map_err(|_| bad())?,
                wall_ms: num(2)?,
                flops: f[3].parse().map_err(|_| bad())?,
                train_loss: num(4)?,
                train_acc: num(5)?,
                test_loss: num(6)?,
                test_acc: num(7)?,
            });
            offset += line.len() as u64 + 1;
        }
        Ok(RunTrace { epochs, iter_loss: Vec::new() })
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn best_test_acc(&self) -> f64 {
        self.epochs.iter().map(|r| r.test_acc).filter(|a| !a.is_nan()).fold(f64::NAN, f64::max)
    }

    /// One-line summary with final and best test accuracy.
    pub fn summary(&self) -> String {
        match self.final_record() {
            None => "empty trace".into(),
            Some(r) => format!(
                "epochs {} iters {} train_loss {:.6} final test_acc {:.4} best test_acc {:.4} ({:.1} s, {} flops)",
                r.epoch,
                r.iter,
                r.train_loss,
                r.test_acc,
                self.best_test_acc(),
                r.wall_ms / 1e3,
                r.flops
            ),
        }
    }
}

/// The scaled-down three-conv, one-hidden-dense network for `1×28×28` inputs:
/// 16-channel 3×3 convolutions with strides 2, 2, 1 (so 28 → 14 → 7 → 5),
/// a 64-unit dense layer and 10 outputs, ReLU after every hidden layer.
pub fn desk3c1f(classes: usize) -> Result<NetworkSpec> {
    let conv = |c_in, stride, padding| LayerSpec::Conv2d { c_in, c_out: 16, kernel: 3, stride, padding, bias: true };
    Ok(NetworkSpec::new(
        [1, 28, 28],
        vec![
            conv(1, 2, 1),
            LayerSpec::Relu,
            conv(16, 2, 1),
            LayerSpec::Relu,
            conv(16, 1, 0),
            LayerSpec::Relu,
            LayerSpec::Dense { d_in: 16 * 5 * 5, d_out: 64, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { d_in: 64, d_out: classes, bias: true },
        ],
        LossKind::CrossEntropy,
    )?)
}

/// Network for `config` on data shaped like `data`.
pub fn build_network(config: &ExperimentConfig, data: &Dataset) -> Result<NetworkSpec> {
    let loss = match data.labels {
        Labels::Classes { .. } => LossKind::CrossEntropy,
        Labels::Values(_) => LossKind::SquaredError,
    };
    match &config.network {
        NetworkPreset::Desk3c1f => {
            if data.sample_shape != [1, 28, 28] {
                return Err(HarnessError::field(
                    "network.preset",
                    format!("desk3c1f needs 1×28×28 samples, data has {:?}", data.sample_shape),
                ));
            }
            desk3c1f(data.outputs())
        }
        NetworkPreset::Mlp { hidden, bias } => {
            let mut specs = Vec::new();
            let mut width = data.dim();
            for &h in hidden {
                specs.push(LayerSpec::Dense { d_in: width, d_out: h, bias: *bias });
                specs.push(LayerSpec::Relu);
                width = h;
            }
            specs.push(LayerSpec::Dense { d_in: width, d_out: data.outputs(), bias: *bias });
            Ok(NetworkSpec::new([data.dim(), 1, 1], specs, loss)?)
        }
    }
}

/// Loads or generates the training set and the evaluation set, if any.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (train, test) = match &config.data {
        DataSource::Synthetic { n, d, noise, teacher_hidden, outputs, seed } => {
            let teacher = if teacher_hidden.is_empty() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7e));
                let spec = NetworkSpec::new(
                    [*d, 1, 1],
                    vec![LayerSpec::Dense { d_in: *d, d_out: *outputs, bias: false }],
                    LossKind::SquaredError,
                )?;
                Teacher::Linear(Params::init(&spec, &mut rng).layer(0).clone())
            } else {
                Teacher::Mlp { hidden: teacher_hidden.clone(), outputs: *outputs }
            };
            (gen_synthetic(*n, *d, &teacher, *noise, *seed)?, None)
        }
        DataSource::Idx { train_images, train_labels, test_images, test_labels, subset } => {
            let mut train = load_idx(train_images, train_labels)?;
            if let Some(s) = subset {
                if *s > train.len() {
                    return Err(HarnessError::field(
                        "data.subset",
                        format!("{} exceeds the {} samples on disk", s, train.len()),
                    ));
                }
                train = train.take(*s);
            }
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l)?),
                _ => None,
            };
            (train, test)
        }
    };
    if config.holds_out() {
        let keep = config.train_len_after_split(train.len());
        let (a, b) = train.split(keep);
        return Ok((a, Some(b)));
    }
    Ok((train, test))
}

/// Mean loss and accuracy of `params` on `data`.
pub fn evaluate(spec: &NetworkSpec, params: &Params, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut hits) = (0.0, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, t) = data.batch(chunk);
        let (u, _) = forward(spec, params, &x)?;
        let (l, _) = loss_and_grad(spec.loss(), &u, &t)?;
        loss += l * chunk.len() as f64;
        if let Targets::Classes(labels) = &t {
            hits += accuracy(&u, labels) * chunk.len() as f64;
        }
    }
    let n = data.len() as f64;
    let acc = if matches!(data.labels, Labels::Classes { .. }) { hits / n } else { f64::NAN };
    Ok((loss / n, acc))
}

/// Loads the data named by `config`, trains, and writes the trace CSV when
/// an output path is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunTrace> {
    config.validate()?;
    let (train, test) = prepare_data(config).map_err(|e| e.context("preparing data"))?;
    let trace = run_experiment_on(config, &train, test.as_ref())?;
    if let Some(path) = &config.output {
        write_trace(&trace, path)?;
    }
    Ok(trace)
}

fn write_trace(trace: &RunTrace, path: &Path) -> Result<()> {
    let wrap = |e: std::io::Error| HarnessError::from(e).context(format!("writing {}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(wrap)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(wrap)?);
    trace.write_csv(&mut out).map_err(wrap)?;
    out.flush().map_err(wrap)
}

/// Trains on already loaded data. Shuffling and initialization draw from
/// one generator seeded with `config.seed`; incomplete final batches are
/// dropped.
pub fn run_experiment_on(config: &ExperimentConfig, train: &Dataset, test: Option<&Dataset>) -> Result<RunTrace> {
    let ctx = |stage: &str| {
        let stage = stage.to_string();
        let method = config.optim.method.name();
        let seed = config.seed;
        move |e: HarnessError| e.context(format!("{} ({} run, seed {})", stage, method, seed))
    };
    if config.batch_size == 0 || config.batch_size > train.len() {
        return Err(HarnessError::field(
            "run.batch_size",
            format!("{} must lie in 1..={} training samples", config.batch_size, train.len()),
        ));
    }
    let spec = build_network(config, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Params::init(&spec, &mut rng);
    let mut optim_cfg = config.optim.clone();
    let mut state = OptimState::new(&optim_cfg, &params).map_err(|e| HarnessError::from(e).context("optimizer"))?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = RunTrace::default();
    let (mut wall, mut work, mut iter) = (0.0f64, 0u64, 0usize);

    let record = |epoch, iter, wall, work, params: &Params| -> Result<EpochRecord> {
        let (train_loss, train_acc) = evaluate(&spec, params, train)?;
        let (test_loss, test_acc) = match test {
            Some(t) => evaluate(&spec, params, t)?,
            None => (f64::NAN, f64::NAN),
        };
        Ok(EpochRecord { epoch, iter, wall_ms: wall, flops: work, train_loss, train_acc, test_loss, test_acc })
    };
    trace.epochs.push(record(0, 0, 0.0, 0, &params).map_err(ctx("initial evaluation"))?);

    for epoch in 0..config.epochs {
        optim_cfg.lr = config.schedule.lr(config.optim.lr, epoch);
        order.shuffle(&mut rng);
        let start = Instant::now();
        let before = flops::count();
        for batch in order.chunks_exact(config.batch_size) {
            let (x, t) = train.batch(batch);
            let res: Result<()> = (|| {
                let (u, mut cache) = forward(&spec, &params, &x)?;
                let (loss, lg) = loss_and_grad(spec.loss(), &u, &t)?;
                trace.iter_loss.push(loss);
                let grads = backward(&spec, &params, &mut cache, &lg)?;
                step(&mut params, &cache, &grads, &mut state, &optim_cfg)?;
                Ok(())
            })();
            res.map_err(ctx(&format!("epoch {} iteration {}", epoch + 1, iter + 1)))?;
            iter += 1;
        }
        wall += start.elapsed().as_secs_f64() * 1e3;
        work += flops::count().wrapping_sub(before);
        trace.epochs.push(record(epoch + 1, iter, wall, work, &params).map_err(ctx("evaluation"))?);
    }
    Ok(trace)
}

/// Dense damped block inverse `(JᵀJ/m + αI)⁻¹` of parameterized layer
/// `layer` at initialization, on the first `batch_size` training samples.
pub fn dump_block(config: &ExperimentConfig, layer: usize) -> Result<Tensor> {
    let (train, _) = prepare_data(config)?;
    let spec = build_network(config, &train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = Params::init(&spec, &mut rng);
    let m = config.batch_size.min(train.len());
    let idx: Vec<usize> = (0..m).collect();
    let (x, t) = train.batch(&idx);
    let (u, mut cache) = forward(&spec, &params, &x)?;
    let (_, lg) = loss_and_grad(spec.loss(), &u, &t)?;
    backward(&spec, &params, &mut cache, &lg)?;
    let jac = LayerJacobian::from_cache(&cache, &params, layer)?;
    Ok(dense_block_inverse(&jac, config.optim.damping, config.optim.exact_cap)?)
}
