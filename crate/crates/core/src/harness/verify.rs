//! Seeded property suites behind `verify <suite>`. Every check compares a
//! library route with a naive loop oracle or an integer closed form and
//! reports the measured error next to its tolerance.

use super::config::RatesConfig;
use super::rates::run_rates_seed;
use super::Result;
use crate::fisher::{
    covfactor_conv, covfactor_dense, covfactor_general, explicit_gram, flop_report, general_unfold, DampedGram,
    LayerDims, LayerJacobian,
};
use crate::flops;
use crate::net::{
    backward, finite_diff_gradient, forward, loss_and_grad, LayerSpec, LossKind, NetworkSpec, Params, Targets,
};
use crate::tensor::{unfold_conv, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::time::Instant;

/// Suite names in the order `all` runs them.
pub const SUITES: [&str; 7] = ["factorization", "woodbury", "jvpvjp", "general", "gradients", "flops", "convergence"];

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub tolerance: f64,
    pub measured: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(suite: &'static str, name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Check { suite, name: name.into(), tolerance, measured, passed: measured <= tolerance, detail }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: measured {:.3e} tolerance {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    /// Wall time per suite in seconds.
    pub timings: Vec<(&'static str, f64)>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{}", c)?;
        }
        for (s, t) in &self.timings {
            writeln!(f, "suite {} took {:.2} s", s, t)?;
        }
        write!(f, "{}", if self.passed() { "all checks passed" } else { "verification FAILED" })
    }
}

/// Runs `suite` (or every suite for `"all"`). Unknown names yield `None`.
pub fn verify(suite: &str) -> Option<Result<VerifyReport>> {
    let names: Vec<&'static str> = match suite {
        "all" => SUITES.to_vec(),
        s => vec![*SUITES.iter().find(|&&n| n == s)?],
    };
    let mut report = VerifyReport::default();
    for name in names {
        let start = Instant::now();
        let checks = match name {
            "factorization" => factorization_suite(),
            "woodbury" => woodbury_suite(),
            "jvpvjp" => jvpvjp_suite(),
            "general" => general_suite(),
            "gradients" => gradients_suite(),
            "flops" => flops_suite(),
            _ => convergence_suite(),
        };
        match checks {
            Ok(c) => report.checks.extend(c),
            Err(e) => return Some(Err(e.context(format!("suite {}", name)))),
        }
        report.timings.push((name, start.elapsed().as_secs_f64()));
    }
    Some(Ok(report))
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Owned cached values for one random layer.
pub(crate) enum Instance {
    Dense { input: Tensor, grad_out: Tensor },
    Conv { unfolded: Tensor, grad_out: Tensor, spatial: usize },
}

impl Instance {
    pub(crate) fn jac(&self) -> LayerJacobian<'_> {
        match self {
            Instance::Dense { input, grad_out } => LayerJacobian::Dense { input, grad_out },
            Instance::Conv { unfolded, grad_out, spatial } => {
                LayerJacobian::Conv { unfolded, grad_out, spatial: *spatial }
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            Instance::Dense { input, grad_out } => {
                format!("dense d_i={} d_o={} m={}", input.rows(), grad_out.rows(), input.cols())
            }
            Instance::Conv { unfolded, grad_out, spatial } => format!(
                "conv S={} F={} c={} m={}",
                spatial,
                unfolded.cols(),
                grad_out.cols(),
                unfolded.rows() / spatial
            ),
        }
    }
}

pub(crate) fn dense_instance(rng: &mut ChaCha8Rng, max_d: usize, max_m: usize) -> Instance {
    let d_i = rng.random_range(1..=max_d);
    let d_o = rng.random_range(1..=max_d);
    let m = rng.random_range(1..=max_m);
    Instance::Dense { input: uniform(rng, d_i, m), grad_out: uniform(rng, d_o, m) }
}

/// Random conv layer: `c_in ≤ 4`, `c_out ≤ 6`, kernel `≤ 3`, inputs up to
/// `8×8`, `m ≤ 8`, stride 1 or 2, padding 0 or 1.
pub(crate) fn conv_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let c_in = rng.random_range(1..=4);
    let c_out = rng.random_range(1..=6);
    let kernel = rng.random_range(1..=3);
    let h = rng.random_range(kernel..=8);
    let w = rng.random_range(kernel..=8);
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=1);
    let m = rng.random_range(1..=8);
    let mut rows = Vec::new();
    let mut spatial = 0;
    let mut f = 0;
    for _ in 0..m {
        let img = Tensor::new(vec![c_in, h, w], (0..c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let u = unfold_conv(&img, kernel, stride, padding)?;
        spatial = u.rows();
        f = u.cols();
        rows.extend_from_slice(u.data());
    }
    Ok(Instance::Conv {
        unfolded: Tensor::matrix(m * spatial, f, rows)?,
        grad_out: uniform(rng, m * spatial, c_out),
        spatial,
    })
}

/// `J` by explicit loops: row `i` is the column-major `vec` of the
/// per-sample weight gradient.
fn naive_jacobian(inst: &Instance) -> Tensor {
    match inst {
        Instance::Dense { input, grad_out } => {
            let (d_i, d_o, m) = (input.rows(), grad_out.rows(), input.cols());
            Tensor::from_fn(m, d_i * d_o, |i, p| input.get(p % d_i, i) * grad_out.get(p / d_i, i))
        }
        Instance::Conv { unfolded, grad_out, spatial } => {
            let (f, c, s) = (unfolded.cols(), grad_out.cols(), *spatial);
            let m = unfolded.rows() / s;
            Tensor::from_fn(m, f * c, |i, p| {
                let (a, b) = (p % f, p / f);
                (0..s).map(|t| unfolded.get(i * s + t, a) * grad_out.get(i * s + t, b)).sum()
            })
        }
    }
}

fn naive_gram(j: &Tensor) -> Tensor {
    Tensor::from_fn(j.rows(), j.rows(), |a, b| j.row(a).iter().zip(j.row(b)).map(|(x, y)| x * y).sum())
}

fn max_abs_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn covfactor(inst: &Instance) -> Result<Tensor> {
    Ok(match inst {
        Instance::Dense { input, grad_out } => covfactor_dense(input, grad_out)?.gram,
        Instance::Conv { unfolded, grad_out, spatial } => covfactor_conv(unfolded, grad_out, *spatial)?,
    })
}

const SEED_DENSE: u64 = 0xd1;
const SEED_CONV: u64 = 0xc2;

fn factorization_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED_DENSE);
    let mut worst = (0.0, String::new());
    for _ in 0..200 {
        let inst = dense_instance(&mut rng, 64, 32);
        let err = max_abs_err(&covfactor(&inst)?, &naive_gram(&naive_jacobian(&inst)));
        if err >= worst.0 {
            worst = (err, inst.describe());
        }
    }
    let dense =
        Check::at_most("factorization", "dense-gram", worst.0, 1e-10, format!("200 instances, worst {}", worst.1));
    let mut rng = ChaCha8Rng::seed_from_u64(SEED_CONV);
    let mut worst = (0.0, String::new());
    for _ in 0..100 {
        let inst = conv_instance(&mut rng)?;
        let err = max_abs_err(&covfactor(&inst)?, &naive_gram(&naive_jacobian(&inst)));
        if err >= worst.0 {
            worst = (err, inst.describe());
        }
    }
    let conv = Check::at_most("factorization", "conv-gram", worst.0, 1e-9, format!("100 instances, worst {}", worst.1));
    Ok(vec![dense, conv])
}

fn general_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (label, seed, count) in [("dense", SEED_DENSE, 200), ("conv", SEED_CONV, 100)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..count {
            let inst = if label == "dense" { dense_instance(&mut rng, 64, 32) } else { conv_instance(&mut rng)? };
            let (schema, i_hat, g) = general_unfold(&inst.jac())?;
            worst = worst.max(max_abs_err(&covfactor_general(&schema, &i_hat, &g)?, &covfactor(&inst)?));
        }
        checks.push(Check::at_most(
            "general",
            &format!("{}-schema", label),
            worst,
            1e-12,
            format!("{} instances", count),
        ));
    }
    Ok(checks)
}

/// Dense damped inverse applied to `g` by Gauss-Jordan elimination on the
/// explicit `JᵀJ/m + αI`.
fn naive_direction(j: &Tensor, g: &[f64], alpha: f64) -> Vec<f64> {
    let (m, p) = (j.rows(), j.cols());
    let mut a = vec![0.0; p * (p + 1)];
    for r in 0..p {
        for c in 0..p {
            let s: f64 = (0..m).map(|i| j.get(i, r) * j.get(i, c)).sum();
            a[r * (p + 1) + c] = s / m as f64 + if r == c { alpha } else { 0.0 };
        }
        a[r * (p + 1) + p] = g[r];
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&x, &y| a[x * (p + 1) + col].abs().total_cmp(&a[y * (p + 1) + col].abs())).unwrap();
        for k in 0..=p {
            a.swap(col * (p + 1) + k, piv * (p + 1) + k);
        }
        let d = a[col * (p + 1) + col];
        for r in 0..p {
            if r != col {
                let factor = a[r * (p + 1) + col] / d;
                if factor != 0.0 {
                    for k in col..=p {
                        a[r * (p + 1) + k] -= factor * a[col * (p + 1) + k];
                    }
                }
            }
        }
    }
    (0..p).map(|r| a[r * (p + 1) + p] / a[r * (p + 1) + r]).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn woodbury_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3b);
    let mut checks = Vec::new();
    let instances: Vec<Instance> = (0..50)
        .map(|_| {
            let d_i = rng.random_range(1..=32);
            let d_o = rng.random_range(1..=(256 / d_i).min(32));
            let m = rng.random_range(1..=16);
            Instance::Dense { input: uniform(&mut rng, d_i, m), grad_out: uniform(&mut rng, d_o, m) }
        })
        .collect();
    for alpha in [1e-3, 1e-1, 1.0] {
        let mut worst: f64 = 0.0;
        for inst in &instances {
            let jac = inst.jac();
            let (r, c) = jac.param_shape();
            let g = uniform(&mut rng, r, c);
            let dir = DampedGram::new(&jac.gram()?, alpha)?.direction(&jac, &g)?;
            let want = naive_direction(&naive_jacobian(inst), &g.vec(), alpha);
            worst = worst.max(rel_err(&dir.vec(), &want));
        }
        checks.push(Check::at_most(
            "woodbury",
            &format!("direction-alpha-{}", alpha),
            worst,
            1e-8,
            "50 instances".into(),
        ));
    }
    Ok(checks)
}

fn jvpvjp_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for label in ["dense", "conv"] {
        let mut rng = ChaCha8Rng::seed_from_u64(if label == "dense" { 0x4a } else { 0x4b });
        let (mut jvp_err, mut vjp_err, mut adj_err) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..100 {
            let inst = if label == "dense" { dense_instance(&mut rng, 16, 8) } else { conv_instance(&mut rng)? };
            let jac = inst.jac();
            let j = naive_jacobian(&inst);
            let (r, c) = jac.param_shape();
            let v = uniform(&mut rng, r, c);
            let w: Vec<f64> = (0..jac.batch()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let vv = v.vec();
            let jv_want: Vec<f64> = (0..j.rows()).map(|i| j.row(i).iter().zip(&vv).map(|(a, b)| a * b).sum()).collect();
            let jtw_want: Vec<f64> = (0..j.cols()).map(|p| (0..j.rows()).map(|i| j.get(i, p) * w[i]).sum()).collect();
            let jv = jac.jvp(&v)?;
            let jtw = jac.vjp(&w)?.vec();
            jvp_err = jvp_err.max(jv.iter().zip(&jv_want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            vjp_err = vjp_err.max(jtw.iter().zip(&jtw_want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            let lhs: f64 = jv.iter().zip(&w).map(|(a, b)| a * b).sum();
            let rhs: f64 = vv.iter().zip(&jtw).map(|(a, b)| a * b).sum();
            adj_err = adj_err.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
        }
        checks.push(Check::at_most("jvpvjp", &format!("{}-jvp", label), jvp_err, 1e-10, "100 instances".into()));
        checks.push(Check::at_most("jvpvjp", &format!("{}-vjp", label), vjp_err, 1e-10, "100 instances".into()));
        checks.push(Check::at_most(
            "jvpvjp",
            &format!("{}-adjoint", label),
            adj_err,
            1e-12,
            "relative to max(1, |<Jv,w>|)".into(),
        ));
    }
    Ok(checks)
}

/// Random small network: up to three dense layers, or a conv front end.
fn small_network(rng: &mut ChaCha8Rng, i: usize) -> Result<(NetworkSpec, Tensor, Targets)> {
    let loss = if rng.random_bool(0.5) { LossKind::SquaredError } else { LossKind::CrossEntropy };
    let m = rng.random_range(1..=3);
    let outputs = rng.random_range(2..=4);
    let (spec, input_len) = if i.is_multiple_of(2) {
        let d = rng.random_range(1..=6);
        let mut specs = Vec::new();
        let mut width = d;
        for _ in 0..rng.random_range(0..=2) {
            let h = rng.random_range(1..=6);
            specs.push(LayerSpec::Dense { d_in: width, d_out: h, bias: rng.random_bool(0.5) });
            specs.push(LayerSpec::Relu);
            width = h;
        }
        specs.push(LayerSpec::Dense { d_in: width, d_out: outputs, bias: rng.random_bool(0.5) });
        (NetworkSpec::new([d, 1, 1], specs, loss)?, d)
    } else {
        let (c_in, c_out) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let size = rng.random_range(3..=5);
        let kernel = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=1);
        let side = (size + 2 * padding - kernel) / stride + 1;
        let specs = vec![
            LayerSpec::Conv2d { c_in, c_out, kernel, stride, padding, bias: rng.random_bool(0.5) },
            LayerSpec::Relu,
            LayerSpec::Dense { d_in: c_out * side * side, d_out: outputs, bias: true },
        ];
        (NetworkSpec::new([c_in, size, size], specs, loss)?, c_in * size * size)
    };
    let x = uniform(rng, input_len, m);
    let t = match loss {
        LossKind::SquaredError => Targets::Values(uniform(rng, outputs, m)),
        LossKind::CrossEntropy => Targets::Classes((0..m).map(|_| rng.random_range(0..outputs)).collect()),
    };
    Ok((spec, x, t))
}

fn gradients_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let (spec, x, t) = small_network(&mut rng, i)?;
        let params = Params::init(&spec, &mut rng);
        let (u, mut cache) = forward(&spec, &params, &x)?;
        let (_, lg) = loss_and_grad(spec.loss(), &u, &t)?;
        let bp: Vec<f64> = backward(&spec, &params, &mut cache, &lg)?.iter().flat_map(|g| g.data().to_vec()).collect();
        let fd: Vec<f64> =
            finite_diff_gradient(&spec, &params, &x, &t, 1e-5)?.iter().flat_map(|g| g.data().to_vec()).collect();
        let scale = fd.iter().chain(&bp).map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let diff = bp.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        worst = worst.max(diff / scale);
    }
    Ok(vec![Check::at_most(
        "gradients",
        "backprop-vs-central-differences",
        worst,
        1e-5,
        "20 networks, h = 1e-5".into(),
    )])
}

/// Instrumented counts of every Fisher-block routine on `inst`, in
/// [`crate::fisher::FlopReport`] order.
fn measured_flops(inst: &Instance, alpha: f64) -> Result<[u64; 7]> {
    let jac = inst.jac();
    let (gram, covf) = flops::measure(|| jac.gram());
    let gram = gram?;
    let (damped, fact) = flops::measure(|| DampedGram::new(&gram, alpha));
    let damped = damped?;
    let (_, expl) = flops::measure(|| explicit_gram(&jac));
    let (r, c) = jac.param_shape();
    let v = Tensor::filled(&[r, c], 0.5);
    let (jv, jvp) = flops::measure(|| jac.jvp(&v));
    let jv = jv?;
    let (_, solve) = flops::measure(|| damped.factor().solve_vec(&jv));
    let (_, vjp) = flops::measure(|| jac.vjp(&jv));
    let (_, step) = flops::measure(|| damped.direction(&jac, &v));
    Ok([covf, fact, expl, jvp, solve, vjp, step])
}

fn dims_of(inst: &Instance) -> (LayerDims, usize) {
    match inst {
        Instance::Dense { input, grad_out } => {
            (LayerDims::Dense { d_in: input.rows(), d_out: grad_out.rows() }, input.cols())
        }
        Instance::Conv { unfolded, grad_out, spatial } => (
            LayerDims::Conv { spatial: *spatial, patch: unfolded.cols(), c_out: grad_out.cols() },
            unfolded.rows() / spatial,
        ),
    }
}

fn flops_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7f);
    let mut mismatches = Vec::new();
    for i in 0..20 {
        let inst = if i % 2 == 0 { dense_instance(&mut rng, 48, 24) } else { conv_instance(&mut rng)? };
        let (dims, m) = dims_of(&inst);
        let r = flop_report(dims, m);
        let want = [r.covfactor, r.factorization, r.explicit_gram, r.jvp, r.solve, r.vjp, r.tengrad_step];
        let got = measured_flops(&inst, 0.1)?;
        if got != want {
            mismatches.push(format!("{}: measured {:?} closed form {:?}", inst.describe(), got, want));
        }
    }
    let mut checks = vec![Check::at_most(
        "flops",
        "closed-forms",
        mismatches.len() as f64,
        0.0,
        if mismatches.is_empty() { "20 shapes, exact integer match".into() } else { mismatches.join("; ") },
    )];
    let m = 128;
    let inst = Instance::Dense { input: uniform(&mut rng, 1024, m), grad_out: uniform(&mut rng, 1024, m) };
    let jac = inst.jac();
    let (gram, covf) = flops::measure(|| jac.gram());
    let (_, fact) = flops::measure(|| DampedGram::new(&gram?, 0.1).map(|_| ()));
    let (_, expl) = flops::measure(|| explicit_gram(&jac));
    let ratio = expl as f64 / (covf + fact) as f64;
    checks.push(Check {
        suite: "flops",
        name: "curvature-vs-explicit-ratio".into(),
        tolerance: 100.0,
        measured: ratio,
        passed: ratio >= 100.0,
        detail: format!("m=128, 1024x1024: curvature {} vs explicit {} (must be at least 100x)", covf + fact, expl),
    });
    Ok(checks)
}

fn convergence_suite() -> Result<Vec<Check>> {
    let config = RatesConfig::default();
    let out = run_rates_seed(&config, config.seed)?;
    let holds = out.rate_holds(config.k_max);
    Ok(vec![Check {
        suite: "convergence",
        name: "linear-rate-seed-0".into(),
        tolerance: 0.0,
        measured: if holds { 0.0 } else { 1.0 },
        passed: holds,
        detail: out.summary(config.k_max),
    }])
}
