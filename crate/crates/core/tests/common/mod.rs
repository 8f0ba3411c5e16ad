//! Shared fixtures and naive loop oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tengrad::net::{LayerSpec, LossKind, NetworkSpec, Targets};
use tengrad::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// `A·Bᵀ` by triple loop over row slices.
pub fn naive_gram(j: &Tensor) -> Tensor {
    Tensor::from_fn(j.rows(), j.rows(), |a, b| j.row(a).iter().zip(j.row(b)).map(|(x, y)| x * y).sum())
}

/// Per-sample dense Jacobian: row `i` is column-major `vec(𝓘[:,i]·𝓖[:,i]ᵀ)`.
pub fn naive_dense_jacobian(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let (d_i, d_o, m) = (input.rows(), grad_out.rows(), input.cols());
    let mut j = Tensor::zeros(&[m, d_i * d_o]);
    for i in 0..m {
        for b in 0..d_o {
            for a in 0..d_i {
                j.set(i, a + b * d_i, input.get(a, i) * grad_out.get(b, i));
            }
        }
    }
    j
}

/// Per-sample conv Jacobian from stacked `(m·S) × F` patches and `(m·S) × c`
/// derivatives: row `i` is column-major `vec(I_iᵀ·G_i)`.
pub fn naive_conv_jacobian(unfolded: &Tensor, grad_out: &Tensor, spatial: usize) -> Tensor {
    let (f, c) = (unfolded.cols(), grad_out.cols());
    let m = unfolded.rows() / spatial;
    let mut j = Tensor::zeros(&[m, f * c]);
    for i in 0..m {
        for k in 0..c {
            for a in 0..f {
                let mut s = 0.0;
                for t in 0..spatial {
                    s += unfolded.get(i * spatial + t, a) * grad_out.get(i * spatial + t, k);
                }
                j.set(i, a + k * f, s);
            }
        }
    }
    j
}

/// Patch matrix of one `c×h×w` image by explicit index arithmetic, rows by
/// output position, columns `ch·k² + ky·k + kx`.
pub fn naive_unfold(img: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Tensor {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    Tensor::from_fn(ho * wo, c * k * k, |pos, col| {
        let (oy, ox) = (pos / wo, pos % wo);
        let (ch, ky, kx) = (col / (k * k), (col / k) % k, col % k);
        let y = (oy * stride + ky) as isize - pad as isize;
        let x = (ox * stride + kx) as isize - pad as isize;
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img[ch * h * w + y as usize * w + x as usize]
        }
    })
}

/// Direct convolution `out[co, oy, ox] = Σ w[co][ci][ky][kx]·x[ci, y, x] + b[co]`
/// by nested loops; `weights` is `[c_out][c_in·k·k]` channel-major.
#[allow(clippy::too_many_arguments)]
pub fn direct_conv(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weights: &[Vec<f64>],
    bias: Option<&[f64]>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; weights.len() * ho * wo];
    for (co, filt) in weights.iter().enumerate() {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = bias.map_or(0.0, |b| b[co]);
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                s += filt[ci * k * k + ky * k + kx] * img[ci * h * w + y as usize * w + x as usize];
                            }
                        }
                    }
                }
                out[co * ho * wo + oy * wo + ox] = s;
            }
        }
    }
    out
}

/// Random dense network with `1..=3` parameterized layers and widths `≤ 8`.
pub fn random_mlp(rng: &mut ChaCha8Rng, loss: LossKind) -> NetworkSpec {
    let d = rng.random_range(1..=8);
    let layers = rng.random_range(1..=3);
    let mut specs = Vec::new();
    let mut width = d;
    for l in 0..layers {
        let out = if l + 1 == layers { rng.random_range(2..=4) } else { rng.random_range(1..=8) };
        specs.push(LayerSpec::Dense { d_in: width, d_out: out, bias: rng.random_bool(0.5) });
        if l + 1 < layers {
            specs.push(LayerSpec::Relu);
        }
        width = out;
    }
    NetworkSpec::new([d, 1, 1], specs, loss).unwrap()
}

/// Small conv front end followed by a dense head.
pub fn random_convnet(rng: &mut ChaCha8Rng, loss: LossKind) -> NetworkSpec {
    let c_in = rng.random_range(1..=2);
    let c_out = rng.random_range(1..=3);
    let size = rng.random_range(3..=5);
    let kernel = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=1);
    let side = (size + 2 * padding - kernel) / stride + 1;
    NetworkSpec::new(
        [c_in, size, size],
        vec![
            LayerSpec::Conv2d { c_in, c_out, kernel, stride, padding, bias: rng.random_bool(0.5) },
            LayerSpec::Relu,
            LayerSpec::Dense { d_in: c_out * side * side, d_out: rng.random_range(2..=3), bias: true },
        ],
        loss,
    )
    .unwrap()
}

pub fn random_targets(rng: &mut ChaCha8Rng, spec: &NetworkSpec, m: usize) -> Targets {
    match spec.loss() {
        LossKind::SquaredError => Targets::Values(uniform(rng, spec.output_len(), m)),
        LossKind::CrossEntropy => Targets::Classes((0..m).map(|_| rng.random_range(0..spec.output_len())).collect()),
    }
}

/// Symmetric eigenvalues by an independent library, ascending.
pub fn nalgebra_eigenvalues(a: &Tensor) -> Vec<f64> {
    let n = a.rows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a.get(i, j));
    let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Solves `a·x = b` with an independent LU factorization.
pub fn nalgebra_solve(a: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = a.rows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a.get(i, j));
    let rhs = nalgebra::DVector::from_column_slice(b);
    m.lu().solve(&rhs).expect("nonsingular").iter().copied().collect()
}
