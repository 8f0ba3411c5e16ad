use super::{Layer, NetError, NetworkSpec, Params, Result};
use crate::tensor::{
    fold_conv_add, khatri_rao_cols, matmul, matmul_nt, matmul_tn, unfold_conv_into, ConvGeometry, Tensor, TensorError,
};

/// What one parameterized layer saw during a forward/backward pair.
#[derive(Debug, Clone)]
pub enum LayerCache {
    /// `input` is `𝓘` (`(d_in[+1]) × m`), `grad_out` is `𝓖` (`d_out × m`).
    Dense { input: Tensor, grad_out: Option<Tensor> },
    /// Per-sample unfolded inputs `I_i` stacked into an `(m·S) × (F[+1])`
    /// matrix (sample `i` owns rows `i·S..(i+1)·S`), and the matching
    /// pre-activation derivatives `G_i` stacked as `(m·S) × c_out`.
    Conv { geom: ConvGeometry, unfolded: Tensor, grad_out: Option<Tensor> },
}

impl LayerCache {
    pub fn input(&self) -> &Tensor {
        match self {
            LayerCache::Dense { input, .. } => input,
            LayerCache::Conv { unfolded, .. } => unfolded,
        }
    }

    pub fn grad_out(&self) -> Option<&Tensor> {
        match self {
            LayerCache::Dense { grad_out, .. } | LayerCache::Conv { grad_out, .. } => grad_out.as_ref(),
        }
    }
}

/// Cached intermediate values of one batch, tied to the exact parameters
/// that produced them.
#[derive(Debug, Clone)]
pub struct BatchCache {
    params_id: u64,
    generation: u64,
    batch: usize,
    acts: Vec<Tensor>,
    layers: Vec<LayerCache>,
    complete: bool,
}

impl BatchCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn is_fresh(&self, params: &Params) -> bool {
        self.params_id == params.id() && self.generation == params.generation()
    }

    /// Fails unless the cache was built on `params` as they are now.
    pub fn check_fresh(&self, params: &Params) -> Result<()> {
        if self.is_fresh(params) {
            Ok(())
        } else {
            Err(NetError::StaleCache)
        }
    }

    /// Layer `l`'s cache after a complete forward+backward on `params`.
    pub fn layer(&self, params: &Params, l: usize) -> Result<&LayerCache> {
        self.check_fresh(params)?;
        if !self.complete {
            return Err(NetError::IncompleteCache);
        }
        self.layers.get(l).ok_or(NetError::LayerIndex { index: l, count: self.layers.len() })
    }

    /// Layer caches without freshness checks; used by optimizers that keep a
    /// snapshot of an older batch on purpose.
    pub fn layers_unchecked(&self) -> &[LayerCache] {
        &self.layers
    }
}

fn check_finite(t: &Tensor, layer: usize) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NetError::Numeric { layer })
    }
}

fn tensor_to_net(layer: usize) -> impl Fn(TensorError) -> NetError {
    move |e| match e {
        TensorError::NonFinite { .. } => NetError::Numeric { layer },
        other => NetError::Tensor(other),
    }
}

/// Runs the network on `x` (`d × m`, one column per sample). Returns the
/// outputs `u` (`d_out × m`) and a cache holding every layer input.
pub fn forward(spec: &NetworkSpec, params: &Params, x: &Tensor) -> Result<(Tensor, BatchCache)> {
    params.check_against(spec)?;
    if !x.is_matrix() || x.rows() != spec.input_len() {
        return Err(TensorError::Shape {
            op: "forward",
            expected: format!("{} input features", spec.input_len()),
            found: format!("{:?}", x.shape()),
        }
        .into());
    }
    let m = x.cols();
    let mut acts = Vec::with_capacity(spec.layers().len());
    let mut caches = Vec::new();
    let mut cur = x.clone();
    let mut p = 0;
    for (li, layer) in spec.layers().iter().enumerate() {
        let next = match *layer {
            Layer::Relu { .. } => {
                let data = cur.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                Tensor::new(cur.shape().to_vec(), data).map_err(tensor_to_net(li))?
            }
            Layer::Dense { d_in, bias, .. } => {
                let w = params.layer(p);
                p += 1;
                let input = if bias {
                    let mut data = cur.data().to_vec();
                    data.extend(std::iter::repeat_n(1.0, m));
                    Tensor::matrix(d_in + 1, m, data).map_err(tensor_to_net(li))?
                } else {
                    cur.clone()
                };
                let out = matmul_tn(w, &input).map_err(tensor_to_net(li))?;
                caches.push(LayerCache::Dense { input, grad_out: None });
                out
            }
            Layer::Conv { geom, c_out, bias } => {
                let w = params.layer(p);
                p += 1;
                let s = geom.spatial();
                let fp = geom.patch() + bias as usize;
                let xt = cur.transpose();
                let mut buf = vec![0.0; m * s * fp];
                for i in 0..m {
                    let block = &mut buf[i * s * fp..(i + 1) * s * fp];
                    unfold_conv_into(&geom, xt.row(i), block, fp);
                    if bias {
                        for r in 0..s {
                            block[r * fp + fp - 1] = 1.0;
                        }
                    }
                }
                let unfolded = Tensor::matrix(m * s, fp, buf).map_err(tensor_to_net(li))?;
                let out = matmul(&unfolded, w).map_err(tensor_to_net(li))?;
                let od = out.data();
                let mut act = vec![0.0; c_out * s * m];
                for i in 0..m {
                    for si in 0..s {
                        for c in 0..c_out {
                            act[(c * s + si) * m + i] = od[(i * s + si) * c_out + c];
                        }
                    }
                }
                caches.push(LayerCache::Conv { geom, unfolded, grad_out: None });
                Tensor::matrix(c_out * s, m, act).map_err(tensor_to_net(li))?
            }
        };
        check_finite(&next, li)?;
        acts.push(std::mem::replace(&mut cur, next));
    }
    let cache = BatchCache {
        params_id: params.id(),
        generation: params.generation(),
        batch: m,
        acts,
        layers: caches,
        complete: false,
    };
    Ok((cur, cache))
}

/// Back-propagates the per-sample output derivative `loss_grad`
/// (`d_out × m`). Returns the mean gradient `g_l = (1/m)·𝓘_l𝓖_lᵀ` of every
/// parameterized layer and completes the cache with `𝓖_l`.
///
/// ReLU's derivative at exactly zero is taken as zero.
pub fn backward(
    spec: &NetworkSpec,
    params: &Params,
    cache: &mut BatchCache,
    loss_grad: &Tensor,
) -> Result<Vec<Tensor>> {
    cache.check_fresh(params)?;
    let m = cache.batch;
    if loss_grad.shape() != [spec.output_len(), m] {
        return Err(TensorError::Shape {
            op: "backward",
            expected: format!("[{}, {}]", spec.output_len(), m),
            found: format!("{:?}", loss_grad.shape()),
        }
        .into());
    }
    let inv_m = 1.0 / m as f64;
    let mut grads: Vec<Option<Tensor>> = vec![None; params.num_layers()];
    let mut delta = loss_grad.clone();
    let mut p = params.num_layers();
    let first_param = spec.param_layers()[0];
    for li in (0..spec.layers().len()).rev() {
        let need_delta = li > first_param;
        match spec.layers()[li] {
            Layer::Relu { .. } => {
                let pre = &cache.acts[li];
                let data = delta.data().iter().zip(pre.data()).map(|(&d, &z)| if z > 0.0 { d } else { 0.0 }).collect();
                delta = Tensor::new(delta.shape().to_vec(), data)?;
            }
            Layer::Dense { d_in, bias, .. } => {
                p -= 1;
                let w = params.layer(p);
                let LayerCache::Dense { input, grad_out } = &mut cache.layers[p] else {
                    unreachable!("layer kinds are fixed by the spec")
                };
                grads[p] = Some(matmul_nt(input, &delta)?.scale(inv_m));
                let next = if need_delta {
                    let full = matmul(w, &delta)?;
                    if bias {
                        Some(Tensor::matrix(d_in, m, full.data()[..d_in * m].to_vec())?)
                    } else {
                        Some(full)
                    }
                } else {
                    None
                };
                *grad_out = Some(delta.clone());
                if let Some(n) = next {
                    delta = n;
                }
            }
            Layer::Conv { geom, c_out, bias } => {
                p -= 1;
                let w = params.layer(p);
                let s = geom.spatial();
                let fp = geom.patch() + bias as usize;
                let LayerCache::Conv { unfolded, grad_out, .. } = &mut cache.layers[p] else {
                    unreachable!("layer kinds are fixed by the spec")
                };
                let dd = delta.data();
                let mut gbig = vec![0.0; m * s * c_out];
                for i in 0..m {
                    for si in 0..s {
                        for c in 0..c_out {
                            gbig[(i * s + si) * c_out + c] = dd[(c * s + si) * m + i];
                        }
                    }
                }
                let gbig = Tensor::matrix(m * s, c_out, gbig)?;
                grads[p] = Some(matmul_tn(unfolded, &gbig)?.scale(inv_m));
                if need_delta {
                    let du = matmul_nt(&gbig, w)?;
                    let d_in = geom.input_len();
                    let mut gin = vec![0.0; m * d_in];
                    for i in 0..m {
                        fold_conv_add(
                            &geom,
                            &du.data()[i * s * fp..(i + 1) * s * fp],
                            fp,
                            &mut gin[i * d_in..(i + 1) * d_in],
                        );
                    }
                    delta = Tensor::matrix(m, d_in, gin)?.transpose();
                }
                *grad_out = Some(gbig);
            }
        }
    }
    cache.complete = true;
    Ok(grads.into_iter().map(|g| g.expect("every layer visited")).collect())
}

/// Explicit per-sample Jacobian of layer `l`, `m × (rows·cols)`: row `i`
/// is `vec(𝓘[:,i]·𝓖[:,i]ᵀ)` for dense layers and `vec(I_iᵀ·G_i)` for conv
/// layers. Materializes `J`; meant as a test oracle on small layers.
pub fn per_sample_jacobian_oracle(params: &Params, cache: &BatchCache, l: usize) -> Result<Tensor> {
    let lc = cache.layer(params, l)?;
    let g = lc.grad_out().ok_or(NetError::IncompleteCache)?;
    match lc {
        LayerCache::Dense { input, .. } => Ok(khatri_rao_cols(input, g)?.transpose()),
        LayerCache::Conv { geom, unfolded, .. } => {
            let m = cache.batch;
            let s = geom.spatial();
            let (fp, c_out) = (unfolded.cols(), g.cols());
            let mut rows = Vec::with_capacity(m * fp * c_out);
            for i in 0..m {
                let ii = Tensor::matrix(s, fp, unfolded.data()[i * s * fp..(i + 1) * s * fp].to_vec())?;
                let gi = Tensor::matrix(s, c_out, g.data()[i * s * c_out..(i + 1) * s * c_out].to_vec())?;
                rows.extend(matmul_tn(&ii, &gi)?.vec());
            }
            Ok(Tensor::matrix(m, fp * c_out, rows)?)
        }
    }
}
