//! A small feed-forward engine (dense, conv2d, ReLU) whose backward pass
//! keeps each layer's inputs `𝓘` and pre-activation derivatives `𝓖`.
//!
//! Every parameterized layer is a pure linear map `𝓞 = Wᵀ𝓘`. A bias is
//! realized by appending a constant-one feature to `𝓘`, so it lives in the
//! last row of `W`.

mod checkpoint;
mod engine;
mod gradcheck;
mod loss;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use engine::{backward, forward, per_sample_jacobian_oracle, BatchCache, LayerCache};
pub use gradcheck::{central_difference, finite_diff_gradient};
pub use loss::{accuracy, loss_and_grad, LossKind, Targets};

use crate::tensor::{ConvGeometry, Tensor, TensorError};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid network: {0}")]
    Spec(String),
    #[error("batch cache is stale: parameters changed since the forward pass")]
    StaleCache,
    #[error("batch cache is incomplete: run backward on the same batch first")]
    IncompleteCache,
    #[error("non-finite activation in layer {layer}")]
    Numeric { layer: usize },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("layer index {index} out of range ({count} parameterized layers)")]
    LayerIndex { index: usize, count: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { d_in: usize, d_out: usize, bias: bool },
    Conv2d { c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    Relu,
}

/// A layer with all shapes resolved against the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Dense { d_in: usize, d_out: usize, bias: bool },
    Conv { geom: ConvGeometry, c_out: usize, bias: bool },
    Relu { width: usize },
}

impl Layer {
    pub fn in_features(&self) -> usize {
        match *self {
            Layer::Dense { d_in, .. } => d_in,
            Layer::Conv { geom, .. } => geom.input_len(),
            Layer::Relu { width } => width,
        }
    }

    pub fn out_features(&self) -> usize {
        match *self {
            Layer::Dense { d_out, .. } => d_out,
            Layer::Conv { geom, c_out, .. } => c_out * geom.spatial(),
            Layer::Relu { width } => width,
        }
    }

    /// Shape `(rows, cols)` of the weight matrix, bias row included.
    pub fn param_shape(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Dense { d_in, d_out, bias } => Some((d_in + bias as usize, d_out)),
            Layer::Conv { geom, c_out, bias } => Some((geom.patch() + bias as usize, c_out)),
            Layer::Relu { .. } => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { d_in, .. } => d_in,
            Layer::Conv { geom, .. } => geom.patch(),
            Layer::Relu { width } => width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    input: [usize; 3],
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    loss: LossKind,
}

impl NetworkSpec {
    /// Resolves `layers` against an input of shape `c×h×w`. Flat inputs use
    /// `[d, 1, 1]`. A dense layer after a conv sees the channel-major
    /// flattening of the feature maps.
    pub fn new(input: [usize; 3], specs: Vec<LayerSpec>, loss: LossKind) -> Result<Self> {
        if input.contains(&0) {
            return Err(NetError::Spec("input extents must be positive".into()));
        }
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let width = shape[0] * shape[1] * shape[2];
            let layer = match *spec {
                LayerSpec::Dense { d_in, d_out, bias } => {
                    if d_in != width {
                        return Err(NetError::Spec(format!(
                            "layer {}: dense expects {} inputs but receives {}",
                            i, d_in, width
                        )));
                    }
                    if d_out == 0 {
                        return Err(NetError::Spec(format!("layer {}: zero outputs", i)));
                    }
                    shape = [d_out, 1, 1];
                    Layer::Dense { d_in, d_out, bias }
                }
                LayerSpec::Conv2d { c_in, c_out, kernel, stride, padding, bias } => {
                    if c_in != shape[0] {
                        return Err(NetError::Spec(format!(
                            "layer {}: conv expects {} channels but receives {}",
                            i, c_in, shape[0]
                        )));
                    }
                    if c_out == 0 {
                        return Err(NetError::Spec(format!("layer {}: zero output channels", i)));
                    }
                    let geom = ConvGeometry::new(c_in, shape[1], shape[2], kernel, stride, padding)
                        .map_err(|e| NetError::Spec(format!("layer {}: {}", i, e)))?;
                    shape = [c_out, geom.h_out, geom.w_out];
                    Layer::Conv { geom, c_out, bias }
                }
                LayerSpec::Relu => Layer::Relu { width },
            };
            layers.push(layer);
        }
        if layers.iter().all(|l| l.param_shape().is_none()) {
            return Err(NetError::Spec("network has no parameterized layer".into()));
        }
        Ok(Self { input, specs, layers, loss })
    }

    /// Fully connected ReLU network `d → hidden… → d_out` with biases.
    pub fn mlp(d: usize, hidden: &[usize], d_out: usize, loss: LossKind) -> Result<Self> {
        let mut specs = Vec::new();
        let mut prev = d;
        for &h in hidden {
            specs.push(LayerSpec::Dense { d_in: prev, d_out: h, bias: true });
            specs.push(LayerSpec::Relu);
            prev = h;
        }
        specs.push(LayerSpec::Dense { d_in: prev, d_out, bias: true });
        Self::new([d, 1, 1], specs, loss)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_features())
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    /// Indices (into `layers()`) of the parameterized layers, in order.
    pub fn param_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].param_shape().is_some()).collect()
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().filter_map(|l| l.param_shape()).collect()
    }

    /// Total parameter count `p`.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// The resolved parameterized layer with index `l` (0-based over
    /// parameterized layers only).
    pub fn param_layer(&self, l: usize) -> Result<&Layer> {
        let idx = self.param_layers();
        idx.get(l).map(|&i| &self.layers[i]).ok_or(NetError::LayerIndex { index: l, count: idx.len() })
    }
}

static NEXT_PARAMS_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed)
}

/// Per-layer weight matrices. Each instance carries an identity and a
/// generation counter bumped by every mutable access, which lets caches
/// detect that they were built on different weights.
#[derive(Debug, PartialEq)]
pub struct Params {
    weights: Vec<Tensor>,
    id: u64,
    generation: u64,
}

impl Clone for Params {
    fn clone(&self) -> Self {
        Self { weights: self.weights.clone(), id: fresh_id(), generation: 0 }
    }
}

impl Params {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self::from_weights(spec.param_shapes().iter().map(|&(r, c)| Tensor::zeros(&[r, c])).collect())
    }

    /// He-style Gaussian initialization: every entry of layer `l`, bias row
    /// included, is drawn from `N(0, 2/fan_in)`.
    pub fn init<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let weights = spec
            .layers()
            .iter()
            .filter_map(|layer| {
                let (r, c) = layer.param_shape()?;
                let beta = (2.0 / layer.fan_in() as f64).sqrt();
                Some(Tensor::from_fn(r, c, |_, _| beta * rng.sample::<f64, _>(StandardNormal)))
            })
            .collect();
        Self::from_weights(weights)
    }

    pub fn from_weights(weights: Vec<Tensor>) -> Self {
        Self { weights, id: fresh_id(), generation: 0 }
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.param_shapes();
        if shapes.len() != self.weights.len() {
            return Err(NetError::Spec(format!(
                "expected {} weight matrices, found {}",
                shapes.len(),
                self.weights.len()
            )));
        }
        for (l, (w, &(r, c))) in self.weights.iter().zip(&shapes).enumerate() {
            if w.shape() != [r, c] {
                return Err(NetError::Spec(format!(
                    "layer {}: weight shape {:?}, expected [{}, {}]",
                    l,
                    w.shape(),
                    r,
                    c
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.weights[l]
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.weights
    }

    /// Mutable access to one layer; invalidates existing caches.
    pub fn layer_mut(&mut self, l: usize) -> &mut Tensor {
        self.generation += 1;
        &mut self.weights[l]
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// `[vec(W₁)ᵀ … vec(W_L)ᵀ]ᵀ` with column-major `vec`.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights.iter().flat_map(|w| w.vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_resolve_through_conv_and_dense() {
        let spec = NetworkSpec::new(
            [1, 6, 6],
            vec![
                LayerSpec::Conv2d { c_in: 1, c_out: 2, kernel: 3, stride: 1, padding: 0, bias: true },
                LayerSpec::Relu,
                LayerSpec::Dense { d_in: 32, d_out: 3, bias: false },
            ],
            LossKind::CrossEntropy,
        )
        .unwrap();
        assert_eq!(spec.param_shapes(), vec![(10, 2), (32, 3)]);
        assert_eq!(spec.param_count(), 20 + 96);
        assert_eq!(spec.output_len(), 3);
    }

    #[test]
    fn incompatible_layers_are_rejected() {
        let bad = NetworkSpec::new(
            [4, 1, 1],
            vec![LayerSpec::Dense { d_in: 3, d_out: 1, bias: true }],
            LossKind::SquaredError,
        );
        assert!(matches!(bad, Err(NetError::Spec(_))));
        let only_relu = NetworkSpec::new([4, 1, 1], vec![LayerSpec::Relu], LossKind::SquaredError);
        assert!(only_relu.is_err());
    }

    #[test]
    fn mutation_bumps_generation_and_clone_gets_new_id() {
        let spec = NetworkSpec::mlp(3, &[4], 1, LossKind::SquaredError).unwrap();
        let mut p = Params::init(&spec, &mut ChaCha8Rng::seed_from_u64(0));
        let g0 = p.generation();
        p.layer_mut(0).data_mut()[0] += 1.0;
        assert!(p.generation() > g0);
        assert_ne!(p.clone().id(), p.id());
        assert_eq!(p.count(), spec.param_count());
    }
}
