use super::{forward, loss_and_grad, NetworkSpec, Params, Result, Targets};
use crate::tensor::Tensor;

/// Central differences `(f(w + h·eᵢ) − f(w − h·eᵢ)) / 2h` for every
/// coordinate of `w`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, w: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut probe = w.to_vec();
    (0..w.len())
        .map(|i| {
            probe[i] = w[i] + h;
            let up = f(&probe);
            probe[i] = w[i] - h;
            let down = f(&probe);
            probe[i] = w[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Finite-difference gradient of the mean batch loss with respect to every
/// layer's weights. One forward pass per probe; small networks only.
pub fn finite_diff_gradient(
    spec: &NetworkSpec,
    params: &Params,
    x: &Tensor,
    y: &Targets,
    h: f64,
) -> Result<Vec<Tensor>> {
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.num_layers());
    for l in 0..params.num_layers() {
        let shape = params.layer(l).shape().to_vec();
        let base = params.layer(l).data().to_vec();
        let mut err = None;
        let grad = central_difference(
            |w| {
                probe.layer_mut(l).data_mut().copy_from_slice(w);
                match forward(spec, &probe, x).and_then(|(u, _)| loss_and_grad(spec.loss(), &u, y)) {
                    Ok((loss, _)) => loss,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &base,
            h,
        );
        if let Some(e) = err {
            return Err(e);
        }
        probe.layer_mut(l).data_mut().copy_from_slice(&base);
        out.push(Tensor::new(shape, grad)?);
    }
    Ok(out)
}
