use super::{NetError, Result};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `½‖u − y‖²` per sample.
    SquaredError,
    /// Softmax followed by negative log-likelihood.
    CrossEntropy,
}

/// Training targets for a batch, one column (or label) per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Tensor),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn batch(&self) -> usize {
        match self {
            Targets::Values(y) => y.cols(),
            Targets::Classes(c) => c.len(),
        }
    }
}

/// Mean per-sample loss over the batch, and the per-sample derivative
/// `∂ℓᵢ/∂uᵢ` (not divided by the batch size) as a `d_out × m` matrix.
pub fn loss_and_grad(kind: LossKind, u: &Tensor, y: &Targets) -> Result<(f64, Tensor)> {
    let (k, m) = (u.rows(), u.cols());
    match (kind, y) {
        (LossKind::SquaredError, Targets::Values(y)) => {
            if y.shape() != u.shape() {
                return Err(TensorError::Shape {
                    op: "squared error",
                    expected: format!("{:?}", u.shape()),
                    found: format!("{:?}", y.shape()),
                }
                .into());
            }
            let r = u.sub(y)?;
            let loss = 0.5 * r.data().iter().map(|v| v * v).sum::<f64>() / m.max(1) as f64;
            Ok((loss, r))
        }
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            if labels.len() != m {
                return Err(TensorError::Shape {
                    op: "cross entropy",
                    expected: format!("{} labels", m),
                    found: format!("{}", labels.len()),
                }
                .into());
            }
            if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
                return Err(NetError::InvalidLabel { label: bad, classes: k });
            }
            let mut grad = vec![0.0; k * m];
            let mut total = 0.0;
            for (j, &label) in labels.iter().enumerate() {
                let max = (0..k).map(|c| u.get(c, j)).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (u.get(c, j) - max).exp()).sum();
                let log_z = max + z.ln();
                total += log_z - u.get(label, j);
                for c in 0..k {
                    let p = (u.get(c, j) - log_z).exp();
                    grad[c * m + j] = p - if c == label { 1.0 } else { 0.0 };
                }
            }
            Ok((total / m.max(1) as f64, Tensor::matrix(k, m, grad)?))
        }
        (kind, _) => Err(NetError::Spec(format!("targets do not match loss {:?}", kind))),
    }
}

/// Fraction of columns whose arg-max matches the label.
pub fn accuracy(u: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let (k, m) = (u.rows(), u.cols());
    let hits = (0..m)
        .filter(|&j| {
            let best = (0..k).max_by(|&a, &b| u.get(a, j).partial_cmp(&u.get(b, j)).unwrap()).unwrap_or(0);
            best == labels[j]
        })
        .count();
    hits as f64 / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_error_examples() {
        let u = Tensor::column(&[1.0, -2.0]);
        let (l, g) = loss_and_grad(LossKind::SquaredError, &u, &Targets::Values(u.clone())).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, Tensor::zeros(&[2, 1]));
        let (l, g) =
            loss_and_grad(LossKind::SquaredError, &Tensor::column(&[2.0]), &Targets::Values(Tensor::column(&[0.0])))
                .unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g.data(), &[2.0]);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2usize, 3, 10] {
            let u = Tensor::zeros(&[k, 2]);
            let (l, g) = loss_and_grad(LossKind::CrossEntropy, &u, &Targets::Classes(vec![0, k - 1])).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-14);
            for j in 0..2 {
                let s: f64 = (0..k).map(|c| g.get(c, j)).sum();
                assert!(s.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bad_labels_are_rejected() {
        let u = Tensor::zeros(&[3, 1]);
        let err = loss_and_grad(LossKind::CrossEntropy, &u, &Targets::Classes(vec![3])).unwrap_err();
        assert!(matches!(err, NetError::InvalidLabel { label: 3, classes: 3 }));
        assert!(loss_and_grad(LossKind::SquaredError, &u, &Targets::Classes(vec![0])).is_err());
    }

    #[test]
    fn accuracy_counts_argmax() {
        let u = Tensor::from_rows(&[&[0.1, 0.9], &[0.8, 0.2]]).unwrap();
        assert_eq!(accuracy(&u, &[1, 0]), 1.0);
        assert_eq!(accuracy(&u, &[0, 0]), 0.5);
    }
}
