use super::{finite, require_matrix, Result, Tensor, TensorError};
use crate::flops;

/// Absolute symmetry tolerance, scaled by the largest entry when that
/// exceeds one.
const SYMMETRY_TOL: f64 = 1e-12;

fn check_symmetric(a: &Tensor) -> Result<()> {
    require_matrix("symmetric", a)?;
    let n = a.rows();
    if a.cols() != n {
        return Err(TensorError::Shape {
            op: "symmetric",
            expected: "a square matrix".into(),
            found: format!("{:?}", a.shape()),
        });
    }
    let tol = SYMMETRY_TOL * a.max_abs().max(1.0);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if worst > tol {
        return Err(TensorError::NotSymmetric { asymmetry: worst });
    }
    Ok(())
}

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
///
/// Factoring costs `(n³ − n)/6` multiply-adds and each right-hand side costs
/// `n² + n` (two triangular sweeps, divisions included).
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Tensor) -> Result<Self> {
        check_symmetric(a)?;
        let n = a.rows();
        let mut l = vec![0.0; n * n];
        let mut work = 0u64;
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            work += j as u64;
            if !d.is_finite() || d <= 0.0 {
                flops::add(work);
                return Err(TensorError::Indefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
            work += (j * (n - j - 1)) as u64;
        }
        flops::add(work);
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// The factor `L` as a matrix.
    pub fn lower(&self) -> Tensor {
        Tensor::from_parts(vec![self.n, self.n], self.l.clone())
    }

    /// Solves `A·x = b` in place for a single right-hand side.
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<()> {
        let n = self.n;
        if b.len() != n {
            return Err(TensorError::Shape {
                op: "cholesky solve",
                expected: format!("{}", n),
                found: format!("{}", b.len()),
            });
        }
        let l = &self.l;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * n + k] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
        flops::add((n * n + n) as u64);
        if b.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op: "cholesky solve" })
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }

    /// Solves `A·X = B` for a matrix of right-hand sides.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        require_matrix("cholesky solve", b)?;
        if b.rows() != self.n {
            return Err(TensorError::Shape {
                op: "cholesky solve",
                expected: format!("{} rows", self.n),
                found: format!("{} rows", b.rows()),
            });
        }
        let bt = b.transpose();
        let mut cols = bt.into_data();
        for col in cols.chunks_exact_mut(self.n.max(1)) {
            self.solve_in_place(col)?;
        }
        let xt = Tensor::from_parts(vec![b.cols(), self.n], cols);
        finite("cholesky solve", xt.transpose())
    }

    /// Explicit inverse. Only meant for small matrices and diagnostics.
    pub fn inverse(&self) -> Result<Tensor> {
        self.solve(&Tensor::identity(self.n))
    }
}

/// Solves `a·x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Cholesky::factor(a)?.solve(b)
}

/// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi
/// rotations.
pub fn sym_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m: Vec<f64> = a.data().to_vec();
    // symmetrize so rotations see an exactly symmetric matrix
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    let total: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..i {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() <= 1e-17 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    Ok(eig)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_eig_min(a: &Tensor) -> Result<f64> {
    let eig = sym_eigenvalues(a)?;
    eig.first().copied().ok_or_else(|| TensorError::InvalidArgument("empty matrix".into()))
}
