//! Closed-form multiply-add counts. Every figure here equals what the
//! instrumented routines add to [`crate::flops`] for the same shapes.
//! Dimensions include the bias feature when the layer has one.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDims {
    Dense {
        d_in: usize,
        d_out: usize,
    },
    /// `spatial = h_out·w_out`, `patch = c_in·d·d (+1 with bias)`.
    Conv {
        spatial: usize,
        patch: usize,
        c_out: usize,
    },
}

impl LayerDims {
    pub fn param_count(&self) -> u64 {
        match *self {
            LayerDims::Dense { d_in, d_out } => (d_in * d_out) as u64,
            LayerDims::Conv { patch, c_out, .. } => (patch * c_out) as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopReport {
    /// Covariance factors and their reduction to the Gram.
    pub covfactor: u64,
    /// Cholesky factorization of the damped `m × m` Gram.
    pub factorization: u64,
    /// `covfactor + factorization`.
    pub tengrad_curvature: u64,
    /// Gram built from explicit per-sample gradients.
    pub explicit_gram: u64,
    pub jvp: u64,
    pub solve: u64,
    pub vjp: u64,
    /// Final `(1/α)(g − ·/m)` combination.
    pub combine: u64,
    /// `jvp + solve + vjp + combine`.
    pub tengrad_step: u64,
    /// Stored values: cached inputs, cached derivatives, `m × m` factor.
    pub tengrad_storage: u64,
}

pub fn flop_report(dims: LayerDims, m: usize) -> FlopReport {
    let m = m as u64;
    let m2 = m * m;
    let factorization = (m * m2 - m) / 6;
    let solve = m2 + m;
    let combine = dims.param_count();
    let (covfactor, explicit_gram, jvp, vjp, tengrad_storage) = match dims {
        LayerDims::Dense { d_in, d_out } => {
            let (di, d_o) = (d_in as u64, d_out as u64);
            (
                m2 * (di + d_o + 1),
                m * di * d_o + m2 * di * d_o,
                m * di * d_o + m * d_o,
                m * d_o + m * di * d_o,
                m * di + m * d_o + m2,
            )
        }
        LayerDims::Conv { spatial, patch, c_out } => {
            let (s, f, c) = (spatial as u64, patch as u64, c_out as u64);
            (
                m2 * s * s * (f + c + 1),
                m * s * f * c + m2 * f * c,
                m * s * c * f + m * s * f,
                m * s * c + m * s * f * c,
                m * s * f + m * s * c + m2,
            )
        }
    };
    FlopReport {
        covfactor,
        factorization,
        tengrad_curvature: covfactor + factorization,
        explicit_gram,
        jvp,
        solve,
        vjp,
        combine,
        tengrad_step: jvp + solve + vjp + combine,
        tengrad_storage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_batch() {
        let r = flop_report(LayerDims::Dense { d_in: 7, d_out: 3 }, 1);
        assert_eq!(r.covfactor, 7 + 3 + 1);
        assert_eq!(r.factorization, 0);
    }

    #[test]
    fn large_dense_ratio() {
        let r = flop_report(LayerDims::Dense { d_in: 1024, d_out: 1024 }, 128);
        assert_eq!(r.covfactor, 128 * 128 * 2049);
        assert!(r.explicit_gram / r.tengrad_curvature >= 500);
    }
}
