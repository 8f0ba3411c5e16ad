use super::{Result, Tensor, TensorError};

/// Shape bookkeeping for a square-kernel 2-D convolution.
///
/// Unfolded patch rows are indexed by output position `oy·w_out + ox`;
/// patch columns are channel-major, then kernel row, then kernel column:
/// `c·d² + ky·d + kx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h_in: usize, w_in: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 || c_in == 0 {
            return Err(TensorError::InvalidArgument("conv: kernel, stride and channels must be positive".into()));
        }
        let (ph, pw) = (h_in + 2 * padding, w_in + 2 * padding);
        if kernel > ph || kernel > pw {
            return Err(TensorError::Shape {
                op: "unfold_conv",
                expected: format!("padded input of at least {0}x{0}", kernel),
                found: format!("{}x{}", ph, pw),
            });
        }
        Ok(Self {
            c_in,
            h_in,
            w_in,
            kernel,
            stride,
            padding,
            h_out: (ph - kernel) / stride + 1,
            w_out: (pw - kernel) / stride + 1,
        })
    }

    /// Spatial support `S = h_out·w_out`.
    pub fn spatial(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Filter support `F = c_in·d·d`.
    pub fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    /// Input pixel feeding patch column `col` at output position `(oy, ox)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, col: usize) -> Option<usize> {
        let d = self.kernel;
        let c = col / (d * d);
        let ky = (col / d) % d;
        let kx = col % d;
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.h_in as isize || x >= self.w_in as isize {
            None
        } else {
            Some((c * self.h_in + y as usize) * self.w_in + x as usize)
        }
    }
}

/// Writes the unfolded patches of one `c_in×h_in×w_in` sample into `out`,
/// which is an `S × row_stride` row-major block; columns past `F` are left
/// untouched (room for a bias column).
pub fn unfold_conv_into(geom: &ConvGeometry, input: &[f64], out: &mut [f64], row_stride: usize) {
    let f = geom.patch();
    debug_assert!(row_stride >= f);
    debug_assert_eq!(input.len(), geom.input_len());
    for oy in 0..geom.h_out {
        for ox in 0..geom.w_out {
            let row = &mut out[(oy * geom.w_out + ox) * row_stride..][..f];
            for (col, slot) in row.iter_mut().enumerate() {
                *slot = geom.source(oy, ox, col).map_or(0.0, |idx| input[idx]);
            }
        }
    }
}

/// Unfolds a `c_in×h_in×w_in` tensor into the `S × F` patch matrix, so that
/// convolution becomes `O = I · W` with `W` the `F × c_out` reshaped filters.
pub fn unfold_conv(input: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(TensorError::Shape {
            op: "unfold_conv",
            expected: "a c×h×w tensor".into(),
            found: format!("{:?}", shape),
        });
    }
    let geom = ConvGeometry::new(shape[0], shape[1], shape[2], kernel, stride, padding)?;
    let (s, f) = (geom.spatial(), geom.patch());
    let mut out = vec![0.0; s * f];
    unfold_conv_into(&geom, input.data(), &mut out, f);
    Ok(Tensor::from_parts(vec![s, f], out))
}

/// Adjoint of [`unfold_conv_into`]: accumulates an `S × row_stride` patch
/// gradient back onto the input-shaped buffer `grad_input`.
pub fn fold_conv_add(geom: &ConvGeometry, patches: &[f64], row_stride: usize, grad_input: &mut [f64]) {
    let f = geom.patch();
    for oy in 0..geom.h_out {
        for ox in 0..geom.w_out {
            let row = &patches[(oy * geom.w_out + ox) * row_stride..][..f];
            for (col, v) in row.iter().enumerate() {
                if let Some(idx) = geom.source(oy, ox, col) {
                    grad_input[idx] += v;
                }
            }
        }
    }
}
