//! Dense compute kernels behind the convolution and matmul nodes.

use super::{AutodiffError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side.
    Same,
    Valid,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Same => (kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

/// Spatial geometry of a convolution from an `h x w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        in_h: usize,
        in_w: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(AutodiffError::Shape(
                "stride and kernel must be >= 1".into(),
            ));
        }
        if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return Err(AutodiffError::Shape(format!(
                "{kernel}x{kernel} kernel does not fit a padded {in_h}x{in_w} input"
            )));
        }
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Rows of the unfolded matrix.
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the unfolded matrix (`k * k * c_in`).
    pub fn cols(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    /// True when unfolding is the identity (1x1, stride 1, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds NHWC input into a `rows x cols` patch matrix, column order (ky, kx, c).
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let kc = g.cols();
    let mut cols = vec![0.0; g.rows() * kc];
    let mut row = 0;
    for n in 0..g.batch {
        let img = &x[n * g.in_h * g.in_w * g.in_c..(n + 1) * g.in_h * g.in_w * g.in_c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * kc..(row + 1) * kc];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        let off = (ky * k + kx) * g.in_c;
                        dst[off..off + g.in_c].copy_from_slice(&img[src..src + g.in_c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds a patch matrix back to NHWC.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let kc = g.cols();
    let mut x = vec![0.0; g.batch * g.in_h * g.in_w * g.in_c];
    let mut row = 0;
    for n in 0..g.batch {
        let base = n * g.in_h * g.in_w * g.in_c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * kc..(row + 1) * kc];
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * g.in_w + ix as usize) * g.in_c;
                        let off = (ky * k + kx) * g.in_c;
                        for c in 0..g.in_c {
                            x[dst + c] += src[off + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

/// `c = op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`; with `a_t` the buffer holds `a` as `k x m`. Likewise
/// `op(b)` is `k x n`, stored `n x k` when `b_t`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserted lengths cover every index reachable through the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
