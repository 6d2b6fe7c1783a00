//! Unitary 2D Fourier transforms on row-major complex buffers.
//!
//! Both directions carry a `1/sqrt(h*w)` factor, so `ifft2(fft2(x)) == x`
//! and Parseval holds without extra bookkeeping. Frequencies are kept in
//! standard FFT order (DC at index 0); [`signed_index`] maps a bin to its
//! signed frequency index.

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

/// Cached row/column plans for one `height x width` grid.
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft(width, FftDirection::Forward),
            row_inv: planner.plan_fft(width, FftDirection::Inverse),
            col_fwd: planner.plan_fft(height, FftDirection::Forward),
            col_inv: planner.plan_fft(height, FftDirection::Inverse),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, true);
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(data.len(), h * w, "buffer does not match the planned grid");
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for r in data.chunks_exact_mut(w) {
            row.process(r);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = data[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                data[y * w + x] = column[y];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

pub fn fft2(data: &mut [Complex64], height: usize, width: usize) {
    Fft2::new(height, width).forward(data);
}

pub fn ifft2(data: &mut [Complex64], height: usize, width: usize) {
    Fft2::new(height, width).inverse(data);
}

/// Forward transform of a real image.
pub fn fft2_real(values: &[f64], height: usize, width: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, height, width);
    buf
}

/// Signed frequency index of bin `i` on an axis of length `n`, in `[-n/2, n/2)`.
#[inline]
pub fn signed_index(i: usize, n: usize) -> isize {
    if i < n.div_ceil(2) {
        i as isize
    } else {
        i as isize - n as isize
    }
}

/// Inverse of [`signed_index`]; `None` when `k` falls outside the axis.
#[inline]
pub fn bin_of(k: isize, n: usize) -> Option<usize> {
    let half_hi = n.div_ceil(2) as isize;
    let half_lo = -((n / 2) as isize);
    if k >= half_hi || k < half_lo {
        None
    } else if k >= 0 {
        Some(k as usize)
    } else {
        Some((k + n as isize) as usize)
    }
}

/// Moves DC to the image centre (for display).
pub fn fftshift<T: Copy>(data: &[T], height: usize, width: usize) -> Vec<T> {
    let mut out = data.to_vec();
    let (sy, sx) = (height / 2, width / 2);
    for y in 0..height {
        for x in 0..width {
            out[((y + sy) % height) * width + (x + sx) % width] = data[y * width + x];
        }
    }
    out
}
