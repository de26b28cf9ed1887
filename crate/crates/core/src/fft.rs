//! Two-dimensional FFTs on row-major grids, built from cached 1-D plans.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub type C64 = Complex<f64>;

/// Planned forward/inverse transforms for an `h x w` grid. Inverse transforms
/// are unnormalised; callers divide by `h * w` where needed.
#[derive(Clone)]
pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.h, self.w)
    }
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn run(&self, data: &mut [C64], inverse: bool) {
        assert_eq!(data.len(), self.h * self.w, "fft2: buffer has wrong length");
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(data);
        let mut t = transpose(data, self.h, self.w);
        cols.process(&mut t);
        let back = transpose(&t, self.w, self.h);
        data.copy_from_slice(&back);
    }

    pub fn forward(&self, data: &mut [C64]) {
        self.run(data, false);
    }

    pub fn inverse(&self, data: &mut [C64]) {
        self.run(data, true);
    }

    pub fn forward_real(&self, data: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = data.iter().map(|&v| C64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Normalised inverse transform.
    pub fn inverse_normalized(&self, data: &mut [C64]) {
        self.inverse(data);
        let s = 1.0 / (self.h * self.w) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

fn transpose(data: &[C64], h: usize, w: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); h * w];
    for i in 0..h {
        for j in 0..w {
            out[j * h + i] = data[i * w + j];
        }
    }
    out
}

/// Angular frequency of FFT bin `k` on a length-`n` axis, in `(-pi, pi]`.
pub fn frequency(k: usize, n: usize) -> f64 {
    let k = k as i64;
    let n_i = n as i64;
    let signed = if 2 * k > n_i { k - n_i } else { k };
    2.0 * std::f64::consts::PI * signed as f64 / n as f64
}
