//! Two-dimensional FFTs over row-major buffers.

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

/// Planned 2D transform of a fixed `rows × cols` shape. Inverse transforms are unnormalized.
pub struct Fft2 {
    pub rows: usize,
    pub cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    tbuf: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft(cols, FftDirection::Forward);
        let row_inv = planner.plan_fft(cols, FftDirection::Inverse);
        let col_fwd = planner.plan_fft(rows, FftDirection::Forward);
        let col_inv = planner.plan_fft(rows, FftDirection::Inverse);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            rows,
            cols,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch: vec![Complex64::default(); scratch_len],
            tbuf: vec![Complex64::default(); rows * cols],
        }
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.run(data, true);
    }

    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    /// Inverse transform that only finishes the first `h` output rows; the rest is left partial.
    pub fn inverse_top_rows(&mut self, data: &mut [Complex64], h: usize) {
        assert_eq!(data.len(), self.rows * self.cols, "buffer does not match FFT shape");
        assert!(h <= self.rows);
        transpose(data, &mut self.tbuf, self.rows, self.cols);
        self.col_inv.process_with_scratch(&mut self.tbuf, &mut self.scratch);
        transpose(&self.tbuf, data, self.cols, self.rows);
        self.row_inv.process_with_scratch(&mut data[..h * self.cols], &mut self.scratch);
    }

    fn run(&mut self, data: &mut [Complex64], fwd: bool) {
        assert_eq!(data.len(), self.rows * self.cols, "buffer does not match FFT shape");
        let (row, col) = if fwd {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        row.process_with_scratch(data, &mut self.scratch);
        transpose(data, &mut self.tbuf, self.rows, self.cols);
        col.process_with_scratch(&mut self.tbuf, &mut self.scratch);
        transpose(&self.tbuf, data, self.cols, self.rows);
    }
}

/// Blocked transpose of a `rows × cols` matrix into `dst` (`cols × rows`).
pub fn transpose<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    const B: usize = 32;
    for rb in (0..rows).step_by(B) {
        for cb in (0..cols).step_by(B) {
            for r in rb..(rb + B).min(rows) {
                for c in cb..(cb + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Smallest size >= n whose only prime factors are 2, 3 and 5.
pub fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for p in [2, 3, 5] {
            while k % p == 0 {
                k /= p;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}

/// Swaps half-planes so index 0 moves to the centre (`n/2`).
pub fn fftshift<T: Copy>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for r in 0..rows {
        let rr = (r + rows / 2) % rows;
        for c in 0..cols {
            let cc = (c + cols / 2) % cols;
            out[rr * cols + cc] = data[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_direct_dft() {
        let (rows, cols) = (6, 10);
        let input: Vec<Complex64> = (0..rows * cols)
            .map(|k| Complex64::new((k as f64 * 0.37).sin(), (k as f64 * 1.3).cos()))
            .collect();
        let mut data = input.clone();
        let mut f = Fft2::new(rows, cols);
        f.forward(&mut data);
        for (u, v) in [(0, 0), (1, 3), (5, 9), (2, 7)] {
            let mut acc = Complex64::default();
            for r in 0..rows {
                for c in 0..cols {
                    let ph = -2.0 * std::f64::consts::PI
                        * (u as f64 * r as f64 / rows as f64 + v as f64 * c as f64 / cols as f64);
                    acc += input[r * cols + c] * Complex64::from_polar(1.0, ph);
                }
            }
            assert!((acc - data[u * cols + v]).norm() < 1e-10);
        }
        f.inverse(&mut data);
        for (a, b) in data.iter().zip(&input) {
            assert!((a / (rows * cols) as f64 - b).norm() < 1e-12);
        }
    }

    #[test]
    fn partial_inverse_matches_full() {
        let (rows, cols) = (8, 6);
        let input: Vec<Complex64> =
            (0..rows * cols).map(|k| Complex64::new((k as f64).cos(), (k as f64 * 0.7).sin())).collect();
        let mut f = Fft2::new(rows, cols);
        let mut full = input.clone();
        f.inverse(&mut full);
        let mut part = input;
        f.inverse_top_rows(&mut part, 3);
        for k in 0..3 * cols {
            assert!((full[k] - part[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn fast_len_smooth() {
        assert_eq!(fast_len(97), 100);
        assert_eq!(fast_len(1025), 1080);
        assert_eq!(fast_len(256), 256);
    }
}
