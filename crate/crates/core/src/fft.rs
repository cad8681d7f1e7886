//! Internal 2D FFT engine shared by speckle synthesis and propagation.
//!
//! Plans are created once per grid and shared across threads; each thread
//! owns a [`FftWorkspace`] so the hot loop never allocates.

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::Real;

/// Planned 2D transform for a fixed `nx` x `ny` grid.
///
/// Data layout is row-major with `ny` rows of `nx` samples: index
/// `j * nx + i` holds sample `(i, j)`. Forward transforms are unscaled;
/// inverse transforms carry the `1/(nx*ny)` factor.
pub(crate) struct Fft2d<T: Real> {
    nx: usize,
    ny: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scratch_len: usize,
}

/// Per-thread scratch buffers for the planned transforms. Obtain one from
/// the object that will use it (generator, propagator, arm chain) and reuse
/// it across realizations; contents are opaque.
pub struct FftWorkspace<T: Real> {
    aux: Vec<Complex<T>>,
    scratch: Vec<Complex<T>>,
}

impl<T: Real> Fft2d<T> {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(nx);
        let row_inv = planner.plan_fft_inverse(nx);
        let col_fwd = planner.plan_fft_forward(ny);
        let col_inv = planner.plan_fft_inverse(ny);
        let scratch_len = row_fwd
            .get_inplace_scratch_len()
            .max(row_inv.get_inplace_scratch_len())
            .max(col_fwd.get_inplace_scratch_len())
            .max(col_inv.get_inplace_scratch_len());
        Self { nx, ny, row_fwd, row_inv, col_fwd, col_inv, scratch_len }
    }

    pub fn workspace(&self) -> FftWorkspace<T> {
        FftWorkspace {
            aux: vec![Complex::new(T::zero(), T::zero()); self.nx * self.ny],
            scratch: vec![Complex::new(T::zero(), T::zero()); self.scratch_len],
        }
    }

    pub fn forward(&self, data: &mut [Complex<T>], ws: &mut FftWorkspace<T>) {
        self.pass(data, ws, true);
    }

    pub fn inverse(&self, data: &mut [Complex<T>], ws: &mut FftWorkspace<T>) {
        self.pass(data, ws, false);
        let norm = T::one() / T::of_usize(self.nx * self.ny);
        for v in data.iter_mut() {
            *v = v.scale(norm);
        }
    }

    fn pass(&self, data: &mut [Complex<T>], ws: &mut FftWorkspace<T>, forward: bool) {
        assert_eq!(data.len(), self.nx * self.ny, "field length matches grid");
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        // All ny rows in one call: rustfft treats the buffer as contiguous
        // transforms of length nx.
        if self.nx > 1 {
            row.process_with_scratch(data, &mut ws.scratch);
        }
        if self.ny > 1 {
            transpose(data, &mut ws.aux, self.nx, self.ny);
            col.process_with_scratch(&mut ws.aux, &mut ws.scratch);
            transpose(&ws.aux, data, self.ny, self.nx);
        }
    }
}

/// Cache-blocked out-of-place transpose of an `ny` x `nx` row-major matrix
/// into `nx` x `ny` row-major.
fn transpose<T: Copy>(src: &[T], dst: &mut [T], nx: usize, ny: usize) {
    const BLOCK: usize = 32;
    for jb in (0..ny).step_by(BLOCK) {
        for ib in (0..nx).step_by(BLOCK) {
            for j in jb..(jb + BLOCK).min(ny) {
                let row = j * nx;
                for i in ib..(ib + BLOCK).min(nx) {
                    dst[i * ny + j] = src[row + i];
                }
            }
        }
    }
}

/// FFT sample frequencies (angular, rad/m) in standard unshifted order.
pub(crate) fn angular_frequencies<T: Real>(n: usize, pitch: T) -> Vec<T> {
    let two_pi = T::of_f64(2.0) * T::PI();
    let dk = two_pi / (T::of_usize(n) * pitch);
    (0..n)
        .map(|i| {
            let signed = if i <= (n - 1) / 2 { i as isize } else { i as isize - n as isize };
            T::of_f64(signed as f64) * dk
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(nx: usize, ny: usize) {
        let plan = Fft2d::<f64>::new(nx, ny);
        let mut ws = plan.workspace();
        let orig: Vec<Complex<f64>> = (0..nx * ny)
            .map(|k| Complex::new((k as f64 * 0.7).sin(), (k as f64 * 1.3).cos()))
            .collect();
        let mut data = orig.clone();
        plan.forward(&mut data, &mut ws);
        plan.inverse(&mut data, &mut ws);
        let max_err = data
            .iter()
            .zip(&orig)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-12, "roundtrip error {max_err} for {nx}x{ny}");
    }

    #[test]
    fn roundtrip_square() {
        roundtrip(64, 64);
    }

    #[test]
    fn roundtrip_rectangular() {
        roundtrip(32, 8);
    }

    #[test]
    fn roundtrip_quasi_1d() {
        roundtrip(128, 1);
    }

    #[test]
    fn parseval_holds() {
        let plan = Fft2d::<f64>::new(32, 16);
        let mut ws = plan.workspace();
        let orig: Vec<Complex<f64>> = (0..32 * 16)
            .map(|k| Complex::new((k as f64).sin(), (k as f64 * 0.31).cos()))
            .collect();
        let mut data = orig.clone();
        plan.forward(&mut data, &mut ws);
        let space: f64 = orig.iter().map(|v| v.norm_sqr()).sum();
        let freq: f64 = data.iter().map(|v| v.norm_sqr()).sum();
        assert!((freq / (32.0 * 16.0) - space).abs() < 1e-9 * space);
    }

    #[test]
    fn frequencies_match_fftfreq_convention() {
        let k = angular_frequencies::<f64>(4, 0.5);
        let dk = std::f64::consts::PI; // 2*pi / (4 * 0.5)
        assert!((k[0] - 0.0).abs() < 1e-15);
        assert!((k[1] - dk).abs() < 1e-12);
        assert!((k[2] + 2.0 * dk).abs() < 1e-12);
        assert!((k[3] + dk).abs() < 1e-12);
    }
}
