//! Multidimensional discrete Fourier transforms on a [`TorusGrid`] layout.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::TorusGrid;

/// Signed frequency of DFT index `k` on an `n`-point axis, in `[-n/2, n/2)`
/// for even `n`.
#[inline]
pub fn signed_frequency(k: usize, n: usize) -> i64 {
    if 2 * k < n {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// DFT index of signed frequency `xi` on an `n`-point axis.
#[inline]
pub fn frequency_index(xi: i64, n: usize) -> usize {
    xi.rem_euclid(n as i64) as usize
}

/// Eigenvalue of the periodic five-point Laplacian for DFT multi-index `k`:
/// `-sum_j (2 - 2 cos(2 pi k_j / n)) / h^2`.
pub fn laplacian_symbol(grid: &TorusGrid, multi: &[usize]) -> f64 {
    let h2 = grid.h() * grid.h();
    let n = grid.n() as f64;
    -multi
        .iter()
        .map(|&k| 2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / n).cos())
        .sum::<f64>()
        / h2
}

/// Forward/inverse transform pair with private scratch space. Not shared
/// between threads; each worker builds its own.
pub struct SpectralPlan {
    grid: TorusGrid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    line: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl std::fmt::Debug for SpectralPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralPlan").field("grid", &self.grid).finish()
    }
}

impl Clone for SpectralPlan {
    fn clone(&self) -> Self {
        Self {
            grid: self.grid,
            forward: Arc::clone(&self.forward),
            inverse: Arc::clone(&self.inverse),
            line: vec![Complex64::default(); self.line.len()],
            scratch: vec![Complex64::default(); self.scratch.len()],
        }
    }
}

impl SpectralPlan {
    pub fn new(grid: &TorusGrid) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(grid.n());
        let inverse = planner.plan_fft_inverse(grid.n());
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Self {
            grid: *grid,
            forward,
            inverse,
            line: vec![Complex64::default(); grid.len() / grid.n() * grid.n()],
            scratch: vec![Complex64::default(); scratch_len],
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    /// In-place unnormalized forward DFT (`exp(-2 pi i jk/n)` kernel).
    pub fn forward(&mut self, data: &mut [Complex64]) {
        let fft = Arc::clone(&self.forward);
        self.transform(data, fft.as_ref());
    }

    /// In-place unnormalized inverse DFT (`exp(+2 pi i jk/n)` kernel).
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        let fft = Arc::clone(&self.inverse);
        self.transform(data, fft.as_ref());
    }

    fn transform(&mut self, data: &mut [Complex64], fft: &dyn Fft<f64>) {
        assert_eq!(data.len(), self.grid.len());
        let n = self.grid.n();
        // axis 0 is contiguous
        fft.process_with_scratch(data, &mut self.scratch);
        for axis in 1..self.grid.d() {
            let stride = self.grid.stride(axis);
            let block = stride * n;
            let lines = data.len() / n;
            // gather every line along `axis` into contiguous storage
            let mut l = 0;
            for b in 0..data.len() / block {
                for i in 0..stride {
                    let start = b * block + i;
                    for k in 0..n {
                        self.line[l * n + k] = data[start + k * stride];
                    }
                    l += 1;
                }
            }
            debug_assert_eq!(l, lines);
            fft.process_with_scratch(&mut self.line, &mut self.scratch);
            let mut l = 0;
            for b in 0..data.len() / block {
                for i in 0..stride {
                    let start = b * block + i;
                    for k in 0..n {
                        data[start + k * stride] = self.line[l * n + k];
                    }
                    l += 1;
                }
            }
        }
    }
}
