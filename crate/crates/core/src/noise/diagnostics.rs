//! Covariance diagnostics for coupled increments.
//!
//! The couplings are linear maps of the underlying standard normals. Feeding
//! unit vectors through a coupler recovers that map column by column, from
//! which the exact joint covariance follows without sampling.

use serde::Serialize;

use num_complex::Complex64;

use super::{fourier_basis, make_coupler, white_variance, CouplingKind, NoiseStream, NormalSource, StreamRole};
use crate::error::Result;
use crate::grid::TorusGrid;
use crate::spectral::signed_frequency;
use crate::pde::{LevelParams, SchemeWeights};
use crate::stats::MomentAccumulator;

/// Emits one unit vector, spread over consecutive blocks: the draw at global
/// position `target` is 1, every other draw is 0.
#[derive(Debug, Clone)]
pub struct ProbeSource {
    target: usize,
    offset: usize,
}

impl ProbeSource {
    pub fn new(target: usize) -> Self {
        Self { target, offset: 0 }
    }
}

impl NormalSource for ProbeSource {
    fn next_block(&mut self, out: &mut [f64]) {
        out.fill(0.0);
        if (self.offset..self.offset + out.len()).contains(&self.target) {
            out[self.target - self.offset] = 1.0;
        }
        self.offset += out.len();
    }
}

/// Matrix of the coupled-increment map: rows are outputs, columns are the
/// standard normals consumed by one coarse step.
#[derive(Debug, Clone)]
pub struct CoupledLinearMap {
    /// `kappa * d * n_fine^d` rows, ordered (sub-step, component, site).
    pub fine: Vec<Vec<f64>>,
    /// `d * n_coarse^d` rows, ordered (component, site).
    pub coarse: Vec<Vec<f64>>,
    pub columns: usize,
}

/// Tiny fine/coarse pair with the time-step ratio of `kind`.
pub fn probe_levels(kind: CouplingKind, d: usize, n_fine: usize, tau_fine: f64) -> Result<(LevelParams, LevelParams)> {
    let fg = TorusGrid::new(d, n_fine)?;
    let cg = fg.coarsen(kind.space_ratio())?;
    let tau_c = tau_fine * kind.time_ratio() as f64;
    let w = SchemeWeights::new(0.5, 0.5)?;
    Ok((
        LevelParams::new(1, fg, tau_fine, w, tau_c)?,
        LevelParams::new(0, cg, tau_c, w, tau_c)?,
    ))
}

pub fn coupled_linear_map(kind: CouplingKind, fine: &LevelParams, coarse: &LevelParams) -> Result<CoupledLinearMap> {
    let kappa = kind.time_ratio();
    let d = fine.grid.d();
    let columns = kappa * d * fine.grid.len();
    let fine_rows = columns;
    let coarse_rows = d * coarse.grid.len();
    let mut fine_m = vec![vec![0.0; columns]; fine_rows];
    let mut coarse_m = vec![vec![0.0; columns]; coarse_rows];
    for j in 0..columns {
        let mut coupler = make_coupler(kind, fine, coarse)?;
        let mut probe = ProbeSource::new(j);
        for step in 0..kappa {
            let (f, c) = coupler.advance(&mut probe);
            for r in 0..d {
                for (site, &v) in f.component(r).values().iter().enumerate() {
                    fine_m[(step * d + r) * fine.grid.len() + site][j] = v;
                }
            }
            if let Some(c) = c {
                for r in 0..d {
                    for (site, &v) in c.component(r).values().iter().enumerate() {
                        coarse_m[r * coarse.grid.len() + site][j] = v;
                    }
                }
            }
        }
    }
    Ok(CoupledLinearMap {
        fine: fine_m,
        coarse: coarse_m,
        columns,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest deviation of `A A^T` from `target * I`, relative to `target`.
pub fn max_covariance_error(rows: &[Vec<f64>], target: f64) -> f64 {
    let mut worst = 0.0f64;
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate().skip(i) {
            let expect = if i == j { target } else { 0.0 };
            worst = worst.max((dot(a, b) - expect).abs() / target);
        }
    }
    worst
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceReport {
    pub coupling: &'static str,
    pub d: usize,
    pub n_fine: usize,
    pub n_coarse: usize,
    /// exact relative covariance error of the fine increments
    pub fine_error: f64,
    /// exact relative covariance error of the coarse increment
    pub coarse_error: f64,
    /// correlation of each coarse entry with the fine draws it is built from
    pub min_coarse_fine_correlation: f64,
}

/// Exact covariance check of one coupling on a tiny grid.
pub fn exact_covariance_report(kind: CouplingKind, d: usize, n_fine: usize) -> Result<CovarianceReport> {
    let (fine, coarse) = probe_levels(kind, d, n_fine, 0.01)?;
    let map = coupled_linear_map(kind, &fine, &coarse)?;
    let fine_error = max_covariance_error(&map.fine, white_variance(&fine));
    let coarse_error = max_covariance_error(&map.coarse, white_variance(&coarse));
    // the coarse increment is a linear function of the fine ones; its
    // correlation with the best linear combination of them is 1
    let min_corr = map
        .coarse
        .iter()
        .map(|row| {
            let proj: f64 = map.fine.iter().map(|f| dot(f, row).powi(2)).sum::<f64>()
                / white_variance(&fine);
            (proj / dot(row, row)).sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    Ok(CovarianceReport {
        coupling: kind.name(),
        d,
        n_fine,
        n_coarse: coarse.grid.n(),
        fine_error,
        coarse_error,
        min_coarse_fine_correlation: min_corr,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SampledReport {
    pub coupling: &'static str,
    pub d: usize,
    pub n_fine: usize,
    pub samples: usize,
    pub fine_variance_ratio: f64,
    pub coarse_variance_ratio: f64,
    /// largest |correlation| between distinct sites, in standard errors
    pub max_cross_z: f64,
}

/// Sampling check of per-site variances and cross-site correlation.
pub fn sampled_report(kind: CouplingKind, d: usize, n_fine: usize, coarse_steps: usize, seed: u64) -> Result<SampledReport> {
    let (fine, coarse) = probe_levels(kind, d, n_fine, 0.01)?;
    let mut coupler = make_coupler(kind, &fine, &coarse)?;
    let mut stream = NoiseStream::new(seed, 1, 0, StreamRole::Coupled);
    let mut fine_acc = MomentAccumulator::new();
    let mut coarse_acc = MomentAccumulator::new();
    let mut cross = MomentAccumulator::new();
    for _ in 0..coarse_steps {
        loop {
            let (f, c) = coupler.advance(&mut stream);
            let v = f.component(0).values();
            for &x in v {
                fine_acc.push(x);
            }
            cross.push(v[0] * v[1] / white_variance(&fine));
            if let Some(c) = c {
                for r in 0..d {
                    for &x in c.component(r).values() {
                        coarse_acc.push(x);
                    }
                }
                break;
            }
        }
    }
    Ok(SampledReport {
        coupling: kind.name(),
        d,
        n_fine,
        samples: coarse_steps,
        fine_variance_ratio: fine_acc.variance() / white_variance(&fine),
        coarse_variance_ratio: coarse_acc.variance() / white_variance(&coarse),
        max_cross_z: (cross.mean() / cross.standard_error()).abs(),
    })
}

/// Largest deviation of the grid Fourier basis from an orthonormal, complete
/// system: `h^d sum_x F_xi(x) conj F_eta(x) = delta` and
/// `h^d sum_xi F_xi(x) conj F_xi(y) = delta` (the second is Parseval's
/// identity on the grid).
pub fn parseval_error(d: usize, n: usize) -> Result<f64> {
    let grid = TorusGrid::new(d, n)?;
    let len = grid.len();
    let mut mi = vec![0usize; d];
    let freqs: Vec<Vec<i64>> = (0..len)
        .map(|k| {
            grid.multi_index(k, &mut mi);
            mi.iter().map(|&c| signed_frequency(c, n)).collect()
        })
        .collect();
    let points: Vec<Vec<f64>> = (0..len).map(|k| grid.point(k)).collect();
    let table: Vec<Vec<Complex64>> = freqs
        .iter()
        .map(|xi| points.iter().map(|x| fourier_basis(xi, x)).collect())
        .collect();
    let vol = grid.cell_volume();
    let mut worst = 0.0f64;
    for a in 0..len {
        for b in a..len {
            let target = if a == b { 1.0 } else { 0.0 };
            let over_points: Complex64 = (0..len).map(|x| table[a][x] * table[b][x].conj()).sum();
            let over_freqs: Complex64 = (0..len).map(|k| table[k][a] * table[k][b].conj()).sum();
            worst = worst
                .max((over_points * vol - target).norm())
                .max((over_freqs * vol - target).norm());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parseval_small_grids() {
        for (d, n) in [(1, 4), (1, 6), (2, 4), (2, 6)] {
            assert!(parseval_error(d, n).unwrap() < 1e-12);
        }
    }

    #[test]
    fn probe_source_spans_blocks() {
        let mut p = ProbeSource::new(5);
        let mut a = [0.0; 4];
        p.next_block(&mut a);
        assert_eq!(a, [0.0; 4]);
        p.next_block(&mut a);
        assert_eq!(a, [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn nn_map_matches_hand_built_aggregation() {
        // d = 1, n_fine = 4: coarse y aggregates fine sites {2y, 2y+1} over 4 sub-steps
        let (fine, coarse) = probe_levels(CouplingKind::NearestNeighbour, 1, 4, 0.01).unwrap();
        let map = coupled_linear_map(CouplingKind::NearestNeighbour, &fine, &coarse).unwrap();
        let sf = white_variance(&fine).sqrt();
        for (row, coarse_row) in map.coarse.iter().enumerate() {
            for j in 0..map.columns {
                let (step_site, site) = (j / 4, j % 4);
                let _ = step_site;
                let expect = if site / 2 == row { sf * 0.5 } else { 0.0 };
                assert!((coarse_row[j] - expect).abs() < 1e-15);
            }
        }
        for (i, row) in map.fine.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let expect = if i == j { sf } else { 0.0 };
                assert!((v - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_reports_small_grids() {
        for (kind, n) in [
            (CouplingKind::NearestNeighbour, 4),
            (CouplingKind::NearestNeighbour, 6),
            (CouplingKind::Fourier, 6),
            (CouplingKind::Fourier, 12),
        ] {
            let r = exact_covariance_report(kind, 1, n).unwrap();
            assert!(r.fine_error < 1e-12, "{r:?}");
            assert!(r.coarse_error < 1e-12, "{r:?}");
            assert!((r.min_coarse_fine_correlation - 1.0).abs() < 1e-12, "{r:?}");
        }
        for (kind, n) in [(CouplingKind::NearestNeighbour, 4), (CouplingKind::Fourier, 6)] {
            let r = exact_covariance_report(kind, 2, n).unwrap();
            assert!(r.fine_error < 1e-12 && r.coarse_error < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn sampled_reports_n16() {
        for (kind, n) in [(CouplingKind::NearestNeighbour, 16), (CouplingKind::Fourier, 18)] {
            let r = sampled_report(kind, 2, n, 2_000, 1).unwrap();
            assert!((r.fine_variance_ratio - 1.0).abs() < 0.02, "{r:?}");
            assert!((r.coarse_variance_ratio - 1.0).abs() < 0.05, "{r:?}");
            assert!(r.max_cross_z < 4.0, "{r:?}");
        }
    }
}
