//! Uniform periodic lattices on the d-torus `[-pi, pi)^d` and the second-order
//! difference operators used by the scheme.
//!
//! Fields are stored as flat vectors in lexicographic order with axis 0
//! fastest: the point with per-axis indices `(k_0, ..., k_{d-1})` lives at
//! `k_0 + k_1 n + ... + k_{d-1} n^{d-1}`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{DkError, Result};

pub mod io;

/// Periodic uniform lattice with `n` points per axis in `d` dimensions.
///
/// Points are `origin + k h` with `origin = -pi + offset`. The offset is zero
/// except for the half-shifted coarse grids of the symmetric nearest-neighbour
/// coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    d: usize,
    n: usize,
    h: f64,
    offset: f64,
}

impl TorusGrid {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if d < 1 {
            return Err(DkError::InvalidGrid(format!("dimension must be >= 1, got {d}")));
        }
        if n < 2 {
            return Err(DkError::InvalidGrid(format!(
                "need at least 2 points per axis, got {n}"
            )));
        }
        let total = (n as u128).checked_pow(d as u32);
        if total.map_or(true, |t| t > usize::MAX as u128 / 8) {
            return Err(DkError::InvalidGrid(format!("{n}^{d} points does not fit in memory")));
        }
        Ok(Self {
            d,
            n,
            h: 2.0 * PI / n as f64,
            offset: 0.0,
        })
    }

    /// Same lattice translated by `offset` along every axis.
    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    #[inline]
    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Number of lattice points, `n^d`.
    #[inline]
    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// `h^d`, the weight of one point in the discrete inner product.
    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.d as i32)
    }

    #[inline]
    pub fn origin(&self) -> f64 {
        -PI + self.offset
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow(axis as u32)
    }

    /// Per-axis indices of a flat index.
    pub fn multi_index(&self, mut idx: usize, out: &mut [usize]) {
        for slot in out.iter_mut().take(self.d) {
            *slot = idx % self.n;
            idx /= self.n;
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .take(self.d)
            .rev()
            .fold(0, |acc, &k| acc * self.n + (k % self.n))
    }

    /// Coordinates of the point with flat index `idx`.
    pub fn coords(&self, mut idx: usize, out: &mut [f64]) {
        let origin = self.origin();
        for slot in out.iter_mut().take(self.d) {
            *slot = origin + (idx % self.n) as f64 * self.h;
            idx /= self.n;
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.coords(idx, &mut out);
        out
    }

    /// Grid with `n / ratio` points per axis sharing this grid's origin.
    pub fn coarsen(&self, ratio: usize) -> Result<Self> {
        if ratio == 0 || self.n % ratio != 0 {
            return Err(DkError::RatioMismatch(format!(
                "{} points per axis cannot be coarsened by {ratio}",
                self.n
            )));
        }
        Ok(TorusGrid::new(self.d, self.n / ratio)?.with_offset(self.offset))
    }

    /// Grid with `n * ratio` points per axis sharing this grid's origin.
    pub fn refine(&self, ratio: usize) -> Result<Self> {
        Ok(TorusGrid::new(self.d, self.n * ratio)?.with_offset(self.offset))
    }

    pub(crate) fn check_same(&self, other: &TorusGrid) -> Result<()> {
        if self.d != other.d || self.n != other.n || self.offset != other.offset {
            return Err(DkError::GridMismatch(format!(
                "d={} n={} offset={} vs d={} n={} offset={}",
                self.d, self.n, self.offset, other.d, other.n, other.offset
            )));
        }
        Ok(())
    }
}

/// Visits every point in contiguous runs: `f(start, plus, minus, len)` covers
/// the points `start..start + len`, whose periodic neighbours along `axis` are
/// `plus..plus + len` and `minus..minus + len`.
#[inline]
pub(crate) fn for_each_run_along_axis(
    grid: &TorusGrid,
    axis: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let n = grid.n;
    let stride = grid.stride(axis);
    let block = stride * n;
    let blocks = grid.len() / block;
    if stride == 1 {
        for b in 0..blocks {
            let base = b * n;
            f(base, base + 1, base + n - 1, 1);
            f(base + 1, base + 2, base, n - 2);
            f(base + n - 1, base, base + n - 2, 1);
        }
        return;
    }
    for b in 0..blocks {
        let base = b * block;
        for k in 0..n {
            let kp = if k + 1 == n { 0 } else { k + 1 };
            let km = if k == 0 { n - 1 } else { k - 1 };
            f(base + k * stride, base + kp * stride, base + km * stride, stride);
        }
    }
}

/// Scalar grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(DkError::GridMismatch(format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    #[inline]
    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `(f, 1)_h`.
    pub fn mass(&self) -> f64 {
        self.grid.cell_volume() * self.values.iter().sum::<f64>()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_x |f(x) - g(x)|`.
    pub fn sup_distance(&self, other: &Field) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn scaled(&self, c: f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.grid.check_same(&other.grid)?;
        Ok(Field {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.grid.check_same(&other.grid)?;
        Ok(Field {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        })
    }
}

/// Grid vector field, one [`Field`] per canonical direction.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: TorusGrid,
    components: Vec<Field>,
}

impl VectorField {
    pub fn new(components: Vec<Field>) -> Result<Self> {
        let grid = *components
            .first()
            .ok_or_else(|| DkError::GridMismatch("vector field needs components".into()))?
            .grid();
        if components.len() != grid.d() {
            return Err(DkError::GridMismatch(format!(
                "{} components on a {}-dimensional grid",
                components.len(),
                grid.d()
            )));
        }
        for c in &components {
            grid.check_same(c.grid())?;
        }
        Ok(Self { grid, components })
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self {
            grid,
            components: (0..grid.d()).map(|_| Field::zeros(grid)).collect(),
        }
    }

    #[inline]
    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    #[inline]
    pub fn components(&self) -> &[Field] {
        &self.components
    }

    #[inline]
    pub fn component(&self, r: usize) -> &Field {
        &self.components[r]
    }

    #[inline]
    pub fn component_mut(&mut self, r: usize) -> &mut Field {
        &mut self.components[r]
    }

    /// `sum_r (u_r, v_r)_h`.
    pub fn inner(&self, other: &VectorField) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| inner(a, b))
            .sum()
    }
}

pub fn make_grid(d: usize, n: usize) -> Result<TorusGrid> {
    TorusGrid::new(d, n)
}

/// Discrete inner product `h^d sum_x f(x) g(x)`.
pub fn inner(f: &Field, g: &Field) -> Result<f64> {
    f.grid.check_same(&g.grid)?;
    let s: f64 = f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum();
    Ok(f.grid.cell_volume() * s)
}

/// Pointwise interpolation `I_h f`.
pub fn interpolate(grid: &TorusGrid, f: impl Fn(&[f64]) -> f64) -> Field {
    let mut x = vec![0.0; grid.d()];
    let values = (0..grid.len())
        .map(|idx| {
            grid.coords(idx, &mut x);
            f(&x)
        })
        .collect();
    Field { grid: *grid, values }
}

pub(crate) fn laplacian_into(grid: &TorusGrid, src: &[f64], dst: &mut [f64]) {
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let diag = 2.0 * grid.d() as f64;
    for (o, s) in dst.iter_mut().zip(src) {
        *o = -diag * s;
    }
    for axis in 0..grid.d() {
        for_each_run_along_axis(grid, axis, |i, p, m, len| {
            for ((o, a), b) in dst[i..i + len].iter_mut().zip(&src[p..p + len]).zip(&src[m..m + len]) {
                *o += a + b;
            }
        });
    }
    for o in dst.iter_mut() {
        *o *= inv_h2;
    }
}

/// Five-point (in 2d) periodic Laplacian `(-2d f(x) + sum_{y~x} f(y)) / h^2`.
pub fn laplacian(f: &Field) -> Field {
    let mut out = vec![0.0; f.values.len()];
    laplacian_into(&f.grid, &f.values, &mut out);
    Field { grid: f.grid, values: out }
}

/// Central-difference divergence `sum_r ([v]_r(x + h f_r) - [v]_r(x - h f_r)) / 2h`.
pub fn divergence(v: &VectorField) -> Field {
    let grid = v.grid;
    let mut out = vec![0.0; grid.len()];
    let inv_2h = 0.5 / grid.h();
    for (axis, comp) in v.components.iter().enumerate() {
        let c = comp.values();
        for_each_run_along_axis(&grid, axis, |i, p, m, len| {
            for ((o, a), b) in out[i..i + len].iter_mut().zip(&c[p..p + len]).zip(&c[m..m + len]) {
                *o += (a - b) * inv_2h;
            }
        });
    }
    Field { grid, values: out }
}

/// Central-difference gradient; minus the adjoint of [`divergence`] in `(.,.)_h`.
pub fn gradient(f: &Field) -> VectorField {
    let grid = f.grid;
    let inv_2h = 0.5 / grid.h();
    let components = (0..grid.d())
        .map(|axis| {
            let mut out = vec![0.0; grid.len()];
            let v = &f.values;
            for_each_run_along_axis(&grid, axis, |i, p, m, len| {
                for ((o, a), b) in out[i..i + len].iter_mut().zip(&v[p..p + len]).zip(&v[m..m + len]) {
                    *o = (a - b) * inv_2h;
                }
            });
            Field { grid, values: out }
        })
        .collect();
    VectorField { grid, components }
}

/// `|grad_h f|^2` pointwise.
pub fn gradient_norm_sq(f: &Field) -> Field {
    let grid = f.grid;
    let inv_2h = 0.5 / grid.h();
    let mut out = vec![0.0; grid.len()];
    for axis in 0..grid.d() {
        let v = &f.values;
        for_each_run_along_axis(&grid, axis, |i, p, m, len| {
            for ((o, a), b) in out[i..i + len].iter_mut().zip(&v[p..p + len]).zip(&v[m..m + len]) {
                let g = (a - b) * inv_2h;
                *o += g * g;
            }
        });
    }
    Field { grid, values: out }
}
