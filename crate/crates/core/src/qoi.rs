//! The fluctuation observable and the built-in test problems.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DkError, Result};
use crate::grid::{inner, interpolate, Field, TorusGrid};
use crate::noise::NoiseStream;
use crate::pde::LevelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// `rho^0 = I_h rhobar^0`: no initial fluctuation.
    #[default]
    Deterministic,
    /// `rho^0` bins `N` i.i.d. particles drawn from `rhobar^0`; the same
    /// particles feed every level of a coupled pair.
    Particles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityKind {
    /// Bounded away from zero.
    Reg,
    /// Ultra-low density regions.
    Irreg,
    Uniform,
}

/// Phase of the bump along axis `j`: `pi/2` on even axes, `3 pi/2` on odd ones.
fn bump_exponent(x: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(j, &y)| {
            let c = if j % 2 == 0 { PI / 2.0 } else { 1.5 * PI };
            (y - c).sin().powi(2)
        })
        .sum()
}

impl DensityKind {
    fn unnormalized(&self, x: &[f64]) -> f64 {
        match self {
            DensityKind::Reg => 1.0 + (-bump_exponent(x) / 2.0).exp() / (2.0 * PI).sqrt(),
            DensityKind::Irreg => (-bump_exponent(x) / (2.0 * 0.1)).exp(),
            DensityKind::Uniform => 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DensityKind::Reg => "reg",
            DensityKind::Irreg => "irreg",
            DensityKind::Uniform => "uniform",
        }
    }
}

/// Points per axis for normalization quadrature: 1024 for d <= 2, fewer in
/// higher dimension (the periodic trapezoid rule is spectrally accurate).
fn quadrature_points(d: usize) -> usize {
    if d <= 2 {
        1024
    } else {
        ((1u64 << 22) as f64).powf(1.0 / d as f64).floor() as usize / 4 * 4
    }
}

/// Probability density on the torus, normalized to mass 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Density {
    kind: DensityKind,
    d: usize,
    z: f64,
    max: f64,
    min: f64,
}

impl Density {
    pub fn new(kind: DensityKind, d: usize) -> Result<Self> {
        let grid = TorusGrid::new(d, quadrature_points(d))?;
        let f = interpolate(&grid, |x| kind.unnormalized(x));
        let z = f.mass();
        Ok(Self {
            kind,
            d,
            z,
            max: f.max() / z,
            min: f.min() / z,
        })
    }

    pub fn kind(&self) -> DensityKind {
        self.kind
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn normalization(&self) -> f64 {
        self.z
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.kind.unnormalized(x) / self.z
    }

    /// Maximum over the quadrature lattice (attained exactly for the built-ins).
    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn min(&self) -> f64 {
        self.min
    }
}

/// Built-in two-dimensional initial densities by name (`reg`, `irreg`, `uniform`).
pub fn builtin_density(name: &str) -> Result<Density> {
    builtin_density_in(name, 2)
}

pub fn builtin_density_in(name: &str, d: usize) -> Result<Density> {
    let kind = match name {
        "reg" => DensityKind::Reg,
        "irreg" => DensityKind::Irreg,
        "uniform" => DensityKind::Uniform,
        other => {
            return Err(DkError::UnknownBuiltin {
                kind: "density",
                name: other.to_string(),
            })
        }
    };
    Density::new(kind, d)
}

/// Test function `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFunction {
    /// `sum_j sin(x_j)`
    Sinsum,
    /// `sin(x_0)`
    Sin,
    /// `cos(x_0)`
    Cos,
    /// constant 1
    One,
}

impl TestFunction {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Sinsum => x.iter().map(|y| y.sin()).sum(),
            TestFunction::Sin => x[0].sin(),
            TestFunction::Cos => x[0].cos(),
            TestFunction::One => 1.0,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| {
            DkError::UnknownBuiltin {
                kind: "test function",
                name: name.to_string(),
            }
        })
    }
}

/// Outer function `psi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterFunction {
    Square,
    Identity,
}

impl OuterFunction {
    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            OuterFunction::Square => z * z,
            OuterFunction::Identity => z,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.into())).map_err(|_| {
            DkError::UnknownBuiltin {
                kind: "outer function",
                name: name.to_string(),
            }
        })
    }
}

/// Statistic `psi(N^{1/2} (rho^T - rhobar^T, I_h phi)_h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoISpec {
    /// Particle count; `f64::INFINITY` switches the noise off.
    pub n_particles: f64,
    pub horizon: f64,
    pub psi: OuterFunction,
    pub phi: TestFunction,
    pub density: Density,
    pub init_mode: InitMode,
}

impl QoISpec {
    pub fn new(
        n_particles: f64,
        horizon: f64,
        psi: OuterFunction,
        phi: TestFunction,
        density: Density,
        init_mode: InitMode,
    ) -> Result<Self> {
        if !(n_particles >= 1.0) {
            return Err(DkError::InvalidArgument(format!(
                "particle count must be >= 1, got {n_particles}"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(DkError::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if init_mode == InitMode::Particles && !n_particles.is_finite() {
            return Err(DkError::InvalidArgument(
                "particle initialization needs a finite particle count".into(),
            ));
        }
        if density.min() < 0.0 {
            return Err(DkError::InvalidArgument("density must be non-negative".into()));
        }
        Ok(Self {
            n_particles,
            horizon,
            psi,
            phi,
            density,
            init_mode,
        })
    }

    /// Noise prefactor `N^{-1/2}`.
    pub fn noise_amplitude(&self) -> f64 {
        self.n_particles.sqrt().recip()
    }
}

/// Initial data of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    /// initial state of the stochastic scheme
    pub rho0: Field,
    /// `I_h rhobar^0`, the start of the discrete mean-field trajectory
    pub rho0bar_h: Field,
}

/// Draws `count` i.i.d. points from `density` by rejection against its
/// maximum. Returns them as a flat `count * d` array.
pub fn sample_particles<R: Rng>(density: &Density, count: usize, rng: &mut R) -> Result<Vec<f64>> {
    let d = density.d();
    let envelope = density.max() * (1.0 + 1e-9);
    let mut out = Vec::with_capacity(count * d);
    let mut x = vec![0.0; d];
    let mut accepted = 0;
    while accepted < count {
        for v in x.iter_mut() {
            *v = rng.random_range(-PI..PI);
        }
        let p = density.eval(&x);
        if p < 0.0 {
            return Err(DkError::Envelope(format!("density evaluates to {p} at {x:?}")));
        }
        if p > envelope {
            return Err(DkError::Envelope(format!("density {p} exceeds envelope {envelope}")));
        }
        if rng.random::<f64>() * envelope < p {
            out.extend_from_slice(&x);
            accepted += 1;
        }
    }
    Ok(out)
}

/// Bins points into the half-open cells `[x_k, x_k + h)^d` of `grid`,
/// returning `count / (N h^d)` per cell. Cells nest across levels that share
/// an origin.
pub fn bin_particles(points: &[f64], grid: &TorusGrid) -> Field {
    let d = grid.d();
    let n = grid.n();
    let count = points.len() / d;
    let mut counts = vec![0u64; grid.len()];
    let mut mi = vec![0usize; d];
    for p in points.chunks_exact(d) {
        for (k, &y) in mi.iter_mut().zip(p) {
            let s = ((y - grid.origin()) / grid.h()).floor() as i64;
            *k = s.rem_euclid(n as i64) as usize;
        }
        counts[grid.flat_index(&mi)] += 1;
    }
    let scale = 1.0 / (count as f64 * grid.cell_volume());
    Field::new(*grid, counts.into_iter().map(|c| c as f64 * scale).collect()).expect("grid sized")
}

/// Initial fields for each of `levels`, coupled through shared particles in
/// particle mode.
pub fn prepare_initial(spec: &QoISpec, levels: &[LevelParams], stream: &NoiseStream) -> Result<Vec<InitialData>> {
    let d = spec.density.d();
    if let Some(l) = levels.iter().find(|l| l.grid.d() != d) {
        return Err(DkError::GridMismatch(format!(
            "level {} is {}-dimensional but the density is {d}-dimensional",
            l.ell,
            l.grid.d()
        )));
    }
    let particles = match spec.init_mode {
        InitMode::Deterministic => None,
        InitMode::Particles => {
            let mut rng = stream.particle_rng();
            Some(sample_particles(&spec.density, spec.n_particles as usize, &mut rng)?)
        }
    };
    Ok(levels
        .iter()
        .map(|l| {
            let rho0bar_h = interpolate(&l.grid, |x| spec.density.eval(x));
            let rho0 = match &particles {
                None => rho0bar_h.clone(),
                Some(p) => bin_particles(p, &l.grid),
            };
            InitialData { rho0, rho0bar_h }
        })
        .collect())
}

/// `N^{1/2} (rhoT - rhobarT, phi_h)_h` with a precomputed `phi_h`.
pub fn fluctuation_with(rho_t: &Field, rhobar_t: &Field, phi_h: &Field, n_particles: f64) -> Result<f64> {
    let diff = rho_t.sub(rhobar_t)?;
    let s = inner(&diff, phi_h)?;
    // an exactly noiseless path has zero fluctuation even as N -> infinity
    Ok(if s == 0.0 { 0.0 } else { n_particles.sqrt() * s })
}

/// Linear fluctuation statistic `N^{1/2} (rhoT - rhobarT, I_h phi)_h`.
pub fn fluctuation(rho_t: &Field, rhobar_t: &Field, spec: &QoISpec, level: &LevelParams) -> Result<f64> {
    rho_t.grid().check_same(&level.grid)?;
    let phi_h = interpolate(&level.grid, |x| spec.phi.eval(x));
    fluctuation_with(rho_t, rhobar_t, &phi_h, spec.n_particles)
}

/// `P_l = psi(fluctuation)`.
pub fn evaluate_p(rho_t: &Field, rhobar_t: &Field, spec: &QoISpec, level: &LevelParams) -> Result<f64> {
    Ok(spec.psi.eval(fluctuation(rho_t, rhobar_t, spec, level)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::noise::StreamRole;
    use crate::pde::SchemeWeights;
    use crate::stats::MomentAccumulator;

    fn level(d: usize, n: usize) -> LevelParams {
        let g = make_grid(d, n).unwrap();
        let tau = 0.2 * g.h() * g.h();
        LevelParams::new(0, g, tau, SchemeWeights::explicit(), tau).unwrap()
    }

    #[test]
    fn densities_have_unit_mass() {
        for name in ["reg", "irreg", "uniform"] {
            let rho = builtin_density(name).unwrap();
            // independent quadrature at a different resolution
            let g = make_grid(2, 600).unwrap();
            let mass = interpolate(&g, |x| rho.eval(x)).mass();
            assert!((mass - 1.0).abs() < 1e-8, "{name}: {mass}");
            assert!(rho.min() > 0.0);
        }
        assert!(builtin_density("bogus").is_err());
        let u = builtin_density_in("uniform", 1).unwrap();
        assert!((u.eval(&[0.3]) - 1.0 / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn density_contrast() {
        let reg = builtin_density("reg").unwrap();
        let r = reg.max().sqrt() / reg.min();
        // mass-1 normalization on [-pi, pi)^2
        assert!((r - 7.244).abs() < 1e-3, "{r}");
        assert!(reg.max() / reg.min() < 1.25);
        let irreg = builtin_density("irreg").unwrap();
        let r = irreg.max().sqrt() / irreg.min();
        assert!(r > 3.7e4, "{r}");
        assert!(irreg.max() / irreg.min() > 2.0e4);
    }

    #[test]
    fn interpolated_reg_is_positive() {
        let rho = builtin_density("reg").unwrap();
        let f = interpolate(&make_grid(2, 32).unwrap(), |x| rho.eval(x));
        assert!(f.min() > 0.0);
    }

    #[test]
    fn deterministic_init_has_no_fluctuation() {
        let rho = builtin_density("reg").unwrap();
        let spec = QoISpec::new(1e6, 1.0, OuterFunction::Square, TestFunction::Sinsum, rho, InitMode::Deterministic).unwrap();
        let l = level(2, 16);
        let init = prepare_initial(&spec, &[l], &NoiseStream::new(1, 0, 0, StreamRole::Coupled)).unwrap();
        assert_eq!(init[0].rho0, init[0].rho0bar_h);
        assert_eq!(fluctuation(&init[0].rho0, &init[0].rho0bar_h, &spec, &l).unwrap(), 0.0);
        assert_eq!(evaluate_p(&init[0].rho0, &init[0].rho0bar_h, &spec, &l).unwrap(), 0.0);
    }

    #[test]
    fn particle_binning_is_mass_one_and_nested() {
        let rho = builtin_density("reg").unwrap();
        let spec = QoISpec::new(5000.0, 1.0, OuterFunction::Square, TestFunction::Sinsum, rho, InitMode::Particles).unwrap();
        for ratio in [2usize, 3] {
            let fine = level(2, 6 * ratio);
            let coarse = level(2, 6);
            let init = prepare_initial(&spec, &[fine, coarse], &NoiseStream::new(4, 1, 9, StreamRole::Coupled)).unwrap();
            assert!((init[0].rho0.mass() - 1.0).abs() < 1e-12);
            assert!((init[1].rho0.mass() - 1.0).abs() < 1e-12);
            let (fg, cg) = (fine.grid, coarse.grid);
            let mut mc = [0usize; 2];
            for kc in 0..cg.len() {
                cg.multi_index(kc, &mut mc);
                let mut sum = 0.0;
                for a in 0..ratio {
                    for b in 0..ratio {
                        sum += init[0].rho0.values()[fg.flat_index(&[mc[0] * ratio + a, mc[1] * ratio + b])];
                    }
                }
                let avg = sum / (ratio * ratio) as f64;
                assert!((init[1].rho0.values()[kc] - avg).abs() < 1e-12 * avg.max(1.0));
            }
        }
    }

    #[test]
    fn binomial_cell_counts() {
        let rho = builtin_density_in("uniform", 1).unwrap();
        let n = 1000.0;
        let spec = QoISpec::new(n, 1.0, OuterFunction::Identity, TestFunction::One, rho, InitMode::Particles).unwrap();
        let l = level(1, 2);
        let mut acc = MomentAccumulator::new();
        for rep in 0..10_000 {
            let init = prepare_initial(&spec, &[l], &NoiseStream::new(2, 0, rep, StreamRole::Single)).unwrap();
            let diff = init[0].rho0.values()[0] - init[0].rho0bar_h.values()[0];
            acc.push(n.sqrt() * diff * l.grid.cell_volume());
        }
        assert!((acc.variance() / 0.25 - 1.0).abs() < 0.05, "{}", acc.variance());
    }

    #[test]
    fn fluctuation_is_linear_in_phi() {
        let l = level(2, 8);
        let rho = builtin_density("reg").unwrap();
        let mk = |phi| QoISpec::new(1e4, 1.0, OuterFunction::Identity, phi, rho, InitMode::Deterministic).unwrap();
        let a = interpolate(&l.grid, |x| rho.eval(x) + 0.01 * (3.0 * x[0]).sin() * x[1].cos());
        let b = interpolate(&l.grid, |x| rho.eval(x));
        let f1 = fluctuation(&a, &b, &mk(TestFunction::Sin), &l).unwrap();
        let f2 = fluctuation(&a, &b, &mk(TestFunction::Cos), &l).unwrap();
        let cos_plus_sin = interpolate(&l.grid, |x| x[0].sin() + x[0].cos());
        let f12 = fluctuation_with(&a, &b, &cos_plus_sin, 1e4).unwrap();
        assert!((f12 - f1 - f2).abs() < 1e-12);

        // adding a constant to both sides does not change it when phi has zero grid mean
        let sa = a.add(&Field::constant(l.grid, 0.3)).unwrap();
        let sb = b.add(&Field::constant(l.grid, 0.3)).unwrap();
        let g = fluctuation(&sa, &sb, &mk(TestFunction::Sinsum), &l).unwrap();
        let g0 = fluctuation(&a, &b, &mk(TestFunction::Sinsum), &l).unwrap();
        assert!((g - g0).abs() < 1e-12);

        // constant phi with equal masses
        assert!(fluctuation(&a, &b, &mk(TestFunction::One), &l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn names_resolve() {
        assert_eq!(TestFunction::from_name("sinsum").unwrap(), TestFunction::Sinsum);
        assert_eq!(OuterFunction::from_name("square").unwrap(), OuterFunction::Square);
        assert!(OuterFunction::from_name("cube").is_err());
    }
}
