//! Time stepping of the finite-difference Dean-Kawasaki scheme.

use crate::error::{DkError, Result};
use crate::grid::{for_each_run_along_axis, Field, VectorField};
use crate::noise::{fill_white, make_coupler, CouplingKind, IncrementCoupler, NoiseIncrement, NoiseStream, StreamRole};
use crate::pde::{LevelParams, ThetaOperator};

/// Path state; `rho` may take negative values.
#[derive(Debug, Clone, PartialEq)]
pub struct DkState {
    pub rho: Field,
    pub step: usize,
    pub level: LevelParams,
    pub n_particles: f64,
}

impl DkState {
    pub fn new(rho: Field, level: LevelParams, n_particles: f64) -> Result<Self> {
        rho.grid().check_same(&level.grid)?;
        Ok(Self {
            rho,
            step: 0,
            level,
            n_particles,
        })
    }
}

/// Reusable single-level stepper:
///
/// `(I - tau b0 Delta_h/2) rho^m = (I + tau b1 Delta_h/2) rho^{m-1}
///     + N^{-1/2} div_h(sqrt([rho^{m-1}]^+) dW)`.
#[derive(Debug, Clone)]
pub struct DkStepper {
    op: ThetaOperator,
    amplitude: f64,
    root: Vec<f64>,
    next: Vec<f64>,
}

impl DkStepper {
    /// `n_particles = inf` switches the noise off.
    pub fn new(level: &LevelParams, n_particles: f64) -> Self {
        let len = level.grid.len();
        Self {
            op: ThetaOperator::new(level),
            amplitude: n_particles.sqrt().recip(),
            root: vec![0.0; len],
            next: vec![0.0; len],
        }
    }

    pub fn level(&self) -> &LevelParams {
        self.op.level()
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Advances `rho` by one step in place.
    pub fn step_in_place(&mut self, rho: &mut [f64], dw: &NoiseIncrement) {
        let grid = self.op.level().grid;
        self.op.apply_explicit(rho, &mut self.next);
        if self.amplitude != 0.0 {
            for (r, v) in self.root.iter_mut().zip(rho.iter()) {
                *r = v.max(0.0).sqrt();
            }
            let c = self.amplitude * 0.5 / grid.h();
            let root = &self.root;
            let next = &mut self.next;
            for axis in 0..grid.d() {
                let w = dw.component(axis).values();
                for_each_run_along_axis(&grid, axis, |i, p, m, len| {
                    let plus = root[p..p + len].iter().zip(&w[p..p + len]);
                    let minus = root[m..m + len].iter().zip(&w[m..m + len]);
                    for ((o, (rp, wp)), (rm, wm)) in next[i..i + len].iter_mut().zip(plus).zip(minus) {
                        *o += c * (rp * wp - rm * wm);
                    }
                });
            }
        }
        self.op.solve_implicit(&mut self.next);
        rho.copy_from_slice(&self.next);
    }
}

/// One step of the scheme.
pub fn dk_step(state: &DkState, dw: &NoiseIncrement) -> Result<DkState> {
    state.rho.grid().check_same(dw.grid())?;
    if state.step >= state.level.steps {
        return Err(DkError::InvalidArgument(format!(
            "path already at its final step {}",
            state.level.steps
        )));
    }
    let mut stepper = DkStepper::new(&state.level, state.n_particles);
    let mut values = state.rho.values().to_vec();
    stepper.step_in_place(&mut values, dw);
    Ok(DkState {
        rho: Field::new(state.level.grid, values)?,
        step: state.step + 1,
        level: state.level,
        n_particles: state.n_particles,
    })
}

/// Single-level path driver with reusable buffers.
#[derive(Debug, Clone)]
pub struct PathSimulator {
    stepper: DkStepper,
    increment: VectorField,
    buf: Vec<f64>,
}

impl PathSimulator {
    pub fn new(level: &LevelParams, n_particles: f64) -> Self {
        Self {
            stepper: DkStepper::new(level, n_particles),
            increment: VectorField::zeros(level.grid),
            buf: Vec::new(),
        }
    }

    /// Runs all steps from `init`, calling `observe(m, rho^m)` for
    /// `m = 0..=steps`.
    pub fn run_observed(
        &mut self,
        init: &Field,
        stream: &mut NoiseStream,
        mut observe: impl FnMut(usize, &[f64]),
    ) -> Result<Field> {
        let level = *self.stepper.level();
        init.grid().check_same(&level.grid)?;
        stream.require(StreamRole::Single)?;
        let mut rho = init.values().to_vec();
        observe(0, &rho);
        for m in 1..=level.steps {
            if self.stepper.amplitude() != 0.0 {
                fill_white(stream, &level, &mut self.increment, &mut self.buf);
            }
            self.stepper.step_in_place(&mut rho, &self.increment);
            observe(m, &rho);
        }
        Field::new(level.grid, rho)
    }

    pub fn run(&mut self, init: &Field, stream: &mut NoiseStream) -> Result<Field> {
        self.run_observed(init, stream, |_, _| {})
    }
}

/// `rho^T` after `level.steps` steps with fresh white increments.
pub fn simulate_path(init: &Field, level: &LevelParams, n_particles: f64, stream: &mut NoiseStream) -> Result<Field> {
    PathSimulator::new(level, n_particles).run(init, stream)
}

/// Fine/coarse path pair driven by one coupled noise source.
pub struct PairSimulator {
    fine: DkStepper,
    coarse: DkStepper,
    coupler: Box<dyn IncrementCoupler>,
}

impl PairSimulator {
    pub fn new(fine: &LevelParams, coarse: &LevelParams, coupling: CouplingKind, n_particles: f64) -> Result<Self> {
        let coupler = make_coupler(coupling, fine, coarse)?;
        if fine.steps != coarse.steps * coupler.kappa() {
            return Err(DkError::RatioMismatch(format!(
                "{} fine steps do not make {} coarse steps of ratio {}",
                fine.steps,
                coarse.steps,
                coupler.kappa()
            )));
        }
        Ok(Self {
            fine: DkStepper::new(fine, n_particles),
            coarse: DkStepper::new(coarse, n_particles),
            coupler,
        })
    }

    /// Advances both paths to the horizon; the coarse one steps once per
    /// `kappa_t` fine steps. Returns `(rho^T_fine, rho^T_coarse)`.
    pub fn run(&mut self, init_fine: &Field, init_coarse: &Field, stream: &mut NoiseStream) -> Result<(Field, Field)> {
        let (fl, cl) = (*self.fine.level(), *self.coarse.level());
        init_fine.grid().check_same(&fl.grid)?;
        init_coarse.grid().check_same(&cl.grid)?;
        stream.require(StreamRole::Coupled)?;
        let mut rf = init_fine.values().to_vec();
        let mut rc = init_coarse.values().to_vec();
        for _ in 0..fl.steps {
            let (f, c) = self.coupler.advance(stream);
            self.fine.step_in_place(&mut rf, f);
            if let Some(c) = c {
                self.coarse.step_in_place(&mut rc, c);
            }
        }
        Ok((Field::new(fl.grid, rf)?, Field::new(cl.grid, rc)?))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled_pair(
    init_fine: &Field,
    init_coarse: &Field,
    fine: &LevelParams,
    coarse: &LevelParams,
    coupling: CouplingKind,
    n_particles: f64,
    stream: &mut NoiseStream,
) -> Result<(Field, Field)> {
    PairSimulator::new(fine, coarse, coupling, n_particles)?.run(init_fine, init_coarse, stream)
}
