//! Level ladders, coupled level differences, the adaptive multilevel driver,
//! fixed-allocation runs and the plain Monte Carlo baseline.
//!
//! Sample `i` on level `l` always uses the stream keyed by `(seed, l, i)`,
//! and replicates are reduced in fixed chunks merged left to right, so
//! results do not depend on the number of worker threads.

use std::io::Write;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dk::{PairSimulator, PathSimulator};
use crate::error::{DkError, Result};
use crate::grid::{interpolate, Field, TorusGrid};
use crate::noise::{domain, CouplingKind, NoiseStream, StreamRole};
use crate::pde::{fluctuation_variance_oracle, solve_mfl_final, LevelParams, OracleStorage, SchemeWeights};
use crate::qoi::{fluctuation_with, prepare_initial, InitMode, QoISpec};
use crate::stats::{fit_decay_slope, MomentAccumulator};

/// Replicates per work unit. Fixed so the reduction order never depends on
/// the thread count.
const CHUNK: u64 = 8;

/// Geometric hierarchy `h_l = h_0 / r^l`, `tau_l = tau_0 / kappa^l` with the
/// ratios of the coupling, so `mu` is the same on every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelLadder {
    coupling: CouplingKind,
    symmetric: bool,
    levels: Vec<LevelParams>,
}

impl LevelLadder {
    pub fn new(
        d: usize,
        n0: usize,
        tau0: f64,
        l_max: usize,
        coupling: CouplingKind,
        weights: SchemeWeights,
        horizon: f64,
    ) -> Result<Self> {
        let r = coupling.space_ratio();
        let kappa = coupling.time_ratio() as f64;
        let mut levels = Vec::with_capacity(l_max + 1);
        let mut n = n0;
        let mut tau = tau0;
        for ell in 0..=l_max {
            let grid = TorusGrid::new(d, n)?;
            levels.push(LevelParams::new(ell, grid, tau, weights, horizon).map_err(|e| match e {
                DkError::InvalidLevel(msg) => DkError::InvalidLevel(format!("level {ell}: {msg}")),
                other => other,
            })?);
            n *= r;
            tau /= kappa;
        }
        Ok(Self {
            coupling,
            symmetric: false,
            levels,
        })
    }

    /// Half-shifted grids for the nearest-neighbour coupling: each coarse
    /// point sits at the centre of its `2^d` fine children instead of on the
    /// first of them.
    pub fn with_symmetric_offsets(mut self) -> Result<Self> {
        if self.coupling != CouplingKind::NearestNeighbour {
            return Err(DkError::InvalidArgument(
                "symmetric offsets apply to the nearest-neighbour coupling only".into(),
            ));
        }
        let mut offset = 0.0;
        for l in self.levels.iter_mut().skip(1) {
            offset -= 0.5 * l.grid.h();
            l.grid = l.grid.with_offset(offset);
        }
        self.symmetric = true;
        Ok(self)
    }

    pub fn coupling(&self) -> CouplingKind {
        self.coupling
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn l_max(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn d(&self) -> usize {
        self.levels[0].grid.d()
    }

    pub fn mu(&self) -> f64 {
        self.levels[0].mu
    }

    pub fn horizon(&self) -> f64 {
        self.levels[0].horizon()
    }

    pub fn level(&self, ell: usize) -> &LevelParams {
        &self.levels[ell]
    }

    pub fn levels(&self) -> &[LevelParams] {
        &self.levels
    }

    /// The first `l_max + 1` levels.
    pub fn truncated(&self, l_max: usize) -> Result<Self> {
        if l_max > self.l_max() {
            return Err(DkError::InvalidArgument(format!(
                "ladder has levels up to {}, asked for {l_max}",
                self.l_max()
            )));
        }
        Ok(Self {
            coupling: self.coupling,
            symmetric: self.symmetric,
            levels: self.levels[..=l_max].to_vec(),
        })
    }
}

/// One draw of `Y_l = P_l - P_{l-1}` (`Y_0 = P_0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YSample {
    pub y: f64,
    pub p_fine: f64,
    pub p_coarse: Option<f64>,
}

/// Moments of `Y_l` and of its two marginals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelAccumulators {
    pub y: MomentAccumulator,
    pub p_fine: MomentAccumulator,
    pub p_coarse: MomentAccumulator,
}

impl LevelAccumulators {
    pub fn push(&mut self, s: &YSample) {
        self.y.push(s.y);
        self.p_fine.push(s.p_fine);
        if let Some(p) = s.p_coarse {
            self.p_coarse.push(p);
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            y: self.y.merge(&other.y),
            p_fine: self.p_fine.merge(&other.p_fine),
            p_coarse: self.p_coarse.merge(&other.p_coarse),
        }
    }

    pub fn count(&self) -> u64 {
        self.y.count()
    }
}

#[derive(Debug, Clone)]
struct LevelCache {
    rho0bar_h: Field,
    rhobar_t: Field,
    phi_h: Field,
}

/// Draws level differences for one ladder and problem.
#[derive(Debug, Clone)]
pub struct Sampler {
    ladder: LevelLadder,
    spec: QoISpec,
    seed: u64,
    cache: Vec<LevelCache>,
}

fn is_cancelled(cancel: Option<&AtomicBool>) -> bool {
    cancel.is_some_and(|c| c.load(Ordering::Relaxed))
}

impl Sampler {
    pub fn new(ladder: LevelLadder, spec: QoISpec, seed: u64) -> Result<Self> {
        if ladder.d() != spec.density.d() {
            return Err(DkError::GridMismatch(format!(
                "ladder is {}-dimensional, density is {}-dimensional",
                ladder.d(),
                spec.density.d()
            )));
        }
        if (ladder.horizon() - spec.horizon).abs() > 1e-9 * spec.horizon {
            return Err(DkError::InvalidArgument(format!(
                "ladder horizon {} differs from the observable horizon {}",
                ladder.horizon(),
                spec.horizon
            )));
        }
        let cache = ladder
            .levels()
            .iter()
            .map(|l| {
                let rho0bar_h = interpolate(&l.grid, |x| spec.density.eval(x));
                let rhobar_t = solve_mfl_final(&rho0bar_h, l)?;
                let phi_h = interpolate(&l.grid, |x| spec.phi.eval(x));
                Ok(LevelCache {
                    rho0bar_h,
                    rhobar_t,
                    phi_h,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ladder,
            spec,
            seed,
            cache,
        })
    }

    pub fn ladder(&self) -> &LevelLadder {
        &self.ladder
    }

    pub fn spec(&self) -> &QoISpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Model cost `n_l^d steps_l` of one sample on level `ell`.
    pub fn cost(&self, ell: usize) -> f64 {
        self.ladder.level(ell).cost()
    }

    /// Discrete mean-field state `rhobar^T` on level `ell`.
    pub fn mean_field_final(&self, ell: usize) -> &Field {
        &self.cache[ell].rhobar_t
    }

    /// Exact variance of the linear fluctuation statistic on level `ell`.
    pub fn oracle_variance(&self, ell: usize) -> f64 {
        let spec = self.spec;
        fluctuation_variance_oracle(
            |x| spec.density.eval(x),
            |x| spec.phi.eval(x),
            self.ladder.level(ell),
            spec.init_mode,
            OracleStorage::Full,
        )
    }

    fn check_level(&self, ell: usize) -> Result<()> {
        if ell > self.ladder.l_max() {
            return Err(DkError::InvalidArgument(format!(
                "level {ell} above the ladder maximum {}",
                self.ladder.l_max()
            )));
        }
        Ok(())
    }

    fn p_value(&self, ell: usize, rho_t: &Field) -> Result<f64> {
        let c = &self.cache[ell];
        let z = fluctuation_with(rho_t, &c.rhobar_t, &c.phi_h, self.spec.n_particles)?;
        Ok(self.spec.psi.eval(z))
    }

    fn initial(&self, levels: &[usize], stream: &NoiseStream) -> Result<Vec<Field>> {
        match self.spec.init_mode {
            InitMode::Deterministic => Ok(levels.iter().map(|&l| self.cache[l].rho0bar_h.clone()).collect()),
            InitMode::Particles => {
                let params: Vec<LevelParams> = levels.iter().map(|&l| *self.ladder.level(l)).collect();
                Ok(prepare_initial(&self.spec, &params, stream)?
                    .into_iter()
                    .map(|d| d.rho0)
                    .collect())
            }
        }
    }

    fn single_stream(&self, dom: u64, ell: usize, rep: u64) -> NoiseStream {
        NoiseStream::with_domain(self.seed, dom, ell, rep, StreamRole::Single)
    }

    fn eval_chunk(&self, ell: usize, reps: Range<u64>) -> Result<LevelAccumulators> {
        let n = self.spec.n_particles;
        let mut acc = LevelAccumulators::default();
        if ell == 0 {
            let mut sim = PathSimulator::new(self.ladder.level(0), n);
            for rep in reps {
                let mut s = self.single_stream(domain::MLMC, 0, rep);
                let init = self.initial(&[0], &s)?;
                let p = self.p_value(0, &sim.run(&init[0], &mut s)?)?;
                acc.push(&YSample {
                    y: p,
                    p_fine: p,
                    p_coarse: None,
                });
            }
        } else {
            let (fine, coarse) = (self.ladder.level(ell), self.ladder.level(ell - 1));
            let mut sim = PairSimulator::new(fine, coarse, self.ladder.coupling(), n)?;
            for rep in reps {
                let mut s = NoiseStream::with_domain(self.seed, domain::MLMC, ell, rep, StreamRole::Coupled);
                let init = self.initial(&[ell, ell - 1], &s)?;
                let (rf, rc) = sim.run(&init[0], &init[1], &mut s)?;
                let (pf, pc) = (self.p_value(ell, &rf)?, self.p_value(ell - 1, &rc)?);
                acc.push(&YSample {
                    y: pf - pc,
                    p_fine: pf,
                    p_coarse: Some(pc),
                });
            }
        }
        Ok(acc)
    }

    fn eval_mc_chunk(&self, ell: usize, reps: Range<u64>) -> Result<LevelAccumulators> {
        let mut sim = PathSimulator::new(self.ladder.level(ell), self.spec.n_particles);
        let mut acc = LevelAccumulators::default();
        for rep in reps {
            let mut s = self.single_stream(domain::MC, ell, rep);
            let init = self.initial(&[ell], &s)?;
            let p = self.p_value(ell, &sim.run(&init[0], &mut s)?)?;
            acc.push(&YSample {
                y: p,
                p_fine: p,
                p_coarse: None,
            });
        }
        Ok(acc)
    }

    /// `Y_ell` for one replicate.
    pub fn sample_y(&self, ell: usize, replicate: u64) -> Result<YSample> {
        self.check_level(ell)?;
        let acc = self.eval_chunk(ell, replicate..replicate + 1)?;
        Ok(YSample {
            y: acc.y.mean(),
            p_fine: acc.p_fine.mean(),
            p_coarse: (ell > 0).then(|| acc.p_coarse.mean()),
        })
    }

    fn reduce(
        &self,
        reps: Range<u64>,
        cancel: Option<&AtomicBool>,
        f: impl Fn(Range<u64>) -> Result<LevelAccumulators> + Sync,
    ) -> Result<LevelAccumulators> {
        let chunks: Vec<Range<u64>> = (reps.start..reps.end)
            .step_by(CHUNK as usize)
            .map(|s| s..(s + CHUNK).min(reps.end))
            .collect();
        let parts: Vec<Result<Option<LevelAccumulators>>> = chunks
            .into_par_iter()
            .map(|r| {
                if is_cancelled(cancel) {
                    Ok(None)
                } else {
                    f(r).map(Some)
                }
            })
            .collect();
        let mut total = LevelAccumulators::default();
        for p in parts {
            match p? {
                Some(a) => total = total.merge(&a),
                None => return Err(DkError::Interrupted),
            }
        }
        Ok(total)
    }

    /// Replicates `reps` of `Y_ell`, reduced in replicate order.
    pub fn sample_level(&self, ell: usize, reps: Range<u64>, cancel: Option<&AtomicBool>) -> Result<LevelAccumulators> {
        self.check_level(ell)?;
        self.reduce(reps, cancel, |r| self.eval_chunk(ell, r))
    }

    /// Replicates `reps` of the single-level `P_ell` on streams independent
    /// of the multilevel ones.
    pub fn sample_mc(&self, ell: usize, reps: Range<u64>, cancel: Option<&AtomicBool>) -> Result<LevelAccumulators> {
        self.check_level(ell)?;
        self.reduce(reps, cancel, |r| self.eval_mc_chunk(ell, r))
    }
}

/// `M_l = ceil(2 eps^{-2} sqrt(V_l / C_l) sum_k sqrt(V_k C_k))`, floored at 2.
pub fn optimal_samples(variances: &[f64], costs: &[f64], eps: f64) -> Result<Vec<u64>> {
    if variances.len() != costs.len() {
        return Err(DkError::InvalidArgument("variances and costs differ in length".into()));
    }
    if !(eps > 0.0) {
        return Err(DkError::InvalidArgument(format!("accuracy must be positive, got {eps}")));
    }
    if variances.iter().any(|v| !(*v >= 0.0)) || costs.iter().any(|c| !(*c > 0.0)) {
        return Err(DkError::InvalidArgument(
            "variances must be non-negative and costs positive".into(),
        ));
    }
    let sum: f64 = variances.iter().zip(costs).map(|(v, c)| (v * c).sqrt()).sum();
    Ok(variances
        .iter()
        .zip(costs)
        .map(|(v, c)| {
            let m = (2.0 / (eps * eps) * (v / c).sqrt() * sum).ceil();
            (m as u64).max(2)
        })
        .collect())
}

/// Bias test on the last three level means `(Y_{L-2}, Y_{L-1}, Y_L)` with
/// mesh ratio 2.
pub fn converged(level_means: &[f64], alpha: f64, eps: f64) -> Result<bool> {
    converged_with_ratio(level_means, alpha, 2.0, eps)
}

/// `max_i r^{-i alpha} |Y_{L-i}| / (r^alpha - 1) < eps / sqrt 2` over the
/// last three levels, `r` the mesh ratio between levels.
pub fn converged_with_ratio(level_means: &[f64], alpha: f64, ratio: f64, eps: f64) -> Result<bool> {
    if level_means.len() < 3 {
        return Err(DkError::InvalidArgument(format!(
            "convergence test needs three levels, got {}",
            level_means.len()
        )));
    }
    let last = &level_means[level_means.len() - 3..];
    let denom = ratio.powf(alpha) - 1.0;
    let worst = last
        .iter()
        .rev()
        .enumerate()
        .map(|(i, y)| ratio.powf(-(i as f64) * alpha) * y.abs() / denom)
        .fold(0.0, f64::max);
    Ok(worst < eps / std::f64::consts::SQRT_2)
}

/// Rate used in the bias test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum AlphaMode {
    Fixed(f64),
    /// Regress `log |Y_l|` on `l` for `l >= 1`; falls back to 2 until three
    /// such levels exist.
    Fit,
}

impl Default for AlphaMode {
    fn default() -> Self {
        AlphaMode::Fixed(2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmcOptions {
    pub eps: f64,
    pub initial_samples: u64,
    pub alpha: AlphaMode,
    /// Refuse to add level `l` when `N h_l^d` falls below this value.
    pub density_guard: Option<f64>,
}

impl MlmcOptions {
    pub fn new(eps: f64, initial_samples: u64) -> Self {
        Self {
            eps,
            initial_samples,
            alpha: AlphaMode::default(),
            density_guard: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub ell: usize,
    pub n: usize,
    pub tau: f64,
    pub steps: usize,
    pub samples: u64,
    pub mean: f64,
    pub variance: f64,
    /// model cost of one sample
    pub cost: f64,
    pub mean_p: f64,
    pub variance_p: f64,
    pub moments: LevelAccumulators,
    /// wall-clock seconds spent sampling this level
    pub wall_seconds: f64,
}

impl LevelStats {
    fn new(level: &LevelParams, acc: LevelAccumulators, wall_seconds: f64) -> Self {
        Self {
            ell: level.ell,
            n: level.grid.n(),
            tau: level.tau,
            steps: level.steps,
            samples: acc.count(),
            mean: acc.y.mean(),
            variance: acc.y.variance(),
            cost: level.cost(),
            mean_p: acc.p_fine.mean(),
            variance_p: acc.p_fine.variance(),
            moments: acc,
            wall_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmcResult {
    /// `sum_l mean(Y_l)`
    pub estimate: f64,
    /// `sum_l V_l / M_l`
    pub estimator_variance: f64,
    pub levels: Vec<LevelStats>,
    /// `sum_l M_l C_l` in model units
    pub total_cost: f64,
    pub eps: Option<f64>,
    pub stopping_level: usize,
    /// `None` for fixed allocations
    pub converged: Option<bool>,
    /// the density guard stopped refinement
    pub density_limited: bool,
    /// false when the run was interrupted
    pub complete: bool,
    pub alpha: Option<f64>,
    pub wall_seconds: f64,
}

pub const LEVEL_CSV_HEADER: &str = "level,n,tau,steps,samples,mean_y,var_y,cost_per_sample,mean_p,var_p";

impl MlmcResult {
    fn assemble(ladder: &LevelLadder, accs: &[LevelAccumulators], walls: &[f64]) -> Self {
        let levels: Vec<LevelStats> = accs
            .iter()
            .enumerate()
            .map(|(l, a)| LevelStats::new(ladder.level(l), *a, walls[l]))
            .collect();
        let estimate = levels.iter().map(|s| if s.samples > 0 { s.mean } else { 0.0 }).sum();
        let estimator_variance = levels
            .iter()
            .filter(|s| s.samples >= 2)
            .map(|s| s.variance / s.samples as f64)
            .sum();
        let total_cost = levels.iter().map(|s| s.samples as f64 * s.cost).sum();
        Self {
            estimate,
            estimator_variance,
            stopping_level: levels.len().saturating_sub(1),
            levels,
            total_cost,
            eps: None,
            converged: None,
            density_limited: false,
            complete: true,
            alpha: None,
            wall_seconds: walls.iter().sum(),
        }
    }

    pub fn total_samples(&self) -> u64 {
        self.levels.iter().map(|l| l.samples).sum()
    }

    /// Per-level table; deterministic given the seed.
    pub fn write_levels_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{LEVEL_CSV_HEADER}")?;
        for s in &self.levels {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                s.ell, s.n, s.tau, s.steps, s.samples, s.mean, s.variance, s.cost, s.mean_p, s.variance_p
            )?;
        }
        Ok(())
    }

    /// Wall-clock seconds per level, kept apart from the deterministic tables.
    pub fn write_timings_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "level,wall_seconds")?;
        for s in &self.levels {
            writeln!(out, "{},{}", s.ell, s.wall_seconds)?;
        }
        Ok(())
    }
}

fn sample_into(
    sampler: &Sampler,
    ell: usize,
    target: u64,
    acc: &mut LevelAccumulators,
    wall: &mut f64,
    cancel: Option<&AtomicBool>,
) -> Result<()> {
    let have = acc.count();
    if target > have {
        let start = Instant::now();
        let extra = sampler.sample_level(ell, have..target, cancel)?;
        *acc = acc.merge(&extra);
        *wall += start.elapsed().as_secs_f64();
    }
    Ok(())
}

/// Adaptive multilevel estimator. Starts on levels `0..=2` with
/// `initial_samples` each, tops levels up to the optimal allocation, and adds
/// a level whenever the bias test fails, up to the ladder maximum.
///
/// An interruption through `cancel` returns the samples taken so far with
/// `complete = false`.
pub fn run_mlmc(sampler: &Sampler, opts: &MlmcOptions, cancel: Option<&AtomicBool>) -> Result<MlmcResult> {
    if !(opts.eps > 0.0) {
        return Err(DkError::InvalidArgument(format!("accuracy must be positive, got {}", opts.eps)));
    }
    if opts.initial_samples < 2 {
        return Err(DkError::InvalidArgument("need at least 2 initial samples per level".into()));
    }
    let ladder = sampler.ladder();
    let ratio = ladder.coupling().space_ratio() as f64;
    let mut top = ladder.l_max().min(2);
    let mut accs = vec![LevelAccumulators::default(); top + 1];
    let mut walls = vec![0.0; top + 1];
    let mut targets = vec![opts.initial_samples; top + 1];
    let mut converged_flag = false;
    let mut density_limited = false;
    let mut alpha_used = None;

    let finish = |accs: &[LevelAccumulators], walls: &[f64], conv: bool, dl: bool, alpha: Option<f64>, complete: bool| {
        let mut r = MlmcResult::assemble(ladder, accs, walls);
        r.eps = Some(opts.eps);
        r.converged = Some(conv);
        r.density_limited = dl;
        r.alpha = alpha;
        r.complete = complete;
        r
    };

    loop {
        for ell in 0..=top {
            match sample_into(sampler, ell, targets[ell], &mut accs[ell], &mut walls[ell], cancel) {
                Ok(()) => {}
                Err(DkError::Interrupted) => {
                    return Ok(finish(&accs, &walls, false, density_limited, alpha_used, false));
                }
                Err(e) => return Err(e),
            }
        }
        let variances: Vec<f64> = accs.iter().map(|a| a.y.variance()).collect();
        let costs: Vec<f64> = (0..=top).map(|l| sampler.cost(l)).collect();
        let optimal = optimal_samples(&variances, &costs, opts.eps)?;
        let mut outstanding = false;
        for (t, m) in targets.iter_mut().zip(&optimal) {
            if *m > *t {
                *t = *m;
                outstanding = true;
            }
        }
        if outstanding {
            continue;
        }

        let means: Vec<f64> = accs.iter().map(|a| a.y.mean()).collect();
        let alpha = match opts.alpha {
            AlphaMode::Fixed(a) => a,
            AlphaMode::Fit => fitted_alpha(&means, ratio),
        };
        alpha_used = Some(alpha);
        if top >= 2 && converged_with_ratio(&means, alpha, ratio, opts.eps)? {
            converged_flag = true;
            break;
        }
        if top == ladder.l_max() {
            break;
        }
        if let Some(th) = opts.density_guard {
            let h = ladder.level(top + 1).grid.h();
            if sampler.spec().n_particles * h.powi(ladder.d() as i32) < th {
                density_limited = true;
                break;
            }
        }
        top += 1;
        accs.push(LevelAccumulators::default());
        walls.push(0.0);
        targets.push(opts.initial_samples);
    }
    Ok(finish(&accs, &walls, converged_flag, density_limited, alpha_used, true))
}

fn fitted_alpha(means: &[f64], ratio: f64) -> f64 {
    if means.len() < 4 {
        return 2.0;
    }
    let lv: Vec<f64> = (1..means.len()).map(|l| l as f64).collect();
    let abs: Vec<f64> = means[1..].iter().map(|m| m.abs()).collect();
    match fit_decay_slope(&lv, &abs) {
        // slope is per level in log2; convert to a rate in the mesh ratio
        Ok(s) => (-s / ratio.log2()).max(0.5),
        Err(_) => 2.0,
    }
}

/// Multilevel estimator with a prescribed number of samples per level.
pub fn run_fixed(sampler: &Sampler, allocation: &[u64], cancel: Option<&AtomicBool>) -> Result<MlmcResult> {
    if allocation.is_empty() || allocation.len() > sampler.ladder().l_max() + 1 {
        return Err(DkError::InvalidArgument(format!(
            "allocation for {} levels on a ladder of {}",
            allocation.len(),
            sampler.ladder().l_max() + 1
        )));
    }
    let mut accs = vec![LevelAccumulators::default(); allocation.len()];
    let mut walls = vec![0.0; allocation.len()];
    let mut complete = true;
    for (ell, &m) in allocation.iter().enumerate() {
        match sample_into(sampler, ell, m, &mut accs[ell], &mut walls[ell], cancel) {
            Ok(()) => {}
            Err(DkError::Interrupted) => {
                complete = false;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let mut r = MlmcResult::assemble(sampler.ladder(), &accs, &walls);
    r.complete = complete;
    Ok(r)
}

/// Budget of a plain Monte Carlo run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McBudget {
    Samples(u64),
    /// `M = ceil(2 V / eps^2)` with `V` estimated from `pilot` samples,
    /// which are kept.
    Accuracy { eps: f64, pilot: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub level: usize,
    pub samples: u64,
    pub mean: f64,
    /// sample variance of `P`
    pub variance: f64,
    pub estimator_variance: f64,
    /// `M C_l` in model units
    pub cost: f64,
    pub pilot_samples: u64,
    pub complete: bool,
    pub wall_seconds: f64,
}

pub const MC_CSV_HEADER: &str = "level,samples,mean,variance,estimator_variance,cost";

impl McResult {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{MC_CSV_HEADER}")?;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            self.level, self.samples, self.mean, self.variance, self.estimator_variance, self.cost
        )?;
        Ok(())
    }
}

/// Plain Monte Carlo estimate of `E[P_ell]`.
pub fn run_mc(sampler: &Sampler, ell: usize, budget: McBudget, cancel: Option<&AtomicBool>) -> Result<McResult> {
    let start = Instant::now();
    let (target, pilot) = match budget {
        McBudget::Samples(m) if m >= 2 => (m, 0),
        McBudget::Accuracy { eps, pilot } if eps > 0.0 && pilot >= 2 => (0, pilot),
        other => return Err(DkError::InvalidArgument(format!("malformed budget {other:?}"))),
    };
    let complete;
    let mut acc = LevelAccumulators::default();
    let run = |acc: &mut LevelAccumulators, to: u64| -> Result<bool> {
        if to <= acc.count() {
            return Ok(true);
        }
        match sampler.sample_mc(ell, acc.count()..to, cancel) {
            Ok(a) => {
                *acc = acc.merge(&a);
                Ok(true)
            }
            Err(DkError::Interrupted) => Ok(false),
            Err(e) => Err(e),
        }
    };
    if let McBudget::Accuracy { eps, .. } = budget {
        complete = run(&mut acc, pilot)? && {
            let m = (2.0 * acc.y.variance() / (eps * eps)).ceil() as u64;
            run(&mut acc, m.max(pilot))?
        };
    } else {
        complete = run(&mut acc, target)?;
    }
    let samples = acc.count();
    Ok(McResult {
        level: ell,
        samples,
        mean: acc.y.mean(),
        variance: acc.y.variance(),
        estimator_variance: acc.y.variance() / samples as f64,
        cost: samples as f64 * sampler.cost(ell),
        pilot_samples: pilot,
        complete,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReduction {
    pub finest_level: usize,
    pub n_finest: usize,
    pub mlmc: MlmcResult,
    pub mc: McResult,
    /// `Var[MC estimator] / Var[MLMC estimator]` at equal model cost
    pub factor: f64,
}

pub const VARRED_CSV_HEADER: &str = "finest_level,n_finest,mlmc_cost,mlmc_estimator_variance,mc_samples,mc_cost,mc_estimator_variance,factor";

impl VarianceReduction {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.finest_level,
            self.n_finest,
            self.mlmc.total_cost,
            self.mlmc.estimator_variance,
            self.mc.samples,
            self.mc.cost,
            self.mc.estimator_variance,
            self.factor
        )
    }
}

/// Fixed geometric allocation `M_{l-1} = 4 M_l` up to the ladder maximum,
/// compared with plain Monte Carlo on the finest level at the same model cost.
pub fn variance_reduction_experiment(sampler: &Sampler, m_finest: u64, cancel: Option<&AtomicBool>) -> Result<VarianceReduction> {
    if m_finest < 2 {
        return Err(DkError::InvalidArgument("need at least 2 finest-level samples".into()));
    }
    let top = sampler.ladder().l_max();
    let allocation: Vec<u64> = (0..=top).map(|l| m_finest * 4u64.pow((top - l) as u32)).collect();
    let mlmc = run_fixed(sampler, &allocation, cancel)?;
    let m_mc = ((mlmc.total_cost / sampler.cost(top)).round() as u64).max(2);
    let mc = run_mc(sampler, top, McBudget::Samples(m_mc), cancel)?;
    // compare at exactly equal cost
    let mc_var_equal_cost = mc.variance * sampler.cost(top) / mlmc.total_cost;
    Ok(VarianceReduction {
        finest_level: top,
        n_finest: sampler.ladder().level(top).grid.n(),
        factor: mc_var_equal_cost / mlmc.estimator_variance,
        mlmc,
        mc,
    })
}
