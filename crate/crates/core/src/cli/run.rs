//! Runs one configured experiment and writes its result files.
//!
//! Every run writes `summary.json` (deterministic; includes the config echo)
//! and `timings.json` (wall-clock only). Table files by kind:
//!
//! | kind                | file                  | columns |
//! |---------------------|-----------------------|---------|
//! | `mlmc`              | `mlmc_runs.csv`       | `eps,stopping_level,converged,estimate,estimator_variance,total_samples,mlmc_cost,mc_cost_extrapolated,speedup_extrapolated,mc_cost_measured,speedup_measured` |
//! | `mlmc`              | `mlmc_levels_<i>.csv` | see [`crate::mlmc::LEVEL_CSV_HEADER`], one file per `eps` entry |
//! | `mc`                | `mc.csv`              | see [`crate::mlmc::MC_CSV_HEADER`] |
//! | `varred`            | `varred.csv`          | see [`crate::mlmc::VARRED_CSV_HEADER`] |
//! | `convergence-table` | `convergence.csv`     | `level,n,samples,mean_y,se_y,var_y,log2_abs_mean_y,log2_var_y,mean_p,var_p` |
//! | `mfl`               | `mfl.csv`             | `step,time,mass,min,max,pairing` |
//! | `mfl`               | `mfl_final.csv`       | field CSV of the final state |
//! | `noise-selftest`    | `selftest.csv`        | `coupling,d,n_fine,n_coarse,fine_error,coarse_error,min_correlation,parseval_error,passed` |
//!
//! `mc_cost_extrapolated` is `ceil(2 V[P_L] / eps^2) C_L` with `V[P_L]`
//! taken from the multilevel samples of the stopping level; it is an
//! extrapolation, not a measurement. The `*_measured` columns are empty
//! unless `mc_baseline = true`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use serde_json::{json, Value};

use super::config::{ExperimentConfig, RunKind, SUMMARY_FORMAT};
use crate::error::DkError;
use crate::grid::{interpolate, io as field_io};
use crate::mlmc::{
    run_fixed, run_mc, run_mlmc, variance_reduction_experiment, McBudget, MlmcOptions, MlmcResult, Sampler,
    VARRED_CSV_HEADER,
};
use crate::noise::diagnostics::{exact_covariance_report, parseval_error};
use crate::noise::CouplingKind;
use crate::pde::{backward_test, solve_mfl};

/// Overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "DKMLMC_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Runtime,
    Io,
    Interrupted,
}

impl ErrorClass {
    pub fn name(&self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Runtime => "runtime",
            ErrorClass::Io => "io",
            ErrorClass::Interrupted => "interrupted",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunError {
    pub class: ErrorClass,
    pub message: String,
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} error: {}", self.class.name(), self.message)
    }
}

impl std::error::Error for RunError {}

impl From<DkError> for RunError {
    fn from(e: DkError) -> Self {
        let class = match e {
            DkError::Io(_) => ErrorClass::Io,
            DkError::Interrupted => ErrorClass::Interrupted,
            DkError::InvalidLevel(_) | DkError::InvalidGrid(_) | DkError::UnknownBuiltin { .. } => ErrorClass::Config,
            _ => ErrorClass::Runtime,
        };
        RunError {
            class,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError {
            class: ErrorClass::Io,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub summary: Value,
    /// false when interrupted; partial results were written
    pub complete: bool,
    /// false when a self-test found a defect
    pub passed: bool,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.complete && self.passed {
            0
        } else {
            3
        }
    }
}

/// The configured output directory unless the environment overrides it.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.output_dir),
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    run_with_cancel(cfg, &AtomicBool::new(false))
}

/// Runs `cfg` on a pool of `cfg.workers` threads. Setting `cancel` stops
/// sampling at the next chunk boundary; what was gathered is written with
/// `"complete": false`.
pub fn run_with_cancel(cfg: &ExperimentConfig, cancel: &AtomicBool) -> Result<RunOutcome, RunError> {
    let dir = output_dir(cfg);
    fs::create_dir_all(&dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| RunError {
            class: ErrorClass::Runtime,
            message: e.to_string(),
        })?;
    let (results, timings, complete, passed) = pool.install(|| dispatch(cfg, &dir, cancel))?;
    let summary = json!({
        "format": SUMMARY_FORMAT,
        "version": 1,
        "kind": cfg.kind,
        "seed": cfg.seed,
        "complete": complete,
        "results": results,
        "config": cfg.to_value(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(&dir.join("timings.json"), &timings)?;
    Ok(RunOutcome {
        output_dir: dir,
        summary,
        complete,
        passed,
    })
}

type Dispatched = (Value, Value, bool, bool);

fn dispatch(cfg: &ExperimentConfig, dir: &Path, cancel: &AtomicBool) -> Result<Dispatched, RunError> {
    match cfg.kind {
        RunKind::Mlmc => run_mlmc_kind(cfg, dir, cancel),
        RunKind::Mc => run_mc_kind(cfg, dir, cancel),
        RunKind::Varred => run_varred_kind(cfg, dir, cancel),
        RunKind::ConvergenceTable => run_table_kind(cfg, dir, cancel),
        RunKind::Mfl => run_mfl_kind(cfg, dir),
        RunKind::NoiseSelftest => run_selftest_kind(cfg, dir),
    }
}

fn write_json(path: &Path, v: &Value) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(v).expect("json");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, RunError> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn sampler(cfg: &ExperimentConfig) -> Result<Sampler, RunError> {
    Ok(Sampler::new(cfg.ladder()?, cfg.qoi()?, cfg.seed)?)
}

/// Deterministic part of a multilevel result.
fn mlmc_json(r: &MlmcResult) -> Value {
    json!({
        "estimate": r.estimate,
        "estimator_variance": r.estimator_variance,
        "total_cost": r.total_cost,
        "total_samples": r.total_samples(),
        "eps": r.eps,
        "stopping_level": r.stopping_level,
        "converged": r.converged,
        "density_limited": r.density_limited,
        "complete": r.complete,
        "alpha": r.alpha,
        "levels": r.levels.iter().map(|s| json!({
            "level": s.ell, "n": s.n, "samples": s.samples, "mean": s.mean,
            "variance": s.variance, "cost": s.cost,
        })).collect::<Vec<_>>(),
    })
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn run_mlmc_kind(cfg: &ExperimentConfig, dir: &Path, cancel: &AtomicBool) -> Result<Dispatched, RunError> {
    let s = sampler(cfg)?;
    let mut runs = Vec::new();
    let mut walls = Vec::new();
    let mut table = create(&dir.join("mlmc_runs.csv"))?;
    writeln!(
        table,
        "eps,stopping_level,converged,estimate,estimator_variance,total_samples,mlmc_cost,mc_cost_extrapolated,speedup_extrapolated,mc_cost_measured,speedup_measured"
    )?;
    let mut complete = true;
    for (i, &eps) in cfg.eps.iter().enumerate() {
        let opts = MlmcOptions {
            eps,
            initial_samples: cfg.initial_samples,
            alpha: cfg.alpha,
            density_guard: cfg.density_guard,
        };
        let r = run_mlmc(&s, &opts, Some(cancel))?;
        r.write_levels_csv(&mut create(&dir.join(format!("mlmc_levels_{i}.csv")))?)?;
        let top = &r.levels[r.stopping_level];
        let mc_model = (2.0 * top.variance_p / (eps * eps)).ceil() * top.cost;
        let mut mc_measured = None;
        let mut mc_wall = None;
        if cfg.mc_baseline && r.complete {
            let mc = run_mc(&s, r.stopping_level, McBudget::Accuracy { eps, pilot: cfg.mc_pilot }, Some(cancel))?;
            complete &= mc.complete;
            mc_measured = Some(mc.cost);
            mc_wall = Some(mc.wall_seconds);
        }
        writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{},{}",
            eps,
            r.stopping_level,
            r.converged.unwrap_or(false),
            r.estimate,
            r.estimator_variance,
            r.total_samples(),
            r.total_cost,
            mc_model,
            mc_model / r.total_cost,
            csv_opt(mc_measured),
            csv_opt(mc_measured.map(|c| c / r.total_cost)),
        )?;
        let mut j = mlmc_json(&r);
        j["mc_cost_extrapolated"] = json!(mc_model);
        j["mc_cost_measured"] = json!(mc_measured);
        runs.push(j);
        walls.push(json!({
            "eps": eps,
            "mlmc_wall_seconds": r.wall_seconds,
            "level_wall_seconds": r.levels.iter().map(|l| l.wall_seconds).collect::<Vec<_>>(),
            "mc_wall_seconds": mc_wall,
        }));
        if !r.complete {
            complete = false;
            break;
        }
    }
    table.flush()?;
    Ok((json!({ "runs": runs }), json!({ "runs": walls }), complete, true))
}

fn run_mc_kind(cfg: &ExperimentConfig, dir: &Path, cancel: &AtomicBool) -> Result<Dispatched, RunError> {
    let s = sampler(cfg)?;
    let level = cfg.mc_level.unwrap_or(cfg.l_max);
    let budget = match (cfg.samples.first(), cfg.eps.first()) {
        (Some(&m), _) => McBudget::Samples(m),
        (None, Some(&eps)) => McBudget::Accuracy { eps, pilot: cfg.mc_pilot },
        (None, None) => unreachable!("validated"),
    };
    let r = run_mc(&s, level, budget, Some(cancel))?;
    r.write_csv(&mut create(&dir.join("mc.csv"))?)?;
    let results = json!({
        "level": r.level, "samples": r.samples, "mean": r.mean, "variance": r.variance,
        "estimator_variance": r.estimator_variance, "cost": r.cost, "pilot_samples": r.pilot_samples,
    });
    Ok((results, json!({ "wall_seconds": r.wall_seconds }), r.complete, true))
}

fn run_varred_kind(cfg: &ExperimentConfig, dir: &Path, cancel: &AtomicBool) -> Result<Dispatched, RunError> {
    let full = sampler(cfg)?;
    let mut out = create(&dir.join("varred.csv"))?;
    writeln!(out, "{VARRED_CSV_HEADER}")?;
    let mut rows = Vec::new();
    let mut walls = Vec::new();
    let mut complete = true;
    for &top in &cfg.varred_levels {
        let s = Sampler::new(full.ladder().truncated(top)?, *full.spec(), cfg.seed.wrapping_add(top as u64))?;
        let v = variance_reduction_experiment(&s, cfg.finest_samples, Some(cancel))?;
        writeln!(out, "{}", v.csv_row())?;
        rows.push(json!({
            "finest_level": v.finest_level, "n_finest": v.n_finest, "factor": v.factor,
            "mlmc": mlmc_json(&v.mlmc), "mc_samples": v.mc.samples,
            "mc_estimator_variance": v.mc.estimator_variance,
        }));
        walls.push(json!({
            "finest_level": top, "mlmc_wall_seconds": v.mlmc.wall_seconds, "mc_wall_seconds": v.mc.wall_seconds,
        }));
        if !(v.mlmc.complete && v.mc.complete) {
            complete = false;
            break;
        }
    }
    out.flush()?;
    Ok((json!({ "experiments": rows }), json!({ "experiments": walls }), complete, true))
}

fn run_table_kind(cfg: &ExperimentConfig, dir: &Path, cancel: &AtomicBool) -> Result<Dispatched, RunError> {
    let s = sampler(cfg)?;
    let allocation: Vec<u64> = if cfg.samples.len() == 1 {
        vec![cfg.samples[0]; cfg.l_max + 1]
    } else {
        cfg.samples.clone()
    };
    let r = run_fixed(&s, &allocation, Some(cancel))?;
    let mut out = create(&dir.join("convergence.csv"))?;
    writeln!(out, "level,n,samples,mean_y,se_y,var_y,log2_abs_mean_y,log2_var_y,mean_p,var_p")?;
    for l in &r.levels {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            l.ell,
            l.n,
            l.samples,
            l.mean,
            l.moments.y.standard_error(),
            l.variance,
            l.mean.abs().log2(),
            l.variance.log2(),
            l.mean_p,
            l.variance_p
        )?;
    }
    out.flush()?;
    r.write_timings_csv(&mut create(&dir.join("timings.csv"))?)?;
    Ok((mlmc_json(&r), json!({ "wall_seconds": r.wall_seconds }), r.complete, true))
}

fn run_mfl_kind(cfg: &ExperimentConfig, dir: &Path) -> Result<Dispatched, RunError> {
    let ladder = cfg.ladder()?;
    let level = *ladder.level(cfg.mc_level.unwrap_or(cfg.l_max));
    let density = cfg.density()?;
    let rho0 = interpolate(&level.grid, |x| density.eval(x));
    let phi_t = interpolate(&level.grid, |x| cfg.phi.eval(x));
    let traj = solve_mfl(&rho0, &level)?;
    let phis = backward_test(&phi_t, &level)?;
    let pairing = crate::pde::martingale_pairing(&traj, &phis)?;
    let mut out = create(&dir.join("mfl.csv"))?;
    writeln!(out, "step,time,mass,min,max,pairing")?;
    for (m, (f, p)) in traj.iter().zip(&pairing).enumerate() {
        writeln!(out, "{},{},{},{},{},{}", m, m as f64 * level.tau, f.mass(), f.min(), f.max(), p)?;
    }
    out.flush()?;
    let last = traj.last().expect("at least the initial state");
    let mut w = create(&dir.join("mfl_final.csv"))?;
    field_io::write_csv(last, &mut w)?;
    w.flush()?;
    let results = json!({
        "level": level.ell, "n": level.grid.n(), "steps": level.steps,
        "final_mass": last.mass(), "final_min": last.min(), "final_max": last.max(),
        "pairing_drift": pairing.iter().map(|p| (p - pairing[0]).abs()).fold(0.0, f64::max),
    });
    Ok((results, json!({}), true, true))
}

fn run_selftest_kind(cfg: &ExperimentConfig, dir: &Path) -> Result<Dispatched, RunError> {
    // exact covariance maps grow like (kappa d n^d)^2; two dimensions suffice
    let d = cfg.d.min(2);
    let mut out = create(&dir.join("selftest.csv"))?;
    writeln!(out, "coupling,d,n_fine,n_coarse,fine_error,coarse_error,min_correlation,parseval_error,passed")?;
    let mut rows = Vec::new();
    let mut all = true;
    for (kind, n) in [(CouplingKind::NearestNeighbour, 4), (CouplingKind::NearestNeighbour, 6), (CouplingKind::Fourier, 6)] {
        let r = exact_covariance_report(kind, d, n)?;
        let parseval = parseval_error(d, n)?;
        let passed = r.fine_error < 1e-12
            && r.coarse_error < 1e-12
            && (r.min_coarse_fine_correlation - 1.0).abs() < 1e-12
            && parseval < 1e-12;
        all &= passed;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.coupling, d, r.n_fine, r.n_coarse, r.fine_error, r.coarse_error, r.min_coarse_fine_correlation, parseval, passed
        )?;
        rows.push(json!({ "coupling": r.coupling, "d": d, "n_fine": n, "passed": passed }));
    }
    out.flush()?;
    Ok((json!({ "checks": rows, "passed": all }), json!({}), true, all))
}
