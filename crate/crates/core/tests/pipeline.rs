use std::sync::atomic::AtomicBool;

use dk_mlmc::cli::{self, ErrorClass};
use dk_mlmc::dk::{simulate_coupled_pair, simulate_path, PathSimulator};
use dk_mlmc::grid::{interpolate, Field};
use dk_mlmc::mlmc::{LevelLadder, Sampler};
use dk_mlmc::noise::{domain, CouplingKind, NoiseStream, StreamRole};
use dk_mlmc::pde::{solve_mfl, SchemeWeights};
use dk_mlmc::qoi::{builtin_density, InitMode, OuterFunction, QoISpec, TestFunction};
use dk_mlmc::stats::{two_sample_z, MomentAccumulator};
use proptest::prelude::*;

fn ladder(l_max: usize, coupling: CouplingKind) -> LevelLadder {
    let (n0, tau0, horizon) = match coupling {
        CouplingKind::NearestNeighbour => (8, 0.256, 1.024),
        CouplingKind::Fourier => (6, 0.288, 0.576),
    };
    LevelLadder::new(2, n0, tau0, l_max, coupling, SchemeWeights::explicit(), horizon).unwrap()
}

fn spec(n_particles: f64, horizon: f64) -> QoISpec {
    QoISpec::new(
        n_particles,
        horizon,
        OuterFunction::Identity,
        TestFunction::Sinsum,
        builtin_density("reg").unwrap(),
        InitMode::Deterministic,
    )
    .unwrap()
}

fn reg(grid: &dk_mlmc::grid::TorusGrid) -> Field {
    let rho = builtin_density("reg").unwrap();
    interpolate(grid, |x| rho.eval(x))
}

const DESK: &str = r#"
kind = "convergence-table"
d = 2
n0 = 8
tau0 = 0.256
l_max = 2
coupling = "nn"
n_particles = 1e6
horizon = 1.024
psi = "square"
phi = "sinsum"
density = "reg"
seed = 3
samples = [50]
"#;

#[test]
fn cancelled_run_writes_incomplete_results() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = cli::parse_config(DESK).unwrap();
    cfg.output_dir = tmp.path().to_string_lossy().into_owned();
    let cancel = AtomicBool::new(true);
    match cli::run_with_cancel(&cfg, &cancel) {
        Ok(outcome) => {
            assert!(!outcome.complete);
            assert_eq!(outcome.exit_code(), 3);
            assert_eq!(outcome.summary["complete"], false);
            assert!(tmp.path().join("summary.json").exists());
        }
        Err(e) => assert_eq!(e.class, ErrorClass::Interrupted),
    }
    let outcome = cli::run_with_cancel(&cfg, &AtomicBool::new(false)).unwrap();
    assert!(outcome.complete);
    assert_eq!(outcome.exit_code(), 0);
}

#[test]
fn summary_is_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = cli::parse_config(DESK).unwrap();
    cfg.output_dir = tmp.path().join("a").to_string_lossy().into_owned();
    let a = cli::run(&cfg).unwrap().summary;
    cfg.output_dir = tmp.path().join("b").to_string_lossy().into_owned();
    let mut b = cli::run(&cfg).unwrap().summary;
    b["config"]["output_dir"] = a["config"]["output_dir"].clone();
    assert_eq!(a, b);
}

#[test]
fn coupling_shrinks_level_differences() {
    // coupled (fine n = 32, coarse n = 16) vs independent single-level paths
    let l = ladder(2, CouplingKind::NearestNeighbour);
    let (fine, coarse) = (*l.level(2), *l.level(1));
    let phi = interpolate(&coarse.grid, |x| TestFunction::Sinsum.eval(x));
    let (fi, ci) = (reg(&fine.grid), reg(&coarse.grid));
    let n: f64 = 1e8;
    let project = |f: &Field| -> Field {
        // fine values at the coarse points
        let mut idx = [0usize; 2];
        let v = (0..coarse.grid.len())
            .map(|i| {
                coarse.grid.multi_index(i, &mut idx);
                f.values()[fine.grid.flat_index(&[2 * idx[0], 2 * idx[1]])]
            })
            .collect();
        Field::new(coarse.grid, v).unwrap()
    };
    let pair_stat = |a: &Field, b: &Field| -> f64 {
        let d = project(a).sub(b).unwrap();
        dk_mlmc::grid::inner(&d, &phi).unwrap() * n.sqrt()
    };
    let mut coupled = MomentAccumulator::new();
    let mut independent = MomentAccumulator::new();
    for rep in 0..200 {
        let mut s = NoiseStream::with_domain(4, domain::PATHS, 2, rep, StreamRole::Coupled);
        let (a, b) = simulate_coupled_pair(&fi, &ci, &fine, &coarse, CouplingKind::NearestNeighbour, n, &mut s).unwrap();
        coupled.push(pair_stat(&a, &b));
        let mut s1 = NoiseStream::with_domain(4, domain::PATHS, 2, 1000 + rep, StreamRole::Single);
        let mut s2 = NoiseStream::with_domain(4, domain::PATHS, 1, 2000 + rep, StreamRole::Single);
        let a = simulate_path(&fi, &fine, n, &mut s1).unwrap();
        let b = simulate_path(&ci, &coarse, n, &mut s2).unwrap();
        independent.push(pair_stat(&a, &b));
    }
    let ratio = coupled.variance() / independent.variance();
    assert!(ratio < 0.2, "coupled/independent variance ratio {ratio}");
}

#[test]
fn coarse_marginal_matches_single_level_law() {
    // P_coarse of the (2, 1) pair and P_fine of the (1, 0) pair share a law
    for coupling in [CouplingKind::NearestNeighbour, CouplingKind::Fourier] {
        let l = ladder(2, coupling);
        let s = Sampler::new(l.clone(), spec(1e6, l.horizon()), 21).unwrap();
        let a = s.sample_level(2, 0..300, None).unwrap();
        let b = s.sample_level(1, 0..1200, None).unwrap();
        let mc = s.sample_mc(1, 0..1200, None).unwrap();
        let (pa, pb, pm) = (&a.p_coarse, &b.p_fine, &mc.p_fine);
        let se2 = |m: &MomentAccumulator| m.variance() / m.count() as f64;
        let z1 = two_sample_z(pa.mean(), se2(pa), pb.mean(), se2(pb));
        let z2 = two_sample_z(pm.mean(), se2(pm), pb.mean(), se2(pb));
        assert!(z1.abs() < 4.0 && z2.abs() < 4.0, "{coupling:?}: z {z1} {z2}");
        // variances agree within sampling error of the variance
        let vr = pa.variance() / pb.variance();
        assert!((0.7..1.4).contains(&vr), "{coupling:?}: variance ratio {vr}");
    }
}

#[test]
fn fluctuations_concentrate_at_large_n() {
    let l = ladder(1, CouplingKind::NearestNeighbour);
    let level = *l.level(1);
    let init = reg(&level.grid);
    let mean_field = solve_mfl(&init, &level).unwrap();
    let sup_mean = |n: f64, seed: u64| {
        let mut sim = PathSimulator::new(&level, n);
        let mut acc = MomentAccumulator::new();
        for rep in 0..200 {
            let mut s = NoiseStream::with_domain(seed, domain::PATHS, 1, rep, StreamRole::Single);
            let mut sup: f64 = 0.0;
            sim.run_observed(&init, &mut s, |m, rho| {
                for (a, b) in rho.iter().zip(mean_field[m].values()) {
                    sup = sup.max((a - b).abs());
                }
            })
            .unwrap();
            acc.push(sup);
        }
        acc.mean()
    };
    let big = sup_mean(2e9, 31);
    let ref_ = sup_mean(1e8, 32);
    let ratio = ref_ / big;
    assert!((3.6..5.4).contains(&ratio), "ratio {ratio}, predicted sqrt(20)");
    assert!(big < 1e-2 * mean_field[0].min(), "sup deviation {big}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn paths_conserve_mass(seed in any::<u64>(), log_n in 0.0f64..8.0, rep in 0u64..1000) {
        let l = ladder(1, CouplingKind::NearestNeighbour);
        let level = *l.level(1);
        let init = reg(&level.grid);
        let mut s = NoiseStream::with_domain(seed, domain::PATHS, 1, rep, StreamRole::Single);
        let out = simulate_path(&init, &level, 10f64.powf(log_n), &mut s).unwrap();
        let scale = out.values().iter().map(|v| v.abs()).sum::<f64>() * level.grid.cell_volume();
        prop_assert!((out.mass() - init.mass()).abs() <= 1e-13 * scale.max(1.0));
    }

    #[test]
    fn streams_are_reproducible(seed in any::<u64>(), rep in any::<u64>()) {
        let l = ladder(1, CouplingKind::NearestNeighbour);
        let level = *l.level(1);
        let init = reg(&level.grid);
        let run = || {
            let mut s = NoiseStream::with_domain(seed, domain::PATHS, 1, rep, StreamRole::Single);
            simulate_path(&init, &level, 1e4, &mut s).unwrap()
        };
        prop_assert_eq!(run(), run());
    }
}
