//! Discrete space-time white-noise increments and the two fine/coarse
//! couplings.
//!
//! Every Gaussian is drawn from a [`NormalSource`]. The production source,
//! [`NoiseStream`], is addressed by `(master_seed, domain, level, replicate)`
//! plus a per-draw counter, so a coupled sample is a pure function of its
//! identity and never depends on scheduling.

use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DkError, Result};
use crate::grid::{Field, TorusGrid, VectorField};
use crate::pde::LevelParams;
use crate::spectral::{frequency_index, signed_frequency, SpectralPlan};

pub mod diagnostics;

/// One time-step increment of the vector-valued noise on a level.
pub type NoiseIncrement = VectorField;

/// Supplier of i.i.d. standard normals, one block per draw.
pub trait NormalSource {
    fn next_block(&mut self, out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamRole {
    /// Drives one uncoupled path.
    Single,
    /// Drives a fine/coarse pair; both levels read the same Gaussians.
    Coupled,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(parts: &[u64]) -> [u8; 32] {
    let mut state = 0x6a09_e667_f3bc_c908u64;
    for &p in parts {
        state = splitmix(state ^ splitmix(p));
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

/// Separates the random streams of unrelated experiments sharing a seed.
pub mod domain {
    pub const MLMC: u64 = 0;
    pub const MC: u64 = 1;
    pub const PATHS: u64 = 2;
}

const PARTICLE_TAG: u64 = 0x7061_7274_6963_6c65;

/// Deterministic, counter-addressed Gaussian stream for one replicate.
///
/// Draw number `counter` is generated by ChaCha8 keyed on
/// `(master_seed, domain, level, replicate)` with stream id `counter`, so it
/// can be regenerated independently of any other draw.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    master_seed: u64,
    domain: u64,
    level: usize,
    replicate: u64,
    role: StreamRole,
    counter: u64,
    key: [u8; 32],
}

impl NoiseStream {
    pub fn new(master_seed: u64, level: usize, replicate: u64, role: StreamRole) -> Self {
        Self::with_domain(master_seed, domain::MLMC, level, replicate, role)
    }

    pub fn with_domain(
        master_seed: u64,
        domain: u64,
        level: usize,
        replicate: u64,
        role: StreamRole,
    ) -> Self {
        Self {
            master_seed,
            domain,
            level,
            replicate,
            role,
            counter: 0,
            key: derive_key(&[master_seed, domain, level as u64, replicate]),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn replicate(&self) -> u64 {
        self.replicate
    }

    pub fn role(&self) -> StreamRole {
        self.role
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn set_counter(&mut self, counter: u64) {
        self.counter = counter;
    }

    /// Independent generator for initial-datum particle positions of this
    /// replicate; shared by every level of a coupled pair.
    pub fn particle_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(derive_key(&[
            self.master_seed,
            self.domain,
            self.level as u64,
            self.replicate,
            PARTICLE_TAG,
        ]))
    }

    pub(crate) fn require(&self, role: StreamRole) -> Result<()> {
        if self.role != role {
            return Err(DkError::StreamRole {
                expected: match role {
                    StreamRole::Single => "single",
                    StreamRole::Coupled => "coupled",
                },
                actual: self.role,
            });
        }
        Ok(())
    }
}

impl NormalSource for NoiseStream {
    fn next_block(&mut self, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.counter);
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        self.counter += 1;
    }
}

/// Coupling of consecutive levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CouplingKind {
    /// Right-most nearest-neighbour aggregation, spatial ratio 2.
    #[serde(rename = "nn")]
    NearestNeighbour,
    /// Shared low Fourier frequencies, spatial ratio 3.
    #[serde(rename = "fourier")]
    Fourier,
}

impl CouplingKind {
    pub fn space_ratio(&self) -> usize {
        match self {
            CouplingKind::NearestNeighbour => 2,
            CouplingKind::Fourier => 3,
        }
    }

    /// `kappa_t = tau_{l-1} / tau_l`, the square of the spatial ratio.
    pub fn time_ratio(&self) -> usize {
        self.space_ratio() * self.space_ratio()
    }

    pub fn name(&self) -> &'static str {
        match self {
            CouplingKind::NearestNeighbour => "nn",
            CouplingKind::Fourier => "fourier",
        }
    }
}

impl std::str::FromStr for CouplingKind {
    type Err = DkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(CouplingKind::NearestNeighbour),
            "fourier" => Ok(CouplingKind::Fourier),
            other => Err(DkError::UnknownBuiltin {
                kind: "coupling",
                name: other.to_string(),
            }),
        }
    }
}

/// Per-site, per-component variance of a white increment: `tau h^{-d}`.
pub fn white_variance(level: &LevelParams) -> f64 {
    level.tau / level.grid.cell_volume()
}

/// Fills `out` with a white increment drawn from `source`.
pub fn fill_white(source: &mut dyn NormalSource, level: &LevelParams, out: &mut VectorField, buf: &mut Vec<f64>) {
    let grid = level.grid;
    let len = grid.len();
    buf.resize(len * grid.d(), 0.0);
    source.next_block(buf);
    let scale = white_variance(level).sqrt();
    for r in 0..grid.d() {
        for (o, z) in out.component_mut(r).values_mut().iter_mut().zip(&buf[r * len..(r + 1) * len]) {
            *o = scale * z;
        }
    }
}

/// i.i.d. Gaussian increment with variance `tau h^{-d}` per site and component.
pub fn white_increment(stream: &mut NoiseStream, level: &LevelParams) -> Result<NoiseIncrement> {
    stream.require(StreamRole::Single)?;
    let mut out = VectorField::zeros(level.grid);
    fill_white(stream, level, &mut out, &mut Vec::new());
    Ok(out)
}

/// `F_xi(x) = (2 pi)^{-d/2} exp(i xi . x)`.
pub fn fourier_basis(xi: &[i64], x: &[f64]) -> Complex64 {
    let phase: f64 = xi.iter().zip(x).map(|(&k, &y)| k as f64 * y).sum();
    Complex64::from_polar((2.0 * PI).powf(-(xi.len() as f64) / 2.0), phase)
}

fn check_pair(fine: &LevelParams, coarse: &LevelParams, kind: CouplingKind) -> Result<()> {
    let ratio = kind.space_ratio();
    let (f, c) = (fine.grid, coarse.grid);
    if f.d() != c.d() || c.n() * ratio != f.n() {
        return Err(DkError::RatioMismatch(format!(
            "{} coupling needs n_fine = {ratio} n_coarse, got {} and {}",
            kind.name(),
            f.n(),
            c.n()
        )));
    }
    let kappa = kind.time_ratio() as f64;
    if ((coarse.tau - kappa * fine.tau) / coarse.tau).abs() > 1e-12 {
        return Err(DkError::RatioMismatch(format!(
            "{} coupling needs tau_coarse = {kappa} tau_fine, got {} and {}",
            kind.name(),
            coarse.tau,
            fine.tau
        )));
    }
    if kind == CouplingKind::Fourier && f.offset() != c.offset() {
        return Err(DkError::RatioMismatch("Fourier coupling needs a common origin".into()));
    }
    Ok(())
}

/// Produces fine increments and, after every `kappa_t` of them, the coarse
/// increment they aggregate to.
pub trait IncrementCoupler: Send {
    fn kappa(&self) -> usize;

    /// Next fine increment; the second entry is the coarse increment when
    /// this call completes a coarse step.
    fn advance(&mut self, source: &mut dyn NormalSource) -> (&NoiseIncrement, Option<&NoiseIncrement>);
}

/// Right-most nearest-neighbour coupling: the coarse Brownian motion at `y`
/// is `2^{-d/2}` times the sum of the fine ones on `{y + h_fine v : v in {0,1}^d}`.
#[derive(Debug, Clone)]
pub struct NnCoupler {
    fine: LevelParams,
    kappa: usize,
    sub: usize,
    parent: Vec<usize>,
    fine_inc: VectorField,
    coarse_acc: VectorField,
    coarse_out: VectorField,
    buf: Vec<f64>,
}

impl NnCoupler {
    pub fn new(fine: &LevelParams, coarse: &LevelParams) -> Result<Self> {
        check_pair(fine, coarse, CouplingKind::NearestNeighbour)?;
        let fg = fine.grid;
        let cg = coarse.grid;
        let mut mi = vec![0usize; fg.d()];
        let parent = (0..fg.len())
            .map(|z| {
                fg.multi_index(z, &mut mi);
                for k in mi.iter_mut() {
                    *k /= 2;
                }
                cg.flat_index(&mi)
            })
            .collect();
        Ok(Self {
            fine: *fine,
            kappa: CouplingKind::NearestNeighbour.time_ratio(),
            sub: 0,
            parent,
            fine_inc: VectorField::zeros(fg),
            coarse_acc: VectorField::zeros(cg),
            coarse_out: VectorField::zeros(cg),
            buf: Vec::new(),
        })
    }
}

impl IncrementCoupler for NnCoupler {
    fn kappa(&self) -> usize {
        self.kappa
    }

    fn advance(&mut self, source: &mut dyn NormalSource) -> (&NoiseIncrement, Option<&NoiseIncrement>) {
        fill_white(source, &self.fine, &mut self.fine_inc, &mut self.buf);
        let d = self.fine.grid.d();
        for r in 0..d {
            let acc = self.coarse_acc.component_mut(r).values_mut();
            for (z, &v) in self.fine_inc.component(r).values().iter().enumerate() {
                acc[self.parent[z]] += v;
            }
        }
        self.sub += 1;
        if self.sub < self.kappa {
            return (&self.fine_inc, None);
        }
        self.sub = 0;
        let scale = 0.5f64.powi(d as i32);
        for r in 0..d {
            let acc = self.coarse_acc.component_mut(r).values_mut();
            let out = self.coarse_out.component_mut(r).values_mut();
            for (o, a) in out.iter_mut().zip(acc.iter_mut()) {
                *o = scale * *a;
                *a = 0.0;
            }
        }
        (&self.fine_inc, Some(&self.coarse_out))
    }
}

/// Fourier coupling: fine increments are synthesized from Hermitian Gaussian
/// coefficients on all fine frequencies; the coarse increment reuses the
/// temporal sums of the coefficients on the coarse frequency set.
///
/// Coarse frequencies with a component at the coarse Nyquist value `-n_c/2`
/// have no conjugate partner inside the coarse set at the fine level; their
/// summed coefficients are combined with those of their coarse partner,
/// `(S_xi + conj S_{-xi})/sqrt 2`, which keeps the coarse field real and
/// exactly white.
#[derive(Debug, Clone)]
pub struct FourierCoupler {
    fine: LevelParams,
    kappa: usize,
    sub: usize,
    /// `(k, partner)` with `k < partner`: complex conjugate pairs.
    pairs: Vec<(usize, usize)>,
    /// self-conjugate frequencies, real coefficients
    selfs: Vec<usize>,
    fine_sign: Vec<f64>,
    /// coarse DFT index -> fine DFT index of the same frequency
    shared: Vec<usize>,
    /// coarse DFT index -> coarse partner, for boundary frequencies only
    boundary_partner: Vec<Option<usize>>,
    coarse_sign: Vec<f64>,
    fine_coeffs: Vec<Vec<Complex64>>,
    coarse_sums: Vec<Vec<Complex64>>,
    coarse_coeffs: Vec<Vec<Complex64>>,
    fine_plan: SpectralPlan,
    coarse_plan: SpectralPlan,
    work_fine: Vec<Complex64>,
    work_coarse: Vec<Complex64>,
    fine_inc: VectorField,
    coarse_out: VectorField,
    buf: Vec<f64>,
    imag_residue: f64,
}

fn partner_index(grid: &TorusGrid, k: usize, mi: &mut [usize]) -> usize {
    grid.multi_index(k, mi);
    let n = grid.n();
    for c in mi.iter_mut() {
        *c = (n - *c) % n;
    }
    grid.flat_index(mi)
}

fn parity_sign(grid: &TorusGrid, k: usize, mi: &mut [usize]) -> f64 {
    // exp(i xi . x) at x = -pi + j h carries the factor (-1)^{sum xi}
    grid.multi_index(k, mi);
    let s: i64 = mi.iter().map(|&c| signed_frequency(c, grid.n())).sum();
    if s.rem_euclid(2) == 0 {
        1.0
    } else {
        -1.0
    }
}

impl FourierCoupler {
    pub fn new(fine: &LevelParams, coarse: &LevelParams) -> Result<Self> {
        check_pair(fine, coarse, CouplingKind::Fourier)?;
        let fg = fine.grid;
        let cg = coarse.grid;
        let d = fg.d();
        let mut mi = vec![0usize; d];
        let mut pairs = Vec::new();
        let mut selfs = Vec::new();
        for k in 0..fg.len() {
            let p = partner_index(&fg, k, &mut mi);
            match k.cmp(&p) {
                std::cmp::Ordering::Equal => selfs.push(k),
                std::cmp::Ordering::Less => pairs.push((k, p)),
                std::cmp::Ordering::Greater => {}
            }
        }
        let fine_sign = (0..fg.len()).map(|k| parity_sign(&fg, k, &mut mi)).collect();
        let coarse_sign = (0..cg.len()).map(|k| parity_sign(&cg, k, &mut mi)).collect();

        let mut fi = vec![0usize; d];
        let mut shared = Vec::with_capacity(cg.len());
        let mut boundary_partner = Vec::with_capacity(cg.len());
        for kc in 0..cg.len() {
            cg.multi_index(kc, &mut mi);
            let mut boundary = false;
            for (f, &c) in fi.iter_mut().zip(mi.iter()) {
                let xi = signed_frequency(c, cg.n());
                // -xi must also be a coarse frequency for the fine partner to be shared
                if signed_frequency(frequency_index(-xi, cg.n()), cg.n()) != -xi {
                    boundary = true;
                }
                *f = frequency_index(xi, fg.n());
            }
            shared.push(fg.flat_index(&fi));
            boundary_partner.push(boundary.then(|| partner_index(&cg, kc, &mut mi)));
        }

        Ok(Self {
            fine: *fine,
            kappa: CouplingKind::Fourier.time_ratio(),
            sub: 0,
            pairs,
            selfs,
            fine_sign,
            shared,
            boundary_partner,
            coarse_sign,
            fine_coeffs: vec![vec![Complex64::default(); fg.len()]; d],
            coarse_sums: vec![vec![Complex64::default(); cg.len()]; d],
            coarse_coeffs: vec![vec![Complex64::default(); cg.len()]; d],
            fine_plan: SpectralPlan::new(&fg),
            coarse_plan: SpectralPlan::new(&cg),
            work_fine: vec![Complex64::default(); fg.len()],
            work_coarse: vec![Complex64::default(); cg.len()],
            fine_inc: VectorField::zeros(fg),
            coarse_out: VectorField::zeros(cg),
            buf: Vec::new(),
            imag_residue: 0.0,
        })
    }

    /// Coefficients `beta_xi` of the last fine increment, component `r`, in
    /// fine DFT order.
    pub fn fine_coefficients(&self, r: usize) -> &[Complex64] {
        &self.fine_coeffs[r]
    }

    /// Coefficients of the last coarse increment, component `r`, in coarse
    /// DFT order.
    pub fn coarse_coefficients(&self, r: usize) -> &[Complex64] {
        &self.coarse_coeffs[r]
    }

    /// For each coarse DFT index: the fine DFT index of the same frequency and
    /// whether the frequency sits on the coarse Nyquist boundary.
    pub fn shared_frequencies(&self) -> Vec<(usize, usize, bool)> {
        self.shared
            .iter()
            .enumerate()
            .map(|(kc, &kf)| (kc, kf, self.boundary_partner[kc].is_some()))
            .collect()
    }

    /// Largest `|Im| / max |Re|` seen in synthesized fields so far.
    pub fn imag_residue(&self) -> f64 {
        self.imag_residue
    }

    fn synthesize(
        plan: &mut SpectralPlan,
        work: &mut [Complex64],
        coeffs: &[Complex64],
        sign: &[f64],
        out: &mut Field,
        d: usize,
    ) -> f64 {
        for ((w, c), s) in work.iter_mut().zip(coeffs).zip(sign) {
            *w = c * *s;
        }
        plan.inverse(work);
        let norm = (2.0 * PI).powf(-(d as f64) / 2.0);
        let mut max_re = 0.0f64;
        let mut max_im = 0.0f64;
        for (o, w) in out.values_mut().iter_mut().zip(work.iter()) {
            *o = w.re * norm;
            max_re = max_re.max(w.re.abs());
            max_im = max_im.max(w.im.abs());
        }
        if max_re > 0.0 {
            max_im / max_re
        } else {
            max_im
        }
    }
}

impl IncrementCoupler for FourierCoupler {
    fn kappa(&self) -> usize {
        self.kappa
    }

    fn advance(&mut self, source: &mut dyn NormalSource) -> (&NoiseIncrement, Option<&NoiseIncrement>) {
        let fg = self.fine.grid;
        let d = fg.d();
        let len = fg.len();
        self.buf.resize(d * len, 0.0);
        source.next_block(&mut self.buf);
        let tau = self.fine.tau;
        let real_scale = tau.sqrt();
        let pair_scale = (0.5 * tau).sqrt();
        for r in 0..d {
            let z = &self.buf[r * len..(r + 1) * len];
            let beta = &mut self.fine_coeffs[r];
            let mut next = 0;
            for &k in &self.selfs {
                beta[k] = Complex64::new(real_scale * z[next], 0.0);
                next += 1;
            }
            for &(k, p) in &self.pairs {
                let c = Complex64::new(pair_scale * z[next], pair_scale * z[next + 1]);
                beta[k] = c;
                beta[p] = c.conj();
                next += 2;
            }
            debug_assert_eq!(next, len);
            let res = Self::synthesize(
                &mut self.fine_plan,
                &mut self.work_fine,
                beta,
                &self.fine_sign,
                self.fine_inc.component_mut(r),
                d,
            );
            self.imag_residue = self.imag_residue.max(res);
            for (s, &kf) in self.coarse_sums[r].iter_mut().zip(&self.shared) {
                *s += beta[kf];
            }
        }
        self.sub += 1;
        if self.sub < self.kappa {
            return (&self.fine_inc, None);
        }
        self.sub = 0;
        for r in 0..d {
            let sums = &mut self.coarse_sums[r];
            let gamma = &mut self.coarse_coeffs[r];
            for kc in 0..sums.len() {
                gamma[kc] = match self.boundary_partner[kc] {
                    None => sums[kc],
                    Some(p) => (sums[kc] + sums[p].conj()) / SQRT_2,
                };
            }
            for s in sums.iter_mut() {
                *s = Complex64::default();
            }
            let res = Self::synthesize(
                &mut self.coarse_plan,
                &mut self.work_coarse,
                gamma,
                &self.coarse_sign,
                self.coarse_out.component_mut(r),
                d,
            );
            self.imag_residue = self.imag_residue.max(res);
        }
        (&self.fine_inc, Some(&self.coarse_out))
    }
}

/// Builds the coupler for `kind`.
pub fn make_coupler(kind: CouplingKind, fine: &LevelParams, coarse: &LevelParams) -> Result<Box<dyn IncrementCoupler>> {
    Ok(match kind {
        CouplingKind::NearestNeighbour => Box::new(NnCoupler::new(fine, coarse)?),
        CouplingKind::Fourier => Box::new(FourierCoupler::new(fine, coarse)?),
    })
}

fn coupled_increments(
    kind: CouplingKind,
    stream: &mut NoiseStream,
    fine: &LevelParams,
    coarse: &LevelParams,
) -> Result<(Vec<NoiseIncrement>, NoiseIncrement)> {
    stream.require(StreamRole::Coupled)?;
    let mut coupler = make_coupler(kind, fine, coarse)?;
    let mut fines = Vec::with_capacity(coupler.kappa());
    loop {
        let (f, c) = coupler.advance(stream);
        fines.push(f.clone());
        if let Some(c) = c {
            return Ok((fines, c.clone()));
        }
    }
}

/// `kappa_t = 4` fine increments and the coarse increment they aggregate to
/// under the right-most nearest-neighbour coupling.
pub fn nn_coupled_increments(
    stream: &mut NoiseStream,
    fine: &LevelParams,
    coarse: &LevelParams,
) -> Result<(Vec<NoiseIncrement>, NoiseIncrement)> {
    coupled_increments(CouplingKind::NearestNeighbour, stream, fine, coarse)
}

/// `kappa_t = 9` fine increments and the coarse increment sharing their low
/// Fourier frequencies.
pub fn fourier_coupled_increments(
    stream: &mut NoiseStream,
    fine: &LevelParams,
    coarse: &LevelParams,
) -> Result<(Vec<NoiseIncrement>, NoiseIncrement)> {
    coupled_increments(CouplingKind::Fourier, stream, fine, coarse)
}
