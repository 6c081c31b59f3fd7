//! Declarative experiment configuration (TOML or JSON).
//!
//! ```toml
//! kind = "mlmc"
//! d = 2
//! n0 = 8
//! tau0 = 0.256          # or: mu = 0.415
//! l_max = 3
//! coupling = "nn"       # or "fourier"
//! n_particles = 1e8     # or "inf" for the noiseless surrogate
//! horizon = 1.024
//! psi = "square"
//! phi = "sinsum"
//! density = "reg"
//! seed = 1
//! eps = [0.0398]
//! ```
//!
//! Unknown keys are rejected. A summary written by a previous run is also
//! accepted and reproduces that run.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::DkError;
use crate::mlmc::{AlphaMode, LevelLadder};
use crate::noise::CouplingKind;
use crate::pde::SchemeWeights;
use crate::qoi::{Density, DensityKind, InitMode, OuterFunction, QoISpec, TestFunction};

pub const SUMMARY_FORMAT: &str = "dkmlmc-summary";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Mlmc,
    Mc,
    Varred,
    ConvergenceTable,
    Mfl,
    NoiseSelftest,
}

fn ser_particles<S: Serializer>(n: &f64, s: S) -> Result<S::Ok, S::Error> {
    if n.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*n)
    }
}

fn de_particles<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Count {
        Num(f64),
        Text(String),
    }
    match Count::deserialize(d)? {
        Count::Num(v) => Ok(v),
        Count::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Count::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got \"{t}\""))),
    }
}

fn default_b1() -> f64 {
    1.0
}
fn default_initial_samples() -> u64 {
    20
}
fn default_pilot() -> u64 {
    100
}
fn default_finest_samples() -> u64 {
    100
}
fn default_workers() -> usize {
    1
}
fn default_output_dir() -> String {
    "dkmlmc-out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: RunKind,
    pub d: usize,
    pub n0: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau0: Option<f64>,
    pub l_max: usize,
    pub coupling: CouplingKind,
    /// half-shifted coarse grids (nearest-neighbour coupling only)
    #[serde(default)]
    pub symmetric: bool,
    #[serde(default)]
    pub b0: f64,
    #[serde(default = "default_b1")]
    pub b1: f64,
    #[serde(serialize_with = "ser_particles", deserialize_with = "de_particles")]
    pub n_particles: f64,
    pub horizon: f64,
    pub psi: OuterFunction,
    pub phi: TestFunction,
    pub density: DensityKind,
    #[serde(default)]
    pub init_mode: InitMode,
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default = "default_initial_samples")]
    pub initial_samples: u64,
    /// per-level samples (convergence-table) or the sample count (mc)
    #[serde(default)]
    pub samples: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_level: Option<usize>,
    #[serde(default = "default_pilot")]
    pub mc_pilot: u64,
    /// also run the equal-accuracy plain Monte Carlo after each mlmc run
    #[serde(default)]
    pub mc_baseline: bool,
    #[serde(default)]
    pub varred_levels: Vec<usize>,
    #[serde(default = "default_finest_samples")]
    pub finest_samples: u64,
    #[serde(default)]
    pub alpha: AlphaMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_guard: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

const REQUIRED: &[&str] = &[
    "kind",
    "d",
    "n0",
    "l_max",
    "coupling",
    "n_particles",
    "horizon",
    "psi",
    "phi",
    "density",
    "seed",
];

const OPTIONAL: &[&str] = &[
    "mu",
    "tau0",
    "symmetric",
    "b0",
    "b1",
    "init_mode",
    "eps",
    "initial_samples",
    "samples",
    "mc_level",
    "mc_pilot",
    "mc_baseline",
    "varred_levels",
    "finest_samples",
    "alpha",
    "density_guard",
    "workers",
    "output_dir",
];

/// Every problem found in a configuration document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.violations.join("; "))
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn one(msg: impl Into<String>) -> Self {
        Self {
            violations: vec![msg.into()],
        }
    }
}

impl ExperimentConfig {
    pub fn weights(&self) -> crate::Result<SchemeWeights> {
        SchemeWeights::new(self.b0, self.b1)
    }

    /// Level-0 time step, from `tau0` or from `mu h_0^2`.
    pub fn tau0(&self) -> f64 {
        match (self.tau0, self.mu) {
            (Some(t), _) => t,
            (None, Some(mu)) => {
                let h = 2.0 * std::f64::consts::PI / self.n0 as f64;
                mu * h * h
            }
            (None, None) => f64::NAN,
        }
    }

    pub fn ladder(&self) -> crate::Result<LevelLadder> {
        let ladder = LevelLadder::new(
            self.d,
            self.n0,
            self.tau0(),
            self.l_max,
            self.coupling,
            self.weights()?,
            self.horizon,
        )?;
        if self.symmetric {
            ladder.with_symmetric_offsets()
        } else {
            Ok(ladder)
        }
    }

    pub fn density(&self) -> crate::Result<Density> {
        Density::new(self.density, self.d)
    }

    pub fn qoi(&self) -> crate::Result<QoISpec> {
        QoISpec::new(self.n_particles, self.horizon, self.psi, self.phi, self.density()?, self.init_mode)
    }

    /// The configuration as a JSON object, in the accepted input format.
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        match (self.mu, self.tau0) {
            (None, None) => v.push("one of `mu` or `tau0` is required".to_string()),
            (Some(_), Some(_)) => v.push("give only one of `mu` and `tau0`".to_string()),
            _ => {}
        }
        if self.d == 0 {
            v.push("`d` must be at least 1".into());
        }
        if self.n0 < 2 {
            v.push("`n0` must be at least 2".into());
        }
        if !(self.n_particles >= 1.0) {
            v.push(format!("`n_particles` must be >= 1, got {}", self.n_particles));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            v.push(format!("`horizon` must be positive, got {}", self.horizon));
        }
        if self.workers == 0 {
            v.push("`workers` must be at least 1".into());
        }
        if self.eps.iter().any(|e| !(*e > 0.0)) {
            v.push("every `eps` must be positive".into());
        }
        if self.symmetric && self.coupling != CouplingKind::NearestNeighbour {
            v.push("`symmetric` requires coupling = \"nn\"".into());
        }
        if self.init_mode == InitMode::Particles && !self.n_particles.is_finite() {
            v.push("particle initialization needs a finite `n_particles`".into());
        }
        if let Err(e) = self.weights() {
            v.push(e.to_string());
        }
        if let AlphaMode::Fixed(a) = self.alpha {
            if !(a > 0.0) {
                v.push(format!("`alpha` must be positive, got {a}"));
            }
        }
        let ladder_ok = v.is_empty();
        if ladder_ok {
            if let Err(e) = self.ladder() {
                v.push(match e {
                    DkError::InvalidLevel(m) | DkError::InvalidGrid(m) | DkError::InvalidArgument(m) => m,
                    other => other.to_string(),
                });
            }
        }
        match self.kind {
            RunKind::Mlmc => {
                if self.eps.is_empty() {
                    v.push("kind = \"mlmc\" needs a non-empty `eps` list".into());
                }
                if self.initial_samples < 2 {
                    v.push("`initial_samples` must be at least 2".into());
                }
                if self.mc_baseline && self.mc_pilot < 2 {
                    v.push("`mc_pilot` must be at least 2".into());
                }
            }
            RunKind::Mc => {
                if self.samples.len() > 1 {
                    v.push("kind = \"mc\" takes a single `samples` entry".into());
                }
                match (self.samples.first(), self.eps.first()) {
                    (None, None) => v.push("kind = \"mc\" needs `samples` or `eps`".into()),
                    (Some(m), _) if *m < 2 => v.push("`samples` must be at least 2".into()),
                    (None, Some(_)) if self.mc_pilot < 2 => v.push("`mc_pilot` must be at least 2".into()),
                    _ => {}
                }
                if self.mc_level.is_some_and(|l| l > self.l_max) {
                    v.push("`mc_level` exceeds `l_max`".into());
                }
            }
            RunKind::Varred => {
                if self.varred_levels.is_empty() {
                    v.push("kind = \"varred\" needs `varred_levels`".into());
                }
                if self.varred_levels.iter().any(|&l| l > self.l_max) {
                    v.push("`varred_levels` entries must not exceed `l_max`".into());
                }
                if self.finest_samples < 2 {
                    v.push("`finest_samples` must be at least 2".into());
                }
            }
            RunKind::ConvergenceTable => {
                if self.samples.len() != 1 && self.samples.len() != self.l_max + 1 {
                    v.push(format!(
                        "kind = \"convergence-table\" needs `samples` with 1 or {} entries",
                        self.l_max + 1
                    ));
                }
                if self.samples.iter().any(|&m| m < 2) {
                    v.push("`samples` entries must be at least 2".into());
                }
            }
            RunKind::Mfl | RunKind::NoiseSelftest => {}
        }
        v
    }
}

fn document_to_value(text: &str) -> Result<Value, ConfigError> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| ConfigError::one(format!("malformed JSON: {e}")))
    } else {
        let t: toml::Table = toml::from_str(text).map_err(|e| ConfigError::one(format!("malformed TOML: {e}")))?;
        serde_json::to_value(t).map_err(|e| ConfigError::one(format!("unrepresentable TOML value: {e}")))
    }
}

/// Parses and validates a TOML or JSON document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let value = document_to_value(text)?;
    let Value::Object(mut map) = value else {
        return Err(ConfigError::one("configuration must be a key-value table"));
    };
    if map.get("format").and_then(Value::as_str) == Some(SUMMARY_FORMAT) {
        match map.remove("config") {
            Some(Value::Object(inner)) => map = inner,
            _ => return Err(ConfigError::one("summary document has no `config` table")),
        }
    }
    parse_map(map)
}

fn parse_map(map: Map<String, Value>) -> Result<ExperimentConfig, ConfigError> {
    let mut violations = Vec::new();
    for key in map.keys() {
        if !REQUIRED.contains(&key.as_str()) && !OPTIONAL.contains(&key.as_str()) {
            violations.push(format!("unknown key `{key}`"));
        }
    }
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| !map.contains_key(*k)).collect();
    if !missing.is_empty() {
        violations.push(format!("missing required keys: {}", missing.join(", ")));
    }
    if !map.contains_key("mu") && !map.contains_key("tau0") {
        violations.push("one of `mu` or `tau0` is required".into());
    }
    if !violations.is_empty() {
        return Err(ConfigError { violations });
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(Value::Object(map)).map_err(|e| ConfigError::one(e.to_string()))?;
    let violations = cfg.validate();
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError { violations })
    }
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::one(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}
