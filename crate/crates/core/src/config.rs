//! TOML run configuration.
//!
//! ```toml
//! [manifold]
//! kind = "sphere"          # or "ellipsoid" with coeffs = [..]
//! dim = 20
//!
//! [sde]
//! kind = "sphere_bm"
//!
//! [run]
//! schemes = ["exp_em", "eu_em", "gcg"]
//! deltas = [0.125, 0.0625]
//! steps = 1000             # or horizon = <T>
//! paths = 50
//! seed = 42
//! reference_delta = 0.0001220703125   # optional, enables strong error
//! functional = "half-last-coord-squared"  # or "none"
//!
//! [output]
//! dir = "out"
//! emit_per_iteration = false
//! ```
//!
//! Unknown keys are rejected.

use std::path::PathBuf;

use serde::Deserialize;

use crate::experiments::{ExperimentConfig, FunctionalKind, Horizon, ManifoldSpec, SdeSpec};
use crate::schemes::SchemeId;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfigFile {
    pub manifold: ManifoldSection,
    pub sde: SdeSection,
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSection {
    pub kind: String,
    pub dim: Option<i64>,
    pub coeffs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSection {
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub schemes: Vec<String>,
    pub deltas: Vec<f64>,
    pub horizon: Option<f64>,
    pub steps: Option<i64>,
    pub paths: i64,
    pub seed: u64,
    pub reference_delta: Option<f64>,
    #[serde(default = "default_functional")]
    pub functional: String,
}

fn default_functional() -> String {
    "none".to_string()
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub emit_per_iteration: bool,
}

/// Field-level diagnostics for a config that cannot be used.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

impl CliConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn manifold_spec(&self) -> Result<ManifoldSpec, ConfigError> {
        let m = &self.manifold;
        let spec = match m.kind.as_str() {
            "sphere" => {
                if m.coeffs.is_some() {
                    return Err(invalid("manifold.coeffs: not used by kind \"sphere\""));
                }
                match m.dim {
                    Some(d) if d >= 1 => ManifoldSpec::Sphere { dim: d as usize },
                    Some(d) => return Err(invalid(&format!("manifold.dim: must be at least 1, got {d}"))),
                    None => return Err(invalid("manifold.dim: required for kind \"sphere\"")),
                }
            }
            "ellipsoid" => {
                let coeffs = m
                    .coeffs
                    .clone()
                    .ok_or_else(|| invalid("manifold.coeffs: required for kind \"ellipsoid\""))?;
                if let Some(d) = m.dim {
                    if d < 1 || d as usize + 1 != coeffs.len() {
                        return Err(invalid(&format!(
                            "manifold.dim: {d} does not match {} coefficients",
                            coeffs.len()
                        )));
                    }
                }
                if coeffs.len() < 2 || coeffs.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
                    return Err(invalid("manifold.coeffs: need at least two positive coefficients"));
                }
                ManifoldSpec::Ellipsoid { coeffs }
            }
            other => {
                return Err(invalid(&format!(
                    "manifold.kind: unknown kind {other:?} (expected \"sphere\" or \"ellipsoid\")"
                )))
            }
        };
        Ok(spec)
    }

    /// Builds and validates the experiment; `seed` overrides `run.seed`.
    pub fn to_experiment(&self, seed: Option<u64>) -> Result<ExperimentConfig, ConfigError> {
        let mut problems = Vec::new();
        let manifold = match self.manifold_spec() {
            Ok(m) => Some(m),
            Err(ConfigError::Invalid(p)) => {
                problems.extend(p);
                None
            }
            Err(e) => return Err(e),
        };
        let sde = match self.sde.kind.as_str() {
            "sphere_bm" => Some(SdeSpec::SphereBm),
            other => {
                problems.push(format!("sde.kind: unknown kind {other:?} (expected \"sphere_bm\")"));
                None
            }
        };
        let mut schemes = Vec::new();
        for s in &self.run.schemes {
            match s.parse::<SchemeId>() {
                Ok(id) => schemes.push(id),
                Err(e) => problems.push(format!("run.schemes: {e}")),
            }
        }
        let horizon = match (self.run.horizon, self.run.steps) {
            (Some(t), None) => Some(Horizon::Time(t)),
            (None, Some(m)) if m >= 1 => Some(Horizon::Steps(m as usize)),
            (None, Some(m)) => {
                problems.push(format!("run.steps: must be at least 1, got {m}"));
                None
            }
            (Some(_), Some(_)) => {
                problems.push("run: give either horizon or steps, not both".to_string());
                None
            }
            (None, None) => {
                problems.push("run: one of horizon or steps is required".to_string());
                None
            }
        };
        if self.run.paths < 1 {
            problems.push(format!("run.paths: must be at least 1, got {}", self.run.paths));
        }
        let functional = match self.run.functional.as_str() {
            "none" => Some(FunctionalKind::None),
            "half-last-coord-squared" => Some(FunctionalKind::HalfLastCoordSquared),
            other => {
                problems.push(format!(
                    "run.functional: unknown functional {other:?} (expected \"half-last-coord-squared\" or \"none\")"
                ));
                None
            }
        };
        let (Some(manifold), Some(sde), Some(horizon), Some(functional)) = (manifold, sde, horizon, functional) else {
            return Err(ConfigError::Invalid(problems));
        };
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        let config = ExperimentConfig {
            manifold,
            sde,
            schemes,
            deltas: self.run.deltas.clone(),
            horizon,
            paths: self.run.paths as u64,
            master_seed: seed.unwrap_or(self.run.seed),
            reference_delta: self.run.reference_delta,
            functional,
            emit_per_iteration: self.output.emit_per_iteration,
        };
        config.validate().map_err(ConfigError::Invalid)?;
        Ok(config)
    }
}

fn invalid(msg: &str) -> ConfigError {
    ConfigError::Invalid(vec![msg.to_string()])
}
