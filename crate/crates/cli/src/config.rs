//! Experiment configuration: JSON, fail-closed on unknown keys.

use std::path::{Path, PathBuf};

use equichk::dynamics::{NoiseMode, TheoryPath};
use equichk::identities::{Mutation, StationaryConfig};
use equichk::models::Dataset;
use equichk::transforms::{build_transform, TransformKind, TransformSpec, Transformation};
use equichk::{build_model, DiffConfig, Loss, Model, ModelSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    CheckSuite,
    Flow,
    SgfDrift,
    StationarySpectrum,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::CheckSuite => "check_suite",
            Experiment::Flow => "flow",
            Experiment::SgfDrift => "sgf_drift",
            Experiment::StationarySpectrum => "stationary_spectrum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Identity residual tolerance; defaults by differentiation mode.
    pub identity: Option<f64>,
    /// Relative charge drift allowed along gradient flow.
    pub charge: f64,
    /// Normalized `⟨Δθ, X⟩` allowed per descent step.
    pub orthogonality: f64,
    /// Relative gap allowed in the norm-growth identity.
    pub norm_growth: f64,
    /// Relative gap allowed between the two drift forms.
    pub drift_identity: f64,
    pub stationary: StationaryConfig,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            identity: None,
            charge: 1e-8,
            orthogonality: 1e-10,
            norm_growth: 1e-7,
            drift_identity: 1e-8,
            stationary: StationaryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dynamics {
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
    /// Gradient-descent step size; descent is skipped when absent.
    pub eta: Option<f64>,
    pub steps: usize,
    pub sigma: f64,
    pub ensemble: usize,
    pub noise_mode: NoiseMode,
    pub theory_path: TheoryPath,
    /// Initial parameters; the model's seeded initialization when absent.
    pub initial: Option<Vec<f64>>,
}

impl Default for Dynamics {
    fn default() -> Self {
        Dynamics {
            t_end: 1.0,
            dt: 1e-2,
            eta: None,
            steps: 1000,
            sigma: 0.1,
            ensemble: 2000,
            noise_mode: NoiseMode::ExactSde,
            theory_path: TheoryPath::Pathwise,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Run every catalog model with every compatible transformation
    /// (`check_suite` only); `model`, `loss` and `transforms` are then unused.
    #[serde(default)]
    pub catalog: bool,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub loss: Option<Loss>,
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
    /// Samples for expected-loss objectives; `loss.target` is ignored then.
    #[serde(default)]
    pub dataset: Option<Dataset>,
    /// Master seeds; the first one drives dynamics.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_positions")]
    pub positions: usize,
    #[serde(default = "default_trials")]
    pub last_layer_trials: usize,
    #[serde(default)]
    pub diff: DiffConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub dynamics: Dynamics,
    #[serde(default)]
    pub mutation: Option<Mutation>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_positions() -> usize {
    3
}

fn default_trials() -> usize {
    4
}

fn default_output() -> PathBuf {
    PathBuf::from("equichk-out")
}

/// Parsed configuration with the built objects it references.
pub struct Loaded {
    pub config: ExperimentConfig,
    /// `sha256` of the canonical (key-sorted, whitespace-free) config.
    pub digest: String,
    pub model: Option<Model>,
    pub transforms: Vec<Transformation>,
}

fn field_error(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

/// Reads, parses and validates a configuration file.
pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Loaded, CliError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
    // serde_json maps are key-sorted, so this form ignores key order
    let canonical = serde_json::to_string(&value).expect("a parsed value serializes");
    let digest = hex::encode(Sha256::digest(canonical.as_bytes()));
    let mut de = serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        field_error(if path.is_empty() { "config" } else { &path }, inner)
    })?;
    let (model, transforms) = validate(&config)?;
    Ok(Loaded {
        config,
        digest,
        model,
        transforms,
    })
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field_error(field, format!("must be positive, got {v}")))
    }
}

fn validate(c: &ExperimentConfig) -> Result<(Option<Model>, Vec<Transformation>), CliError> {
    if c.seeds.is_empty() {
        return Err(field_error("seeds", "at least one seed is required"));
    }
    if c.positions == 0 {
        return Err(field_error("positions", "must be at least 1"));
    }
    c.diff.validate().map_err(|e| field_error("diff", e))?;
    let t = &c.tolerances;
    if let Some(v) = t.identity {
        positive("tolerances.identity", v)?;
    }
    positive("tolerances.charge", t.charge)?;
    positive("tolerances.orthogonality", t.orthogonality)?;
    positive("tolerances.norm_growth", t.norm_growth)?;
    positive("tolerances.drift_identity", t.drift_identity)?;
    positive("tolerances.stationary.grad_tol", t.stationary.grad_tol)?;
    positive("tolerances.stationary.null_tol", t.stationary.null_tol)?;
    positive("tolerances.stationary.rank_tol", t.stationary.rank_tol)?;
    positive("tolerances.stationary.flat_tol", t.stationary.flat_tol)?;
    if let Some(m) = &c.mutation {
        positive("mutation.factor", m.factor)?;
    }

    if c.catalog {
        if c.experiment != Experiment::CheckSuite {
            return Err(field_error("catalog", "only valid for the check_suite experiment"));
        }
        if let Some(m) = &c.mutation {
            if !TransformSpec::catalog_names().contains(&m.transform.as_str()) {
                return Err(field_error("mutation.transform", format!("unknown transformation {}", m.transform)));
            }
        }
        return Ok((None, Vec::new()));
    }

    let spec = c.model.as_ref().ok_or_else(|| field_error("model", "required unless catalog is true"))?;
    let model = build_model(spec).map_err(|e| field_error("model", e))?;
    let loss = c.loss.as_ref().ok_or_else(|| field_error("loss", "required unless catalog is true"))?;
    loss.validate().map_err(|e| field_error("loss", e))?;
    if loss.c() != model.c() {
        return Err(field_error(
            "loss.target",
            format!("has length {}, model outputs {}", loss.c(), model.c()),
        ));
    }
    if let Some(ds) = &c.dataset {
        ds.validate().map_err(|e| field_error("dataset", e))?;
        if c.experiment == Experiment::CheckSuite {
            return Err(field_error("dataset", "check_suite evaluates single-sample losses"));
        }
    }
    let mut transforms = Vec::with_capacity(c.transforms.len());
    for (i, ts) in c.transforms.iter().enumerate() {
        transforms.push(build_transform(ts, &model).map_err(|e| field_error(&format!("transforms[{i}]"), e))?);
    }
    if let Some(m) = &c.mutation {
        if !transforms.iter().any(|t| t.name == m.transform) {
            return Err(field_error(
                "mutation.transform",
                format!("{} is not among the configured transforms", m.transform),
            ));
        }
    }

    let d = &c.dynamics;
    if c.experiment != Experiment::CheckSuite {
        positive("dynamics.dt", d.dt)?;
        positive("dynamics.T", d.t_end)?;
        if d.t_end < d.dt {
            return Err(field_error("dynamics.T", format!("must be at least dt = {}", d.dt)));
        }
        if let Some(init) = &d.initial {
            model
                .check_theta(init)
                .map_err(|e| field_error("dynamics.initial", e))?;
        }
        let needs_symmetry = matches!(c.experiment, Experiment::SgfDrift | Experiment::StationarySpectrum);
        for (i, t) in transforms.iter().enumerate() {
            if needs_symmetry && !(t.is_symmetry && t.kind == TransformKind::Continuous) {
                return Err(field_error(
                    &format!("transforms[{i}]"),
                    format!("{} is not a continuous symmetry", t.name),
                ));
            }
        }
    }
    match c.experiment {
        Experiment::Flow => {
            if let Some(eta) = d.eta {
                if !(eta >= 0.0 && eta.is_finite()) {
                    return Err(field_error("dynamics.eta", format!("must be ≥ 0, got {eta}")));
                }
                if d.steps == 0 {
                    return Err(field_error("dynamics.steps", "must be at least 1"));
                }
            }
        }
        Experiment::SgfDrift => {
            if !(d.sigma >= 0.0 && d.sigma.is_finite()) {
                return Err(field_error("dynamics.sigma", format!("must be ≥ 0, got {}", d.sigma)));
            }
            if d.ensemble < 100 {
                return Err(field_error(
                    "dynamics.ensemble",
                    format!("at least 100 trajectories are needed for a standard error, got {}", d.ensemble),
                ));
            }
            if transforms.is_empty() {
                return Err(field_error("transforms", "at least one symmetry with a charge is required"));
            }
        }
        Experiment::StationarySpectrum => {
            if transforms.is_empty() {
                return Err(field_error("transforms", "at least one symmetry is required"));
            }
        }
        Experiment::CheckSuite => {}
    }
    Ok((Some(model), transforms))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "experiment": "check_suite",
        "model": {"architecture": {"kind": "linear_probe", "n": 2}, "input": [1.0, 2.0]},
        "loss": {"family": "square", "target": [0.5]},
        "transforms": [{"name": "homogeneity_scaling", "m": 1}]
    }"#;

    #[test]
    fn digest_ignores_key_order_and_whitespace() {
        let a = parse(MINIMAL).unwrap();
        let b = parse(
            r#"{"transforms":[{"m":1,"name":"homogeneity_scaling"}],"loss":{"target":[0.5],"family":"square"},
            "model":{"input":[1.0,2.0],"architecture":{"n":2,"kind":"linear_probe"}},"experiment":"check_suite"}"#,
        )
        .unwrap();
        assert_eq!(a.digest, b.digest);
        assert_eq!(a.digest.len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let text = MINIMAL.replace("\"input\"", "\"inptu\"");
        let Err(CliError::Config(msg)) = parse(&text) else {
            panic!("expected a config error")
        };
        assert!(msg.contains("model") && msg.contains("inptu"), "{msg}");
    }

    #[test]
    fn unknown_model_is_a_config_error() {
        let text = MINIMAL.replace("linear_probe", "transformer");
        let Err(CliError::Config(msg)) = parse(&text) else {
            panic!("expected a config error")
        };
        assert!(msg.contains("model.architecture"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn small_ensembles_are_config_errors() {
        let text = r#"{
            "experiment": "sgf_drift",
            "model": {"architecture": {"kind": "deep_linear", "widths": [1, 1, 1]}, "input": [1.0]},
            "loss": {"family": "square", "target": [0.0]},
            "transforms": [{"name": "layer_rescaling", "block1": "W1", "block2": "W2"}],
            "dynamics": {"T": 0.1, "dt": 0.001, "ensemble": 10}
        }"#;
        let Err(CliError::Config(msg)) = parse(text) else {
            panic!("expected a config error")
        };
        assert!(msg.starts_with("dynamics.ensemble"), "{msg}");
    }
}
