//! Experiment configuration files.
//!
//! A configuration is one JSON object. Unknown keys are rejected at every
//! level, and [`ExperimentConfig::validate`] checks the cross-field rules
//! that serde cannot express.

use std::path::Path;

use gnpolicy::experiments::cartpole::CartPoleProtocol;
use gnpolicy::experiments::navigation::NavigationProtocol;
use gnpolicy::experiments::tetris::TetrisProtocol;
use gnpolicy::optimizers::{RuleKind, StepSchedule, UpdateRule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub rule: UpdateRule,
    pub schedule: StepSchedule,
    pub iterations: usize,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    /// Sample sizes for the simulated environments; overrides the protocol.
    #[serde(default)]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentConfig {
    Hallway {
        #[serde(default)]
        discount: Option<f64>,
    },
    Mccallum {
        #[serde(default)]
        discount: Option<f64>,
    },
    /// A random dense MDP drawn from `instance_seed`.
    RandomTabular {
        states: usize,
        actions: usize,
        /// Gibbs feature dimension; ignored by the tabular softmax policy.
        features: usize,
        discount: f64,
        instance_seed: u64,
    },
    CartPole(CartPoleProtocol),
    Navigation(NavigationProtocol),
    Tetris(TetrisProtocol),
}

impl EnvironmentConfig {
    pub fn is_tabular(&self) -> bool {
        matches!(
            self,
            EnvironmentConfig::Hallway { .. } | EnvironmentConfig::Mccallum { .. } | EnvironmentConfig::RandomTabular { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvironmentConfig::Hallway { .. } => "hallway",
            EnvironmentConfig::Mccallum { .. } => "mccallum",
            EnvironmentConfig::RandomTabular { .. } => "random_tabular",
            EnvironmentConfig::CartPole(_) => "cart_pole",
            EnvironmentConfig::Navigation(_) => "navigation",
            EnvironmentConfig::Tetris(_) => "tetris",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Whatever the environment uses by default.
    #[default]
    Default,
    Gibbs,
    TabularSoftmax,
    GaussianRbf,
    ParameterNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub kind: PolicyKind,
    /// Standard deviation of normal initial weights on tabular problems; 0 starts at the origin.
    #[serde(default)]
    pub init_scale: f64,
    /// Action noise of the Gaussian policies; overrides the protocol.
    #[serde(default)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub trajectories_per_iteration: Option<usize>,
    #[serde(default)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Record `‖H12 + H12ᵀ‖` and `‖A1‖` in every row (tabular only).
    #[serde(default)]
    pub hessian_norms: bool,
    /// Record wall-clock time; traces are then no longer reproducible.
    #[serde(default)]
    pub timing: bool,
    /// Iterations at which `diagnose-hessian` evaluates the norms.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    /// Stop a tabular run once `‖∇U‖` falls below this.
    #[serde(default)]
    pub grad_tol: Option<f64>,
}

fn field(path: &str, msg: impl Into<String>) -> CliError {
    CliError::Config(format!("{path}: {}", msg.into()))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.repeats == 0 {
            return Err(field("repeats", "must be at least 1"));
        }
        if !(self.rule.ridge >= 0.0 && self.rule.ridge.is_finite()) {
            return Err(field("rule.ridge", "must be finite and non-negative"));
        }
        self.schedule
            .validate()
            .map_err(|_| field("schedule", "all steps must be positive"))?;
        if !(self.policy.init_scale >= 0.0 && self.policy.init_scale.is_finite()) {
            return Err(field("policy.init_scale", "must be finite and non-negative"));
        }
        if let Some(sigma) = self.policy.sigma {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(field("policy.sigma", "must be positive"));
            }
        }
        let env = &self.environment;
        if env.is_tabular() {
            if self.estimator.is_some() {
                return Err(field("estimator", "tabular environments are evaluated exactly"));
            }
            if self.policy.sigma.is_some() {
                return Err(field("policy.sigma", "only the Gaussian policies have an action noise"));
            }
            if !matches!(self.policy.kind, PolicyKind::Default | PolicyKind::Gibbs | PolicyKind::TabularSoftmax) {
                return Err(field("policy.kind", format!("not available on {}", env.name())));
            }
            match env {
                EnvironmentConfig::Hallway { discount } | EnvironmentConfig::Mccallum { discount } => {
                    if let Some(g) = discount {
                        check_discount(*g)?;
                    }
                }
                EnvironmentConfig::RandomTabular {
                    states,
                    actions,
                    features,
                    discount,
                    ..
                } => {
                    if *states == 0 || *actions == 0 || *features == 0 {
                        return Err(field("environment", "states, actions and features must be positive"));
                    }
                    check_discount(*discount)?;
                }
                _ => unreachable!(),
            }
        } else {
            if self.diagnostics.hessian_norms {
                return Err(field("diagnostics.hessian_norms", "needs a tabular environment"));
            }
            if self.policy.init_scale != 0.0 {
                return Err(field("policy.init_scale", "only tabular problems take an initial scale"));
            }
            let expected = match env {
                EnvironmentConfig::CartPole(_) => PolicyKind::GaussianRbf,
                EnvironmentConfig::Navigation(_) => PolicyKind::ParameterNoise,
                _ => PolicyKind::Gibbs,
            };
            if self.policy.kind != PolicyKind::Default && self.policy.kind != expected {
                return Err(field("policy.kind", format!("{} uses {expected:?}", env.name())));
            }
            match env {
                EnvironmentConfig::CartPole(_) => {
                    if matches!(self.schedule, StepSchedule::Grid { .. }) {
                        return Err(field("schedule", "cart-pole uses constant, decaying or two-point steps"));
                    }
                    if self.rule.kind == RuleKind::Em {
                        return Err(field("rule.kind", "EM has no sampled cart-pole update"));
                    }
                }
                EnvironmentConfig::Navigation(_) => {
                    if !matches!(self.schedule, StepSchedule::Constant { .. } | StepSchedule::Decaying { .. }) {
                        return Err(field("schedule", "navigation uses constant or decaying steps"));
                    }
                    if !matches!(
                        self.rule.kind,
                        RuleKind::Steepest | RuleKind::Natural | RuleKind::GaussNewton2 | RuleKind::DiagGn2
                    ) {
                        return Err(field("rule.kind", "navigation supports steepest, natural, gauss_newton_2 and diag_gn_2"));
                    }
                }
                EnvironmentConfig::Tetris(_) => {
                    if !matches!(self.schedule, StepSchedule::Grid { .. }) {
                        return Err(field("schedule", "Tetris uses the grid line search"));
                    }
                    if !matches!(self.rule.kind, RuleKind::Steepest | RuleKind::GaussNewton2 | RuleKind::DiagGn2) {
                        return Err(field("rule.kind", "Tetris supports steepest, gauss_newton_2 and diag_gn_2"));
                    }
                    if self.policy.sigma.is_some() {
                        return Err(field("policy.sigma", "the Gibbs placement policy has no action noise"));
                    }
                    if self.estimator.as_ref().is_some_and(|e| e.horizon.is_some()) {
                        return Err(field("estimator.horizon", "Tetris games run until they end"));
                    }
                }
                _ => unreachable!(),
            }
            if let Some(e) = &self.estimator {
                if e.trajectories_per_iteration == Some(0) || e.horizon == Some(0) {
                    return Err(field("estimator", "sample sizes must be positive"));
                }
            }
        }
        Ok(())
    }
}

fn check_discount(g: f64) -> Result<(), CliError> {
    if (0.0..1.0).contains(&g) {
        Ok(())
    } else {
        Err(field("environment.discount", format!("{g} outside [0, 1)")))
    }
}

/// Sets the value at a dot-separated `path` of a JSON document, creating
/// intermediate objects as needed. Array elements are addressed by index.
pub fn set_path(doc: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<(), CliError> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad parameter path '{path}'")));
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| serde_json::Value::Object(Default::default()))
            }
            serde_json::Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::Config(format!("'{part}' in '{path}' is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Config(format!("index {idx} in '{path}' out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("'{path}' descends into a scalar"))),
        };
    }
    unreachable!("the loop returns on the last component")
}

#[cfg(test)]
mod tests {
    use super::*;

    const HALLWAY: &str = r#"{
        "environment": {"kind": "hallway"},
        "rule": {"kind": "gauss_newton_2", "ridge": 1e-8},
        "schedule": {"kind": "constant", "alpha": 1.0},
        "iterations": 5
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_json(HALLWAY).unwrap();
        assert_eq!(c.repeats, 1);
        assert_eq!(c.seed, 0);
        assert_eq!(c.policy.kind, PolicyKind::Default);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let top = HALLWAY.replace("\"iterations\": 5", "\"iterations\": 5, \"itertions\": 3");
        assert!(matches!(ExperimentConfig::from_json(&top), Err(CliError::Config(_))));
        let nested = HALLWAY.replace("\"ridge\": 1e-8", "\"ridge\": 1e-8, \"rdige\": 1");
        assert!(ExperimentConfig::from_json(&nested).is_err());
        let env = HALLWAY.replace("{\"kind\": \"hallway\"}", "{\"kind\": \"hallway\", \"width\": 3}");
        assert!(ExperimentConfig::from_json(&env).is_err());
        let proto = r#"{"environment": {"kind": "cart_pole", "horizn": 10},
            "rule": {"kind": "steepest"}, "schedule": {"kind": "constant", "alpha": 1.0}, "iterations": 1}"#;
        assert!(ExperimentConfig::from_json(proto).is_err());
    }

    #[test]
    fn cross_field_errors_name_the_field() {
        let zero = HALLWAY.replace("\"iterations\": 5", "\"iterations\": 5, \"repeats\": 0");
        match ExperimentConfig::from_json(&zero) {
            Err(CliError::Config(msg)) => assert!(msg.starts_with("repeats"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let tetris = r#"{"environment": {"kind": "tetris"}, "rule": {"kind": "gauss_newton_2"},
            "schedule": {"kind": "constant", "alpha": 1.0}, "iterations": 1}"#;
        match ExperimentConfig::from_json(tetris) {
            Err(CliError::Config(msg)) => assert!(msg.starts_with("schedule"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn set_path_edits_nested_values() {
        let mut doc: serde_json::Value = serde_json::from_str(HALLWAY).unwrap();
        set_path(&mut doc, "schedule.alpha", serde_json::json!(0.5)).unwrap();
        set_path(&mut doc, "policy.init_scale", serde_json::json!(0.1)).unwrap();
        let c: ExperimentConfig = serde_json::from_value(doc.clone()).unwrap();
        assert_eq!(c.schedule, StepSchedule::Constant { alpha: 0.5 });
        assert_eq!(c.policy.init_scale, 0.1);
        assert!(set_path(&mut doc, "iterations.x", serde_json::json!(1)).is_err());
    }
}
