//! Scenario files. A scenario is one TOML document holding the complete
//! experiment record; [`ScenarioConfig::to_toml`] writes it back with every
//! default spelled out.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::profile::WrenchProfile;
use super::ScenarioError;
use crate::manip_ctrl::{CtrlGains, FloatMode};
use crate::multibody::{
    Actuation, GripTarget, Hand, HandImpedance, MbError, Models, PayloadModel, Rates, RobotModel, RobotSetup,
    Stabilization, World, WorldInit,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Telemetry directory, relative to the working directory.
    pub dir: String,
    /// Log every physics tick instead of every control tick.
    pub full_rate: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs".into(),
            full_rate: false,
        }
    }
}

/// Bounds on live wrench commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyLimits {
    /// N
    pub max_force: f64,
    /// N·m
    pub max_moment: f64,
}

impl Default for SafetyLimits {
    fn default() -> Self {
        Self {
            max_force: 50.0,
            max_moment: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    /// Chassis pose `(x, y, φ)`.
    pub base_pose: Vector3<f64>,
    pub mode: FloatMode,
    #[serde(default = "yes")]
    pub recenter: bool,
    #[serde(default)]
    pub gains: CtrlGains,
    #[serde(default)]
    pub model: RobotModel,
}

fn yes() -> bool {
    true
}

/// Where a human holds on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HumanTarget {
    /// A named grip of the payload.
    Grip { name: String },
    /// A point on a payload body, payload frame at zero hinge angle.
    Point { body: usize, point: Vector3<f64> },
    Wrist { robot: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanConfig {
    pub name: String,
    pub target: HumanTarget,
    pub profile: WrenchProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impedance: Option<HandImpedance>,
    /// Standard deviation of white force noise added each control tick (N).
    #[serde(default)]
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Simulated time (s).
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "series_elastic")]
    pub actuation: Actuation,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default)]
    pub stabilization: Stabilization,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub safety: SafetyLimits,
    #[serde(default)]
    pub init: WorldInit,
    pub payload: PayloadModel,
    pub robots: Vec<RobotConfig>,
    #[serde(default)]
    pub humans: Vec<HumanConfig>,
}

fn series_elastic() -> Actuation {
    Actuation::SeriesElastic
}

fn config_err(e: MbError) -> ScenarioError {
    ScenarioError::Config(e.to_string())
}

impl ScenarioConfig {
    /// Parse and validate.
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical form: every field present, fixed key order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_toml()).map_err(|e| ScenarioError::io(path, e))
    }

    pub fn models(&self) -> Result<Models, ScenarioError> {
        Models::new(
            self.payload.clone(),
            self.robots.iter().map(|r| r.model).collect(),
            self.actuation,
        )
        .map_err(config_err)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        if self.name.trim().is_empty() {
            return bad("name must not be empty".into());
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be finite and non-negative, got {}", self.duration));
        }
        if !(self.stabilization.zeta >= 0.0 && self.stabilization.omega >= 0.0) {
            return bad("stabilization gains must be non-negative".into());
        }
        if !(self.safety.max_force > 0.0 && self.safety.max_moment > 0.0) {
            return bad("safety limits must be positive".into());
        }
        if self.robots.is_empty() {
            return bad("at least one robot is required".into());
        }
        let mut names = HashSet::new();
        for (i, h) in self.humans.iter().enumerate() {
            if !names.insert(h.name.as_str()) {
                return bad(format!("humans[{i}].name '{}' is not unique", h.name));
            }
            h.profile
                .validate()
                .map_err(|e| ScenarioError::Config(format!("humans[{i}].profile: {e}")))?;
            if !(h.noise_std >= 0.0 && h.noise_std.is_finite()) {
                return bad(format!("humans[{i}].noise_std must be non-negative"));
            }
            if let Some(imp) = &h.impedance {
                if !(imp.stiffness >= 0.0 && imp.damping >= 0.0) {
                    return bad(format!("humans[{i}].impedance must be non-negative"));
                }
            }
            self.resolve_target(&h.target)
                .map_err(|e| ScenarioError::Config(format!("humans[{i}].target: {e}")))?;
        }
        self.rates.divisors().map_err(config_err)?;
        self.build_world().map(|_| ())
    }

    /// World grip for a human target.
    pub fn resolve_target(&self, target: &HumanTarget) -> Result<GripTarget, String> {
        match target {
            HumanTarget::Grip { name } => self
                .payload
                .grip(name)
                .map(|g| GripTarget::Payload {
                    body: g.body,
                    point: g.point,
                })
                .ok_or_else(|| format!("no payload grip named '{name}'")),
            HumanTarget::Point { body, point } => {
                if *body < self.payload.bodies.len() {
                    Ok(GripTarget::Payload {
                        body: *body,
                        point: *point,
                    })
                } else {
                    Err(format!("payload has no body {body}"))
                }
            }
            HumanTarget::Wrist { robot } => {
                if *robot < self.robots.len() {
                    Ok(GripTarget::Wrist { robot: *robot })
                } else {
                    Err(format!("no robot {robot}"))
                }
            }
        }
    }

    pub fn setups(&self) -> Vec<RobotSetup> {
        self.robots
            .iter()
            .map(|r| RobotSetup {
                base_pose: r.base_pose,
                mode: r.mode,
                gains: r.gains,
                recenter: r.recenter,
            })
            .collect()
    }

    /// The world at t = 0.
    pub fn build_world(&self) -> Result<World, ScenarioError> {
        let models = self.models()?;
        let hands = self
            .humans
            .iter()
            .map(|h| {
                let target = self.resolve_target(&h.target).map_err(ScenarioError::Config)?;
                let mut hand = Hand::new(&h.name, target);
                hand.impedance = h.impedance;
                Ok(hand)
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        World::new(models, self.init, &self.setups(), hands, self.rates, self.stabilization).map_err(config_err)
    }
}

/// Read, parse and validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::io(path, e))?;
    ScenarioConfig::from_toml(&text).map_err(|e| match e {
        ScenarioError::Parse(m) => ScenarioError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}
