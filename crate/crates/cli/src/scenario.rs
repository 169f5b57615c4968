//! Scenario files.
//!
//! Everything under `model`, `gains`, `x0.p`, `duration` and `reference` is
//! required. `mpc`, `low_level`, `runtime`, `seed`, `deterministic` and the
//! remaining `x0` fields are optional and fall back to the documented
//! defaults.

use std::path::Path;

use hopper_core::dynamics::{ModelParams, State, Vertex};
use hopper_core::geom::UnitQuat;
use hopper_core::lowlevel::{Gains, LowLevelConfig, RuntimeConfig};
use hopper_core::mpc::MpcConfig;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::RunError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub mpc: MpcConfig,
    pub gains: Gains,
    #[serde(default)]
    pub low_level: FootLoopSpec,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    pub x0: InitialState,
    pub duration: f64,
    pub reference: ReferenceSpec,
    /// Recorded in the summary; the plant and controller are deterministic.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub m_body: f64,
    pub m_foot: f64,
    /// Row-major.
    pub i_body: [[f64; 3]; 3],
    pub i_wheel: f64,
    /// Wheel axes as columns, written row-major.
    pub wheel_axes: [[f64; 3]; 3],
    pub leg_length: f64,
    pub k_spring: f64,
    pub b_spring: f64,
    pub gear_foot: f64,
    pub foot_pulley_radius: f64,
    pub gravity: f64,
}

impl From<&ModelSpec> for ModelParams {
    fn from(m: &ModelSpec) -> Self {
        ModelParams {
            m_body: m.m_body,
            m_foot: m.m_foot,
            i_body: Matrix3::from_fn(|i, j| m.i_body[i][j]),
            i_wheel: m.i_wheel,
            wheel_axes: Matrix3::from_fn(|i, j| m.wheel_axes[i][j]),
            leg_length: m.leg_length,
            k_spring: m.k_spring,
            b_spring: m.b_spring,
            gear_foot: m.gear_foot,
            foot_pulley_radius: m.foot_pulley_radius,
            gravity: m.gravity,
        }
    }
}

/// Foot-loop settings; the wheel torque limit is shared with `mpc.u_max`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FootLoopSpec {
    pub u_max_foot: f64,
    pub ell_set: f64,
}

impl Default for FootLoopSpec {
    fn default() -> Self {
        let d = LowLevelConfig::default();
        Self {
            u_max_foot: d.u_max_foot,
            ell_set: d.ell_set,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub p: [f64; 3],
    #[serde(default = "identity_quat")]
    pub quat: [f64; 4],
    #[serde(default)]
    pub theta: [f64; 3],
    #[serde(default)]
    pub ell: f64,
    #[serde(default)]
    pub pdot: [f64; 3],
    #[serde(default)]
    pub omega: [f64; 3],
    #[serde(default)]
    pub thetadot: [f64; 3],
    #[serde(default)]
    pub elldot: f64,
    #[serde(default = "flight")]
    pub vertex: Vertex,
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn flight() -> Vertex {
    Vertex::Flight
}

impl InitialState {
    pub fn to_state(&self) -> Result<State, String> {
        let [w, x, y, z] = self.quat;
        let quat = UnitQuat::try_new(w, x, y, z).ok_or("x0.quat: not a unit quaternion")?;
        let mut s = State::at_rest(Vector3::from(self.p));
        s.q.quat = quat;
        s.q.theta = Vector3::from(self.theta);
        s.q.ell = self.ell;
        s.v.pdot = Vector3::from(self.pdot);
        s.v.omega = Vector3::from(self.omega);
        s.v.thetadot = Vector3::from(self.thetadot);
        s.v.elldot = self.elldot;
        if !s.is_finite() {
            return Err("x0: non-finite entries".into());
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub p: [f64; 2],
}

/// Horizontal position targets and maneuvers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// Fixed horizontal set-point.
    Setpoint { p: [f64; 2] },
    /// Time-stamped horizontal waypoints, linearly interpolated and held
    /// after the last one.
    Waypoints { points: Vec<Waypoint> },
    /// `count` full turns about a body axis, starting at the first liftoff
    /// after `start` and lasting `duration` seconds.
    Flip {
        axis: [f64; 3],
        count: u32,
        start: f64,
        duration: f64,
        #[serde(default)]
        p: [f64; 2],
    },
    /// A linear impulse (N·s) applied to the body at time `time`.
    Disturbance {
        impulse: [f64; 3],
        time: f64,
        #[serde(default)]
        p: [f64; 2],
    },
}

impl Scenario {
    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err("name: must be a non-empty identifier ([A-Za-z0-9_-])".into());
        }
        ModelParams::from(&self.model)
            .validate()
            .map_err(|e| format!("model: {e}"))?;
        self.mpc.validate().map_err(|e| format!("mpc: {e}"))?;
        self.gains.validate().map_err(|e| format!("gains: {e}"))?;
        if !(self.low_level.u_max_foot > 0.0) {
            return Err("low_level.u_max_foot: must be positive".into());
        }
        if !(self.runtime.tick > 0.0) || self.runtime.mpc_every == 0 {
            return Err("runtime: tick and mpc_every must be positive".into());
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err("duration: must be positive".into());
        }
        self.x0.to_state()?;
        match &self.reference {
            ReferenceSpec::Setpoint { .. } => {}
            ReferenceSpec::Waypoints { points } => {
                if points.is_empty() {
                    return Err("reference.points: must not be empty".into());
                }
                if points.windows(2).any(|w| !(w[1].t > w[0].t)) {
                    return Err("reference.points: times must be strictly increasing".into());
                }
            }
            ReferenceSpec::Flip {
                axis,
                count,
                duration,
                ..
            } => {
                if Vector3::from(*axis).norm() < 1e-9 {
                    return Err("reference.axis: must be non-zero".into());
                }
                if *count == 0 {
                    return Err("reference.count: must be at least 1".into());
                }
                if !(*duration > 0.0) {
                    return Err("reference.duration: must be positive".into());
                }
            }
            ReferenceSpec::Disturbance { impulse, time, .. } => {
                if !Vector3::from(*impulse).iter().all(|v| v.is_finite()) || !time.is_finite() {
                    return Err("reference: impulse and time must be finite".into());
                }
            }
        }
        Ok(())
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams::from(&self.model)
    }

    pub fn low_level_config(&self) -> LowLevelConfig {
        LowLevelConfig {
            u_max: self.mpc.u_max,
            u_max_foot: self.low_level.u_max_foot,
            ell_set: self.low_level.ell_set,
        }
    }
}

/// Parses a scenario from JSON text, reporting the path of a failing field.
pub fn parse_scenario(text: &str) -> Result<Scenario, RunError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        RunError::Config(format!("{path}: {}", e.into_inner()))
    })?;
    s.validate().map_err(RunError::Config)?;
    Ok(s)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_scenario(&text)
}
