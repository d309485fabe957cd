//! Constrained team-plus-payload dynamics: assembly of the equations of
//! motion, the Lagrange-multiplier solve with Baumgarte stabilization,
//! the control map and its rank, gimbal readout, and the multi-rate world.

pub mod payload;
pub mod system;
pub mod world;

#[cfg(test)]
pub(crate) mod fixtures;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::delta::DeltaError;
use crate::manip_ctrl::CtrlError;
use crate::spatial::{rot_x, rot_y, rot_z};

pub use payload::{Attachment, BodySpec, Grip, HingeSpec, PayloadKind, PayloadModel};
pub use system::{
    assemble, constrained_accel, control_map, velocity_step, manipulability, numerical_rank, static_equilibrium,
    Actuation, BodyState, ControlMap, Models, RobotModel, RobotState, Stabilization, SystemMatrices,
    SystemState, VelocityStep, RANK_TOL,
};
pub use world::{
    advance, initial_state, place_payload, BodyPose, Energy, GripTarget, Hand, HandImpedance, HandSnapshot, Rates, RobotSetup,
    RobotSnapshot, Snapshot, StepInfo, World, WorldEvent, WorldInit, WorkLedger, FAULT_RESIDUAL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MbError {
    #[error("config error: {0}")]
    Config(String),
    #[error("robot {robot}: {source}")]
    Kinematics { robot: usize, source: DeltaError },
    #[error("initial grasp unreachable for robot {robot}: {source}")]
    Unreachable { robot: usize, source: DeltaError },
    #[error("mass matrix is not positive-definite")]
    MassNotPositive,
    #[error("initial configuration cannot be held statically (residual {residual:.3e} N)")]
    NotStatic { residual: f64 },
    #[error(transparent)]
    Ctrl(#[from] CtrlError),
    #[error("simulation fault at tick {tick} (t = {time:.4} s): {reason}")]
    Fault { tick: u64, time: f64, reason: String },
}

impl MbError {
    /// Whether the error comes from the configuration rather than a run.
    pub fn is_config(&self) -> bool {
        !matches!(self, MbError::Fault { .. } | MbError::MassNotPositive)
    }
}

/// Middle-angle magnitude beyond which the gimbal readout is held (rad).
pub const GIMBAL_LOCK: f64 = 89.0 * std::f64::consts::PI / 180.0;

/// Decompose `R = Rx(α_x)·Ry(α_y)·Rz(α_z)`. `None` near gimbal lock.
pub fn xyz_angles(r: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let ay = r[(0, 2)].clamp(-1.0, 1.0).asin();
    if ay.abs() > GIMBAL_LOCK {
        return None;
    }
    Some(Vector3::new(
        (-r[(1, 2)]).atan2(r[(2, 2)]),
        ay,
        (-r[(0, 1)]).atan2(r[(0, 0)]),
    ))
}

pub fn from_xyz_angles(a: &Vector3<f64>) -> Matrix3<f64> {
    rot_x(a.x) * rot_y(a.y) * rot_z(a.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct GimbalReading {
    pub angles: Vector3<f64>,
    pub locked: bool,
}

/// Gimbal angles from the Delta platform frame (parallel to the chassis)
/// to the payload attachment frame. Near lock the previous angles are held.
pub fn gimbal_angles(
    platform: &Matrix3<f64>,
    attachment: &Matrix3<f64>,
    previous: &GimbalReading,
) -> GimbalReading {
    match xyz_angles(&(platform.transpose() * attachment)) {
        Some(angles) => GimbalReading { angles, locked: false },
        None => GimbalReading {
            angles: previous.angles,
            locked: true,
        },
    }
}
