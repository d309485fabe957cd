//! Per-robot manipulator control: gravity compensation of the arm, the
//! team statics that share the payload weight, workspace boundary
//! repulsion, the float and approximate-float force laws, and startup
//! calibration from measured SEA torques.
//!
//! All forces here are what the wrist applies, in the manipulator base
//! frame, which is gravity-aligned. Gravity acts along −z.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delta::{self, DeltaError, DeltaParams};
use crate::spatial::{rot_z, skew};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtrlError {
    #[error("calibration requires quiescence (quiet for {quiet_for:.3} s, need {required} s)")]
    NotQuiescent { quiet_for: f64, required: f64 },
    #[error(transparent)]
    Kinematics(#[from] DeltaError),
    #[error("invalid controller parameters: {0}")]
    InvalidParams(String),
}

/// Quiet time needed before startup calibration (s).
pub const QUIESCENCE_TIME: f64 = 0.5;
/// Payload speed below which the world counts as at rest (m/s).
pub const QUIESCENCE_SPEED: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipModel {
    pub delta: DeltaParams,
    /// Constant joint-space inertia of the proximal links and rotors
    /// (kg·m²). Carries no gravity load.
    pub joint_inertia: Matrix3<f64>,
    /// Lumped platform, gimbal and distal-link mass at the wrist center (kg).
    pub wrist_mass: f64,
    pub g: f64,
}

impl Default for ManipModel {
    fn default() -> Self {
        Self {
            delta: DeltaParams::default(),
            joint_inertia: Matrix3::zeros(),
            wrist_mass: 0.5,
            g: 9.81,
        }
    }
}

impl ManipModel {
    pub fn validate(&self) -> Result<(), CtrlError> {
        self.delta.validate().map_err(CtrlError::InvalidParams)?;
        let m = &self.joint_inertia;
        if (m - m.transpose()).amax() > 1e-12 {
            return Err(CtrlError::InvalidParams("joint_inertia must be symmetric".into()));
        }
        if m.symmetric_eigen().eigenvalues.min() < 0.0 {
            return Err(CtrlError::InvalidParams("joint_inertia must be PSD".into()));
        }
        if !(self.wrist_mass >= 0.0 && self.g >= 0.0) {
            return Err(CtrlError::InvalidParams("wrist_mass and g must be non-negative".into()));
        }
        Ok(())
    }

    /// Joint-space mass matrix 𝕄(θ).
    pub fn mass_matrix(&self, theta: &Vector3<f64>) -> Result<Matrix3<f64>, DeltaError> {
        let j = delta::jacobian(theta, &self.delta)?;
        Ok(self.joint_inertia + self.wrist_mass * j.transpose() * j)
    }

    /// Task-space inertia Λ = J⁻ᵀ 𝕄 J⁻¹.
    pub fn task_inertia(&self, theta: &Vector3<f64>) -> Result<Matrix3<f64>, DeltaError> {
        let j = delta::jacobian(theta, &self.delta)?;
        let j_inv = j
            .try_inverse()
            .ok_or(DeltaError::JacobianSingular { det: 0.0 })?;
        Ok(j_inv.transpose() * self.mass_matrix(theta)? * j_inv)
    }
}

/// Force at the wrist that cancels gravity on the arm: `−Λ·a_g` with
/// `a_g = (0, 0, −g)`, so it points up.
pub fn gravity_comp_force(theta: &Vector3<f64>, model: &ManipModel) -> Result<Vector3<f64>, DeltaError> {
    Ok(model.task_inertia(theta)? * Vector3::new(0.0, 0.0, model.g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FloatMode {
    Float,
    ApproxFloat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtrlGains {
    /// Boundary repulsion stiffness (N/m).
    pub k_rest: f64,
    /// Width of the repulsion band inside the workspace sphere (m).
    pub rest_band: f64,
    /// Height-spring gain (N/m).
    pub c_spring: f64,
    /// Viscous damping on wrist height in ApproxFloat (N·s/m). Stands in
    /// for the joint friction that keeps the sampled height spring from
    /// ringing.
    pub z_damping: f64,
    /// Drag threshold (m).
    pub eps: f64,
    /// Per-joint torque limit (N·m).
    pub torque_limit: f64,
}

impl Default for CtrlGains {
    fn default() -> Self {
        Self {
            k_rest: 2000.0,
            rest_band: 0.02,
            c_spring: 300.0,
            z_damping: 40.0,
            eps: 0.03,
            torque_limit: 9.0,
        }
    }
}

impl CtrlGains {
    pub fn validate(&self) -> Result<(), CtrlError> {
        let ok = self.k_rest >= 0.0
            && self.rest_band >= 0.0
            && self.c_spring > 0.0
            && self.z_damping >= 0.0
            && self.eps > 0.0
            && self.torque_limit > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CtrlError::InvalidParams(
                "c_spring, eps and torque_limit must be positive; k_rest, rest_band and z_damping non-negative".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloatState {
    pub mode: FloatMode,
    pub robot_index: usize,
    /// Startup payload share, world frame (N).
    pub f_pay_nominal: Vector3<f64>,
    /// Payload heading at startup (rad).
    pub heading0: f64,
    pub z0: f64,
    /// Attachment point minus payload COM, payload frame (m).
    pub grasp_offset: Vector3<f64>,
    pub payload_mass: f64,
    pub c_spring: f64,
    pub eps: f64,
    /// Completed or ongoing drag episodes.
    pub reanchor_count: u64,
    pub dragging: bool,
}

impl FloatState {
    /// Startup share expressed in the gravity-aligned payload heading frame.
    pub fn nominal_in_heading(&self) -> Vector3<f64> {
        rot_z(-self.heading0) * self.f_pay_nominal
    }

    /// Move `z0` to the nearest height within `eps` of `z`.
    pub fn reanchor(&mut self, z: f64) {
        let off = self.z0 - z;
        if off.abs() > self.eps {
            self.z0 = z + self.eps * off.signum();
            if !self.dragging {
                self.reanchor_count += 1;
            }
            self.dragging = true;
        } else {
            self.dragging = false;
        }
    }
}

/// Everything a robot needs to evaluate the shared statics program. All
/// robots see the same data and get the same answer.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamGeometry {
    /// Attachment points minus payload COM, world frame (m).
    pub offsets: Vec<Vector3<f64>>,
    /// Startup shares in the heading frame (N).
    pub nominal: Vec<Vector3<f64>>,
    /// Current payload heading (rad).
    pub heading: f64,
    pub payload_mass: f64,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShareSolution {
    pub forces: Vec<Vector3<f64>>,
    /// Moment constraints lost rank.
    pub degenerate: bool,
    /// Constraints could not be met; equal vertical shares returned.
    pub fallback: bool,
}

fn statics_constraints(offsets: &[Vector3<f64>]) -> DMatrix<f64> {
    let n = offsets.len();
    let mut c = DMatrix::zeros(6, 3 * n);
    for (i, r) in offsets.iter().enumerate() {
        c.view_mut((0, 3 * i), (3, 3)).copy_from(&Matrix3::identity());
        c.view_mut((3, 3 * i), (3, 3)).copy_from(&skew(r));
    }
    c
}

/// Minimum deviation from the nominal shares subject to force and moment
/// balance of the payload.
pub fn solve_team_shares(team: &TeamGeometry) -> ShareSolution {
    let n = team.offsets.len();
    let weight = team.payload_mass * team.g;
    let equal = || vec![Vector3::new(0.0, 0.0, weight / n as f64); n];
    if n == 0 {
        return ShareSolution {
            forces: vec![],
            degenerate: true,
            fallback: true,
        };
    }
    let rz = rot_z(team.heading);
    let mut f0 = DVector::zeros(3 * n);
    for (i, f) in team.nominal.iter().enumerate().take(n) {
        f0.fixed_rows_mut::<3>(3 * i).copy_from(&(rz * f));
    }
    let c = statics_constraints(&team.offsets);
    let mut d = DVector::zeros(6);
    d[2] = weight;
    // singular values of C are the square roots of those of CCᵀ, so this
    // threshold matches a 1e-10 relative cut on CCᵀ
    let svd = c.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-5 * smax.max(1.0);
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let df = svd
        .solve(&(&d - &c * &f0), tol)
        .unwrap_or_else(|_| DVector::zeros(3 * n));
    let f = &f0 + df;
    let resid = (&c * &f - &d).amax();
    if resid > 1e-9 * weight.max(1.0) {
        log::warn!("payload statics infeasible (residual {resid:.3e}); equal vertical shares");
        return ShareSolution {
            forces: equal(),
            degenerate: true,
            fallback: true,
        };
    }
    ShareSolution {
        forces: (0..n).map(|i| f.fixed_rows::<3>(3 * i).into_owned()).collect(),
        degenerate: rank < 6,
        fallback: false,
    }
}

/// One team member's component of the shared statics solution. `slot` is
/// the member's position in the team lists.
pub fn payload_share_force(team: &TeamGeometry, slot: usize) -> (Vector3<f64>, bool) {
    let sol = solve_team_shares(team);
    let f = sol.forces.get(slot).copied().unwrap_or_else(Vector3::zeros);
    (f, sol.fallback)
}

/// Spring push toward the workspace center inside the repulsion band.
pub fn boundary_restoring(x: &Vector3<f64>, params: &DeltaParams, gains: &CtrlGains) -> Vector3<f64> {
    let clearance = delta::workspace_clearance(x, params);
    if clearance >= gains.rest_band {
        return Vector3::zeros();
    }
    let to_home = params.home_position() - x;
    let n = to_home.norm();
    if n == 0.0 {
        return Vector3::zeros();
    }
    to_home / n * gains.k_rest * (gains.rest_band - clearance)
}

/// `τ = Jᵀ f`, scaled as a whole when any joint exceeds the limit.
pub fn map_torque(j: &Matrix3<f64>, f_com: &Vector3<f64>, limit: f64) -> (Vector3<f64>, bool) {
    let tau = j.transpose() * f_com;
    let peak = tau.amax();
    if peak > limit {
        (tau * (limit / peak), true)
    } else {
        (tau, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CtrlOutput {
    pub f_com: Vector3<f64>,
    pub tau: Vector3<f64>,
    pub f_manip: Vector3<f64>,
    pub f_rest: Vector3<f64>,
    pub clamped: bool,
    pub fault: bool,
}

/// Float mode: `f_com = f_manip + f_pay + f_rest`.
pub fn float_command(
    theta: &Vector3<f64>,
    f_pay: &Vector3<f64>,
    model: &ManipModel,
    gains: &CtrlGains,
) -> Result<CtrlOutput, DeltaError> {
    let x = delta::fk(theta, &model.delta)?;
    let j = delta::jacobian(theta, &model.delta)?;
    let f_manip = gravity_comp_force(theta, model)?;
    let f_rest = boundary_restoring(&x, &model.delta, gains);
    let f_com = f_manip + f_pay + f_rest;
    let (tau, clamped) = map_torque(&j, &f_com, gains.torque_limit);
    Ok(CtrlOutput {
        f_com,
        tau,
        f_manip,
        f_rest,
        clamped,
        fault: false,
    })
}

/// Approximate float mode: constant startup share plus a damped height
/// spring whose set point is dragged along when the wrist leaves the `eps`
/// band.
pub fn approx_float_command(
    theta: &Vector3<f64>,
    theta_dot: &Vector3<f64>,
    state: &FloatState,
    model: &ManipModel,
    gains: &CtrlGains,
) -> Result<(CtrlOutput, FloatState), DeltaError> {
    let x = delta::fk(theta, &model.delta)?;
    let z_dot = (delta::jacobian(theta, &model.delta)? * theta_dot).z;
    let mut next = *state;
    next.reanchor(x.z);
    let spring = Vector3::new(0.0, 0.0, next.c_spring * (next.z0 - x.z) - gains.z_damping * z_dot);
    let out = float_command(theta, &(state.f_pay_nominal + spring), model, gains)?;
    Ok((out, next))
}

/// Inputs to startup calibration, read from the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationSnapshot {
    pub theta: Vector3<f64>,
    /// Joint torques from spring deflection (N·m).
    pub sea_torques: Vector3<f64>,
    /// Time the payload has been below the quiescence speed (s).
    pub quiet_for: f64,
    pub heading: f64,
    pub grasp_offset: Vector3<f64>,
    pub payload_mass: f64,
}

/// Measure this robot's payload share and set height.
pub fn startup_calibration(
    snap: &CalibrationSnapshot,
    robot_index: usize,
    mode: FloatMode,
    model: &ManipModel,
    gains: &CtrlGains,
) -> Result<FloatState, CtrlError> {
    if snap.quiet_for < QUIESCENCE_TIME {
        return Err(CtrlError::NotQuiescent {
            quiet_for: snap.quiet_for,
            required: QUIESCENCE_TIME,
        });
    }
    let j = delta::jacobian(&snap.theta, &model.delta)?;
    let j_inv_t = j
        .transpose()
        .try_inverse()
        .ok_or(DeltaError::JacobianSingular { det: 0.0 })?;
    let measured = j_inv_t * snap.sea_torques;
    let f_manip = gravity_comp_force(&snap.theta, model)?;
    let x = delta::fk(&snap.theta, &model.delta)?;
    Ok(FloatState {
        mode,
        robot_index,
        f_pay_nominal: measured - f_manip,
        heading0: snap.heading,
        z0: x.z,
        grasp_offset: snap.grasp_offset,
        payload_mass: snap.payload_mass,
        c_spring: gains.c_spring,
        eps: gains.eps,
        reanchor_count: 0,
        dragging: false,
    })
}

/// One robot's controller instance, stepped at the arm rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipController {
    pub model: ManipModel,
    pub gains: CtrlGains,
    pub state: FloatState,
    pub last: CtrlOutput,
    pub singular_warning: bool,
}

impl ManipController {
    pub fn new(model: ManipModel, gains: CtrlGains, state: FloatState) -> Self {
        Self {
            model,
            gains,
            state,
            last: CtrlOutput::default(),
            singular_warning: false,
        }
    }

    /// Run the active mode. `f_pay` is the team statics share, used in
    /// Float mode only.
    pub fn command(&mut self, theta: &Vector3<f64>, theta_dot: &Vector3<f64>, f_pay: &Vector3<f64>) -> CtrlOutput {
        let res = match self.state.mode {
            FloatMode::Float => float_command(theta, f_pay, &self.model, &self.gains),
            FloatMode::ApproxFloat => {
                approx_float_command(theta, theta_dot, &self.state, &self.model, &self.gains).map(|(o, s)| {
                    self.state = s;
                    o
                })
            }
        };
        let out = match res {
            Ok(o) => {
                self.singular_warning = false;
                o
            }
            Err(e) => {
                log::warn!("robot {}: {e}; zero torque", self.state.robot_index);
                self.singular_warning = true;
                CtrlOutput {
                    f_manip: self.last.f_manip,
                    fault: true,
                    ..Default::default()
                }
            }
        };
        self.last = out;
        out
    }

    /// Switching into ApproxFloat anchors the spring at the current height.
    pub fn set_mode(&mut self, mode: FloatMode, theta: &Vector3<f64>) {
        if mode == FloatMode::ApproxFloat && self.state.mode != mode {
            if let Ok(x) = delta::fk(theta, &self.model.delta) {
                self.state.z0 = x.z;
            }
            self.state.dragging = false;
        }
        self.state.mode = mode;
    }
}
