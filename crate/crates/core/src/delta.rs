//! Delta parallel manipulator kinematics.
//!
//! Legs sit at azimuths 0°, 120° and 240° about the manipulator z axis. The
//! base and platform joint circles only enter through their difference
//! `dr`, so the elbow of leg `i` is
//!
//! ```text
//! c_i(θ_i) = (dr + L1 cos θ_i) û_i + L1 sin θ_i ẑ
//! ```
//!
//! and the platform point is the upper intersection of the three spheres of
//! radius `L2` about the elbows. The gimbal center sits `z_off` above the
//! platform point. Joint angles are measured from the horizontal, positive
//! raising the elbow.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeltaError {
    #[error("unreachable joint configuration")]
    UnreachableJoints,
    #[error("kinematic singularity")]
    Singularity,
    #[error("unreachable position ({x:.4}, {y:.4}, {z:.4})")]
    Unreachable { x: f64, y: f64, z: f64 },
    #[error("joint limit violation on leg {leg}: {angle_deg:.2} deg")]
    JointLimit { leg: usize, angle_deg: f64 },
    #[error("jacobian singular (det {det:e})")]
    JacobianSingular { det: f64 },
    #[error("calibration infeasible")]
    CalibrationInfeasible,
}

/// Leg azimuths.
const LEG_ANGLES: [f64; 3] = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];

/// Below this `|det J|` (SI units) the Jacobian is treated as singular.
pub const JACOBIAN_DET_MIN: f64 = 1e-9;

/// Below this squared height of the sphere-intersection apex the two
/// solution branches are considered coincident.
const BRANCH_DISCRIMINANT_MIN: f64 = 1e-10;

/// Calibrated geometry of the shipped manipulator (see [`calibrate`]).
pub const DEFAULT_DR: f64 = 0.119_323_760_477_431;
pub const DEFAULT_Z_OFF: f64 = 0.061_825_905_392_052;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaParams {
    /// Proximal link length (m).
    pub l1: f64,
    /// Distal parallelogram length (m).
    pub l2: f64,
    /// Base joint circle radius minus platform joint circle radius (m).
    pub dr: f64,
    /// Platform point to gimbal center, along z (m).
    pub z_off: f64,
    /// `[θ_min, θ_max]` (rad).
    pub joint_limits: [f64; 2],
    /// Radius of the workspace sphere inscribed about home (m).
    pub workspace_radius: f64,
    /// Home joint angle, identical on every leg (rad).
    pub home_theta: f64,
}

impl Default for DeltaParams {
    fn default() -> Self {
        Self {
            l1: 0.200,
            l2: 0.368,
            dr: DEFAULT_DR,
            z_off: DEFAULT_Z_OFF,
            joint_limits: [(-15.0f64).to_radians(), 100.0f64.to_radians()],
            workspace_radius: 0.15,
            home_theta: 36.6f64.to_radians(),
        }
    }
}

impl DeltaParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.l1 > 0.0 && self.l2 > 0.0) {
            return Err("link lengths must be positive".into());
        }
        if self.l2 <= self.dr.abs() {
            return Err("l2 must exceed |dr|".into());
        }
        let [lo, hi] = self.joint_limits;
        if !(lo < self.home_theta && self.home_theta < hi) {
            return Err("home_theta must lie strictly inside joint_limits".into());
        }
        if self.workspace_radius <= 0.0 {
            return Err("workspace_radius must be positive".into());
        }
        Ok(())
    }

    pub fn home_angles(&self) -> Vector3<f64> {
        Vector3::repeat(self.home_theta)
    }

    /// Gimbal center at the home configuration; the workspace sphere center.
    pub fn home_position(&self) -> Vector3<f64> {
        let th = self.home_theta;
        let reach = self.dr + self.l1 * th.cos();
        let z = self.l1 * th.sin() + (self.l2 * self.l2 - reach * reach).sqrt();
        Vector3::new(0.0, 0.0, z + self.z_off)
    }

    fn leg_axis(leg: usize) -> Vector3<f64> {
        let (s, c) = LEG_ANGLES[leg].sin_cos();
        Vector3::new(c, s, 0.0)
    }

    fn elbow(&self, leg: usize, theta: f64) -> Vector3<f64> {
        let (s, c) = theta.sin_cos();
        Self::leg_axis(leg) * (self.dr + self.l1 * c) + Vector3::z() * (self.l1 * s)
    }

    fn elbow_d(&self, leg: usize, theta: f64) -> Vector3<f64> {
        let (s, c) = theta.sin_cos();
        Self::leg_axis(leg) * (-self.l1 * s) + Vector3::z() * (self.l1 * c)
    }

    fn elbow_dd(&self, leg: usize, theta: f64) -> Vector3<f64> {
        let (s, c) = theta.sin_cos();
        Self::leg_axis(leg) * (-self.l1 * c) + Vector3::z() * (-self.l1 * s)
    }
}

/// Forward kinematics: gimbal center in the manipulator frame.
pub fn fk(theta: &Vector3<f64>, params: &DeltaParams) -> Result<Vector3<f64>, DeltaError> {
    let c1 = params.elbow(0, theta[0]);
    let c2 = params.elbow(1, theta[1]);
    let c3 = params.elbow(2, theta[2]);
    let r2 = params.l2 * params.l2;

    // trilateration with equal radii
    let d12 = c2 - c1;
    let d = d12.norm();
    if d < 1e-12 {
        return Err(DeltaError::Singularity);
    }
    let ex = d12 / d;
    let c13 = c3 - c1;
    let i = ex.dot(&c13);
    let ey_raw = c13 - ex * i;
    let j = ey_raw.norm();
    if j < 1e-12 {
        return Err(DeltaError::Singularity);
    }
    let ey = ey_raw / j;
    let mut ez = ex.cross(&ey);
    if ez.z < 0.0 {
        ez = -ez;
    }
    let x = 0.5 * d;
    let y = (i * i + j * j - 2.0 * i * x) / (2.0 * j);
    let h2 = r2 - x * x - y * y;
    if h2 < 0.0 {
        return Err(DeltaError::UnreachableJoints);
    }
    if h2 < BRANCH_DISCRIMINANT_MIN {
        return Err(DeltaError::Singularity);
    }
    let p = c1 + ex * x + ey * y + ez * h2.sqrt();
    Ok(p + Vector3::z() * params.z_off)
}

/// Inverse kinematics on the elbow branch containing the home angle,
/// without the joint-limit check.
pub fn ik_branch(x: &Vector3<f64>, params: &DeltaParams) -> Result<Vector3<f64>, DeltaError> {
    let p = x - Vector3::z() * params.z_off;
    let mut theta = Vector3::zeros();
    for leg in 0..3 {
        let u = DeltaParams::leg_axis(leg);
        let v = Vector3::z().cross(&u);
        let a = p.dot(&u) - params.dr;
        let b = p.dot(&v);
        let c = p.z;
        let e = (a * a + b * b + c * c + params.l1 * params.l1 - params.l2 * params.l2)
            / (2.0 * params.l1);
        let r = (a * a + c * c).sqrt();
        if r < 1e-12 || e.abs() > r {
            return Err(DeltaError::Unreachable {
                x: x.x,
                y: x.y,
                z: x.z,
            });
        }
        let mut th = c.atan2(a) - (e / r).acos();
        if th < -PI {
            th += 2.0 * PI;
        }
        theta[leg] = th;
    }
    Ok(theta)
}

/// Inverse kinematics with joint limits enforced.
pub fn ik(x: &Vector3<f64>, params: &DeltaParams) -> Result<Vector3<f64>, DeltaError> {
    let theta = ik_branch(x, params)?;
    let [lo, hi] = params.joint_limits;
    for leg in 0..3 {
        let th = theta[leg];
        if th < lo || th > hi {
            return Err(DeltaError::JointLimit {
                leg,
                angle_deg: th.to_degrees(),
            });
        }
    }
    Ok(theta)
}

/// Constraint geometry shared by the Jacobian and its derivative.
struct LegGeometry {
    /// Rows `n_iᵀ = (x' − c_i)ᵀ`.
    n: Matrix3<f64>,
    /// `n_i · c_i'(θ_i)`.
    d: Vector3<f64>,
    platform: Vector3<f64>,
}

fn leg_geometry(theta: &Vector3<f64>, params: &DeltaParams) -> Result<LegGeometry, DeltaError> {
    let x = fk(theta, params)?;
    let platform = x - Vector3::z() * params.z_off;
    let mut n = Matrix3::zeros();
    let mut d = Vector3::zeros();
    for leg in 0..3 {
        let ni = platform - params.elbow(leg, theta[leg]);
        n.set_row(leg, &ni.transpose());
        d[leg] = ni.dot(&params.elbow_d(leg, theta[leg]));
    }
    Ok(LegGeometry { n, d, platform })
}

/// Velocity Jacobian `J = ∂x/∂θ`.
pub fn jacobian(theta: &Vector3<f64>, params: &DeltaParams) -> Result<Matrix3<f64>, DeltaError> {
    let g = leg_geometry(theta, params)?;
    let n_inv = g
        .n
        .try_inverse()
        .ok_or(DeltaError::JacobianSingular { det: 0.0 })?;
    let j = n_inv * Matrix3::from_diagonal(&g.d);
    let det = j.determinant();
    if det.abs() < JACOBIAN_DET_MIN {
        return Err(DeltaError::JacobianSingular { det });
    }
    Ok(j)
}

/// Velocity product term `J̇(θ, θ̇) θ̇`, so that `ẍ = J θ̈ + J̇θ̇`.
pub fn jacobian_dot_times_rate(
    theta: &Vector3<f64>,
    theta_dot: &Vector3<f64>,
    params: &DeltaParams,
) -> Result<Vector3<f64>, DeltaError> {
    let g = leg_geometry(theta, params)?;
    let n_inv = g
        .n
        .try_inverse()
        .ok_or(DeltaError::JacobianSingular { det: 0.0 })?;
    let xdot = n_inv * Matrix3::from_diagonal(&g.d) * theta_dot;
    let mut rhs = Vector3::zeros();
    for leg in 0..3 {
        let ni = g.platform - params.elbow(leg, theta[leg]);
        let ni_dot = xdot - params.elbow_d(leg, theta[leg]) * theta_dot[leg];
        rhs[leg] = ni.dot(&params.elbow_dd(leg, theta[leg])) * theta_dot[leg].powi(2)
            - ni_dot.norm_squared();
    }
    Ok(n_inv * rhs)
}

/// Translational stiffness at the gimbal `K = J⁻ᵀ diag(k) J⁻¹`.
pub fn wrist_stiffness(
    theta: &Vector3<f64>,
    k_joint: f64,
    params: &DeltaParams,
) -> Result<Matrix3<f64>, DeltaError> {
    let j = jacobian(theta, params)?;
    let j_inv = j
        .try_inverse()
        .ok_or(DeltaError::JacobianSingular { det: j.determinant() })?;
    let k = j_inv.transpose() * j_inv * k_joint;
    Ok(0.5 * (k + k.transpose()))
}

/// Signed distance from `x` to the workspace sphere boundary, positive inside.
pub fn workspace_clearance(x: &Vector3<f64>, params: &DeltaParams) -> f64 {
    params.workspace_radius - (x - params.home_position()).norm()
}

/// Vertical stiffness at the symmetric home pose as a function of `dr`,
/// computed through the same Jacobian used everywhere else.
fn home_kzz(l1: f64, l2: f64, home_theta: f64, dr: f64, k_joint: f64) -> Option<f64> {
    let params = DeltaParams {
        l1,
        l2,
        dr,
        z_off: 0.0,
        joint_limits: [home_theta - 1.0, home_theta + 1.0],
        workspace_radius: 0.1,
        home_theta,
    };
    wrist_stiffness(&params.home_angles(), k_joint, &params)
        .ok()
        .map(|k| k[(2, 2)])
}

/// Fit the radius offset so the home vertical stiffness hits `kzz_target`,
/// then place the gimbal so the home height is `home_z`. Returns
/// `(dr, z_off)`.
pub fn calibrate(
    l1: f64,
    l2: f64,
    home_theta: f64,
    home_z: f64,
    kzz_target: f64,
    k_joint: f64,
) -> Result<(f64, f64), DeltaError> {
    let lo = -(l2 - l1);
    let hi = l2 - l1;
    let f = |dr: f64| home_kzz(l1, l2, home_theta, dr, k_joint).map(|k| k - kzz_target);

    // bracket a sign change on a grid, then bisect
    const GRID: usize = 400;
    let mut bracket = None;
    let mut prev: Option<(f64, f64)> = None;
    for i in 1..GRID {
        let dr = lo + (hi - lo) * i as f64 / GRID as f64;
        if let Some(v) = f(dr) {
            if let Some((p_dr, p_v)) = prev {
                if p_v * v <= 0.0 {
                    bracket = Some((p_dr, dr));
                    break;
                }
            }
            prev = Some((dr, v));
        } else {
            prev = None;
        }
    }
    let (mut a, mut b) = bracket.ok_or(DeltaError::CalibrationInfeasible)?;
    let mut fa = f(a).ok_or(DeltaError::CalibrationInfeasible)?;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m).ok_or(DeltaError::CalibrationInfeasible)?;
        if fa * fm <= 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
        if (b - a).abs() < 1e-15 {
            break;
        }
    }
    let dr = 0.5 * (a + b);
    let reach = dr + l1 * home_theta.cos();
    let z_off = home_z - (l1 * home_theta.sin() + (l2 * l2 - reach * reach).sqrt());
    if !(dr.is_finite() && z_off.is_finite()) {
        return Err(DeltaError::CalibrationInfeasible);
    }
    Ok((dr, z_off))
}

/// Theoretical properties of a manipulator at its home configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HomeProperties {
    pub position: Vector3<f64>,
    pub stiffness_diag: Vector3<f64>,
    /// `∂z/∂θ_i` at home (m/rad), identical on each leg.
    pub dz_dtheta: f64,
    /// Largest vertical force with every joint within `tau_max` (N).
    pub max_vertical_force: f64,
    /// Worst-case gimbal displacement for one encoder count on every joint (m).
    pub position_resolution: f64,
    /// Vertical force corresponding to one joint torque quantum (N).
    pub force_resolution: f64,
}

/// Evaluate [`HomeProperties`] for a joint stiffness, continuous torque
/// limit, joint encoder resolution and joint torque resolution.
pub fn home_properties(
    params: &DeltaParams,
    k_joint: f64,
    tau_max: f64,
    encoder_bits: u32,
    torque_resolution: f64,
) -> Result<HomeProperties, DeltaError> {
    let th = params.home_angles();
    let j = jacobian(&th, params)?;
    let k = wrist_stiffness(&th, k_joint, params)?;
    let dz = (0..3).map(|i| j[(2, i)].abs()).fold(0.0, f64::max);
    let encoder_step = 2.0 * PI / 2f64.powi(encoder_bits as i32);
    // induced ∞-norm: every joint off by one count with adversarial signs
    let j_inf = (0..3)
        .map(|r| (0..3).map(|c| j[(r, c)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(HomeProperties {
        position: fk(&th, params)?,
        stiffness_diag: k.diagonal(),
        dz_dtheta: dz,
        max_vertical_force: tau_max / dz,
        position_resolution: j_inf * encoder_step,
        force_resolution: torque_resolution / dz,
    })
}
