//! Mecanum base: wheel kinematics, a first-order velocity-tracking chassis
//! with optional wheel slip, odometry, and the recentering controller.
//!
//! Planar poses are `(x, y, φ)` in the world frame. Twists are
//! `(v_x, v_y, ω)` in the chassis frame.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecenterGains {
    pub kp_xy: f64,
    pub kd_xy: f64,
    pub kp_yaw: f64,
    pub kd_yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseParams {
    pub wheel_radius: f64,
    /// Half wheelbase along x (m).
    pub half_length: f64,
    /// Half track along y (m).
    pub half_width: f64,
    pub twist_time_constant: f64,
    /// `[v_max (m/s), ω_max (rad/s)]`.
    pub max_speeds: [f64; 2],
    pub pd_gains: RecenterGains,
}

impl Default for BaseParams {
    fn default() -> Self {
        Self {
            wheel_radius: 0.075,
            half_length: 0.25,
            half_width: 0.20,
            twist_time_constant: 0.15,
            max_speeds: [1.0, 1.0],
            pd_gains: RecenterGains {
                kp_xy: 6.0,
                kd_xy: 0.3,
                kp_yaw: 2.0,
                kd_yaw: 0.1,
            },
        }
    }
}

impl BaseParams {
    pub fn validate(&self) -> Result<(), String> {
        let g = &self.pd_gains;
        let all = [
            self.wheel_radius,
            self.half_length,
            self.half_width,
            self.twist_time_constant,
            self.max_speeds[0],
            self.max_speeds[1],
        ];
        if all.iter().any(|v| !(*v > 0.0)) {
            return Err("base geometry, time constant and speed limits must be positive".into());
        }
        if [g.kp_xy, g.kd_xy, g.kp_yaw, g.kd_yaw].iter().any(|v| !(*v >= 0.0)) {
            return Err("recentering gains must be non-negative".into());
        }
        Ok(())
    }

    /// Wheel Jacobian, rows FL, FR, RL, RR.
    pub fn wheel_matrix(&self) -> Matrix4x3<f64> {
        let l = self.half_length + self.half_width;
        Matrix4x3::new(
            1.0, -1.0, -l, //
            1.0, 1.0, l, //
            1.0, 1.0, -l, //
            1.0, -1.0, l,
        ) / self.wheel_radius
    }
}

/// Per-wheel traction gains; 1 is no slip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlipModel {
    pub wheel_gains: [f64; 4],
}

impl Default for SlipModel {
    fn default() -> Self {
        Self {
            wheel_gains: [1.0; 4],
        }
    }
}

impl SlipModel {
    /// Map from wheel-kinematic twist to the twist the chassis actually
    /// makes over the ground.
    pub fn twist_map(&self, params: &BaseParams) -> Matrix3<f64> {
        let w = params.wheel_matrix();
        pinv(params) * Matrix4::from_diagonal(&Vector4::from(self.wheel_gains)) * w
    }
}

/// Closed-form pseudo-inverse of the wheel matrix (its columns are
/// orthogonal).
fn pinv(params: &BaseParams) -> Matrix3x4<f64> {
    let w = params.wheel_matrix();
    let mut p = w.transpose();
    for r in 0..3 {
        let n = w.column(r).norm_squared();
        p.row_mut(r).unscale_mut(n);
    }
    p
}

pub fn wheel_speeds(v: &Vector3<f64>, params: &BaseParams) -> Vector4<f64> {
    params.wheel_matrix() * v
}

pub fn twist_from_wheels(w: &Vector4<f64>, params: &BaseParams) -> Vector3<f64> {
    pinv(params) * w
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseState {
    pub pose: Vector3<f64>,
    /// Wheel-kinematic twist, chassis frame.
    pub twist: Vector3<f64>,
    pub odom_pose: Vector3<f64>,
}

impl BaseState {
    pub fn at(pose: Vector3<f64>) -> Self {
        Self {
            pose,
            twist: Vector3::zeros(),
            odom_pose: pose,
        }
    }

    /// Twist over the ground, chassis frame.
    pub fn ground_twist(&self, params: &BaseParams, slip: &SlipModel) -> Vector3<f64> {
        slip.twist_map(params) * self.twist
    }

    /// Time derivative of the ground twist under a held command.
    pub fn ground_twist_rate(
        &self,
        v_com: &Vector3<f64>,
        params: &BaseParams,
        slip: &SlipModel,
    ) -> Vector3<f64> {
        slip.twist_map(params) * (v_com - self.twist) / params.twist_time_constant
    }

    pub fn wheel_speeds(&self, params: &BaseParams) -> Vector4<f64> {
        wheel_speeds(&self.twist, params)
    }
}

fn integrate_pose(pose: &Vector3<f64>, twist: &Vector3<f64>, dt: f64) -> Vector3<f64> {
    let phi = pose.z + 0.5 * dt * twist.z;
    let (s, c) = phi.sin_cos();
    Vector3::new(
        pose.x + dt * (c * twist.x - s * twist.y),
        pose.y + dt * (s * twist.x + c * twist.y),
        pose.z + dt * twist.z,
    )
}

/// Advance the base by `dt`. The wheel twist relaxes exactly toward the
/// command; truth integrates the slipped ground twist and odometry the
/// wheel twist, both with the midpoint rule.
pub fn step_base(
    state: &BaseState,
    v_com: &Vector3<f64>,
    dt: f64,
    params: &BaseParams,
    slip: &SlipModel,
) -> BaseState {
    let decay = (-dt / params.twist_time_constant).exp();
    let twist = v_com + (state.twist - v_com) * decay;
    let mid = 0.5 * (state.twist + twist);
    let ground = slip.twist_map(params) * mid;
    BaseState {
        pose: integrate_pose(&state.pose, &ground, dt),
        twist,
        odom_pose: integrate_pose(&state.odom_pose, &mid, dt),
    }
}

/// Semi-implicit Euler variant of [`step_base`], consistent with the
/// multibody integrator: the twist takes one explicit relaxation step and
/// the pose moves with the new twist at the old heading.
pub fn step_base_euler(
    state: &BaseState,
    v_com: &Vector3<f64>,
    dt: f64,
    params: &BaseParams,
    slip: &SlipModel,
) -> BaseState {
    let twist = state.twist + (v_com - state.twist) * (dt / params.twist_time_constant);
    let ground = slip.twist_map(params) * twist;
    let advance = |pose: &Vector3<f64>, v: &Vector3<f64>| {
        let (s, c) = pose.z.sin_cos();
        Vector3::new(
            pose.x + dt * (c * v.x - s * v.y),
            pose.y + dt * (s * v.x + c * v.y),
            pose.z + dt * v.z,
        )
    };
    BaseState {
        pose: advance(&state.pose, &ground),
        twist,
        odom_pose: advance(&state.odom_pose, &twist),
    }
}

/// Saturate a twist: planar speed to `v_max` (direction kept) and yaw
/// rate to `ω_max`.
pub fn limit_twist(v: &Vector3<f64>, params: &BaseParams) -> Vector3<f64> {
    let [v_max, w_max] = params.max_speeds;
    let mut lin = Vector2::new(v.x, v.y);
    let n = lin.norm();
    if n > v_max {
        lin *= v_max / n;
    }
    Vector3::new(lin.x, lin.y, v.z.clamp(-w_max, w_max))
}

/// PD law driving the wrist planar offset and the gimbal yaw to zero.
/// `offset` is `(x, y, α_z)` in the chassis frame, `rate` its derivative.
pub fn recentering_twist(
    offset: &Vector3<f64>,
    rate: &Vector3<f64>,
    params: &BaseParams,
) -> Vector3<f64> {
    let g = &params.pd_gains;
    let v = Vector3::new(
        g.kp_xy * offset.x + g.kd_xy * rate.x,
        g.kp_xy * offset.y + g.kd_xy * rate.y,
        g.kp_yaw * offset.z + g.kd_yaw * rate.z,
    );
    limit_twist(&v, params)
}
