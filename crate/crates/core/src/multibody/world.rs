//! The stepped world: physics at a fixed rate, SEA torque loops and the
//! whole-arm and base controllers on integer divisions of it, and human
//! hands applying wrenches at grip points.

use nalgebra::{DVector, Matrix3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::system::{
    assemble, integrate_positions, velocity_step, static_equilibrium, Actuation, BodyState, Models,
    RobotState, Stabilization, SystemMatrices, SystemState,
};
use super::{gimbal_angles, GimbalReading, MbError};
use crate::delta;
use crate::manip_ctrl::{
    solve_team_shares, startup_calibration, CalibrationSnapshot, CtrlGains, FloatMode,
    ManipController, TeamGeometry, QUIESCENCE_SPEED, QUIESCENCE_TIME,
};
use crate::mobase::{self, BaseState};
use crate::sea::{joint_torque, SeaState, TorquePid};
use crate::spatial::{rot_z, rotation_from_vector};

/// Constraint residual beyond which a run is aborted (m).
pub const FAULT_RESIDUAL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rates {
    pub physics: f64,
    pub sea: f64,
    pub control: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            physics: 4000.0,
            sea: 800.0,
            control: 100.0,
        }
    }
}

impl Rates {
    /// Physics ticks per SEA update and per control update.
    pub fn divisors(&self) -> Result<(u64, u64), MbError> {
        let div = |r: f64, what: &str| {
            let d = self.physics / r;
            if !(r > 0.0) || d < 1.0 || (d - d.round()).abs() > 1e-9 {
                Err(MbError::Config(format!(
                    "rates.{what} = {r} Hz must divide rates.physics = {} Hz",
                    self.physics
                )))
            } else {
                Ok(d.round() as u64)
            }
        };
        if !(self.physics > 0.0) {
            return Err(MbError::Config("rates.physics must be positive".into()));
        }
        Ok((div(self.sea, "sea")?, div(self.control, "control")?))
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.physics
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GripTarget {
    /// A point on a payload body, payload frame at zero hinge angle.
    Payload { body: usize, point: Vector3<f64> },
    /// The wrist center of a robot.
    Wrist { robot: usize },
}

/// Spring-damper between the hand and a world anchor. Without an anchor
/// only the damping acts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandImpedance {
    pub stiffness: f64,
    pub damping: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hand {
    pub name: String,
    pub target: GripTarget,
    /// Commanded force and moment, world frame.
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
    pub impedance: Option<HandImpedance>,
    /// Last total force including the impedance, world frame.
    pub applied: Vector3<f64>,
    /// Last impedance force alone.
    pub hold_force: Vector3<f64>,
}

impl Hand {
    pub fn new(name: &str, target: GripTarget) -> Self {
        Self {
            name: name.to_string(),
            target,
            force: Vector3::zeros(),
            moment: Vector3::zeros(),
            impedance: None,
            applied: Vector3::zeros(),
            hold_force: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSetup {
    /// Chassis pose `(x, y, φ)`.
    pub base_pose: Vector3<f64>,
    pub mode: FloatMode,
    pub gains: CtrlGains,
    pub recenter: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldInit {
    /// Payload frame origin, world frame.
    pub payload_position: Vector3<f64>,
    /// Payload frame orientation as a rotation vector.
    pub payload_rotation: Vector3<f64>,
    #[serde(default)]
    pub hinge_angle: f64,
}

impl Default for WorldInit {
    fn default() -> Self {
        Self {
            payload_position: Vector3::zeros(),
            payload_rotation: Vector3::zeros(),
            hinge_angle: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum WorldEvent {
    Reanchor { robot: usize, z0: f64, count: u64 },
    TorqueClamp { robot: usize },
    ControllerFault { robot: usize },
    GimbalLock { robot: usize },
    ConstraintSingular,
    ModeChange { robot: usize, mode: FloatMode },
}

/// Work done on the system since construction (J).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct WorkLedger {
    pub actuators: f64,
    pub humans: f64,
    /// Work of the grasp constraint forces, nonzero only while the
    /// kinematic bases move.
    pub bases: f64,
    pub dissipated: f64,
}

impl WorkLedger {
    /// Net work into the mechanical system.
    pub fn net(&self) -> f64 {
        self.actuators + self.humans + self.bases - self.dissipated
    }

    fn add(&mut self, o: &WorkLedger) {
        self.actuators += o.actuators;
        self.humans += o.humans;
        self.bases += o.bases;
        self.dissipated += o.dissipated;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Energy {
    pub kinetic: f64,
    pub gravity: f64,
    pub spring: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.kinetic + self.gravity + self.spring
    }
}

/// Result of one physics step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub qdd: DVector<f64>,
    pub lambda: DVector<f64>,
    pub residual: f64,
    pub rate_residual: f64,
    /// Constraint rate of the velocity used for the position update,
    /// relative to the stabilization target.
    pub corrected_rate: f64,
    pub singular: bool,
    /// Work over the step, evaluated at the midpoint velocity.
    pub work: WorkLedger,
}

/// Power of the viscous forces evaluated at `before` (as the dynamics
/// use them) against the velocities of `after`.
fn damping_power(before: &SystemState, after: &SystemState, models: &Models) -> f64 {
    let mut p = 0.0;
    for ((r0, r1), rm) in before.robots.iter().zip(&after.robots).zip(&models.robots) {
        p += rm.joint_damping * r0.theta_dot.dot(&r1.theta_dot);
        if models.actuation == Actuation::SeriesElastic {
            p += rm.sea.motor_damping * r0.sea.iter().zip(&r1.sea).map(|(a, b)| a.beta_dot * b.beta_dot).sum::<f64>();
        }
    }
    if let Some(h) = &models.hinge {
        let rel = |s: &SystemState| {
            let (b0, b1) = (&s.bodies[h.bodies[0]], &s.bodies[h.bodies[1]]);
            (b1.rotation * b1.omega - b0.rotation * b0.omega).dot(&(b0.rotation * h.axis))
        };
        p += h.damping * rel(before) * rel(after);
    }
    p
}

/// Advance the mechanical state by `dt` under controls `u` (three per
/// robot: motor torques or joint torques) and external generalized
/// forces. Semi-implicit Euler with Baumgarte stabilization and a
/// velocity correction onto the constraint manifold.
pub fn advance(
    state: &SystemState,
    models: &Models,
    mats: &SystemMatrices,
    u: &DVector<f64>,
    f_ext: &DVector<f64>,
    dt: f64,
    stab: Stabilization,
) -> Result<(SystemState, StepInfo), MbError> {
    let vs = velocity_step(mats, &state.velocity_vector(models), u, f_ext, dt, stab)?;
    let (v, sol) = (vs.qd, vs.accel);
    let mut next = state.clone();
    integrate_positions(&mut next, models, &v, dt);
    // power at the step-midpoint velocity matches the kinetic energy change
    let v0 = state.velocity_vector(models);
    let mid = (&v0 + &v) * 0.5;
    let half = |s: &SystemState| damping_power(state, s, models);
    let work = WorkLedger {
        actuators: (&mats.s * u).dot(&mid) * dt,
        humans: f_ext.dot(&mid) * dt,
        bases: (mats.a.transpose() * &sol.lambda).dot(&mid) * dt,
        dissipated: 0.5 * (half(state) + half(&next)) * dt,
    };
    Ok((
        next,
        StepInfo {
            residual: mats.residual.amax(),
            rate_residual: mats.residual_rate.amax(),
            corrected_rate: vs.rate_after,
            singular: sol.singular,
            qdd: sol.qdd,
            lambda: sol.lambda,
            work,
        },
    ))
}

/// Body poses for a payload frame pose and hinge angle.
pub fn place_payload(models: &Models, init: &WorldInit) -> Vec<BodyState> {
    let r = rotation_from_vector(&init.payload_rotation);
    let p = init.payload_position;
    let mut bodies: Vec<BodyState> = models
        .payload
        .bodies
        .iter()
        .map(|b| BodyState::at_rest(r, p + r * b.com))
        .collect();
    if let (Some(h), Some(spec)) = (&models.hinge, &models.payload.hinge) {
        let i = h.bodies[1];
        let turn = rotation_from_vector(&(h.axis * init.hinge_angle));
        let com = models.payload.bodies[i].com;
        bodies[i] = BodyState::at_rest(r * turn, p + r * (spec.pivot + turn * (com - spec.pivot)));
    }
    bodies
}

/// Payload placed per `init`, bases at `base_poses` and every attached
/// robot's joints solved so its wrist meets its attachment point. All
/// velocities are zero.
pub fn initial_state(models: &Models, init: &WorldInit, base_poses: &[Vector3<f64>]) -> Result<SystemState, MbError> {
    if base_poses.len() != models.robots.len() {
        return Err(MbError::Config(format!(
            "{} base poses for {} robots",
            base_poses.len(),
            models.robots.len()
        )));
    }
    let bodies = place_payload(models, init);
    let mut robots = Vec::with_capacity(base_poses.len());
    for (i, (rm, pose)) in models.robots.iter().zip(base_poses).enumerate() {
        let base = BaseState::at(*pose);
        let theta = match models.payload.attachment_for(i) {
            Some(att) => {
                let w = bodies[att.body].point(&models.payload.attachment_offset(att));
                let origin = Vector3::new(pose.x, pose.y, 0.0);
                let x = rot_z(pose.z).transpose() * (w - origin) - rm.mount;
                delta::ik(&x, &rm.manip.delta).map_err(|e| MbError::Unreachable { robot: i, source: e })?
            }
            None => rm.manip.delta.home_angles(),
        };
        let mut sea = [SeaState::default(); 3];
        for q in 0..3 {
            sea[q] = SeaState::at_rest(theta[q], 0.0, rm.sea.k);
        }
        robots.push(RobotState {
            base,
            v_com: Vector3::zeros(),
            theta,
            theta_dot: Vector3::zeros(),
            sea,
        });
    }
    Ok(SystemState { bodies, robots })
}

#[derive(Debug, Clone)]
pub struct World {
    pub models: Models,
    pub rates: Rates,
    pub stab: Stabilization,
    pub state: SystemState,
    pub controllers: Vec<ManipController>,
    pub recenter: Vec<bool>,
    pub hands: Vec<Hand>,
    pub tau_cmd: Vec<Vector3<f64>>,
    pub gimbal: Vec<GimbalReading>,
    pub tick: u64,
    pub quiet_for: f64,
    pub max_residual: f64,
    pub max_rate_residual: f64,
    pub lambda: DVector<f64>,
    pub work: WorkLedger,
    pub clamp_count: u64,
    pub events: Vec<WorldEvent>,
    prev_offsets: Vec<Option<Vector3<f64>>>,
    sea_div: u64,
    ctrl_div: u64,
}

impl World {
    pub fn new(
        models: Models,
        init: WorldInit,
        setups: &[RobotSetup],
        hands: Vec<Hand>,
        rates: Rates,
        stab: Stabilization,
    ) -> Result<Self, MbError> {
        let (sea_div, ctrl_div) = rates.divisors()?;
        let nr = models.robots.len();
        if setups.len() != nr {
            return Err(MbError::Config(format!("{} robot setups for {nr} robots", setups.len())));
        }
        let poses: Vec<_> = setups.iter().map(|s| s.base_pose).collect();
        let mut state = initial_state(&models, &init, &poses)?;
        let statics = static_equilibrium(&state, &models)?;
        for (r, (rm, tau)) in state.robots.iter_mut().zip(models.robots.iter().zip(&statics.joint_torques)) {
            for q in 0..3 {
                let mut s = SeaState::at_rest(r.theta[q], tau[q], rm.sea.k);
                s.motor_torque = tau[q];
                if rm.sea.pid.ki > 0.0 {
                    s.integ = tau[q] / rm.sea.pid.ki;
                }
                r.sea[q] = s;
            }
        }

        let heading = state.bodies.first().map(|b| b.heading()).unwrap_or(0.0);
        let com0 = state.payload_com(&models.payload);
        let mut controllers = Vec::with_capacity(nr);
        for (i, (rm, setup)) in models.robots.iter().zip(setups).enumerate() {
            setup.gains.validate()?;
            let grasp_offset = match models.payload.attachment_for(i) {
                Some(att) => {
                    let b = &state.bodies[att.body];
                    let w = b.point(&models.payload.attachment_offset(att));
                    rotation_from_vector(&init.payload_rotation).transpose() * (w - com0)
                }
                None => Vector3::zeros(),
            };
            let snap = CalibrationSnapshot {
                theta: state.robots[i].theta,
                sea_torques: statics.joint_torques[i],
                quiet_for: QUIESCENCE_TIME,
                heading,
                grasp_offset,
                payload_mass: models.payload.total_mass(),
            };
            let fs = startup_calibration(&snap, i, setup.mode, &rm.manip, &setup.gains)?;
            controllers.push(ManipController::new(rm.manip, setup.gains, fs));
        }

        let mut world = Self {
            rates,
            stab,
            recenter: setups.iter().map(|s| s.recenter).collect(),
            hands,
            tau_cmd: statics.joint_torques.clone(),
            gimbal: vec![GimbalReading::default(); nr],
            tick: 0,
            quiet_for: QUIESCENCE_TIME,
            max_residual: 0.0,
            max_rate_residual: 0.0,
            lambda: statics.lambda,
            work: WorkLedger::default(),
            clamp_count: 0,
            events: vec![],
            prev_offsets: vec![None; nr],
            sea_div,
            ctrl_div,
            controllers,
            state,
            models,
        };
        for h in 0..world.hands.len() {
            world.validate_hand(h)?;
            let (x, _) = world.grip_kinematics(&world.hands[h].target)?;
            if let Some(imp) = &mut world.hands[h].impedance {
                imp.anchor.get_or_insert(x);
            }
        }
        world.update_gimbals();
        Ok(world)
    }

    fn validate_hand(&self, h: usize) -> Result<(), MbError> {
        let hand = &self.hands[h];
        let ok = match &hand.target {
            GripTarget::Payload { body, .. } => *body < self.models.payload.bodies.len(),
            GripTarget::Wrist { robot } => *robot < self.models.robots.len(),
        };
        if ok {
            Ok(())
        } else {
            Err(MbError::Config(format!("hand '{}' grips a missing body or robot", hand.name)))
        }
    }

    pub fn dt(&self) -> f64 {
        self.rates.dt()
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 / self.rates.physics
    }

    /// Control updates happen at ticks that are multiples of this.
    pub fn control_divisor(&self) -> u64 {
        self.ctrl_div
    }

    pub fn hand_index(&self, name: &str) -> Option<usize> {
        self.hands.iter().position(|h| h.name == name)
    }

    /// World position and velocity of a grip.
    pub fn grip_kinematics(&self, target: &GripTarget) -> Result<(Vector3<f64>, Vector3<f64>), MbError> {
        match target {
            GripTarget::Payload { body, point } => {
                let b = &self.state.bodies[*body];
                let r = point - self.models.payload.bodies[*body].com;
                Ok((b.point(&r), b.point_velocity(&r)))
            }
            GripTarget::Wrist { robot } => {
                let k = super::system::robot_kinematics(&self.state.robots[*robot], &self.models.robots[*robot])
                    .map_err(|e| MbError::Kinematics { robot: *robot, source: e })?;
                Ok((k.wrist, k.wrist_velocity))
            }
        }
    }

    /// Wrist center of a robot, world frame.
    pub fn wrist(&self, robot: usize) -> Result<Vector3<f64>, MbError> {
        Ok(self.grip_kinematics(&GripTarget::Wrist { robot })?.0)
    }

    pub fn set_mode(&mut self, robot: usize, mode: FloatMode) -> Result<(), MbError> {
        let theta = self
            .state
            .robots
            .get(robot)
            .ok_or_else(|| MbError::Config(format!("no robot {robot}")))?
            .theta;
        if self.controllers[robot].state.mode != mode {
            self.controllers[robot].set_mode(mode, &theta);
            self.events.push(WorldEvent::ModeChange { robot, mode });
        }
        Ok(())
    }

    fn update_gimbals(&mut self) {
        for (i, r) in self.state.robots.iter().enumerate() {
            if let Some(att) = self.models.payload.attachment_for(i) {
                let platform = rot_z(r.base.pose.z);
                let g = gimbal_angles(&platform, &self.state.bodies[att.body].rotation, &self.gimbal[i]);
                if g.locked && !self.gimbal[i].locked {
                    self.events.push(WorldEvent::GimbalLock { robot: i });
                }
                self.gimbal[i] = g;
            }
        }
    }

    fn team_shares(&self) -> Option<Vec<Vector3<f64>>> {
        let atts = &self.models.payload.attachments;
        let needed = atts
            .iter()
            .any(|a| self.controllers[a.robot].state.mode == FloatMode::Float);
        if !needed {
            return None;
        }
        let com = self.state.payload_com(&self.models.payload);
        let team = TeamGeometry {
            offsets: atts
                .iter()
                .map(|a| self.state.bodies[a.body].point(&self.models.payload.attachment_offset(a)) - com)
                .collect(),
            nominal: atts
                .iter()
                .map(|a| self.controllers[a.robot].state.nominal_in_heading())
                .collect(),
            heading: self.state.bodies[0].heading(),
            payload_mass: self.models.payload.total_mass(),
            g: self.models.g,
        };
        Some(solve_team_shares(&team).forces)
    }

    fn control_update(&mut self) {
        self.update_gimbals();
        let shares = self.team_shares();
        let ctrl_dt = self.ctrl_div as f64 / self.rates.physics;
        for i in 0..self.models.robots.len() {
            let slot = self.models.payload.attachments.iter().position(|a| a.robot == i);
            let f_pay = match (&shares, slot) {
                (Some(s), Some(k)) => s[k],
                _ => Vector3::zeros(),
            };
            let theta = self.state.robots[i].theta;
            let theta_dot = self.state.robots[i].theta_dot;
            let before = self.controllers[i].state.reanchor_count;
            let was_clamped = self.controllers[i].last.clamped;
            let out = self.controllers[i].command(&theta, &theta_dot, &f_pay);
            let fs = &self.controllers[i].state;
            if fs.reanchor_count != before {
                self.events.push(WorldEvent::Reanchor {
                    robot: i,
                    z0: fs.z0,
                    count: fs.reanchor_count,
                });
            }
            if out.clamped {
                self.clamp_count += 1;
                if !was_clamped {
                    self.events.push(WorldEvent::TorqueClamp { robot: i });
                }
            }
            if out.fault {
                self.events.push(WorldEvent::ControllerFault { robot: i });
            }
            self.tau_cmd[i] = out.tau;

            let rm = &self.models.robots[i];
            let r = &mut self.state.robots[i];
            r.v_com = if self.recenter[i] {
                let x = delta::fk(&theta, &rm.manip.delta).unwrap_or_else(|_| rm.manip.delta.home_position());
                let d = x - rm.manip.delta.home_position();
                let yaw = if slot.is_some() { self.gimbal[i].angles.z } else { 0.0 };
                let e = Vector3::new(d.x, d.y, yaw);
                let rate = self.prev_offsets[i].map(|p| (e - p) / ctrl_dt).unwrap_or_else(Vector3::zeros);
                self.prev_offsets[i] = Some(e);
                mobase::recentering_twist(&e, &rate, &rm.base)
            } else {
                Vector3::zeros()
            };
        }
    }

    fn sea_update(&mut self) {
        for (i, (r, rm)) in self.state.robots.iter_mut().zip(&self.models.robots).enumerate() {
            for q in 0..3 {
                let s = &mut r.sea[q];
                let measured = joint_torque(s, &rm.sea);
                let (u, sat) = TorquePid::update(s, self.tau_cmd[i][q], measured, &rm.sea);
                s.motor_torque = u;
                s.saturated = sat;
            }
        }
    }

    /// Generalized forces of the hands, updating their applied forces.
    fn hand_forces(&mut self, mats: &SystemMatrices) -> Result<DVector<f64>, MbError> {
        let mut f = DVector::zeros(self.models.n());
        for h in 0..self.hands.len() {
            let (x, v) = self.grip_kinematics(&self.hands[h].target)?;
            let hand = &mut self.hands[h];
            let hold = match &hand.impedance {
                Some(imp) => {
                    let spring = imp.anchor.map(|a| (a - x) * imp.stiffness).unwrap_or_else(Vector3::zeros);
                    spring - v * imp.damping
                }
                None => Vector3::zeros(),
            };
            let force = hand.force + hold;
            hand.hold_force = hold;
            hand.applied = force;
            match &hand.target {
                GripTarget::Payload { body, point } => {
                    let b = &self.state.bodies[*body];
                    let r = point - self.models.payload.bodies[*body].com;
                    let rt = b.rotation.transpose();
                    let mut fw = f.fixed_rows_mut::<3>(6 * body);
                    fw += r.cross(&(rt * force)) + rt * hand.moment;
                    let mut fv = f.fixed_rows_mut::<3>(6 * body + 3);
                    fv += force;
                }
                GripTarget::Wrist { robot } => {
                    let k = &mats.kin[*robot];
                    let o = self.models.robot_offset(*robot);
                    let mut ft = f.fixed_rows_mut::<3>(o);
                    ft += k.j.transpose() * (k.base.rotation.transpose() * force);
                }
            }
        }
        Ok(f)
    }

    fn controls(&self) -> DVector<f64> {
        let mut u = DVector::zeros(3 * self.models.robots.len());
        for (i, r) in self.state.robots.iter().enumerate() {
            for q in 0..3 {
                u[3 * i + q] = match self.models.actuation {
                    Actuation::SeriesElastic => r.sea[q].motor_torque,
                    Actuation::JointTorque => self.tau_cmd[i][q],
                };
            }
        }
        u
    }

    fn fault(&self, reason: String) -> MbError {
        MbError::Fault {
            tick: self.tick,
            time: self.time(),
            reason,
        }
    }

    /// One physics tick.
    pub fn step(&mut self) -> Result<(), MbError> {
        if self.tick.is_multiple_of(self.ctrl_div) {
            self.control_update();
        }
        if self.models.actuation == Actuation::SeriesElastic && self.tick.is_multiple_of(self.sea_div) {
            self.sea_update();
        }
        let mats = assemble(&self.state, &self.models).map_err(|e| self.fault(e.to_string()))?;
        let f_ext = self.hand_forces(&mats)?;
        let u = self.controls();
        let (next, info) = advance(&self.state, &self.models, &mats, &u, &f_ext, self.dt(), self.stab)?;
        if !info.qdd.iter().all(|v| v.is_finite()) {
            return Err(self.fault("non-finite acceleration".into()));
        }
        self.max_residual = self.max_residual.max(info.residual);
        self.max_rate_residual = self.max_rate_residual.max(info.rate_residual);
        if info.residual > FAULT_RESIDUAL {
            return Err(self.fault(format!("constraint residual {:.3e} m", info.residual)));
        }
        if info.singular && !self.events.contains(&WorldEvent::ConstraintSingular) {
            self.events.push(WorldEvent::ConstraintSingular);
        }
        self.state = next;
        self.lambda = info.lambda;
        self.work.add(&info.work);
        let speed = self
            .state
            .bodies
            .iter()
            .map(|b| b.velocity.norm())
            .fold(0.0, f64::max);
        self.quiet_for = if speed < QUIESCENCE_SPEED {
            self.quiet_for + self.dt()
        } else {
            0.0
        };
        self.tick += 1;
        Ok(())
    }

    /// Step until the simulated time reaches `t` (s).
    pub fn run_until(&mut self, t: f64) -> Result<(), MbError> {
        let target = (t * self.rates.physics).round() as u64;
        while self.tick < target {
            self.step()?;
        }
        Ok(())
    }

    /// Measured joint torques, per robot.
    pub fn sea_torques(&self, robot: usize) -> Vector3<f64> {
        let r = &self.state.robots[robot];
        match self.models.actuation {
            Actuation::SeriesElastic => {
                let p = &self.models.robots[robot].sea;
                Vector3::from_fn(|q, _| joint_torque(&r.sea[q], p))
            }
            Actuation::JointTorque => self.tau_cmd[robot],
        }
    }

    pub fn hinge_angle(&self) -> Option<f64> {
        self.models.hinge.as_ref().map(|h| {
            h.angle(
                &self.state.bodies[h.bodies[0]].rotation,
                &self.state.bodies[h.bodies[1]].rotation,
            )
        })
    }

    pub fn energy(&self) -> Result<Energy, MbError> {
        let g = self.models.g;
        let mut e = Energy::default();
        for (s, b) in self.state.bodies.iter().zip(&self.models.payload.bodies) {
            e.kinetic += 0.5 * s.omega.dot(&(b.inertia * s.omega)) + 0.5 * b.mass * s.velocity.norm_squared();
            e.gravity += b.mass * g * s.position.z;
        }
        for (i, (r, rm)) in self.state.robots.iter().zip(&self.models.robots).enumerate() {
            let (w, wv) = self.grip_kinematics(&GripTarget::Wrist { robot: i })?;
            let mw = rm.manip.wrist_mass;
            e.kinetic += 0.5 * r.theta_dot.dot(&(rm.manip.joint_inertia * r.theta_dot)) + 0.5 * mw * wv.norm_squared();
            e.gravity += mw * g * w.z;
            if self.models.actuation == Actuation::SeriesElastic {
                for s in &r.sea {
                    e.kinetic += 0.5 * rm.sea.motor_inertia * s.beta_dot * s.beta_dot;
                    let d = s.beta - s.theta;
                    e.spring += 0.5 * rm.sea.k * d * d;
                }
            }
        }
        Ok(e)
    }

    pub fn snapshot(&self) -> Snapshot {
        let payload = self
            .state
            .bodies
            .iter()
            .map(|b| BodyPose {
                position: b.position,
                orientation: quat(&b.rotation),
                velocity: b.velocity,
            })
            .collect();
        let robots = (0..self.models.robots.len())
            .map(|i| {
                let r = &self.state.robots[i];
                let rm = &self.models.robots[i];
                let c = &self.controllers[i];
                let x = delta::fk(&r.theta, &rm.manip.delta).unwrap_or_else(|_| Vector3::repeat(f64::NAN));
                let wrist = Vector3::new(r.base.pose.x, r.base.pose.y, 0.0) + rot_z(r.base.pose.z) * (rm.mount + x);
                RobotSnapshot {
                    base_pose: r.base.pose,
                    odom_pose: r.base.odom_pose,
                    base_twist: r.base.twist,
                    wheel_speeds: r.base.wheel_speeds(&rm.base),
                    wrist,
                    wrist_local: x,
                    theta: r.theta,
                    alpha: self.gimbal[i].angles,
                    gimbal_locked: self.gimbal[i].locked,
                    sea_torque: self.sea_torques(i),
                    tau_cmd: self.tau_cmd[i],
                    f_com: c.last.f_com,
                    clamped: c.last.clamped,
                    fault: c.last.fault,
                    mode: c.state.mode,
                    z0: c.state.z0,
                    reanchors: c.state.reanchor_count,
                }
            })
            .collect();
        let hands = self
            .hands
            .iter()
            .map(|h| HandSnapshot {
                name: h.name.clone(),
                position: self.grip_kinematics(&h.target).map(|p| p.0).unwrap_or_else(|_| Vector3::zeros()),
                force: h.applied,
                moment: h.moment,
                hold_force: h.hold_force,
            })
            .collect();
        Snapshot {
            tick: self.tick,
            time: self.time(),
            payload,
            hinge_angle: self.hinge_angle(),
            robots,
            hands,
        }
    }
}

fn quat(r: &Matrix3<f64>) -> Vector4<f64> {
    let q = UnitQuaternion::from_matrix(r);
    Vector4::new(q.w, q.i, q.j, q.k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyPose {
    pub position: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`.
    pub orientation: Vector4<f64>,
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSnapshot {
    pub base_pose: Vector3<f64>,
    pub odom_pose: Vector3<f64>,
    pub base_twist: Vector3<f64>,
    pub wheel_speeds: Vector4<f64>,
    pub wrist: Vector3<f64>,
    pub wrist_local: Vector3<f64>,
    pub theta: Vector3<f64>,
    pub alpha: Vector3<f64>,
    pub gimbal_locked: bool,
    pub sea_torque: Vector3<f64>,
    pub tau_cmd: Vector3<f64>,
    pub f_com: Vector3<f64>,
    pub clamped: bool,
    pub fault: bool,
    pub mode: FloatMode,
    pub z0: f64,
    pub reanchors: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandSnapshot {
    pub name: String,
    pub position: Vector3<f64>,
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
    pub hold_force: Vector3<f64>,
}

/// Immutable state summary published at frame boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: u64,
    pub time: f64,
    pub payload: Vec<BodyPose>,
    pub hinge_angle: Option<f64>,
    pub robots: Vec<RobotSnapshot>,
    pub hands: Vec<HandSnapshot>,
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::multibody::fixtures::*;
    use crate::multibody::{PayloadModel, RobotModel};

    fn pvc_world(recenter: bool) -> World {
        pvc_world_at(recenter, Vector3::new(0.6, 0.0, 0.0))
    }

    fn pvc_world_at(recenter: bool, grip: Vector3<f64>) -> World {
        let (models, init, bases) = rigid_team(15.6, &ring(3, 0.5, 0.3), Actuation::SeriesElastic);
        let hands = vec![Hand::new(
            "h",
            GripTarget::Payload {
                body: 0,
                point: grip,
            },
        )];
        World::new(
            models,
            init,
            &setups(&bases, FloatMode::Float, recenter),
            hands,
            Rates::default(),
            Stabilization::default(),
        )
        .unwrap()
    }

    fn wobble(t: f64) -> Vector3<f64> {
        Vector3::new((2.0 * t).cos(), 0.5 * (3.0 * t).cos(), 0.3 * (1.5 * t).cos())
    }

    fn audit(recenter: bool, gain: f64) -> (f64, f64, WorkLedger) {
        let mut w = pvc_world_at(recenter, Vector3::zeros());
        let e0 = w.energy().unwrap().total();
        let mut gross = 0.0;
        let mut last = w.work;
        for k in 0..16_000 {
            w.hands[0].force = gain * wobble(k as f64 * w.dt());
            w.step().unwrap();
            if k % 40 == 39 {
                let d = [
                    w.work.actuators - last.actuators,
                    w.work.humans - last.humans,
                    w.work.bases - last.bases,
                ];
                gross += d.iter().map(|x| x.abs()).sum::<f64>();
                last = w.work;
            }
        }
        assert!(w.max_residual < 1e-6, "residual {}", w.max_residual);
        assert_eq!(w.clamp_count, 0);
        let de = w.energy().unwrap().total() - e0;
        (de - w.work.net(), gross, w.work)
    }

    #[test]
    fn energy_balances_against_work() {
        let (err, gross, work) = audit(false, 1.0);
        assert!(gross > 1.0, "gross work {gross}");
        assert!(err.abs() < 1e-3 * gross, "imbalance {err} J of {gross} J");
        assert!(work.bases.abs() < 1e-3 * gross, "{work:?}");
    }

    #[test]
    fn moving_bases_enter_the_balance() {
        let (err, gross, work) = audit(true, 8.0);
        assert!(work.bases.abs() > 1e-2 * gross, "{work:?}");
        // first-order base pose update; 0.2 % measured
        assert!(err.abs() < 1e-2 * gross, "imbalance {err} J of {gross} J, {work:?}");
    }

    #[test]
    fn horizontal_impulse_becomes_payload_momentum() {
        let mut w = pvc_world(true);
        let m = w.models.payload.total_mass();
        w.hands[0].target = GripTarget::Payload {
            body: 0,
            point: Vector3::zeros(),
        };
        w.hands[0].force = Vector3::new(100.0, 0.0, 0.0);
        w.run_until(0.1).unwrap();
        w.hands[0].force = Vector3::zeros();
        w.run_until(0.2).unwrap();
        let p = m * w.state.bodies[0].velocity;
        assert!((p.x - 10.0).abs() < 2.0, "momentum {p}");
        assert!(p.y.abs() < 0.5 && p.z.abs() < 0.5, "momentum {p}");
        assert!(w.max_residual < 1e-6);
    }

    #[test]
    fn untouched_float_stays_put() {
        let mut w = pvc_world(true);
        let p0 = w.state.bodies[0].position;
        w.run_until(2.0).unwrap();
        assert!((w.state.bodies[0].position - p0).norm() < 1e-9);
        assert!(w.events.is_empty(), "{:?}", w.events);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut w = pvc_world(true);
            for k in 0..4000 {
                w.hands[0].force = 3.0 * wobble(k as f64 * w.dt());
                w.step().unwrap();
            }
            serde_json::to_string(&w.snapshot()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rates_must_divide_physics() {
        let ok = Rates::default().divisors().unwrap();
        assert_eq!(ok, (5, 40));
        for bad in [
            Rates { sea: 700.0, ..Rates::default() },
            Rates { control: 0.0, ..Rates::default() },
            Rates { control: 8000.0, ..Rates::default() },
            Rates { physics: -1.0, ..Rates::default() },
        ] {
            assert!(matches!(bad.divisors(), Err(MbError::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn hand_on_a_missing_body_is_rejected() {
        let (models, init, bases) = rigid_team(15.6, &ring(3, 0.5, 0.3), Actuation::SeriesElastic);
        let hands = vec![Hand::new(
            "h",
            GripTarget::Payload {
                body: 3,
                point: Vector3::zeros(),
            },
        )];
        let r = World::new(models, init, &setups(&bases, FloatMode::Float, false), hands, Rates::default(), Stabilization::default());
        assert!(matches!(r, Err(MbError::Config(_))));
    }

    #[test]
    fn damped_hand_brings_a_lone_arm_to_rest() {
        let models = Models::new(PayloadModel::empty(), vec![RobotModel::default()], Actuation::SeriesElastic).unwrap();
        let mut hand = Hand::new("leash", GripTarget::Wrist { robot: 0 });
        hand.impedance = Some(HandImpedance {
            stiffness: 0.0,
            damping: 20.0,
            anchor: None,
        });
        let mut w = World::new(
            models,
            WorldInit::default(),
            &setups(&[Vector3::zeros()], FloatMode::Float, true),
            vec![hand],
            Rates::default(),
            Stabilization::default(),
        )
        .unwrap();
        w.hands[0].force = Vector3::new(2.0, 0.0, 0.0);
        w.run_until(2.0).unwrap();
        let moved = w.state.robots[0].base.pose.x;
        assert!(moved > 0.05, "base moved {moved}");
        w.hands[0].force = Vector3::zeros();
        w.run_until(4.0).unwrap();
        let (_, v) = w.grip_kinematics(&GripTarget::Wrist { robot: 0 }).unwrap();
        assert!(v.norm() < 1e-3, "wrist speed {v}");
        assert!(w.state.robots[0].base.twist.norm() < 1e-2, "base twist {}", w.state.robots[0].base.twist);
    }

    #[test]
    fn mode_changes_are_logged_once() {
        let mut w = pvc_world(false);
        w.set_mode(1, FloatMode::ApproxFloat).unwrap();
        w.set_mode(1, FloatMode::ApproxFloat).unwrap();
        let n = w
            .events
            .iter()
            .filter(|e| matches!(e, WorldEvent::ModeChange { robot: 1, .. }))
            .count();
        assert_eq!(n, 1);
        assert!(matches!(w.set_mode(7, FloatMode::Float), Err(MbError::Config(_))));
    }
}
