//! Generalized coordinates, matrix assembly and the constrained solve.
//!
//! Velocity layout: for each payload body `[ω (body frame); v (world,
//! COM)]`, then for each robot `[θ̇]` followed by `[β̇]` when the joints
//! are series-elastic. Bases are kinematic: their motion enters the
//! constraint right-hand side and the wrist inertial terms, not `q`.
//!
//! Grasp constraints are `attachment point − wrist center = 0`, so the
//! multipliers of a grasp are the force the wrist applies to the payload.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::payload::{HingeFrames, PayloadModel};
use super::MbError;
use crate::delta::{self, DeltaError};
use crate::manip_ctrl::ManipModel;
use crate::mobase::{self, BaseParams, BaseState, SlipModel};
use crate::sea::{SeaParams, SeaState};
use crate::spatial::{orthonormalize, rot_z, rotation_from_vector, skew};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Actuation {
    /// Motor angles are coordinates; controls are motor torques.
    SeriesElastic,
    /// Ideal torque sources at the proximal joints.
    JointTorque,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotModel {
    pub manip: ManipModel,
    pub sea: SeaParams,
    pub base: BaseParams,
    #[serde(default)]
    pub slip: SlipModel,
    /// Delta base frame origin in the chassis frame (m).
    pub mount: Vector3<f64>,
    /// Viscous damping at the proximal joints (N·m·s/rad).
    #[serde(default)]
    pub joint_damping: f64,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            manip: ManipModel::default(),
            sea: SeaParams::default(),
            base: BaseParams::default(),
            slip: SlipModel::default(),
            mount: Vector3::new(0.0, 0.0, 0.3),
            joint_damping: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub payload: PayloadModel,
    pub robots: Vec<RobotModel>,
    pub actuation: Actuation,
    pub g: f64,
    pub hinge: Option<HingeFrames>,
}

impl Models {
    pub fn new(payload: PayloadModel, robots: Vec<RobotModel>, actuation: Actuation) -> Result<Self, MbError> {
        payload.validate(robots.len())?;
        let g = robots.first().map(|r| r.manip.g).unwrap_or(9.81);
        for (i, r) in robots.iter().enumerate() {
            r.manip
                .validate()
                .map_err(|e| MbError::Config(format!("robots[{i}].manip: {e}")))?;
            r.sea
                .validate()
                .map_err(|e| MbError::Config(format!("robots[{i}].sea: {e}")))?;
            r.base
                .validate()
                .map_err(|e| MbError::Config(format!("robots[{i}].base: {e}")))?;
            if r.manip.g != g {
                return Err(MbError::Config("all robots must share one gravity value".into()));
            }
            if r.joint_damping < 0.0 {
                return Err(MbError::Config(format!("robots[{i}].joint_damping must be non-negative")));
            }
        }
        let hinge = payload.hinge.as_ref().map(|h| HingeFrames::new(h, &payload.bodies));
        Ok(Self {
            payload,
            robots,
            actuation,
            g,
            hinge,
        })
    }

    /// Same models with ideal joint torque actuation.
    pub fn joint_torque_view(&self) -> Self {
        Self {
            actuation: Actuation::JointTorque,
            ..self.clone()
        }
    }

    pub fn per_robot(&self) -> usize {
        match self.actuation {
            Actuation::SeriesElastic => 6,
            Actuation::JointTorque => 3,
        }
    }

    pub fn n_payload(&self) -> usize {
        6 * self.payload.bodies.len()
    }

    pub fn robot_offset(&self, i: usize) -> usize {
        self.n_payload() + self.per_robot() * i
    }

    pub fn n(&self) -> usize {
        self.n_payload() + self.per_robot() * self.robots.len()
    }

    pub fn n_constraints(&self) -> usize {
        3 * self.payload.attachments.len() + if self.hinge.is_some() { 5 } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub rotation: Matrix3<f64>,
    /// COM, world frame.
    pub position: Vector3<f64>,
    /// Angular velocity, body frame.
    pub omega: Vector3<f64>,
    /// COM velocity, world frame.
    pub velocity: Vector3<f64>,
}

impl BodyState {
    pub fn at_rest(rotation: Matrix3<f64>, position: Vector3<f64>) -> Self {
        Self {
            rotation,
            position,
            omega: Vector3::zeros(),
            velocity: Vector3::zeros(),
        }
    }

    pub fn point(&self, r: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.rotation * r
    }

    pub fn point_velocity(&self, r: &Vector3<f64>) -> Vector3<f64> {
        self.velocity + self.rotation * self.omega.cross(r)
    }

    /// Heading of the body x axis about vertical.
    pub fn heading(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base: BaseState,
    /// Chassis twist command held between control updates.
    pub v_com: Vector3<f64>,
    pub theta: Vector3<f64>,
    pub theta_dot: Vector3<f64>,
    /// Motor side of each joint (unused under ideal joint torques).
    pub sea: [SeaState; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub bodies: Vec<BodyState>,
    pub robots: Vec<RobotState>,
}

impl SystemState {
    pub fn velocity_vector(&self, models: &Models) -> DVector<f64> {
        let mut v = DVector::zeros(models.n());
        for (b, s) in self.bodies.iter().enumerate() {
            v.fixed_rows_mut::<3>(6 * b).copy_from(&s.omega);
            v.fixed_rows_mut::<3>(6 * b + 3).copy_from(&s.velocity);
        }
        for (i, r) in self.robots.iter().enumerate() {
            let o = models.robot_offset(i);
            v.fixed_rows_mut::<3>(o).copy_from(&r.theta_dot);
            if models.actuation == Actuation::SeriesElastic {
                for k in 0..3 {
                    v[o + 3 + k] = r.sea[k].beta_dot;
                }
            }
        }
        v
    }

    /// Combined payload COM, world frame.
    pub fn payload_com(&self, payload: &PayloadModel) -> Vector3<f64> {
        let m = payload.total_mass();
        if m == 0.0 {
            return Vector3::zeros();
        }
        self.bodies
            .iter()
            .zip(&payload.bodies)
            .map(|(s, b)| s.position * b.mass)
            .sum::<Vector3<f64>>()
            / m
    }

    pub fn payload_momentum(&self, payload: &PayloadModel) -> Vector3<f64> {
        self.bodies
            .iter()
            .zip(&payload.bodies)
            .map(|(s, b)| s.velocity * b.mass)
            .sum()
    }
}

/// Base motion at the current instant, world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseKin {
    pub origin: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub omega: f64,
    pub velocity: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub alpha: f64,
    /// Ground twist rate `(v̇_x, v̇_y, ω̇)`, chassis frame.
    pub twist_rate: Vector3<f64>,
}

pub fn base_kinematics(state: &BaseState, v_com: &Vector3<f64>, base: &BaseParams, slip: &SlipModel) -> BaseKin {
    let rotation = rot_z(state.pose.z);
    let tw = state.ground_twist(base, slip);
    let rate = state.ground_twist_rate(v_com, base, slip);
    let v = Vector3::new(tw.x, tw.y, 0.0);
    let vd = Vector3::new(rate.x, rate.y, 0.0);
    BaseKin::assemble(state, rotation, tw.z, v, vd, rate)
}

impl BaseKin {
    fn assemble(
        state: &BaseState,
        rotation: Matrix3<f64>,
        omega: f64,
        v: Vector3<f64>,
        vd: Vector3<f64>,
        twist_rate: Vector3<f64>,
    ) -> Self {
        Self {
            origin: Vector3::new(state.pose.x, state.pose.y, 0.0),
            rotation,
            omega,
            velocity: rotation * v,
            accel: rotation * (vd + Vector3::z().cross(&v) * omega),
            alpha: twist_rate.z,
            twist_rate,
        }
    }
}

/// Per-robot kinematic quantities at the current state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotKin {
    pub base: BaseKin,
    /// Wrist center in the Delta frame.
    pub x: Vector3<f64>,
    pub j: Matrix3<f64>,
    pub jdot_td: Vector3<f64>,
    /// Wrist center in the chassis frame.
    pub s: Vector3<f64>,
    pub wrist: Vector3<f64>,
    pub wrist_velocity: Vector3<f64>,
}

pub fn robot_kinematics(state: &RobotState, model: &RobotModel) -> Result<RobotKin, DeltaError> {
    let base = base_kinematics(&state.base, &state.v_com, &model.base, &model.slip);
    let p = &model.manip.delta;
    let x = delta::fk(&state.theta, p)?;
    let j = delta::jacobian(&state.theta, p)?;
    let jdot_td = delta::jacobian_dot_times_rate(&state.theta, &state.theta_dot, p)?;
    let s = model.mount + x;
    let rs = base.rotation * s;
    let wrist = base.origin + rs;
    let wrist_velocity =
        base.velocity + Vector3::z().cross(&rs) * base.omega + base.rotation * (j * state.theta_dot);
    Ok(RobotKin {
        base,
        x,
        j,
        jdot_td,
        s,
        wrist,
        wrist_velocity,
    })
}

/// Terms of Eqs. `M q̈ + c + p = S u + Aᵀλ` and `A q̈ = γ`, plus the
/// constraint values used for stabilization and the base-channel
/// sensitivities used by the control map.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub m: DMatrix<f64>,
    pub c: DVector<f64>,
    pub p: DVector<f64>,
    pub s: DMatrix<f64>,
    pub a: DMatrix<f64>,
    /// Constraint acceleration bias: `A q̈ = γ` keeps `f̈ = 0`.
    pub gamma: DVector<f64>,
    /// Constraint values `f(q)`.
    pub residual: DVector<f64>,
    /// Constraint rates `ḟ`, including base motion.
    pub residual_rate: DVector<f64>,
    /// Generalized force per unit base channel (chassis accelerations
    /// `v̇_x, v̇_y, ω̇`), three columns per robot.
    pub s_base: DMatrix<f64>,
    /// Constraint bias per unit base channel.
    pub b_base: DMatrix<f64>,
    pub n_payload: usize,
    pub kin: Vec<RobotKin>,
}

pub fn assemble(state: &SystemState, models: &Models) -> Result<SystemMatrices, MbError> {
    let n = models.n();
    let nc = models.n_constraints();
    let nr = models.robots.len();
    let sea = models.actuation == Actuation::SeriesElastic;
    let g = models.g;
    let zhat = Vector3::z();
    if state.bodies.len() != models.payload.bodies.len() || state.robots.len() != nr {
        return Err(MbError::Config("state does not match models".into()));
    }

    let mut m = DMatrix::zeros(n, n);
    let mut c = DVector::zeros(n);
    let mut p = DVector::zeros(n);
    let mut s = DMatrix::zeros(n, 3 * nr);
    let mut a = DMatrix::zeros(nc, n);
    let mut gamma = DVector::zeros(nc);
    let mut residual = DVector::zeros(nc);
    let mut residual_rate = DVector::zeros(nc);
    let mut s_base = DMatrix::zeros(n, 3 * nr);
    let mut b_base = DMatrix::zeros(nc, 3 * nr);

    for (b, (bs, spec)) in state.bodies.iter().zip(&models.payload.bodies).enumerate() {
        let o = 6 * b;
        m.view_mut((o, o), (3, 3)).copy_from(&spec.inertia);
        m.view_mut((o + 3, o + 3), (3, 3))
            .copy_from(&(Matrix3::identity() * spec.mass));
        c.fixed_rows_mut::<3>(o)
            .copy_from(&bs.omega.cross(&(spec.inertia * bs.omega)));
        p[o + 5] = spec.mass * g;
    }

    let mut kin = Vec::with_capacity(nr);
    for (i, (rs, rm)) in state.robots.iter().zip(&models.robots).enumerate() {
        let k = robot_kinematics(rs, rm).map_err(|e| MbError::Kinematics { robot: i, source: e })?;
        let o = models.robot_offset(i);
        let mw = rm.manip.wrist_mass;
        let jt = k.j.transpose();
        m.view_mut((o, o), (3, 3))
            .copy_from(&(rm.manip.joint_inertia + jt * k.j * mw));
        let b = &k.base;
        let local_acc = b.rotation.transpose() * b.accel + zhat.cross(&k.s) * b.alpha
            - Vector3::new(k.s.x, k.s.y, 0.0) * (b.omega * b.omega)
            + zhat.cross(&(k.j * rs.theta_dot)) * (2.0 * b.omega)
            + k.jdot_td;
        c.fixed_rows_mut::<3>(o)
            .copy_from(&(jt * local_acc * mw + rs.theta_dot * rm.joint_damping));
        p.fixed_rows_mut::<3>(o).copy_from(&(jt * zhat * (mw * g)));
        let sb = Matrix3::from_columns(&[Vector3::x(), Vector3::y(), zhat.cross(&k.s)]);
        s_base
            .view_mut((o, 3 * i), (3, 3))
            .copy_from(&(-(jt * sb) * mw));
        if sea {
            let kk = rm.sea.k;
            for q in 0..3 {
                let d = rs.sea[q].beta - rs.theta[q];
                m[(o + 3 + q, o + 3 + q)] = rm.sea.motor_inertia;
                c[o + 3 + q] = rm.sea.motor_damping * rs.sea[q].beta_dot;
                p[o + q] -= kk * d;
                p[o + 3 + q] = kk * d;
                s[(o + 3 + q, 3 * i + q)] = 1.0;
            }
        } else {
            s.view_mut((o, 3 * i), (3, 3)).fill_with_identity();
        }
        kin.push(k);
    }

    let mut row = 0;
    for att in &models.payload.attachments {
        let bs = &state.bodies[att.body];
        let r = models.payload.attachment_offset(att);
        let k = &kin[att.robot];
        let b = &k.base;
        let ob = 6 * att.body;
        let or = models.robot_offset(att.robot);
        let rj = b.rotation * k.j;
        a.view_mut((row, ob), (3, 3))
            .copy_from(&(-(bs.rotation * skew(&r))));
        a.view_mut((row, ob + 3), (3, 3)).fill_with_identity();
        a.view_mut((row, or), (3, 3)).copy_from(&(-rj));
        let rs_w = b.rotation * k.s;
        let w = bs.omega;
        let wrist_acc_bias = b.accel + zhat.cross(&rs_w) * b.alpha
            - Vector3::new(rs_w.x, rs_w.y, 0.0) * (b.omega * b.omega)
            + zhat.cross(&(rj * state.robots[att.robot].theta_dot)) * (2.0 * b.omega)
            + b.rotation * k.jdot_td;
        gamma
            .fixed_rows_mut::<3>(row)
            .copy_from(&(-(bs.rotation * w.cross(&w.cross(&r))) + wrist_acc_bias));
        residual
            .fixed_rows_mut::<3>(row)
            .copy_from(&(bs.point(&r) - k.wrist));
        residual_rate
            .fixed_rows_mut::<3>(row)
            .copy_from(&(bs.point_velocity(&r) - k.wrist_velocity));
        let bb = Matrix3::from_columns(&[b.rotation * Vector3::x(), b.rotation * Vector3::y(), zhat.cross(&rs_w)]);
        b_base.view_mut((row, 3 * att.robot), (3, 3)).copy_from(&bb);
        row += 3;
    }

    if let Some(h) = &models.hinge {
        let [i0, i1] = h.bodies;
        let (b0, b1) = (&state.bodies[i0], &state.bodies[i1]);
        let (o0, o1) = (6 * i0, 6 * i1);
        let (r0, r1) = (b0.rotation, b1.rotation);
        let (w0, w1) = (b0.omega, b1.omega);
        a.view_mut((row, o0), (3, 3)).copy_from(&(-(r0 * skew(&h.r[0]))));
        a.view_mut((row, o0 + 3), (3, 3)).fill_with_identity();
        a.view_mut((row, o1), (3, 3)).copy_from(&(r1 * skew(&h.r[1])));
        a.view_mut((row, o1 + 3), (3, 3))
            .copy_from(&(-Matrix3::identity()));
        gamma.fixed_rows_mut::<3>(row).copy_from(
            &(-(r0 * w0.cross(&w0.cross(&h.r[0]))) + r1 * w1.cross(&w1.cross(&h.r[1]))),
        );
        residual
            .fixed_rows_mut::<3>(row)
            .copy_from(&(b0.point(&h.r[0]) - b1.point(&h.r[1])));
        residual_rate
            .fixed_rows_mut::<3>(row)
            .copy_from(&(b0.point_velocity(&h.r[0]) - b1.point_velocity(&h.r[1])));
        row += 3;
        let ax = h.axis;
        let a1w = r1 * ax;
        for e in h.perp {
            let e0w = r0 * e;
            let row0 = e.cross(&(r0.transpose() * a1w));
            let row1 = ax.cross(&(r1.transpose() * e0w));
            for q in 0..3 {
                a[(row, o0 + q)] = row0[q];
                a[(row, o1 + q)] = row1[q];
            }
            let de0 = r0 * w0.cross(&e);
            let da1 = r1 * w1.cross(&ax);
            gamma[row] = -((r0 * w0.cross(&w0.cross(&e))).dot(&a1w)
                + 2.0 * de0.dot(&da1)
                + e0w.dot(&(r1 * w1.cross(&w1.cross(&ax)))));
            residual[row] = e0w.dot(&a1w);
            residual_rate[row] = row0.dot(&w0) + row1.dot(&w1);
            row += 1;
        }
        if h.damping > 0.0 {
            let axis_w = r0 * ax;
            let rel = (r1 * w1 - r0 * w0).dot(&axis_w);
            let t = axis_w * (h.damping * rel);
            let mut c1 = c.fixed_rows_mut::<3>(o1);
            c1 += r1.transpose() * t;
            let mut c0 = c.fixed_rows_mut::<3>(o0);
            c0 -= r0.transpose() * t;
        }
    }

    Ok(SystemMatrices {
        m,
        c,
        p,
        s,
        a,
        gamma,
        residual,
        residual_rate,
        s_base,
        b_base,
        n_payload: models.n_payload(),
        kin,
    })
}

/// Baumgarte stabilization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stabilization {
    pub zeta: f64,
    /// rad/s
    pub omega: f64,
}

impl Default for Stabilization {
    fn default() -> Self {
        Self {
            zeta: 1.0,
            omega: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccelSolution {
    pub qdd: DVector<f64>,
    pub lambda: DVector<f64>,
    /// The constraint rows were rank deficient and the solve regularized.
    pub singular: bool,
}

/// Factor `W = A M⁻¹ Aᵀ`, regularizing when rows are dependent.
struct Projection {
    m_inv: DMatrix<f64>,
    w_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    singular: bool,
}

impl Projection {
    fn new(mats: &SystemMatrices) -> Result<Self, MbError> {
        let m_inv = mats
            .m
            .clone()
            .cholesky()
            .ok_or(MbError::MassNotPositive)?
            .inverse();
        if mats.a.nrows() == 0 {
            return Ok(Self {
                m_inv,
                w_chol: None,
                singular: false,
            });
        }
        let w = &mats.a * &m_inv * mats.a.transpose();
        let scale = w.diagonal().amax().max(f64::MIN_POSITIVE);
        let mut singular = true;
        if let Some(ch) = w.clone().cholesky() {
            let d = ch.l_dirty().diagonal();
            let (lo, hi) = (d.min(), d.max());
            if lo * lo > 1e-12 * hi * hi {
                singular = false;
                return Ok(Self {
                    m_inv,
                    w_chol: Some(ch),
                    singular,
                });
            }
        }
        let n = w.nrows();
        let reg = w + DMatrix::identity(n, n) * (1e-9 * scale);
        let ch = reg.cholesky().ok_or(MbError::MassNotPositive)?;
        Ok(Self {
            m_inv,
            w_chol: Some(ch),
            singular,
        })
    }

    fn solve_w(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.w_chol {
            Some(ch) => ch.solve(rhs),
            None => DVector::zeros(0),
        }
    }

    fn solve_w_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.w_chol {
            Some(ch) => ch.solve(rhs),
            None => DMatrix::zeros(0, rhs.ncols()),
        }
    }
}

/// Solve the KKT system for `q̈` and `λ` under controls `u` and external
/// generalized forces `f_ext`.
pub fn constrained_accel(
    mats: &SystemMatrices,
    u: &DVector<f64>,
    f_ext: &DVector<f64>,
    stab: Option<Stabilization>,
) -> Result<AccelSolution, MbError> {
    let proj = Projection::new(mats)?;
    Ok(accel_with(&proj, mats, u, f_ext, stab))
}

fn accel_with(
    proj: &Projection,
    mats: &SystemMatrices,
    u: &DVector<f64>,
    f_ext: &DVector<f64>,
    stab: Option<Stabilization>,
) -> AccelSolution {
    let f = &mats.s * u + f_ext - &mats.c - &mats.p;
    if mats.a.nrows() == 0 {
        return AccelSolution {
            qdd: &proj.m_inv * f,
            lambda: DVector::zeros(0),
            singular: false,
        };
    }
    let mut rhs = mats.gamma.clone();
    if let Some(st) = stab {
        rhs -= &mats.residual_rate * (2.0 * st.zeta * st.omega) + &mats.residual * (st.omega * st.omega);
    }
    let m_inv_f = &proj.m_inv * &f;
    let lambda = proj.solve_w(&(rhs - &mats.a * &m_inv_f));
    let qdd = m_inv_f + &proj.m_inv * (mats.a.transpose() * &lambda);
    AccelSolution {
        qdd,
        lambda,
        singular: proj.singular,
    }
}

/// One velocity update: `q̇⁺ = q̇ + q̈ dt`, then the smallest correction in
/// the metric of `M` that sets the constraint rate to `−Ω f(q)`. The
/// correction removes the O(dt) drift Baumgarte feedback leaves behind
/// and its impulse is folded into `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityStep {
    pub qd: DVector<f64>,
    pub accel: AccelSolution,
    /// Largest constraint rate at the corrected velocity, before the
    /// configuration moves.
    pub rate_after: f64,
}

pub fn velocity_step(
    mats: &SystemMatrices,
    qd: &DVector<f64>,
    u: &DVector<f64>,
    f_ext: &DVector<f64>,
    dt: f64,
    stab: Stabilization,
) -> Result<VelocityStep, MbError> {
    let proj = Projection::new(mats)?;
    let mut sol = accel_with(&proj, mats, u, f_ext, Some(stab));
    let mut v = qd + &sol.qdd * dt;
    let mut rate_after = 0.0;
    if mats.a.nrows() > 0 && dt > 0.0 {
        // base contribution to the rate after the base has accelerated
        let rates = DVector::from_iterator(3 * mats.kin.len(), mats.kin.iter().flat_map(|k| k.base.twist_rate.iter().copied()));
        let base_rate = &mats.residual_rate - &mats.a * qd - &mats.b_base * rates * dt;
        let rate = &mats.a * &v + &base_rate;
        let mu = proj.solve_w(&(-&mats.residual * stab.omega - rate));
        v += &proj.m_inv * (mats.a.transpose() * &mu);
        sol.lambda += mu / dt;
        rate_after = (&mats.a * &v + base_rate + &mats.residual * stab.omega).amax();
    }
    Ok(VelocityStep {
        qd: v,
        accel: sol,
        rate_after,
    })
}

/// Map from controls to instantaneous accelerations. Columns are the
/// actuation channels (three per robot), then the base channels (three
/// per robot).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMap {
    pub f: DMatrix<f64>,
    pub n_payload: usize,
    pub singular: bool,
}

impl ControlMap {
    pub fn payload_rows(&self) -> DMatrix<f64> {
        self.f.rows(0, self.n_payload).into_owned()
    }

    pub fn robot_rows(&self) -> DMatrix<f64> {
        self.f
            .rows(self.n_payload, self.f.nrows() - self.n_payload)
            .into_owned()
    }
}

pub fn control_map(mats: &SystemMatrices) -> Result<ControlMap, MbError> {
    let proj = Projection::new(mats)?;
    let n = mats.m.nrows();
    let p_mat = if mats.a.nrows() == 0 {
        proj.m_inv.clone()
    } else {
        let am = &mats.a * &proj.m_inv;
        &proj.m_inv - am.transpose() * proj.solve_w_mat(&am)
    };
    let f_act = &p_mat * &mats.s;
    let mut f_base = &p_mat * &mats.s_base;
    if mats.a.nrows() > 0 {
        let lam = proj.solve_w_mat(&mats.b_base);
        f_base += &proj.m_inv * mats.a.transpose() * lam;
    }
    let mut f = DMatrix::zeros(n, f_act.ncols() + f_base.ncols());
    f.columns_mut(0, f_act.ncols()).copy_from(&f_act);
    f.columns_mut(f_act.ncols(), f_base.ncols()).copy_from(&f_base);
    Ok(ControlMap {
        f,
        n_payload: mats.n_payload,
        singular: proj.singular,
    })
}

/// Numerical rank with a threshold relative to the largest singular value.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel_tol * smax).count()
}

pub const RANK_TOL: f64 = 1e-8;

/// Rank of the payload rows of the control map, evaluated with the SEA
/// torques as the joint-level controls.
pub fn manipulability(state: &SystemState, models: &Models, tol: f64) -> Result<usize, MbError> {
    let view = models.joint_torque_view();
    let mats = assemble(state, &view)?;
    Ok(numerical_rank(&control_map(&mats)?.payload_rows(), tol))
}

/// The Delta wrist translates, so its position is integrated linearly
/// and the joints recovered by inverse kinematics. This keeps the grasp
/// constraints free of the first-order drift a joint-space update leaves
/// through the curvature of the forward kinematics.
fn reconstruct_theta(
    theta: &Vector3<f64>,
    theta_dot: &Vector3<f64>,
    dt: f64,
    p: &delta::DeltaParams,
) -> Vector3<f64> {
    let euler = theta + theta_dot * dt;
    let (Ok(x), Ok(j)) = (delta::fk(theta, p), delta::jacobian(theta, p)) else {
        return euler;
    };
    match delta::ik_branch(&(x + j * theta_dot * dt), p) {
        Ok(t) if (t - euler).amax() < 1e-3 => t,
        _ => euler,
    }
}

/// Advance positions by one step with body-frame rotation updates.
pub fn integrate_positions(state: &mut SystemState, models: &Models, qd: &DVector<f64>, dt: f64) {
    for (b, s) in state.bodies.iter_mut().enumerate() {
        s.omega = qd.fixed_rows::<3>(6 * b).into_owned();
        s.velocity = qd.fixed_rows::<3>(6 * b + 3).into_owned();
        s.rotation = orthonormalize(&(s.rotation * rotation_from_vector(&(s.omega * dt))));
        s.position += s.velocity * dt;
    }
    let sea = models.actuation == Actuation::SeriesElastic;
    for (i, (r, rm)) in state.robots.iter_mut().zip(&models.robots).enumerate() {
        let o = models.robot_offset(i);
        r.theta_dot = qd.fixed_rows::<3>(o).into_owned();
        r.theta = reconstruct_theta(&r.theta, &r.theta_dot, dt, &rm.manip.delta);
        for q in 0..3 {
            if sea {
                r.sea[q].beta_dot = qd[o + 3 + q];
                r.sea[q].beta += r.sea[q].beta_dot * dt;
            }
            r.sea[q].theta = r.theta[q];
        }
        r.base = mobase::step_base_euler(&r.base, &r.v_com, dt, &rm.base, &rm.slip);
    }
}

/// Static equilibrium of the configuration: grasp forces closest to equal
/// vertical shares that hold the payload, and the joint torques that
/// produce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Statics {
    pub lambda: DVector<f64>,
    pub joint_torques: Vec<Vector3<f64>>,
}

pub fn static_equilibrium(state: &SystemState, models: &Models) -> Result<Statics, MbError> {
    let view = models.joint_torque_view();
    let mats = assemble(state, &view)?;
    let np = view.n_payload();
    let nc = view.n_constraints();
    let n_att = view.payload.attachments.len();
    let mut lambda0 = DVector::zeros(nc);
    if n_att > 0 {
        let share = view.payload.total_mass() * view.g / n_att as f64;
        for k in 0..n_att {
            lambda0[3 * k + 2] = share;
        }
    }
    let lambda = if np > 0 && nc > 0 {
        // payload rows: p_p = A_pᵀ λ
        let c = mats.a.columns(0, np).transpose();
        let d = mats.p.rows(0, np).into_owned();
        let cct = &c * c.transpose();
        let svd = cct.svd(true, true);
        let tol = 1e-12 * svd.singular_values.max().max(1.0);
        let mu = svd
            .solve(&(&d - &c * &lambda0), tol)
            .map_err(|e| MbError::Config(e.to_string()))?;
        let lambda = &lambda0 + c.transpose() * mu;
        let resid = (&c * &lambda - &d).amax();
        if resid > 1e-8 * d.amax().max(1.0) {
            return Err(MbError::NotStatic { residual: resid });
        }
        lambda
    } else if np > 0 {
        return Err(MbError::NotStatic {
            residual: mats.p.rows(0, np).amax(),
        });
    } else {
        lambda0
    };
    let mut joint_torques = Vec::with_capacity(view.robots.len());
    for i in 0..view.robots.len() {
        let o = view.robot_offset(i);
        let mut tau = mats.p.fixed_rows::<3>(o).into_owned();
        if nc > 0 {
            tau -= mats.a.view((0, o), (nc, 3)).transpose() * &lambda;
        }
        joint_torques.push(tau);
    }
    Ok(Statics { lambda, joint_torques })
}
