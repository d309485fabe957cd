//! Rigid-body transforms, twists, wrenches and the adjoint map.
//!
//! Six-vectors use the moment-above-force layout throughout: a twist is
//! `[ω; v]` and a wrench is `[m; f]`. The adjoint of `T = (R, p)` is
//!
//! ```text
//! [Ad_T] = [ R      0 ]
//!          [ [p]×R  R ]
//! ```
//!
//! Stiffness matrices map a differential displacement in exponential
//! coordinates `δX = [δφ; δp]` to a differential wrench `δF = K δX`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("frame mismatch: cannot combine a wrench in {left} with one in {right}")]
    FrameMismatch { left: Frame, right: Frame },
    #[error("no grasps")]
    NoGrasps,
    #[error("stiffness matrix is not symmetric positive-semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },
}

/// Skew-symmetric cross-product matrix, `skew(a) * b == a.cross(&b)`.
#[inline]
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Rotation by `|w|` radians about `w / |w|` (Rodrigues).
pub fn rotation_from_vector(w: &Vector3<f64>) -> Matrix3<f64> {
    let angle = w.norm();
    let k = skew(w);
    if angle < 1e-8 {
        // second-order series keeps the update accurate for tiny steps
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Matrix3::identity() + a * k + b * k * k
}

/// Elementary rotations about the coordinate axes.
pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Gram-Schmidt re-orthonormalization of the columns of `r`, keeping the
/// first column direction. The result has determinant +1.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let x = r.column(0).normalize();
    let y_raw = r.column(1) - x * x.dot(&r.column(1));
    let y = y_raw.normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

/// Rigid-body configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(p: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), p)
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Re-orthonormalize the rotation in place.
    pub fn renormalize(&mut self) {
        self.rotation = orthonormalize(&self.rotation);
    }

    /// Largest deviation of `RᵀR` from identity plus `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        e + (self.rotation.determinant() - 1.0).abs()
    }

    /// 6×6 adjoint map in moment-above-force layout.
    pub fn adjoint(&self) -> Matrix6<f64> {
        adjoint(self)
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

/// `[Ad_T] = [[R, 0], [[p]×R, R]]`.
pub fn adjoint(t: &Pose) -> Matrix6<f64> {
    let r = t.rotation;
    let pr = skew(&t.translation) * r;
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&pr);
    ad
}

/// Named coordinate frame a wrench or twist is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    World,
    /// Body frame of payload body `i`.
    Body(usize),
    /// Base-fixed manipulator frame of robot `i`.
    Manipulator(usize),
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frame::World => write!(f, "world"),
            Frame::Body(i) => write!(f, "body[{i}]"),
            Frame::Manipulator(i) => write!(f, "manipulator[{i}]"),
        }
    }
}

/// Moment-force pair expressed in a named frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub moment: Vector3<f64>,
    pub force: Vector3<f64>,
    pub frame: Frame,
}

impl Wrench {
    pub fn new(moment: Vector3<f64>, force: Vector3<f64>, frame: Frame) -> Self {
        Self {
            moment,
            force,
            frame,
        }
    }

    pub fn zero(frame: Frame) -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), frame)
    }

    pub fn from_force(force: Vector3<f64>, frame: Frame) -> Self {
        Self::new(Vector3::zeros(), force, frame)
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.moment.x,
            self.moment.y,
            self.moment.z,
            self.force.x,
            self.force.y,
            self.force.z,
        )
    }

    /// Sum of two wrenches; both must be expressed in the same frame.
    pub fn checked_add(&self, other: &Wrench) -> Result<Wrench, SpatialError> {
        if self.frame != other.frame {
            return Err(SpatialError::FrameMismatch {
                left: self.frame,
                right: other.frame,
            });
        }
        Ok(Wrench::new(
            self.moment + other.moment,
            self.force + other.force,
            self.frame,
        ))
    }

    pub fn scaled(&self, s: f64) -> Wrench {
        Wrench::new(self.moment * s, self.force * s, self.frame)
    }

    pub fn is_finite(&self) -> bool {
        self.moment.iter().chain(self.force.iter()).all(|v| v.is_finite())
    }
}

/// Angular-linear velocity pair, `[ω; v]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

impl Twist {
    pub fn new(angular: Vector3<f64>, linear: Vector3<f64>) -> Self {
        Self { angular, linear }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.angular.x,
            self.angular.y,
            self.angular.z,
            self.linear.x,
            self.linear.y,
            self.linear.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }
}

/// 6×6 symmetric positive-semidefinite stiffness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiffnessMatrix(Matrix6<f64>);

impl StiffnessMatrix {
    /// Relative eigenvalue floor accepted as "non-negative".
    pub const PSD_TOL: f64 = 1e-8;

    pub fn new(k: Matrix6<f64>) -> Result<Self, SpatialError> {
        let sym = 0.5 * (k + k.transpose());
        let eig = SymmetricEigen::new(sym).eigenvalues;
        let max = eig.amax();
        let min = eig.min();
        if min < -Self::PSD_TOL * max.max(f64::MIN_POSITIVE) {
            return Err(SpatialError::NotPsd { min_eig: min });
        }
        Ok(Self(sym))
    }

    /// Pure translational stiffness `K_lin` acting at the frame origin.
    pub fn translational(k_lin: &Matrix3<f64>) -> Result<Self, SpatialError> {
        let mut k = Matrix6::zeros();
        k.fixed_view_mut::<3, 3>(3, 3).copy_from(k_lin);
        Self::new(k)
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn eigenvalues(&self) -> Vector6<f64> {
        SymmetricEigen::new(self.0).eigenvalues
    }

    /// Elastic energy `½ δXᵀ K δX`.
    pub fn energy(&self, dx: &Vector6<f64>) -> f64 {
        0.5 * dx.dot(&(self.0 * dx))
    }
}

/// `[Ad_T]ᵀ K [Ad_T]`: re-express a stiffness defined in frame `i` in the
/// frame whose configuration relative to `i` is `t_ip`.
pub fn transform_stiffness(k_i: &StiffnessMatrix, t_ip: &Pose) -> StiffnessMatrix {
    let ad = adjoint(t_ip);
    let k = ad.transpose() * k_i.matrix() * ad;
    // congruence preserves PSD-ness; only symmetrize against rounding
    StiffnessMatrix(0.5 * (k + k.transpose()))
}

/// Total payload stiffness from a set of grasps, each given as the grasp
/// stiffness and the payload pose relative to that end-effector frame.
pub fn aggregate_stiffness(
    grasps: &[(StiffnessMatrix, Pose)],
) -> Result<StiffnessMatrix, SpatialError> {
    if grasps.is_empty() {
        return Err(SpatialError::NoGrasps);
    }
    let k = grasps
        .iter()
        .map(|(k, t)| *transform_stiffness(k, t).matrix())
        .fold(Matrix6::zeros(), |acc, k| acc + k);
    Ok(StiffnessMatrix(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_pose(seed: u64) -> Pose {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        let p = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        Pose::new(rotation_from_vector(&w), p)
    }

    #[test]
    fn adjoint_identity_and_pure_rotation() {
        assert_eq!(adjoint(&Pose::identity()), Matrix6::identity());
        let r = rot_z(0.3) * rot_x(-1.1);
        let ad = adjoint(&Pose::from_rotation(r));
        assert_eq!(ad.fixed_view::<3, 3>(0, 0).into_owned(), r);
        assert_eq!(ad.fixed_view::<3, 3>(3, 3).into_owned(), r);
        assert_eq!(ad.fixed_view::<3, 3>(3, 0).amax(), 0.0);
        assert_eq!(ad.fixed_view::<3, 3>(0, 3).amax(), 0.0);
    }

    #[test]
    fn adjoint_translation_block_is_skew() {
        let ad = adjoint(&Pose::from_translation(Vector3::x()));
        assert_eq!(
            ad.fixed_view::<3, 3>(3, 0).into_owned(),
            skew(&Vector3::x())
        );
    }

    #[test]
    fn adjoint_is_a_homomorphism() {
        for s in 0..200 {
            let a = random_pose(2 * s);
            let b = random_pose(2 * s + 1);
            let lhs = adjoint(&(a * b));
            let rhs = adjoint(&a) * adjoint(&b);
            assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn adjoint_of_inverse_is_inverse() {
        for s in 0..1000 {
            let t = random_pose(s);
            let lhs = adjoint(&t.inverse());
            let rhs = adjoint(&t).try_inverse().unwrap();
            assert!((lhs - rhs).amax() < 1e-9, "pose {s}");
        }
    }

    #[test]
    fn adjoint_maps_twists_between_frames() {
        // point velocity of the moved frame origin matches rigid-body kinematics
        let t = random_pose(7);
        let v_b = Twist::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0, 0.0, -0.5));
        let v_s = Twist::from_vector(&(adjoint(&t) * v_b.to_vector()));
        assert_relative_eq!(v_s.angular, t.rotation * v_b.angular, epsilon = 1e-12);
        let expected = t.rotation * v_b.linear + t.translation.cross(&(t.rotation * v_b.angular));
        assert_relative_eq!(v_s.linear, expected, epsilon = 1e-12);
    }

    #[test]
    fn wrench_frames_must_match() {
        let a = Wrench::from_force(Vector3::x(), Frame::World);
        let b = Wrench::from_force(Vector3::y(), Frame::Body(0));
        assert!(matches!(
            a.checked_add(&b),
            Err(SpatialError::FrameMismatch { .. })
        ));
        let c = a.checked_add(&a).unwrap();
        assert_eq!(c.force, Vector3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn transform_stiffness_identity_is_noop() {
        let k = StiffnessMatrix::translational(&Matrix3::from_diagonal(&Vector3::new(
            1400.0, 1400.0, 2000.0,
        )))
        .unwrap();
        let out = transform_stiffness(&k, &Pose::identity());
        assert_eq!(out, k);
    }

    #[test]
    fn offset_linear_spring_gives_rotational_stiffness() {
        let kk = 1500.0;
        let d = 0.4;
        let k = StiffnessMatrix::translational(&(Matrix3::identity() * kk)).unwrap();
        let out = transform_stiffness(&k, &Pose::from_translation(Vector3::new(d, 0.0, 0.0)));
        let m = out.matrix();
        assert_relative_eq!(m[(0, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(m[(1, 1)], kk * d * d, epsilon = 1e-9);
        assert_relative_eq!(m[(2, 2)], kk * d * d, epsilon = 1e-9);
    }

    #[test]
    fn offset_spring_matches_energy_hessian() {
        // Payload origin sits at d in the end-effector frame. A small payload
        // displacement (δφ, δp) moves the end-effector origin, which sits at
        // -d from the payload origin, by δp + δφ × (-d). The spring energy is
        // ½ k |that|²; its Hessian is taken by central differences.
        let kk = 900.0;
        let d = Vector3::new(0.4, -0.1, 0.2);
        let k_i = StiffnessMatrix::translational(&(Matrix3::identity() * kk)).unwrap();
        let analytic = *transform_stiffness(&k_i, &Pose::from_translation(d)).matrix();
        let energy = |dx: &Vector6<f64>| {
            let w = Vector3::new(dx[0], dx[1], dx[2]);
            let v = Vector3::new(dx[3], dx[4], dx[5]);
            let dp = v + w.cross(&(-d));
            0.5 * kk * dp.norm_squared()
        };
        let h = 1e-4;
        let mut hess = Matrix6::zeros();
        for a in 0..6 {
            for b in 0..6 {
                let e = |sa: f64, sb: f64| {
                    let mut x = Vector6::zeros();
                    x[a] += sa * h;
                    x[b] += sb * h;
                    energy(&x)
                };
                hess[(a, b)] = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0))
                    / (4.0 * h * h);
            }
        }
        assert!((hess - analytic).amax() < 1e-6 * analytic.amax());
    }

    #[test]
    fn aggregate_empty_is_error() {
        assert_eq!(aggregate_stiffness(&[]), Err(SpatialError::NoGrasps));
    }

    #[test]
    fn symmetric_pair_cancels_coupling() {
        let k = StiffnessMatrix::translational(&(Matrix3::identity() * 1000.0)).unwrap();
        let d = Vector3::new(0.5, 0.0, 0.0);
        let total = aggregate_stiffness(&[
            (k, Pose::from_translation(d)),
            (k, Pose::from_translation(-d)),
        ])
        .unwrap();
        let coupling = total.matrix().fixed_view::<3, 3>(3, 0).into_owned();
        assert!(coupling.amax() < 1e-12);
    }

    #[test]
    fn not_psd_rejected() {
        let mut m = Matrix6::identity();
        m[(2, 2)] = -1.0;
        assert!(matches!(
            StiffnessMatrix::new(m),
            Err(SpatialError::NotPsd { .. })
        ));
    }

    #[test]
    fn orthonormalize_repairs_drift() {
        let mut p = Pose::from_rotation(rot_x(0.4) * rot_y(1.2));
        p.rotation[(0, 1)] += 1e-6;
        assert!(p.orthonormality_error() > 1e-7);
        p.renormalize();
        assert!(p.orthonormality_error() < 1e-12);
    }

    #[test]
    fn rodrigues_matches_axis_rotations() {
        assert_relative_eq!(rotation_from_vector(&(Vector3::z() * 0.7)), rot_z(0.7), epsilon = 1e-14);
        assert_relative_eq!(rotation_from_vector(&(Vector3::x() * -2.0)), rot_x(-2.0), epsilon = 1e-14);
    }
}
