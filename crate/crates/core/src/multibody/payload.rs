//! Payload description. Every point and axis is given in the payload
//! frame at zero hinge angle; each body frame has the same orientation as
//! the payload frame in that assembly pose, with its origin at the body COM.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::MbError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadKind {
    Rigid,
    Hinged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    pub mass: f64,
    /// Inertia about the COM (kg·m²).
    pub inertia: Matrix3<f64>,
    pub com: Vector3<f64>,
}

impl BodySpec {
    /// Uniform box with its COM at `com`.
    pub fn cuboid(mass: f64, size: Vector3<f64>, com: Vector3<f64>) -> Self {
        let (a, b, c) = (size.x * size.x, size.y * size.y, size.z * size.z);
        Self {
            mass,
            inertia: Matrix3::from_diagonal(&Vector3::new(b + c, a + c, a + b)) * (mass / 12.0),
            com,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HingeSpec {
    pub axis: Vector3<f64>,
    pub pivot: Vector3<f64>,
    pub bodies: [usize; 2],
    /// Viscous damping about the axis (N·m·s/rad).
    #[serde(default)]
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attachment {
    pub robot: usize,
    pub body: usize,
    pub point: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grip {
    pub name: String,
    pub body: usize,
    pub point: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadModel {
    pub kind: PayloadKind,
    pub bodies: Vec<BodySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hinge: Option<HingeSpec>,
    pub attachments: Vec<Attachment>,
    #[serde(default)]
    pub grips: Vec<Grip>,
}

impl PayloadModel {
    /// Single rigid cuboid with its COM at the payload origin.
    pub fn rigid_box(mass: f64, size: Vector3<f64>) -> Self {
        Self {
            kind: PayloadKind::Rigid,
            bodies: vec![BodySpec::cuboid(mass, size, Vector3::zeros())],
            hinge: None,
            attachments: vec![],
            grips: vec![],
        }
    }

    pub fn empty() -> Self {
        Self {
            kind: PayloadKind::Rigid,
            bodies: vec![],
            hinge: None,
            attachments: vec![],
            grips: vec![],
        }
    }

    pub fn validate(&self, n_robots: usize) -> Result<(), MbError> {
        let bad = |m: String| Err(MbError::Config(m));
        for (i, b) in self.bodies.iter().enumerate() {
            if !(b.mass > 0.0) {
                return bad(format!("payload.bodies[{i}].mass must be positive"));
            }
            let sym = (b.inertia - b.inertia.transpose()).amax() <= 1e-12 * b.inertia.amax().max(1.0);
            if !sym || b.inertia.symmetric_eigen().eigenvalues.min() <= 0.0 {
                return bad(format!("payload.bodies[{i}].inertia must be symmetric positive-definite"));
            }
        }
        match (self.kind, &self.hinge) {
            (PayloadKind::Rigid, None) if self.bodies.len() <= 1 => {}
            (PayloadKind::Rigid, _) => return bad("rigid payload takes one body and no hinge".into()),
            (PayloadKind::Hinged, Some(h)) => {
                if self.bodies.len() != 2 {
                    return bad("hinged payload takes exactly two bodies".into());
                }
                if h.bodies[0] == h.bodies[1] || h.bodies.iter().any(|b| *b > 1) {
                    return bad("payload.hinge.bodies must name the two distinct bodies".into());
                }
                if (h.axis.norm() - 1.0).abs() > 1e-9 {
                    return bad("payload.hinge.axis must be a unit vector".into());
                }
                if h.damping < 0.0 {
                    return bad("payload.hinge.damping must be non-negative".into());
                }
            }
            (PayloadKind::Hinged, None) => return bad("hinged payload needs a hinge".into()),
        }
        let mut seen = vec![false; n_robots];
        for (i, a) in self.attachments.iter().enumerate() {
            if a.robot >= n_robots {
                return bad(format!("payload.attachments[{i}] references detached robot {}", a.robot));
            }
            if a.body >= self.bodies.len() {
                return bad(format!("payload.attachments[{i}].body out of range"));
            }
            if seen[a.robot] {
                return bad(format!("robot {} attached twice", a.robot));
            }
            seen[a.robot] = true;
        }
        for (i, g) in self.grips.iter().enumerate() {
            if g.body >= self.bodies.len() {
                return bad(format!("payload.grips[{i}].body out of range"));
            }
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }

    /// Payload degrees of freedom, 6 + d (0 when there is no payload).
    pub fn dof(&self) -> usize {
        match (self.bodies.len(), self.kind) {
            (0, _) => 0,
            (_, PayloadKind::Rigid) => 6,
            (_, PayloadKind::Hinged) => 7,
        }
    }

    /// Attachment point relative to its body COM, body frame.
    pub fn attachment_offset(&self, a: &Attachment) -> Vector3<f64> {
        a.point - self.bodies[a.body].com
    }

    pub fn attachment_for(&self, robot: usize) -> Option<&Attachment> {
        self.attachments.iter().find(|a| a.robot == robot)
    }

    pub fn grip(&self, name: &str) -> Option<&Grip> {
        self.grips.iter().find(|g| g.name == name)
    }
}

/// Hinge geometry in each body's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HingeFrames {
    pub bodies: [usize; 2],
    /// Pivot relative to each body COM.
    pub r: [Vector3<f64>; 2],
    pub axis: Vector3<f64>,
    /// Two unit vectors spanning the plane normal to the axis.
    pub perp: [Vector3<f64>; 2],
    pub damping: f64,
}

impl HingeFrames {
    pub fn new(h: &HingeSpec, bodies: &[BodySpec]) -> Self {
        let a = h.axis.normalize();
        let seed = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = (seed - a * a.dot(&seed)).normalize();
        let e2 = a.cross(&e1);
        Self {
            bodies: h.bodies,
            r: [h.pivot - bodies[h.bodies[0]].com, h.pivot - bodies[h.bodies[1]].com],
            axis: a,
            perp: [e1, e2],
            damping: h.damping,
        }
    }

    /// Rotation of the second body relative to the first about the axis.
    pub fn angle(&self, r0: &Matrix3<f64>, r1: &Matrix3<f64>) -> f64 {
        let a = r0 * self.axis;
        let u = r0 * self.perp[0];
        let v = r1 * self.perp[0];
        a.dot(&u.cross(&v)).atan2(u.dot(&v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::rotation_from_vector;
    use approx::assert_relative_eq;

    #[test]
    fn cuboid_inertia() {
        let b = BodySpec::cuboid(12.0, Vector3::new(1.0, 2.0, 3.0), Vector3::zeros());
        assert_relative_eq!(b.inertia, Matrix3::from_diagonal(&Vector3::new(13.0, 10.0, 5.0)));
    }

    #[test]
    fn validation_catches_bad_models() {
        let mut p = PayloadModel::rigid_box(5.0, Vector3::repeat(0.5));
        p.attachments.push(Attachment {
            robot: 3,
            body: 0,
            point: Vector3::zeros(),
        });
        assert!(matches!(p.validate(2), Err(MbError::Config(m)) if m.contains("detached robot")));
        p.attachments[0].robot = 0;
        assert!(p.validate(2).is_ok());
        p.bodies[0].mass = 0.0;
        assert!(p.validate(2).is_err());
    }

    #[test]
    fn dof_counts() {
        assert_eq!(PayloadModel::empty().dof(), 0);
        assert_eq!(PayloadModel::rigid_box(1.0, Vector3::repeat(0.1)).dof(), 6);
    }

    #[test]
    fn hinge_angle_readout() {
        let h = HingeSpec {
            axis: Vector3::y(),
            pivot: Vector3::zeros(),
            bodies: [0, 1],
            damping: 0.0,
        };
        let b = BodySpec::cuboid(1.0, Vector3::repeat(0.1), Vector3::zeros());
        let f = HingeFrames::new(&h, &[b, b]);
        let base = rotation_from_vector(&Vector3::new(0.3, -0.2, 1.0));
        for ang in [-2.0, -0.4, 0.0, 0.7, 3.0] {
            let r1 = base * rotation_from_vector(&(Vector3::y() * ang));
            assert_relative_eq!(f.angle(&base, &r1), ang, epsilon = 1e-12);
        }
    }
}
