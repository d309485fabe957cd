//! Team layouts shared by the multibody tests.

use nalgebra::Vector3;

use super::*;
use crate::manip_ctrl::{CtrlGains, FloatMode};

pub const WRIST_HEIGHT: f64 = 0.72;

pub fn ring(n: usize, radius: f64, phase: f64) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|i| {
            let a = phase + i as f64 * std::f64::consts::TAU / n as f64;
            Vector3::new(radius * a.cos(), radius * a.sin(), 0.0)
        })
        .collect()
}

/// Rigid box with one robot under each point, bases directly below.
pub fn rigid_team(mass: f64, points: &[Vector3<f64>], actuation: Actuation) -> (Models, WorldInit, Vec<Vector3<f64>>) {
    let mut payload = PayloadModel::rigid_box(mass, Vector3::new(1.2, 1.2, 0.05));
    for (i, p) in points.iter().enumerate() {
        payload.attachments.push(Attachment {
            robot: i,
            body: 0,
            point: *p,
        });
    }
    let models = Models::new(payload, vec![RobotModel::default(); points.len()], actuation).unwrap();
    let init = WorldInit {
        payload_position: Vector3::new(0.0, 0.0, WRIST_HEIGHT),
        ..Default::default()
    };
    let bases = points.iter().map(|p| Vector3::new(p.x, p.y, 0.0)).collect();
    (models, init, bases)
}

/// Two 6 kg panels joined by a hinge about y at x = 0; robots 0 and 1
/// hold the left panel, robot 2 the right. The hinge runs along the top
/// surface, above the plane of the grasps.
pub fn hinged_team(actuation: Actuation) -> (Models, WorldInit, Vec<Vector3<f64>>) {
    hinged_team_with(actuation, 0.02)
}

pub fn hinged_team_with(actuation: Actuation, pivot_height: f64) -> (Models, WorldInit, Vec<Vector3<f64>>) {
    let size = Vector3::new(0.6, 0.8, 0.04);
    let payload = PayloadModel {
        kind: PayloadKind::Hinged,
        bodies: vec![
            BodySpec::cuboid(6.0, size, Vector3::new(-0.3, 0.0, 0.0)),
            BodySpec::cuboid(6.0, size, Vector3::new(0.3, 0.0, 0.0)),
        ],
        hinge: Some(HingeSpec {
            axis: Vector3::y(),
            pivot: Vector3::new(0.0, 0.0, pivot_height),
            bodies: [0, 1],
            damping: 0.0,
        }),
        attachments: vec![
            Attachment {
                robot: 0,
                body: 0,
                point: Vector3::new(-0.4, 0.25, 0.0),
            },
            Attachment {
                robot: 1,
                body: 0,
                point: Vector3::new(-0.4, -0.25, 0.0),
            },
            Attachment {
                robot: 2,
                body: 1,
                point: Vector3::new(0.4, 0.0, 0.0),
            },
        ],
        grips: vec![],
    };
    let bases = payload
        .attachments
        .iter()
        .map(|a| Vector3::new(a.point.x, a.point.y, 0.0))
        .collect();
    let models = Models::new(payload, vec![RobotModel::default(); 3], actuation).unwrap();
    let init = WorldInit {
        payload_position: Vector3::new(0.0, 0.0, WRIST_HEIGHT),
        ..Default::default()
    };
    (models, init, bases)
}

pub fn setups(bases: &[Vector3<f64>], mode: FloatMode, recenter: bool) -> Vec<RobotSetup> {
    bases
        .iter()
        .map(|b| RobotSetup {
            base_pose: *b,
            mode,
            gains: CtrlGains::default(),
            recenter,
        })
        .collect()
}
