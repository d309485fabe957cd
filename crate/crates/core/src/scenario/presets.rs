//! Ready-made scenarios.

use nalgebra::Vector3;

use super::config::{HumanConfig, HumanTarget, OutputConfig, RobotConfig, SafetyLimits, ScenarioConfig};
use super::profile::{Knot, WrenchProfile};
use crate::manip_ctrl::{CtrlGains, FloatMode};
use crate::multibody::{
    Actuation, Attachment, BodySpec, Grip, HandImpedance, HingeSpec, PayloadKind, PayloadModel, Rates, RobotModel,
    Stabilization, WorldInit,
};

/// Height of the payload frame above the floor at the nominal grasp.
pub const CARRY_HEIGHT: f64 = 0.72;

/// Points evenly spaced on a circle in the payload plane.
pub fn ring(n: usize, radius: f64, phase: f64) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|i| {
            let a = phase + i as f64 * std::f64::consts::TAU / n as f64;
            Vector3::new(radius * a.cos(), radius * a.sin(), 0.0)
        })
        .collect()
}

fn robots_under(points: &[Vector3<f64>], mode: FloatMode, model: RobotModel) -> Vec<RobotConfig> {
    points
        .iter()
        .map(|p| RobotConfig {
            base_pose: Vector3::new(p.x, p.y, 0.0),
            mode,
            recenter: true,
            gains: CtrlGains::default(),
            model,
        })
        .collect()
}

fn base(name: &str, duration: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        duration,
        seed: 0,
        actuation: Actuation::SeriesElastic,
        rates: Rates::default(),
        stabilization: Stabilization::default(),
        output: OutputConfig::default(),
        safety: SafetyLimits::default(),
        init: WorldInit {
            payload_position: Vector3::new(0.0, 0.0, CARRY_HEIGHT),
            ..Default::default()
        },
        payload: PayloadModel::empty(),
        robots: vec![],
        humans: vec![],
    }
}

/// 1.2 m square board of 15.6 kg carried by robots under `points`.
pub fn rigid_board(name: &str, points: &[Vector3<f64>], model: RobotModel) -> ScenarioConfig {
    let mut cfg = base(name, 20.0);
    let mut payload = PayloadModel::rigid_box(15.6, Vector3::new(1.2, 1.2, 0.05));
    payload.attachments = (0..points.len())
        .map(|i| Attachment {
            robot: i,
            body: 0,
            point: points[i],
        })
        .collect();
    payload.grips.push(Grip {
        name: "edge".into(),
        body: 0,
        point: Vector3::new(0.6, 0.0, 0.0),
    });
    payload.grips.push(Grip {
        name: "center".into(),
        body: 0,
        point: Vector3::zeros(),
    });
    cfg.payload = payload;
    cfg.robots = robots_under(points, FloatMode::Float, model);
    cfg
}

/// Two 6 kg panels hinged about y along the top surface; robots 0 and 1
/// hold the left panel on either side of its COM, robot 2 the right one at
/// its COM. A free hinge carries no moment, so a panel held off its COM
/// would need a squeeze through the short hinge lever; the staggered left
/// grasps keep the fold from being a free mode.
pub fn hinged_panels(name: &str, model: RobotModel) -> ScenarioConfig {
    let mut cfg = base(name, 20.0);
    let size = Vector3::new(0.6, 0.8, 0.04);
    let attachments = vec![
        Attachment {
            robot: 0,
            body: 0,
            point: Vector3::new(-0.45, 0.25, 0.0),
        },
        Attachment {
            robot: 1,
            body: 0,
            point: Vector3::new(-0.15, -0.25, 0.0),
        },
        Attachment {
            robot: 2,
            body: 1,
            point: Vector3::new(0.3, 0.0, 0.0),
        },
    ];
    let points: Vec<_> = attachments.iter().map(|a| a.point).collect();
    cfg.payload = PayloadModel {
        kind: PayloadKind::Hinged,
        bodies: vec![
            BodySpec::cuboid(6.0, size, Vector3::new(-0.3, 0.0, 0.0)),
            BodySpec::cuboid(6.0, size, Vector3::new(0.3, 0.0, 0.0)),
        ],
        hinge: Some(HingeSpec {
            axis: Vector3::y(),
            pivot: Vector3::new(0.0, 0.0, 0.02),
            bodies: [0, 1],
            damping: 0.0,
        }),
        attachments,
        grips: vec![
            Grip {
                name: "left".into(),
                body: 0,
                point: Vector3::new(-0.55, 0.0, 0.0),
            },
            Grip {
                name: "right".into(),
                body: 1,
                point: Vector3::new(0.55, 0.0, 0.0),
            },
        ],
    };
    cfg.robots = robots_under(&points, FloatMode::ApproxFloat, model);
    cfg
}

/// Three robots float a board; one person pulls it out along x, stops
/// it, pushes it back and stops it again.
pub fn pvc_float() -> ScenarioConfig {
    let mut cfg = rigid_board("pvc_float", &ring(3, 0.5, 0.3), RobotModel::default());
    let knot = |t: f64, fx: f64, fy: f64| Knot {
        t,
        force: Vector3::new(fx, fy, 0.0),
        moment: Vector3::zeros(),
    };
    cfg.humans.push(HumanConfig {
        name: "guide".into(),
        target: HumanTarget::Grip { name: "edge".into() },
        profile: WrenchProfile::PiecewiseLinear {
            knots: vec![
                knot(1.0, 0.0, 0.0),
                knot(1.2, 5.0, 0.0),
                knot(2.0, 5.0, 0.0),
                knot(2.2, 0.0, 0.0),
                knot(5.0, 0.0, 0.0),
                knot(5.2, -5.0, 0.0),
                knot(6.0, -5.0, 0.0),
                knot(6.2, 0.0, 0.0),
                knot(9.0, 0.0, 0.0),
                knot(9.2, -5.0, 0.0),
                knot(10.0, -5.0, 0.0),
                knot(10.2, 0.0, 0.0),
                knot(13.0, 0.0, 0.0),
                knot(13.2, 5.0, 0.0),
                knot(14.0, 5.0, 0.0),
                knot(14.2, 0.0, 0.0),
            ],
        },
        impedance: None,
        noise_std: 0.0,
    });
    cfg
}

/// Two people hold opposite ends of a hinged load and fold it gently in
/// antiphase while the team holds the configured height. In either float
/// mode the fold costs no work, so without the hands holding their ends
/// the sway would ratchet it shut over a few dozen cycles.
pub fn hinged_two_humans() -> ScenarioConfig {
    let mut cfg = hinged_panels("hinged_two_humans", RobotModel::default());
    let sway = |sign: f64| WrenchProfile::SineSweep {
        amplitude: Vector3::new(0.0, 0.0, 3.0 * sign),
        moment_amplitude: Vector3::zeros(),
        f0: 0.5,
        f1: 0.5,
        start: 1.0,
        length: 16.0,
    };
    for (name, sign) in [("left", 1.0), ("right", -1.0)] {
        cfg.humans.push(HumanConfig {
            name: format!("{name}_hand"),
            target: HumanTarget::Grip { name: name.into() },
            profile: sway(sign),
            impedance: Some(HandImpedance {
                stiffness: 60.0,
                damping: 15.0,
                anchor: None,
            }),
            noise_std: 0.0,
        });
    }
    cfg
}

/// A single floating robot led by the wrist. The hand damps the motion so
/// the arm comes to rest when the pull stops.
pub fn walk_the_dog() -> ScenarioConfig {
    let mut cfg = base("walk_the_dog", 12.0);
    cfg.init = WorldInit::default();
    cfg.robots = robots_under(&[Vector3::zeros()], FloatMode::Float, RobotModel::default());
    let knot = |t: f64, fx: f64, fy: f64| Knot {
        t,
        force: Vector3::new(fx, fy, 0.0),
        moment: Vector3::zeros(),
    };
    cfg.humans.push(HumanConfig {
        name: "leash".into(),
        target: HumanTarget::Wrist { robot: 0 },
        profile: WrenchProfile::PiecewiseLinear {
            knots: vec![
                knot(0.5, 0.0, 0.0),
                knot(1.0, 2.0, 0.0),
                knot(4.0, 2.0, 0.0),
                knot(4.5, 0.0, 2.0),
                knot(7.5, 0.0, 2.0),
                knot(8.0, 0.0, 0.0),
            ],
        },
        impedance: Some(HandImpedance {
            stiffness: 0.0,
            damping: 20.0,
            anchor: None,
        }),
        noise_std: 0.0,
    });
    cfg
}

pub fn all() -> Vec<ScenarioConfig> {
    vec![pvc_float(), hinged_two_humans(), walk_the_dog()]
}

pub fn by_name(name: &str) -> Option<ScenarioConfig> {
    all().into_iter().find(|c| c.name == name)
}

/// Reference layouts and the rank each should reach: one, two and three
/// robots under a rigid board, three in a line, and the hinged load.
pub fn rank_layouts(model: &RobotModel) -> Vec<(&'static str, ScenarioConfig, usize)> {
    let pts = ring(3, 0.5, 0.3);
    let line = [Vector3::new(-0.5, 0.0, 0.0), Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0)];
    vec![
        ("1 robot, rigid", rigid_board("one", &pts[..1], *model), 3),
        ("2 robots, rigid", rigid_board("two", &pts[..2], *model), 5),
        ("3 robots, rigid", rigid_board("three", &pts, *model), 6),
        ("3 robots, rigid, collinear", rigid_board("line", &line, *model), 5),
        ("3 robots, hinged", hinged_panels("hinged", *model), 7),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{run, RunOptions};

    #[test]
    fn presets_validate() {
        for cfg in all() {
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", cfg.name));
        }
    }

    #[test]
    fn presets_run_to_completion() {
        for cfg in all() {
            let r = run(&cfg, &RunOptions::default()).unwrap();
            let s = &r.summary;
            assert!(r.ok(), "{}: {:?}", cfg.name, s.fault);
            assert!(s.max_constraint_residual < 1e-6, "{}: {}", cfg.name, s.max_constraint_residual);
            assert_eq!(s.torque_saturations, 0, "{}", cfg.name);
        }
    }

    #[test]
    fn hinged_load_folds_in_place() {
        let mut s = crate::scenario::Session::new(hinged_two_humans()).unwrap();
        let com0 = s.world.state.payload_com(&s.world.models.payload);
        let (mut lo, mut hi, mut drift) = (0.0f64, 0.0f64, 0.0f64);
        while s.world.tick < s.end_tick() {
            s.step().unwrap();
            let a = s.world.hinge_angle().unwrap();
            lo = lo.min(a);
            hi = hi.max(a);
            drift = drift.max((s.world.state.payload_com(&s.world.models.payload) - com0).norm());
        }
        assert!(drift < 0.05, "COM moved {drift} m");
        // the fold swings both ways and stays bounded
        assert!(lo < -1f64.to_radians() && hi > 1f64.to_radians(), "{lo} {hi}");
        assert!(hi - lo < 20f64.to_radians(), "{lo} {hi}");
    }
}
