//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DVector, Matrix3, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mocobot::delta::{self, calibrate, home_properties, DeltaParams};
use mocobot::manip_ctrl::FloatMode;
use mocobot::multibody::system::integrate_positions;
use mocobot::multibody::{
    advance, assemble, control_map, initial_state, Actuation, Attachment, BodySpec, GripTarget, Models,
    Stabilization, SystemState,
};
use mocobot::scenario::{presets, rank_report, run, Knot, RunOptions, ScenarioConfig, Session, WrenchProfile};
use mocobot::sea::{bandwidth_hz, blocked_step_response, SeaParams};
use mocobot::spatial::{aggregate_stiffness, rot_z, Pose, StiffnessMatrix};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target.abs()
}

fn calibration_closure() -> Outcome {
    let t0 = Instant::now();
    let (l1, l2, home, k) = (0.200, 0.368, 36.6f64.to_radians(), 60.1);
    let (dr, z_off) = match calibrate(l1, l2, home, 0.420, 2000.0, k) {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("calibrate failed: {e}")),
    };
    let params = DeltaParams {
        l1,
        l2,
        dr,
        z_off,
        home_theta: home,
        ..Default::default()
    };
    let sea = SeaParams::default();
    let p = home_properties(&params, k, 9.0, sea.encoder_bits, sea.torque_resolution()).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let kd = p.stiffness_diag;
    let factor2 = |x: f64, t: f64| x >= t / 2.0 && x <= t * 2.0;
    let pass = within(kd.z, 2000.0, 1e-6)
        && within(p.position.z, 0.420, 1e-9)
        && within(kd.x, 1400.0, 0.05)
        && within(kd.y, 1400.0, 0.05)
        && within(p.max_vertical_force, 90.0, 0.05)
        && factor2(p.force_resolution, 500e-6)
        && factor2(p.position_resolution, 0.3e-6)
        && elapsed < 1.0;
    outcome(
        pass,
        format!(
            "Kzz {:.1} N/m, home z {:.4} m, Kxx {:.0} Kyy {:.0} N/m, Fz max {:.1} N, force res {:.0} uN, position res {:.3} um, {:.3} s",
            kd.z,
            p.position.z,
            kd.x,
            kd.y,
            p.max_vertical_force,
            p.force_resolution * 1e6,
            p.position_resolution * 1e6,
            elapsed
        ),
    )
}

fn manipulability() -> Outcome {
    let t0 = Instant::now();
    let report = match rank_report(&presets::pvc_float()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let elapsed = t0.elapsed().as_secs_f64();
    let ranks: Vec<_> = report.rows.iter().filter(|r| r.expected.is_some()).map(|r| r.rank).collect();
    let pass = ranks == [3, 5, 6, 5, 7] && report.tol == 1e-8 && elapsed < 1.0;
    outcome(pass, format!("ranks {ranks:?} (expected [3, 5, 6, 5, 7]), {elapsed:.3} s"))
}

fn sea_closed_loop() -> Outcome {
    let t0 = Instant::now();
    let p = SeaParams::default();
    let step = blocked_step_response(&p, 5.0).unwrap();
    let bw = bandwidth_hz(&p, 5.0, 1.0).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = step.settling_time < 0.1 && (20.0..=30.0).contains(&bw) && elapsed < 30.0;
    outcome(
        pass,
        format!("5 N m step settles in {:.1} ms, bandwidth {bw:.2} Hz, {elapsed:.2} s", step.settling_time * 1e3),
    )
}

fn without_humans(mut cfg: ScenarioConfig) -> ScenarioConfig {
    for h in &mut cfg.humans {
        h.profile = WrenchProfile::Constant {
            force: Vector3::zeros(),
            moment: Vector3::zeros(),
        };
    }
    cfg
}

fn weightlessness() -> Outcome {
    let cfg = presets::pvc_float();
    let m = cfg.payload.total_mass();
    let mg = m * 9.81;

    // hold: the net force on the still payload is what a person would have
    // to supply to keep it in place
    let mut s = Session::new(without_humans(cfg.clone())).unwrap();
    let mut worst_hold = 0.0f64;
    let mut p_prev = s.world.state.payload_momentum(&s.world.models.payload);
    for _ in 0..200 {
        for _ in 0..40 {
            s.step().unwrap();
        }
        let p = s.world.state.payload_momentum(&s.world.models.payload);
        worst_hold = worst_hold.max(((p - p_prev) / 0.01).norm());
        p_prev = p;
    }

    // 10 N·s along x through the COM: 50 N for 0.19 s with 10 ms ramps
    let mut push = cfg.clone();
    let knot = |t: f64, fx: f64| Knot {
        t,
        force: Vector3::new(fx, 0.0, 0.0),
        moment: Vector3::zeros(),
    };
    push.humans[0].profile = WrenchProfile::PiecewiseLinear {
        knots: vec![knot(1.0, 0.0), knot(1.01, 50.0), knot(1.2, 50.0), knot(1.21, 0.0)],
    };
    let mut s = Session::new(push).unwrap();
    let mut res = 0.0f64;
    while s.world.time() < 1.5 - 1e-9 {
        s.step().unwrap();
    }
    res = res.max(s.world.max_residual);
    let p = s.world.state.payload_momentum(&s.world.models.payload);

    // the shipped preset over its full 20 s
    let t0 = Instant::now();
    let full = run(&cfg, &RunOptions::default()).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    res = res.max(full.summary.max_constraint_residual);

    let pass = worst_hold < 0.005 * mg
        && within(p.x, 10.0, 0.2)
        && res < 1e-6
        && full.ok()
        && elapsed < 60.0;
    outcome(
        pass,
        format!(
            "hold force {:.2e} N ({:.4}% of m g), momentum after 10 N s impulse {:.3} N s, max residual {res:.2e} m, 20 s preset in {elapsed:.1} s",
            worst_hold,
            100.0 * worst_hold / mg,
            p.x
        ),
    )
}

fn approx_float_drag() -> Outcome {
    // board held at three uneven points, none symmetric about the COM
    let points = [Vector3::new(0.45, 0.1, 0.0), Vector3::new(-0.3, 0.4, 0.0), Vector3::new(-0.15, -0.45, 0.0)];
    let mut cfg = presets::rigid_board("drag", &points, Default::default());
    for r in &mut cfg.robots {
        r.mode = FloatMode::ApproxFloat;
    }
    cfg.humans.clear();
    let mut w = cfg.build_world().unwrap();
    w.hands.push(mocobot::multibody::Hand::new(
        "push",
        GripTarget::Payload {
            body: 0,
            point: points[0],
        },
    ));
    let eps = cfg.robots[0].gains.eps;
    let params = cfg.robots[0].model.manip.delta;
    let local_z = |w: &mocobot::multibody::World| delta::fk(&w.state.robots[0].theta, &params).unwrap().z;
    let z_start = local_z(&w);
    let target = z_start - 2.0 * eps;

    // PID on the wrist height: ramp down over 1 s, hold 1 s
    let dt = w.dt();
    let (kp, ki, kd) = (3000.0, 6000.0, 300.0);
    let mut integ = 0.0;
    let mut z_prev = z_start;
    let mut depth = 0.0f64;
    while w.time() < 2.0 {
        let t = w.time();
        let zt = z_start + (target - z_start) * (t / 1.0).min(1.0);
        let z = local_z(&w);
        let e = zt - z;
        integ += e * dt;
        let f = (kp * e + ki * integ - kd * (z - z_prev) / dt).clamp(-80.0, 80.0);
        z_prev = z;
        w.hands[0].force = Vector3::new(0.0, 0.0, f);
        w.step().unwrap();
        depth = depth.max(z_start - local_z(&w));
    }
    w.hands[0].force = Vector3::zeros();
    let count = w.controllers[0].state.reanchor_count;
    let t_release = w.time();
    while w.time() < t_release + 30.0 {
        w.step().unwrap();
    }
    let z0 = w.controllers[0].state.z0;
    let settle = local_z(&w) - z0;
    let count_after = w.controllers[0].state.reanchor_count;
    // drift: mean COM speed over the final second
    let c0 = w.state.payload_com(&w.models.payload);
    let t_end = w.time();
    while w.time() < t_end + 1.0 {
        w.step().unwrap();
    }
    let drift = (w.state.payload_com(&w.models.payload) - c0).norm() / 1.0;
    let pass = depth >= 2.0 * eps - 1e-3 && count == 1 && count_after == 1 && settle.abs() < 2e-3 && drift < 1e-3;
    outcome(
        pass,
        format!(
            "pushed {:.1} mm, reanchors {count} (after release {count_after}), z0 moved {:.1} mm, settled {:.2} mm from z0, drift {:.2e} m/s",
            depth * 1e3,
            (z0 - z_start) * 1e3,
            settle * 1e3,
            drift
        ),
    )
}

fn fd_payload_response(models: &Models, st: &SystemState, u: &DVector<f64>, du: &DVector<f64>, h: f64) -> DVector<f64> {
    let dt = 1.0 / 4000.0;
    let nact = 3 * models.robots.len();
    let step = |sign: f64| {
        let mut s = st.clone();
        let uu = u + du.rows(0, nact) * (sign * h);
        for (i, r) in s.robots.iter_mut().enumerate() {
            let tau = models.robots[i].base.twist_time_constant;
            r.v_com += du.fixed_rows::<3>(nact + 3 * i) * (sign * h * tau);
        }
        let mats = assemble(&s, models).unwrap();
        let (next, _) =
            advance(&s, models, &mats, &uu, &DVector::zeros(models.n()), dt, Stabilization::default()).unwrap();
        next.velocity_vector(models).rows(0, models.n_payload()).into_owned()
    };
    (step(1.0) - step(-1.0)) / (2.0 * h * dt)
}

fn random_team(rng: &mut ChaCha8Rng) -> (Models, SystemState, DVector<f64>) {
    let n = rng.random_range(1..=3);
    let pts: Vec<_> = (0..n)
        .map(|_| Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.03..0.03)))
        .collect();
    let mut cfg = presets::rigid_board("random", &pts, Default::default());
    cfg.actuation = Actuation::JointTorque;
    cfg.payload.bodies[0] = BodySpec::cuboid(rng.random_range(2.0..20.0), Vector3::new(1.2, 1.2, 0.05), Vector3::zeros());
    cfg.init.payload_rotation = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
    for r in &mut cfg.robots {
        r.base_pose.x += rng.random_range(-0.05..0.05);
        r.base_pose.y += rng.random_range(-0.05..0.05);
        r.base_pose.z = rng.random_range(-3.0..3.0);
    }
    let models = cfg.models().unwrap();
    let poses: Vec<_> = cfg.robots.iter().map(|r| r.base_pose).collect();
    let mut st = initial_state(&models, &cfg.init, &poses).unwrap();
    st.bodies[0].omega = Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2));
    st.bodies[0].velocity = Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2));
    for r in &mut st.robots {
        r.base.twist = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
        r.v_com = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
    }
    // joint rates that keep every grasp closed
    let mats = assemble(&st, &models).unwrap();
    let mut v = st.velocity_vector(&models);
    for (k, att) in models.payload.attachments.iter().enumerate() {
        let o = models.robot_offset(att.robot);
        let rj: Matrix3<f64> = mats.a.fixed_view::<3, 3>(3 * k, o).into_owned();
        let rest = mats.residual_rate.fixed_rows::<3>(3 * k) - rj * v.fixed_rows::<3>(o);
        let td = rj.try_inverse().unwrap() * (-rest);
        v.fixed_rows_mut::<3>(o).copy_from(&td);
    }
    integrate_positions(&mut st, &models, &v, 0.0);
    let _: &Vec<Attachment> = &models.payload.attachments;
    let u = DVector::from_fn(3 * n, |_, _| rng.random_range(-3.0..3.0));
    (models, st, u)
}

fn control_map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (models, st, u) = random_team(&mut rng);
        let mats = assemble(&st, &models).unwrap();
        let fp = control_map(&mats).unwrap().payload_rows();
        let du = DVector::from_fn(fp.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let fd = fd_payload_response(&models, &st, &u, &du, 1e-3);
        let an = &fp * &du;
        worst = worst.max((&fd - &an).norm() / an.norm());
    }
    outcome(worst < 1e-4, format!("worst relative error {worst:.2e} over 20 configurations"))
}

fn stiffness_aggregation() -> Outcome {
    let params = DeltaParams::default();
    let k_joint = SeaParams::default().k;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        // grasp offsets from the payload origin, base headings, and wrist
        // positions away from home
        let grasps: Vec<(Vector3<f64>, f64, Vector3<f64>)> = presets::ring(3, 0.5, rng.random_range(0.0..1.0))
            .into_iter()
            .map(|r| {
                let x = params.home_position() + Vector3::from_fn(|_, _| rng.random_range(-0.04..0.04));
                (r + Vector3::new(0.0, 0.0, rng.random_range(-0.05..0.05)), rng.random_range(-3.0..3.0), x)
            })
            .collect();
        let mut parts = vec![];
        for (r, phi, x) in &grasps {
            let th = delta::ik_branch(x, &params).unwrap();
            let k_local = delta::wrist_stiffness(&th, k_joint, &params).unwrap();
            let rz = rot_z(*phi);
            let k_world = rz * k_local * rz.transpose();
            parts.push((StiffnessMatrix::translational(&k_world).unwrap(), Pose::from_translation(-r)));
        }
        let analytic = *aggregate_stiffness(&parts).unwrap().matrix();

        // elastic energy of the joint springs for a small payload twist
        // displacement (δφ, δp), with every motor held
        let energy = |d: &Vector6<f64>| {
            let dphi = Vector3::new(d[0], d[1], d[2]);
            let dp = Vector3::new(d[3], d[4], d[5]);
            grasps
                .iter()
                .map(|(r, phi, x)| {
                    let th0 = delta::ik_branch(x, &params).unwrap();
                    let dx = rot_z(*phi).transpose() * (dp + dphi.cross(r));
                    let th = delta::ik_branch(&(x + dx), &params).unwrap();
                    0.5 * k_joint * (th - th0).norm_squared()
                })
                .sum::<f64>()
        };
        let h = 1e-5;
        let mut hess = Matrix6::zeros();
        for a in 0..6 {
            for b in 0..6 {
                let e = |sa: f64, sb: f64| {
                    let mut x = Vector6::zeros();
                    x[a] += sa * h;
                    x[b] += sb * h;
                    energy(&x)
                };
                hess[(a, b)] = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * h * h);
            }
        }
        worst = worst.max((hess - analytic).norm() / analytic.norm());
    }
    outcome(worst < 1e-6, format!("worst relative error {worst:.2e} over 5 three-robot grasps"))
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let mut cfg = presets::pvc_float();
    cfg.duration = 6.0;
    cfg.seed = 42;
    cfg.humans[0].noise_std = 0.5;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run(
            &cfg,
            &RunOptions {
                out: Some(d.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
    }
    let a = read_all(dirs[0].path());
    let b = read_all(dirs[1].path());
    let bytes: usize = a.iter().map(|(_, x)| x.len()).sum();
    outcome(a == b && bytes > 0, format!("{} files, {bytes} bytes compared", a.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("calibration closure", calibration_closure),
        ("manipulability", manipulability),
        ("SEA closed loop", sea_closed_loop),
        ("weightlessness", weightlessness),
        ("approximate float drag", approx_float_drag),
        ("control map oracle", control_map_oracle),
        ("stiffness aggregation", stiffness_aggregation),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
