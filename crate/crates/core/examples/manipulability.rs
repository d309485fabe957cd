//! Rank of the payload control map for the reference layouts, then a third
//! robot slid onto the line through the other two.
//!
//! ```bash
//! cargo run -p mocobot --example manipulability
//! ```

use mocobot::multibody::{initial_state, manipulability, RANK_TOL};
use mocobot::scenario::{presets, rank_report};
use mocobot::multibody::RobotModel;
use nalgebra::Vector3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{}\n", rank_report(&presets::pvc_float())?);

    println!("{:>10} {:>5}", "offset m", "rank");
    for off in [0.4, 0.2, 0.05, 0.01, 0.0] {
        let pts = [Vector3::new(-0.5, 0.0, 0.0), Vector3::new(0.0, off, 0.0), Vector3::new(0.5, 0.0, 0.0)];
        let cfg = presets::rigid_board("slide", &pts, RobotModel::default());
        let models = cfg.models()?;
        let poses: Vec<_> = cfg.robots.iter().map(|r| r.base_pose).collect();
        let state = initial_state(&models, &cfg.init, &poses)?;
        println!("{off:>10.2} {:>5}", manipulability(&state, &models, RANK_TOL)?);
    }
    Ok(())
}
