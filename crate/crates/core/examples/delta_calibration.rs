//! Fit the Delta geometry, then walk the gimbal around the workspace sphere
//! and check inverse and forward kinematics agree.
//!
//! ```bash
//! cargo run -p mocobot --example delta_calibration
//! ```

use mocobot::delta::{calibrate, fk, home_properties, ik, wrist_stiffness, DeltaParams};
use mocobot::scenario::presets::ring;
use mocobot::sea::SeaParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sea = SeaParams::default();
    let home = 36.6f64.to_radians();
    let (dr, z_off) = calibrate(0.200, 0.368, home, 0.420, 2000.0, sea.k)?;
    let params = DeltaParams {
        dr,
        z_off,
        home_theta: home,
        ..Default::default()
    };
    let h = home_properties(&params, sea.k, sea.tau_max, sea.encoder_bits, sea.torque_resolution())?;
    println!("dr {dr:.6} m, z_off {z_off:.6} m");
    println!(
        "home ({:.3}, {:.3}, {:.3}) m, K diag ({:.0}, {:.0}, {:.0}) N/m, Fz max {:.1} N",
        h.position.x, h.position.y, h.position.z, h.stiffness_diag.x, h.stiffness_diag.y, h.stiffness_diag.z, h.max_vertical_force
    );

    let center = params.home_position();
    println!("\n{:>24} {:>12} {:>10}", "target (m)", "fk error", "Kzz N/m");
    for (i, dz) in [-0.1, 0.0, 0.1].into_iter().enumerate() {
        for p in ring(4, 0.1, i as f64 * 0.4) {
            let x = center + p + nalgebra::Vector3::new(0.0, 0.0, dz);
            let th = ik(&x, &params)?;
            let err = (fk(&th, &params)? - x).norm();
            let k = wrist_stiffness(&th, sea.k, &params)?;
            println!("({:>6.3}, {:>6.3}, {:>6.3}) {err:>12.2e} {:>10.0}", x.x, x.y, x.z, k[(2, 2)]);
        }
    }
    Ok(())
}
