//! Two people fold a hinged load in antiphase while three robots hold it in
//! approximate float.
//!
//! ```bash
//! cargo run -p mocobot --example hinged_fold
//! ```

use mocobot::scenario::{presets, Session};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut s = Session::new(presets::hinged_two_humans())?;
    let com0 = s.world.state.payload_com(&s.world.models.payload);
    let chunk = (0.25 * s.config().rates.physics) as u64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut drift: f64 = 0.0;
    println!("{:>6} {:>10} {:>10} {:>8}", "t s", "hinge deg", "com mm", "z0 mm");
    while s.world.tick < s.end_tick() {
        for _ in 0..chunk {
            s.step()?;
        }
        let a = s.world.hinge_angle().unwrap_or(0.0).to_degrees();
        let d = (s.world.state.payload_com(&s.world.models.payload) - com0).norm();
        lo = lo.min(a);
        hi = hi.max(a);
        drift = drift.max(d);
        if s.world.tick % (4 * chunk) == 0 {
            let z0 = s.world.controllers[0].state.z0;
            println!("{:>6.1} {a:>10.3} {:>10.2} {:>8.1}", s.world.time(), d * 1e3, z0 * 1e3);
        }
    }
    println!("hinge swept {lo:.3} .. {hi:.3} deg, COM stayed within {:.1} mm", drift * 1e3);
    Ok(())
}
