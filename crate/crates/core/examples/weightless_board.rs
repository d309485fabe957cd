//! Three robots float a 15.6 kg board while one person nudges it along x.
//! Prints the board position and the force the person applies.
//!
//! ```bash
//! cargo run -p mocobot --example weightless_board
//! ```

use mocobot::scenario::{presets, Session};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = presets::pvc_float();
    println!(
        "{}: {:.1} kg on {} robots",
        cfg.name,
        cfg.payload.total_mass(),
        cfg.robots.len()
    );
    let mut s = Session::new(cfg)?;
    let per_half_second = (0.5 * s.config().rates.physics) as u64;
    println!("{:>6} {:>9} {:>9} {:>9} {:>8}", "t s", "x m", "y m", "z m", "push N");
    while s.world.tick < s.end_tick() {
        for _ in 0..per_half_second {
            s.step()?;
        }
        let p = s.world.state.bodies[0].position;
        let f = s.world.hands[0].applied.norm();
        println!("{:>6.1} {:>9.4} {:>9.4} {:>9.4} {:>8.2}", s.world.time(), p.x, p.y, p.z, f);
    }
    println!("max constraint residual {:.2e} m", s.world.max_residual);
    Ok(())
}
