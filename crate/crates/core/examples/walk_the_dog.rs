//! One robot led by its wrist: the arm gives way and the base follows.
//!
//! ```bash
//! cargo run -p mocobot --example walk_the_dog
//! ```

use mocobot::scenario::{presets, Session};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut s = Session::new(presets::walk_the_dog())?;
    let chunk = (0.5 * s.config().rates.physics) as u64;
    println!("{:>5} {:>17} {:>17} {:>7}", "t s", "wrist x, y (m)", "base x, y (m)", "pull N");
    while s.world.tick < s.end_tick() {
        for _ in 0..chunk {
            s.step()?;
        }
        let w = s.world.wrist(0)?;
        let r = &s.world.snapshot().robots[0];
        println!(
            "{:>5.1} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>7.2}",
            s.world.time(),
            w.x,
            w.y,
            r.base_pose.x,
            r.base_pose.y,
            s.world.hands[0].force.norm()
        );
    }
    Ok(())
}
