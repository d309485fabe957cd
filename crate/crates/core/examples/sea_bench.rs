//! Blocked-joint step and frequency response of the shipped SEA.
//!
//! ```bash
//! cargo run -p mocobot --example sea_bench
//! ```

use mocobot::sea::{bandwidth_hz, blocked_freq_response, blocked_step_response, SeaParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = SeaParams::default();
    println!(
        "spring {} N m/rad, PID kp {} ki {} kd {}, loop {} Hz",
        p.k, p.pid.kp, p.pid.ki, p.pid.kd, p.rate
    );
    println!("torque quantum {:.2} uN m", p.torque_resolution() * 1e6);

    for step in [1.0, 5.0, 9.0] {
        let m = blocked_step_response(&p, step)?;
        println!(
            "step {step:>3} N m: settles in {:5.1} ms, rise {:5.1} ms, overshoot {:.2} %",
            m.settling_time * 1e3,
            m.rise_time * 1e3,
            m.overshoot * 100.0
        );
    }

    println!("\n{:>8} {:>9} {:>9}", "Hz", "dB", "deg");
    for pt in blocked_freq_response(&p, &[0.5, 2.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0], 5.0, 1.0)? {
        println!("{:>8.1} {:>9.3} {:>9.2}", pt.freq_hz, pt.magnitude_db, pt.phase_deg);
    }
    println!("-3 dB at {:.2} Hz", bandwidth_hz(&p, 5.0, 1.0)?);
    Ok(())
}
