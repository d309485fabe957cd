//! Serve the board in real time and drive it from a websocket client the
//! way the cockpit does: a 200 N/m spring from the grip to a cursor that
//! circles the starting point.
//!
//! ```bash
//! cargo run -p mocobot --example live_drag
//! ```

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use mocobot::bridge::{decode_server, encode_client, Bridge, ClientMessage, ServeOptions, ServerMessage};
use mocobot::scenario::{presets, Command, Session, WrenchProfile};
use nalgebra::Vector3;
use tungstenite::Message;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = presets::pvc_float();
    cfg.humans[0].profile = WrenchProfile::Interactive;
    let bridge = Bridge::bind("127.0.0.1:0")?;
    let addr = bridge.local_addr();
    let stop = Arc::new(AtomicBool::new(false));
    let server = {
        let stop = stop.clone();
        let session = Session::new(cfg)?;
        thread::spawn(move || bridge.serve(session, &ServeOptions::default(), stop))
    };

    let (mut ws, _) = tungstenite::connect(format!("ws://{addr}"))?;
    let ServerMessage::Hello(hello) = decode_server(ws.read()?.to_text()?.as_bytes())? else {
        return Err("expected hello".into());
    };
    println!("connected to '{}' at {addr}", hello.scenario);

    let (mut origin, mut bytes, mut frames) = (None, 0usize, 0u32);
    let t0 = Instant::now();
    while t0.elapsed() < Duration::from_secs(6) {
        let text = ws.read()?.into_text()?;
        let ServerMessage::Frame(f) = decode_server(text.as_bytes())? else {
            continue;
        };
        bytes += text.len();
        frames += 1;
        let grip = f.humans[0].position;
        let center = *origin.get_or_insert(grip);
        let a = 0.8 * t0.elapsed().as_secs_f64();
        let cursor = center + Vector3::new(0.05 * a.cos() - 0.05, 0.05 * a.sin(), 0.0);
        let force = hello.drag_stiffness * (cursor - grip);
        let cmd = Command::ApplyWrench {
            grip: "guide".into(),
            force,
            moment: Vector3::zeros(),
        };
        ws.send(Message::text(encode_client(&ClientMessage::command(cmd))))?;
        if frames % 15 == 0 {
            let p = f.payload[0].position;
            println!(
                "t {:5.2} s  board ({:.3}, {:.3})  pull {:.2} N  rank {:?}",
                f.time,
                p.x,
                p.y,
                force.norm(),
                f.rank
            );
        }
    }
    println!("{frames} frames, {} bytes each on average", bytes / frames.max(1) as usize);
    stop.store(true, Ordering::SeqCst);
    let report = server.join().map_err(|_| "server panicked")??;
    println!(
        "served {:.2} s of simulation in {:.2} s of wall time",
        report.stepped_time, report.wall_time
    );
    Ok(())
}
