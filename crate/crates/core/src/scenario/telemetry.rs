//! Run logs: one CSV per subsystem plus a JSON-lines event stream. Floats
//! are written in shortest round-trip form, so identical runs give
//! identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::json;

use super::ScenarioError;
use crate::multibody::{Snapshot, WorldEvent};

pub const PAYLOAD_CSV: &str = "payload.csv";
pub const ROBOTS_CSV: &str = "robots.csv";
pub const HUMANS_CSV: &str = "humans.csv";
pub const EVENTS_JSONL: &str = "events.jsonl";

const PAYLOAD_HEADER: &[&str] = &[
    "tick", "time", "body", "x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "hinge_angle",
];
const ROBOTS_HEADER: &[&str] = &[
    "tick", "time", "robot", "base_x", "base_y", "base_phi", "wrist_x", "wrist_y", "wrist_z", "theta_1", "theta_2",
    "theta_3", "alpha_x", "alpha_y", "alpha_z", "tau_1", "tau_2", "tau_3", "tau_cmd_1", "tau_cmd_2", "tau_cmd_3",
    "f_com_x", "f_com_y", "f_com_z", "clamped", "fault", "mode", "z0", "reanchors",
];
const HUMANS_HEADER: &[&str] = &[
    "tick", "time", "name", "x", "y", "z", "fx", "fy", "fz", "mx", "my", "mz", "hold_x", "hold_y", "hold_z",
    "command_clamped",
];

pub struct TelemetryWriter<W: Write> {
    payload: csv::Writer<W>,
    robots: csv::Writer<W>,
    humans: csv::Writer<W>,
    events: W,
    seen_events: usize,
}

impl TelemetryWriter<BufWriter<File>> {
    /// Create the log files in `dir`, replacing earlier ones.
    pub fn create(dir: &Path) -> Result<Self, ScenarioError> {
        std::fs::create_dir_all(dir).map_err(|e| ScenarioError::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| ScenarioError::io(&p, e))
        };
        Self::new(open(PAYLOAD_CSV)?, open(ROBOTS_CSV)?, open(HUMANS_CSV)?, open(EVENTS_JSONL)?)
    }
}

fn nums<'a>(row: &mut Vec<String>, xs: impl IntoIterator<Item = &'a f64>) {
    row.extend(xs.into_iter().map(|x| x.to_string()));
}

impl<W: Write> TelemetryWriter<W> {
    pub fn new(payload: W, robots: W, humans: W, events: W) -> Result<Self, ScenarioError> {
        let mut w = Self {
            payload: csv::Writer::from_writer(payload),
            robots: csv::Writer::from_writer(robots),
            humans: csv::Writer::from_writer(humans),
            events,
            seen_events: 0,
        };
        w.payload.write_record(PAYLOAD_HEADER)?;
        w.robots.write_record(ROBOTS_HEADER)?;
        w.humans.write_record(HUMANS_HEADER)?;
        Ok(w)
    }

    pub fn record(&mut self, s: &Snapshot, command_clamped: &[bool]) -> Result<(), ScenarioError> {
        let head = [s.tick.to_string(), s.time.to_string()];
        for (i, b) in s.payload.iter().enumerate() {
            let mut row = head.to_vec();
            row.push(i.to_string());
            nums(&mut row, b.position.iter().chain(b.orientation.iter()).chain(b.velocity.iter()));
            row.push(s.hinge_angle.map(|a| a.to_string()).unwrap_or_default());
            self.payload.write_record(&row)?;
        }
        for (i, r) in s.robots.iter().enumerate() {
            let mut row = head.to_vec();
            row.push(i.to_string());
            nums(
                &mut row,
                r.base_pose
                    .iter()
                    .chain(r.wrist.iter())
                    .chain(r.theta.iter())
                    .chain(r.alpha.iter())
                    .chain(r.sea_torque.iter())
                    .chain(r.tau_cmd.iter())
                    .chain(r.f_com.iter()),
            );
            row.push(u8::from(r.clamped).to_string());
            row.push(u8::from(r.fault).to_string());
            row.push(format!("{:?}", r.mode));
            row.push(r.z0.to_string());
            row.push(r.reanchors.to_string());
            self.robots.write_record(&row)?;
        }
        for (i, h) in s.hands.iter().enumerate() {
            let mut row = head.to_vec();
            row.push(h.name.clone());
            nums(
                &mut row,
                h.position
                    .iter()
                    .chain(h.force.iter())
                    .chain(h.moment.iter())
                    .chain(h.hold_force.iter()),
            );
            row.push(u8::from(command_clamped.get(i).copied().unwrap_or(false)).to_string());
            self.humans.write_record(&row)?;
        }
        Ok(())
    }

    /// Append the world events not yet written.
    pub fn events(&mut self, tick: u64, time: f64, events: &[WorldEvent]) -> Result<(), ScenarioError> {
        if events.len() < self.seen_events {
            // the world was reset
            self.seen_events = 0;
        }
        for e in &events[self.seen_events..] {
            let mut v = serde_json::to_value(e).expect("events serialize");
            v["tick"] = json!(tick);
            v["time"] = json!(time);
            writeln!(self.events, "{v}").map_err(|e| ScenarioError::Io(e.to_string()))?;
        }
        self.seen_events = events.len();
        Ok(())
    }

    pub fn fault(&mut self, tick: u64, time: f64, reason: &str) -> Result<(), ScenarioError> {
        let v = json!({"event": "fault", "reason": reason, "tick": tick, "time": time});
        writeln!(self.events, "{v}").map_err(|e| ScenarioError::Io(e.to_string()))
    }

    pub fn flush(&mut self) -> Result<(), ScenarioError> {
        self.payload.flush().map_err(|e| ScenarioError::Io(e.to_string()))?;
        self.robots.flush().map_err(|e| ScenarioError::Io(e.to_string()))?;
        self.humans.flush().map_err(|e| ScenarioError::Io(e.to_string()))?;
        self.events.flush().map_err(|e| ScenarioError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{presets, Session};

    #[test]
    fn rows_match_headers() {
        let mut s = Session::new(presets::hinged_two_humans()).unwrap();
        let mut out: [Vec<u8>; 4] = Default::default();
        {
            let [a, b, c, d] = &mut out;
            let mut w = TelemetryWriter::new(a, b, c, d).unwrap();
            for _ in 0..80 {
                s.step().unwrap();
            }
            w.record(&s.world.snapshot(), s.wrench_clamped()).unwrap();
            s.world.set_mode(0, crate::manip_ctrl::FloatMode::Float).unwrap();
            w.events(s.world.tick, s.world.time(), &s.world.events).unwrap();
            w.flush().unwrap();
        }
        for (buf, header, rows) in [
            (&out[0], PAYLOAD_HEADER, 2),
            (&out[1], ROBOTS_HEADER, 3),
            (&out[2], HUMANS_HEADER, 2),
        ] {
            let mut r = csv::Reader::from_reader(buf.as_slice());
            assert_eq!(r.headers().unwrap().len(), header.len());
            let recs: Vec<_> = r.records().map(|x| x.unwrap()).collect();
            assert_eq!(recs.len(), rows);
            assert!(recs.iter().all(|x| x.len() == header.len()));
            assert_eq!(&recs[0][0], "80");
        }
        let events = String::from_utf8(out[3].clone()).unwrap();
        let v: serde_json::Value = serde_json::from_str(events.lines().next().unwrap()).unwrap();
        assert_eq!(v["event"], "mode_change");
        assert_eq!(v["tick"], 80);
    }
}
