//! Batch runs and the manipulability report.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::session::{LoggedCommand, Session};
use super::telemetry::TelemetryWriter;
use super::{presets, ScenarioError};
use crate::multibody::{initial_state, manipulability, MbError, RANK_TOL};

pub const SUMMARY_JSON: &str = "summary.json";
pub const CONFIG_TOML: &str = "config.toml";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Telemetry directory; `None` runs without logging.
    pub out: Option<PathBuf>,
    /// Live commands to replay.
    pub commands: Vec<LoggedCommand>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub ticks: u64,
    pub sim_time: f64,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
    /// Largest human force magnitude applied (N).
    pub peak_human_force: f64,
    /// Largest human force at the end of the run (N).
    pub final_human_force: f64,
    /// Payload COM displacement at the end (m).
    pub payload_displacement: f64,
    pub max_payload_displacement: f64,
    pub max_constraint_residual: f64,
    pub max_rate_residual: f64,
    pub torque_saturations: u64,
    pub reanchors: u64,
    pub events: usize,
    /// Mechanical energy change minus the net work (J); absent when the
    /// final state cannot be evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_balance_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: RunSummary,
    pub out: Option<PathBuf>,
}

impl RunReport {
    pub fn ok(&self) -> bool {
        self.summary.completed
    }
}

fn payload_com(s: &Session) -> Vector3<f64> {
    let w = &s.world;
    if w.models.payload.bodies.is_empty() {
        w.wrist(0).unwrap_or_else(|_| Vector3::zeros())
    } else {
        w.state.payload_com(&w.models.payload)
    }
}

struct Tracker {
    com0: Vector3<f64>,
    e0: f64,
    peak_force: f64,
    max_disp: f64,
}

impl Tracker {
    fn new(s: &Session) -> Result<Self, MbError> {
        Ok(Self {
            com0: payload_com(s),
            e0: s.world.energy()?.total(),
            peak_force: 0.0,
            max_disp: 0.0,
        })
    }

    fn observe(&mut self, s: &Session) {
        for h in &s.world.hands {
            self.peak_force = self.peak_force.max(h.applied.norm());
        }
        self.max_disp = self.max_disp.max((payload_com(s) - self.com0).norm());
    }
}

/// Telemetry and summary bookkeeping for a session being stepped.
pub struct Recorder<W: Write> {
    tw: TelemetryWriter<W>,
    tracker: Tracker,
    log_div: u64,
}

impl Recorder<BufWriter<File>> {
    /// Open the log files in `dir` and save the session's config there.
    pub fn create(dir: &Path, session: &Session) -> Result<Self, ScenarioError> {
        let tw = TelemetryWriter::create(dir)?;
        session.config().save(&dir.join(CONFIG_TOML))?;
        Self::new(session, tw)
    }
}

impl<W: Write> Recorder<W> {
    pub fn new(session: &Session, tw: TelemetryWriter<W>) -> Result<Self, ScenarioError> {
        let log_div = if session.config().output.full_rate {
            1
        } else {
            session.world.control_divisor()
        };
        let tracker = Tracker::new(session).map_err(|e| ScenarioError::Config(e.to_string()))?;
        Ok(Self { tw, tracker, log_div })
    }

    /// Record the state after a physics tick.
    pub fn observe(&mut self, s: &Session) -> Result<(), ScenarioError> {
        self.tracker.observe(s);
        let w = &s.world;
        self.tw.events(w.tick, w.time(), &w.events)?;
        if w.tick.is_multiple_of(self.log_div) {
            self.tw.record(&w.snapshot(), s.wrench_clamped())?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), ScenarioError> {
        self.tw.flush()
    }

    /// Close the log, noting `fault` if the run ended on one.
    pub fn finish(mut self, session: &Session, fault: Option<String>) -> Result<RunSummary, ScenarioError> {
        let cfg = session.config();
        let w = &session.world;
        if let Some(reason) = &fault {
            self.tw.events(w.tick, w.time(), &w.events)?;
            self.tw.fault(w.tick, w.time(), reason)?;
        }
        self.tw.flush()?;
        let energy = w.energy().ok().map(|e| e.total());
        Ok(RunSummary {
            name: cfg.name.clone(),
            seed: cfg.seed,
            duration: cfg.duration,
            ticks: w.tick,
            sim_time: w.time(),
            completed: fault.is_none(),
            fault,
            peak_human_force: self.tracker.peak_force,
            final_human_force: w.hands.iter().map(|h| h.applied.norm()).fold(0.0, f64::max),
            payload_displacement: (payload_com(session) - self.tracker.com0).norm(),
            max_payload_displacement: self.tracker.max_disp,
            max_constraint_residual: w.max_residual,
            max_rate_residual: w.max_rate_residual,
            torque_saturations: w.clamp_count,
            reanchors: w.controllers.iter().map(|c| c.state.reanchor_count).sum(),
            events: w.events.len(),
            energy_balance_error: energy.map(|e| e - self.tracker.e0 - w.work.net()),
        })
    }
}

pub fn write_summary(dir: &Path, summary: &RunSummary) -> Result<(), ScenarioError> {
    let path = dir.join(SUMMARY_JSON);
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(&path, text + "\n").map_err(|e| ScenarioError::io(&path, e))
}

/// Run a scenario to its duration. A simulation fault ends the run early
/// with the partial log kept; the summary records the fault.
pub fn run(config: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, ScenarioError> {
    let mut session = Session::new(config.clone())?;
    match &opts.out {
        Some(dir) => {
            let rec = Recorder::create(dir, &session)?;
            let summary = drive(&mut session, rec, &opts.commands)?;
            write_summary(dir, &summary)?;
            Ok(RunReport {
                summary,
                out: Some(dir.clone()),
            })
        }
        None => {
            let tw = TelemetryWriter::new(io::sink(), io::sink(), io::sink(), io::sink())?;
            let rec = Recorder::new(&session, tw)?;
            let summary = drive(&mut session, rec, &opts.commands)?;
            Ok(RunReport { summary, out: None })
        }
    }
}

fn drive<W: Write>(
    session: &mut Session,
    mut rec: Recorder<W>,
    commands: &[LoggedCommand],
) -> Result<RunSummary, ScenarioError> {
    let end = session.end_tick();
    let mut io_err = None;
    let result = session.replay(commands, end, |s| {
        rec.observe(s).map_err(|e| {
            io_err = Some(e);
            MbError::Config("telemetry write failed".into())
        })
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    rec.finish(session, result.err().map(|e| e.to_string()))
}

/// Read a JSON-lines command log.
pub fn read_command_log(path: &Path) -> Result<Vec<LoggedCommand>, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ScenarioError::Parse(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub label: String,
    pub robots: usize,
    pub payload_dof: usize,
    pub rank: usize,
    /// Manipulability expected for a layout of this kind.
    pub expected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub tol: f64,
    pub rows: Vec<RankRow>,
}

impl RankReport {
    pub fn all_match(&self) -> bool {
        self.rows.iter().all(|r| r.expected.is_none_or(|e| e == r.rank))
    }
}

impl fmt::Display for RankReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<36} {:>6} {:>6} {:>5} {:>8}", "layout", "robots", "dof", "rank", "expected")?;
        for r in &self.rows {
            let exp = r.expected.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
            writeln!(f, "{:<36} {:>6} {:>6} {:>5} {:>8}", r.label, r.robots, r.payload_dof, r.rank, exp)?;
        }
        write!(f, "threshold {:e} x sigma_max", self.tol)
    }
}

fn config_rank(cfg: &ScenarioConfig) -> Result<usize, ScenarioError> {
    let models = cfg.models()?;
    let poses: Vec<_> = cfg.robots.iter().map(|r| r.base_pose).collect();
    let state = initial_state(&models, &cfg.init, &poses).map_err(|e| ScenarioError::Config(e.to_string()))?;
    manipulability(&state, &models, RANK_TOL).map_err(|e| ScenarioError::Config(e.to_string()))
}

/// Rank of the payload control map for the reference layouts, built with
/// the robot model of `config`, followed by the configured layout itself.
pub fn rank_report(config: &ScenarioConfig) -> Result<RankReport, ScenarioError> {
    let model = config.robots.first().map(|r| r.model).unwrap_or_default();
    let mut rows = vec![];
    for (label, cfg, expected) in presets::rank_layouts(&model) {
        let rank = config_rank(&cfg)?;
        rows.push(RankRow {
            label: label.into(),
            robots: cfg.robots.len(),
            payload_dof: cfg.payload.dof(),
            rank,
            expected: Some(expected),
        });
    }
    rows.push(RankRow {
        label: format!("scenario '{}'", config.name),
        robots: config.robots.len(),
        payload_dof: config.payload.dof(),
        rank: config_rank(config)?,
        expected: None,
    });
    Ok(RankReport { tol: RANK_TOL, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_duration_run_has_an_empty_log() {
        let mut cfg = presets::pvc_float();
        cfg.duration = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let report = run(
            &cfg,
            &RunOptions {
                out: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.ok());
        assert_eq!(report.summary.ticks, 0);
        for f in ["payload.csv", "robots.csv", "humans.csv"] {
            let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
            assert_eq!(text.lines().count(), 1, "{f}");
        }
        assert_eq!(std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap(), "");
        let saved = super::super::load_scenario(&dir.path().join(CONFIG_TOML)).unwrap();
        assert_eq!(saved, cfg);
    }

    #[test]
    fn rank_report_reproduces_the_reference_table() {
        let r = rank_report(&presets::pvc_float()).unwrap();
        let ranks: Vec<_> = r.rows.iter().map(|r| r.rank).collect();
        assert_eq!(ranks, vec![3, 5, 6, 5, 7, 6]);
        assert!(r.all_match());
        let text = r.to_string();
        assert!(text.contains("collinear"), "{text}");
    }

    #[test]
    fn fault_keeps_the_partial_log() {
        // a shove far beyond what the team can follow drives a wrist out
        // of reach
        let mut cfg = presets::walk_the_dog();
        cfg.humans[0].profile = super::super::WrenchProfile::Constant {
            force: Vector3::new(400.0, 0.0, 0.0),
            moment: Vector3::zeros(),
        };
        cfg.humans[0].impedance = None;
        cfg.robots[0].recenter = false;
        cfg.duration = 5.0;
        let dir = tempfile::tempdir().unwrap();
        let report = run(
            &cfg,
            &RunOptions {
                out: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!report.ok(), "{:?}", report.summary);
        assert!(report.summary.ticks < 20_000);
        let rows = std::fs::read_to_string(dir.path().join("robots.csv")).unwrap().lines().count();
        assert!(rows > 1);
        let events = std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
        assert!(events.lines().last().unwrap().contains("\"fault\""), "{events}");
        let summary: RunSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_JSON)).unwrap()).unwrap();
        assert!(summary.fault.is_some());
    }
}
