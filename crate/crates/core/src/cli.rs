//! The `mocobot` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bridge::{Bridge, ServeOptions, DEFAULT_PORT, PORT_ENV};
use crate::delta::{self, DeltaParams};
use crate::scenario::{
    load_scenario, presets, rank_report, read_command_log, run, RunOptions, RunSummary, ScenarioConfig, Session,
};
use crate::sea::{self, SeaError, SeaParams};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_FAULT: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mocobot", version, about = "Simulate teams of mobile cobots carrying payloads with people")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run scenarios to completion, or serve one live.
    Run(RunArgs),
    /// Payload manipulability of the reference layouts and of a scenario.
    Rank {
        /// Scenario file or preset name.
        config: String,
        #[arg(long)]
        json: bool,
    },
    /// Blocked-joint torque step response.
    SeaStep {
        /// SEA bench file.
        params: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Blocked-joint torque frequency response.
    SeaFreq {
        /// SEA bench file.
        params: PathBuf,
        /// Frequencies (Hz).
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        freqs: Vec<f64>,
        /// Also search for the -3 dB bandwidth.
        #[arg(long)]
        bandwidth: bool,
        #[arg(long)]
        json: bool,
    },
    /// Fit the Delta geometry to a home stiffness and height.
    Calibrate {
        /// Calibration file.
        params: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario files or preset names. Several run in parallel.
    #[arg(required = true)]
    pub configs: Vec<String>,
    /// Override the simulated duration (s).
    #[arg(long)]
    pub duration: Option<f64>,
    /// Log directory; defaults to `<output.dir>/<name>`. With several
    /// scenarios each gets a subdirectory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Log every physics tick.
    #[arg(long)]
    pub full_rate: bool,
    /// Apply a recorded command log.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Step in real time and serve the cockpit over a websocket. Runs until
    /// interrupted, or for `--duration` when given.
    #[arg(long)]
    pub serve: bool,
    #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Listen on all interfaces instead of loopback.
    #[arg(long)]
    pub public: bool,
    #[arg(long)]
    pub json: bool,
}

/// What went wrong, mapped onto the exit status.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Fault(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Fault(_) => EXIT_FAULT,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn sea_err(e: SeaError) -> Failure {
    match e {
        SeaError::Unstable | SeaError::NonFinite { .. } => Failure::Fault(e.to_string()),
        _ => Failure::Config(e.to_string()),
    }
}

/// SEA experiment file: the actuator plus the test signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeaBench {
    /// Torque step (N·m).
    pub step: f64,
    /// Mean torque of the sinusoidal test (N·m).
    pub offset: f64,
    /// Sine amplitude (N·m).
    pub amplitude: f64,
    pub sea: SeaParams,
}

impl Default for SeaBench {
    fn default() -> Self {
        Self {
            step: 5.0,
            offset: 5.0,
            amplitude: 1.0,
            sea: SeaParams::default(),
        }
    }
}

/// Delta calibration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationInput {
    pub l1: f64,
    pub l2: f64,
    pub home_theta_deg: f64,
    /// Gimbal height at home (m).
    pub home_z: f64,
    /// Vertical stiffness at home (N/m).
    pub kzz: f64,
    /// SEA spring stiffness (N·m/rad).
    pub k_joint: f64,
    /// Continuous joint torque limit (N·m).
    pub tau_max: f64,
    pub encoder_bits: u32,
}

impl Default for CalibrationInput {
    fn default() -> Self {
        let sea = SeaParams::default();
        Self {
            l1: 0.200,
            l2: 0.368,
            home_theta_deg: 36.6,
            home_z: 0.420,
            kzz: 2000.0,
            k_joint: sea.k,
            tau_max: sea.tau_max,
            encoder_bits: sea.encoder_bits,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CalibrationReport {
    pub delta: DeltaParams,
    pub home: delta::HomeProperties,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Load a scenario file, or a preset when no such file exists.
pub fn resolve_config(arg: &str) -> Result<ScenarioConfig, Failure> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(cfg) = presets::by_name(arg) {
            return Ok(cfg);
        }
    }
    load_scenario(path).map_err(config_err)
}

pub fn calibrate(input: &CalibrationInput) -> Result<CalibrationReport, Failure> {
    let home = input.home_theta_deg.to_radians();
    let (dr, z_off) =
        delta::calibrate(input.l1, input.l2, home, input.home_z, input.kzz, input.k_joint).map_err(config_err)?;
    let params = DeltaParams {
        l1: input.l1,
        l2: input.l2,
        dr,
        z_off,
        home_theta: home,
        ..Default::default()
    };
    params.validate().map_err(Failure::Config)?;
    let sea = SeaParams {
        k: input.k_joint,
        encoder_bits: input.encoder_bits,
        ..Default::default()
    };
    let home = delta::home_properties(&params, input.k_joint, input.tau_max, input.encoder_bits, sea.torque_resolution())
        .map_err(config_err)?;
    Ok(CalibrationReport { delta: params, home })
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn print_summary(s: &RunSummary, out: Option<&Path>) {
    let status = match &s.fault {
        None => "completed".to_string(),
        Some(f) => format!("FAULT: {f}"),
    };
    println!("{}: {status}", s.name);
    println!("  simulated {:.3} s in {} ticks", s.sim_time, s.ticks);
    println!(
        "  human force peak {:.3} N, final {:.3} N",
        s.peak_human_force, s.final_human_force
    );
    println!(
        "  payload displacement {:.4} m (max {:.4} m)",
        s.payload_displacement, s.max_payload_displacement
    );
    println!(
        "  constraint residual max {:.2e} m, rate residual max {:.2e}",
        s.max_constraint_residual, s.max_rate_residual
    );
    println!("  torque saturations {}, re-anchors {}", s.torque_saturations, s.reanchors);
    if let Some(dir) = out {
        println!("  logs in {}", dir.display());
    }
}

fn prepare(args: &RunArgs, arg: &str) -> Result<ScenarioConfig, Failure> {
    let mut cfg = resolve_config(arg)?;
    if let Some(d) = args.duration {
        cfg.duration = d;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.full_rate {
        cfg.output.full_rate = true;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn out_dir(args: &RunArgs, cfg: &ScenarioConfig, many: bool) -> PathBuf {
    match &args.out {
        Some(d) if many => d.join(&cfg.name),
        Some(d) => d.clone(),
        None => PathBuf::from(&cfg.output.dir).join(&cfg.name),
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let configs = args
        .configs
        .iter()
        .map(|c| prepare(args, c))
        .collect::<Result<Vec<_>, _>>()?;
    let commands = match &args.replay {
        Some(p) => read_command_log(p).map_err(config_err)?,
        None => vec![],
    };
    if args.serve {
        if configs.len() != 1 {
            return Err(Failure::Config("--serve takes exactly one scenario".into()));
        }
        return cmd_serve(args, configs.into_iter().next().expect("one config"));
    }
    let many = configs.len() > 1;
    let names: Vec<_> = configs.iter().map(|c| c.name.clone()).collect();
    if let Some(dup) = names.iter().enumerate().find(|(i, n)| names[..*i].contains(n)) {
        return Err(Failure::Config(format!("scenario '{}' given twice", dup.1)));
    }
    // independent worlds, one thread each
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|cfg| {
                let opts = RunOptions {
                    out: Some(out_dir(args, cfg, many)),
                    commands: commands.clone(),
                };
                scope.spawn(move || run(cfg, &opts))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    let mut failure = None;
    let mut summaries = vec![];
    for r in results {
        match r {
            Ok(report) => {
                if let Some(f) = &report.summary.fault {
                    failure.get_or_insert(Failure::Fault(format!("{}: {f}", report.summary.name)));
                }
                if !args.json {
                    print_summary(&report.summary, report.out.as_deref());
                }
                summaries.push(report.summary);
            }
            Err(e) => {
                failure = Some(config_err(e));
            }
        }
    }
    if args.json {
        if many {
            println!("{}", json(&summaries));
        } else if let Some(s) = summaries.first() {
            println!("{}", json(s));
        }
    }
    failure.map_or(Ok(()), Err)
}

fn cmd_serve(args: &RunArgs, cfg: ScenarioConfig) -> Result<(), Failure> {
    let host = if args.public { "0.0.0.0" } else { "127.0.0.1" };
    let bridge = Bridge::bind((host, args.port)).map_err(config_err)?;
    let out = out_dir(args, &cfg, false);
    let session = Session::new(cfg).map_err(config_err)?;
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        if let Err(e) = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install the interrupt handler: {e}");
        }
    }
    eprintln!("serving on ws://{}", bridge.local_addr());
    let opts = ServeOptions {
        out: Some(out.clone()),
        stop_at_end: args.duration.is_some(),
        ..Default::default()
    };
    let report = bridge.serve(session, &opts, stop).map_err(config_err)?;
    if args.json {
        println!("{}", json(&report.summary));
    } else {
        print_summary(&report.summary, Some(&out));
        println!(
            "  served {} frames to {} clients, {} dropped",
            report.frames, report.clients, report.dropped_frames
        );
    }
    match report.summary.fault {
        Some(f) => Err(Failure::Fault(f)),
        None => Ok(()),
    }
}

fn cmd_rank(config: &str, as_json: bool) -> Result<(), Failure> {
    let cfg = resolve_config(config)?;
    let report = rank_report(&cfg).map_err(config_err)?;
    if as_json {
        println!("{}", json(&report));
    } else {
        println!("{report}");
    }
    Ok(())
}

fn cmd_sea_step(params: &Path, as_json: bool) -> Result<(), Failure> {
    let bench: SeaBench = read_toml(params)?;
    bench.sea.validate().map_err(sea_err)?;
    let m = sea::blocked_step_response(&bench.sea, bench.step).map_err(sea_err)?;
    if as_json {
        println!("{}", json(&m));
    } else {
        println!("blocked step of {} N m", bench.step);
        println!("  settling time (2%) {:.2} ms", m.settling_time * 1e3);
        println!("  rise time 10-90%   {:.2} ms", m.rise_time * 1e3);
        println!("  overshoot          {:.2} %", m.overshoot * 100.0);
    }
    Ok(())
}

#[derive(Serialize)]
struct FreqReport {
    points: Vec<sea::FreqPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bandwidth_hz: Option<f64>,
}

fn cmd_sea_freq(params: &Path, freqs: &[f64], bandwidth: bool, as_json: bool) -> Result<(), Failure> {
    let bench: SeaBench = read_toml(params)?;
    bench.sea.validate().map_err(sea_err)?;
    if let Some(f) = freqs.iter().find(|f| !(f.is_finite() && **f >= 0.0)) {
        return Err(Failure::Config(format!("bad frequency {f}")));
    }
    let points = sea::blocked_freq_response(&bench.sea, freqs, bench.offset, bench.amplitude).map_err(sea_err)?;
    let bw = if bandwidth {
        Some(sea::bandwidth_hz(&bench.sea, bench.offset, bench.amplitude).map_err(sea_err)?)
    } else {
        None
    };
    let report = FreqReport {
        points,
        bandwidth_hz: bw,
    };
    if as_json {
        println!("{}", json(&report));
    } else {
        println!("{:>10} {:>10} {:>10}", "freq_hz", "mag_db", "phase_deg");
        for p in &report.points {
            println!("{:>10.3} {:>10.3} {:>10.2}", p.freq_hz, p.magnitude_db, p.phase_deg);
        }
        if let Some(b) = bw {
            println!("-3 dB bandwidth {b:.2} Hz");
        }
    }
    Ok(())
}

fn cmd_calibrate(params: &Path, as_json: bool) -> Result<(), Failure> {
    let input: CalibrationInput = read_toml(params)?;
    let r = calibrate(&input)?;
    if as_json {
        println!("{}", json(&r));
    } else {
        let h = &r.home;
        println!("dr    = {:.15} m", r.delta.dr);
        println!("z_off = {:.15} m", r.delta.z_off);
        println!("home position     ({:.4}, {:.4}, {:.4}) m", h.position.x, h.position.y, h.position.z);
        println!(
            "home stiffness    Kxx {:.1}  Kyy {:.1}  Kzz {:.1} N/m",
            h.stiffness_diag.x, h.stiffness_diag.y, h.stiffness_diag.z
        );
        println!("dz/dtheta         {:.4} m/rad", h.dz_dtheta);
        println!("max vertical force {:.2} N", h.max_vertical_force);
        println!("force resolution  {:.1} uN", h.force_resolution * 1e6);
        println!("position resolution {:.3} um", h.position_resolution * 1e6);
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Rank { config, json } => cmd_rank(config, *json),
        Cmd::SeaStep { params, json } => cmd_sea_step(params, *json),
        Cmd::SeaFreq {
            params,
            freqs,
            bandwidth,
            json,
        } => cmd_sea_freq(params, freqs, *bandwidth, *json),
        Cmd::Calibrate { params, json } => cmd_calibrate(params, *json),
    }
}

/// Parse arguments, run, and map the outcome to an exit status.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("error: {m}"),
                Failure::Fault(m) => eprintln!("simulation fault: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn default_calibration_reproduces_the_shipped_geometry() {
        let r = calibrate(&CalibrationInput::default()).unwrap();
        assert!((r.delta.dr - delta::DEFAULT_DR).abs() < 1e-12);
        assert!((r.delta.z_off - delta::DEFAULT_Z_OFF).abs() < 1e-12);
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        let f = resolve_config("no_such_scenario").unwrap_err();
        assert_eq!(f.code(), EXIT_CONFIG);
        assert_eq!(resolve_config("walk_the_dog").unwrap().name, "walk_the_dog");
    }

    #[test]
    fn bench_files_take_defaults() {
        let b: SeaBench = toml::from_str("step = 2.0\n[sea]\nk = 50.0\n").unwrap();
        assert_eq!(b.step, 2.0);
        assert_eq!(b.sea.k, 50.0);
        assert_eq!(b.sea.tau_max, SeaParams::default().tau_max);
        assert!(toml::from_str::<SeaBench>("stepp = 2.0").is_err());
    }
}
