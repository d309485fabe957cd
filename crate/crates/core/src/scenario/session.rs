//! A world with its humans attached. Scripted humans follow their
//! profiles; interactive ones hold the last commanded wrench. Live
//! commands are queued and take effect at the next control tick, so a
//! recorded command log replays the run exactly.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ScenarioConfig;
use super::profile::human_wrench;
use super::ScenarioError;
use crate::manip_ctrl::FloatMode;
use crate::multibody::{MbError, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    /// Set the wrench of an interactive human, world frame.
    ApplyWrench {
        grip: String,
        force: Vector3<f64>,
        #[serde(default = "Vector3::zeros")]
        moment: Vector3<f64>,
    },
    SetMode {
        robot: usize,
        mode: FloatMode,
    },
    Pause,
    Resume,
    Reset,
}

/// A command and the tick at which it took effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedCommand {
    pub tick: u64,
    pub command: Command,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommandError {
    #[error("no human named '{0}'")]
    UnknownGrip(String),
    #[error("human '{0}' follows a scripted profile")]
    Scripted(String),
    #[error("no robot {0}")]
    UnknownRobot(usize),
    #[error("wrench must be finite")]
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct Session {
    config: ScenarioConfig,
    pub world: World,
    rng: ChaCha8Rng,
    /// Commanded wrench per human, after clamping.
    live: Vec<(Vector3<f64>, Vector3<f64>)>,
    clamped: Vec<bool>,
    pending: Vec<Command>,
    log: Vec<LoggedCommand>,
    paused: bool,
    warned: bool,
}

impl Session {
    pub fn new(config: ScenarioConfig) -> Result<Self, ScenarioError> {
        config.validate()?;
        let world = config.build_world()?;
        let n = config.humans.len();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            world,
            live: vec![(Vector3::zeros(), Vector3::zeros()); n],
            clamped: vec![false; n],
            pending: vec![],
            log: vec![],
            paused: false,
            warned: false,
            config,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    /// Whether the last wrench command of each human was clamped.
    pub fn wrench_clamped(&self) -> &[bool] {
        &self.clamped
    }

    pub fn command_log(&self) -> &[LoggedCommand] {
        &self.log
    }

    /// Total ticks of the configured duration.
    pub fn end_tick(&self) -> u64 {
        (self.config.duration * self.config.rates.physics).round() as u64
    }

    /// Validate and queue a command. Pause, resume and reset act at once;
    /// the rest wait for the next control tick.
    pub fn submit(&mut self, cmd: Command) -> Result<(), CommandError> {
        match &cmd {
            Command::ApplyWrench { grip, force, moment } => {
                let h = self
                    .config
                    .humans
                    .iter()
                    .find(|h| &h.name == grip)
                    .ok_or_else(|| CommandError::UnknownGrip(grip.clone()))?;
                if !h.profile.is_interactive() {
                    return Err(CommandError::Scripted(grip.clone()));
                }
                if !force.iter().chain(moment.iter()).all(|x| x.is_finite()) {
                    return Err(CommandError::NonFinite);
                }
            }
            Command::SetMode { robot, .. } => {
                if *robot >= self.config.robots.len() {
                    return Err(CommandError::UnknownRobot(*robot));
                }
            }
            Command::Pause | Command::Resume | Command::Reset => {
                self.apply(cmd);
                return Ok(());
            }
        }
        self.pending.push(cmd);
        Ok(())
    }

    fn apply(&mut self, cmd: Command) {
        self.log.push(LoggedCommand {
            tick: self.world.tick,
            command: cmd.clone(),
        });
        match cmd {
            Command::ApplyWrench { grip, force, moment } => {
                if let Some(i) = self.config.humans.iter().position(|h| h.name == grip) {
                    let lim = self.config.safety;
                    let f = clamp_norm(force, lim.max_force);
                    let m = clamp_norm(moment, lim.max_moment);
                    self.clamped[i] = f != force || m != moment;
                    self.live[i] = (f, m);
                }
            }
            Command::SetMode { robot, mode } => {
                // robot index checked on submit
                let _ = self.world.set_mode(robot, mode);
            }
            Command::Pause => self.paused = true,
            Command::Resume => self.paused = false,
            Command::Reset => {
                self.world = self.config.build_world().expect("configuration was validated");
                self.rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                self.live.iter_mut().for_each(|w| *w = (Vector3::zeros(), Vector3::zeros()));
                self.clamped.iter_mut().for_each(|c| *c = false);
                self.pending.clear();
            }
        }
    }

    fn update_humans(&mut self) {
        let t = self.world.time();
        for (i, h) in self.config.humans.iter().enumerate() {
            let (mut f, m) = if h.profile.is_interactive() {
                self.live[i]
            } else {
                let w = human_wrench(&h.profile, t);
                (w.force, w.moment)
            };
            if h.noise_std > 0.0 {
                let n: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut self.rng));
                f += Vector3::from(n) * h.noise_std;
            }
            self.world.hands[i].force = f;
            self.world.hands[i].moment = m;
        }
    }

    /// One physics tick. Queued commands and human wrenches update on
    /// control ticks.
    pub fn step(&mut self) -> Result<(), MbError> {
        if self.world.tick.is_multiple_of(self.world.control_divisor()) {
            for cmd in std::mem::take(&mut self.pending) {
                self.apply(cmd);
            }
            self.update_humans();
        }
        self.world.step()
    }

    /// Step to the end tick, submitting logged commands at their ticks.
    /// Pause and resume entries are skipped: they never touch the physics.
    pub fn replay(
        &mut self,
        commands: &[LoggedCommand],
        end_tick: u64,
        mut each: impl FnMut(&Session) -> Result<(), MbError>,
    ) -> Result<(), MbError> {
        if !self.warned && commands.is_empty() {
            self.warn_interactive();
        }
        let mut next = 0;
        loop {
            while let Some(entry) = commands.get(next).filter(|e| e.tick <= self.world.tick) {
                if entry.tick < self.world.tick {
                    log::warn!("skipping command logged for past tick {}", entry.tick);
                } else {
                    match &entry.command {
                        Command::Pause | Command::Resume => {}
                        Command::Reset => self.apply(Command::Reset),
                        // entries come from a validated session
                        other => drop(self.submit(other.clone())),
                    }
                }
                next += 1;
            }
            if self.world.tick >= end_tick && next == commands.len() {
                break;
            }
            self.step()?;
            each(self)?;
        }
        Ok(())
    }

    fn warn_interactive(&mut self) {
        for h in &self.config.humans {
            if h.profile.is_interactive() {
                log::warn!("human '{}' is interactive; it applies no wrench in a batch run", h.name);
            }
        }
        self.warned = true;
    }
}

fn clamp_norm(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}
