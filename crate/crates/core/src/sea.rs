//! Series-elastic joint: motor-side dynamics, spring torque estimate and
//! the torque PID loop, plus the blocked-joint step and frequency
//! experiments.
//!
//! The motor, gearhead and belt are lumped into one reflected inertia with
//! viscous damping on the joint side of the transmission. The standalone
//! motor integrator uses the implicit midpoint rule, so the discrete energy
//! balance is exact: spring + motor energy changes by exactly `u·Δβ` minus
//! the damping loss.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeaError {
    #[error("non-finite SEA input ({what})")]
    NonFinite { what: &'static str },
    #[error("unstable torque loop")]
    Unstable,
    #[error("time step too coarse for {freq_hz} Hz: {samples_per_cycle:.1} control samples per cycle (need 20)")]
    TooCoarse { freq_hz: f64, samples_per_cycle: f64 },
    #[error("invalid SEA parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    /// 1/s
    pub ki: f64,
    /// s
    pub kd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeaParams {
    /// Spring stiffness (N·m/rad).
    pub k: f64,
    /// Continuous torque limit; commands are clamped to ±tau_max (N·m).
    pub tau_max: f64,
    /// Saturation of the motor torque produced by the PID (N·m, joint side).
    pub motor_torque_limit: f64,
    /// Reflected motor inertia (kg·m²).
    pub motor_inertia: f64,
    /// Motor viscous damping (N·m·s/rad).
    pub motor_damping: f64,
    pub pid: PidGains,
    /// Torque loop rate (Hz).
    pub rate: f64,
    /// Absolute encoder resolution on each side of the spring.
    pub encoder_bits: u32,
    /// Quantize the torque estimate to encoder counts.
    pub quantize: bool,
}

impl Default for SeaParams {
    fn default() -> Self {
        Self {
            k: 60.1,
            tau_max: 9.0,
            motor_torque_limit: 30.0,
            motor_inertia: 0.02,
            motor_damping: 0.05,
            pid: PidGains {
                kp: 8.0,
                ki: 100.0,
                kd: 0.08,
            },
            rate: 800.0,
            encoder_bits: 23,
            quantize: false,
        }
    }
}

impl SeaParams {
    pub fn validate(&self) -> Result<(), SeaError> {
        let bad = |m: &str| Err(SeaError::InvalidParams(m.to_string()));
        if !(self.k > 0.0) {
            return bad("k must be positive");
        }
        if !(self.tau_max > 0.0 && self.motor_torque_limit > 0.0) {
            return bad("torque limits must be positive");
        }
        if !(self.motor_inertia > 0.0 && self.motor_damping >= 0.0) {
            return bad("motor inertia must be positive and damping non-negative");
        }
        if !(self.rate > 0.0) {
            return bad("rate must be positive");
        }
        Ok(())
    }

    /// Angle of one encoder count (rad).
    pub fn encoder_step(&self) -> f64 {
        2.0 * PI / 2f64.powi(self.encoder_bits as i32)
    }

    /// Torque quantum of the estimate, which differences two encoders.
    pub fn torque_resolution(&self) -> f64 {
        2.0 * self.k * self.encoder_step()
    }
}

/// State of one series-elastic joint.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SeaState {
    /// Motor-side angle after the transmission (rad).
    pub beta: f64,
    pub beta_dot: f64,
    /// Proximal joint angle (rad).
    pub theta: f64,
    /// PID integral (N·m·s).
    pub integ: f64,
    /// Motor torque currently applied (held between PID updates).
    pub motor_torque: f64,
    /// Previous torque measurement, for derivative-on-measurement.
    pub prev_measured: f64,
    /// Physics substeps since the last PID update.
    pub substep: u32,
    pub saturated: bool,
}

impl SeaState {
    pub fn at_rest(theta: f64, torque: f64, k: f64) -> Self {
        Self {
            beta: theta + torque / k,
            theta,
            prev_measured: torque,
            ..Default::default()
        }
    }

    /// Spring + motor kinetic energy.
    pub fn energy(&self, params: &SeaParams) -> f64 {
        let d = self.beta - self.theta;
        0.5 * params.k * d * d + 0.5 * params.motor_inertia * self.beta_dot * self.beta_dot
    }
}

fn quantize(angle: f64, step: f64) -> f64 {
    (angle / step).floor() * step
}

/// Joint torque estimate `k (β − θ)`, optionally at encoder resolution.
pub fn joint_torque(state: &SeaState, params: &SeaParams) -> f64 {
    if params.quantize {
        let s = params.encoder_step();
        params.k * (quantize(state.beta, s) - quantize(state.theta, s))
    } else {
        params.k * (state.beta - state.theta)
    }
}

/// Discrete PID on torque error with derivative on measurement and a
/// clamped integrator. Runs at `params.rate`.
#[derive(Debug, Clone, Copy)]
pub struct TorquePid;

impl TorquePid {
    /// One controller update. Returns the saturated motor torque and
    /// whether saturation was active.
    pub fn update(
        state: &mut SeaState,
        tau_cmd: f64,
        measured: f64,
        params: &SeaParams,
    ) -> (f64, bool) {
        let dt = 1.0 / params.rate;
        let tau_cmd = tau_cmd.clamp(-params.tau_max, params.tau_max);
        let err = tau_cmd - measured;
        let limit = params.motor_torque_limit;
        if params.pid.ki > 0.0 {
            let i_max = limit / params.pid.ki;
            state.integ = (state.integ + err * dt).clamp(-i_max, i_max);
        }
        let deriv = (measured - state.prev_measured) / dt;
        state.prev_measured = measured;
        let raw = params.pid.kp * err + params.pid.ki * state.integ - params.pid.kd * deriv;
        let out = raw.clamp(-limit, limit);
        (out, out != raw)
    }
}

/// Advance the motor by `dt` under a constant motor torque with the joint
/// held at `theta` (implicit midpoint).
pub fn integrate_motor(state: &mut SeaState, motor_torque: f64, theta: f64, dt: f64, params: &SeaParams) {
    let (i, b, k) = (params.motor_inertia, params.motor_damping, params.k);
    let a = dt * b / (2.0 * i) + dt * dt * k / (4.0 * i);
    let v0 = state.beta_dot;
    let v1 = (v0 * (1.0 - a) + dt / i * (motor_torque - k * (state.beta - theta))) / (1.0 + a);
    state.beta += 0.5 * dt * (v0 + v1);
    state.beta_dot = v1;
    state.theta = theta;
}

/// One physics step of a joint: run the PID when due, then integrate the
/// motor with the joint angle supplied by the outer solve.
pub fn step_sea(
    state: &SeaState,
    tau_cmd: f64,
    theta_external: f64,
    dt: f64,
    params: &SeaParams,
) -> Result<SeaState, SeaError> {
    if !tau_cmd.is_finite() {
        return Err(SeaError::NonFinite { what: "tau_cmd" });
    }
    if !theta_external.is_finite() {
        return Err(SeaError::NonFinite { what: "theta" });
    }
    let mut next = *state;
    let per_update = substeps_per_update(dt, params.rate);
    if next.substep == 0 {
        let measured = joint_torque(&next, params);
        let (u, sat) = TorquePid::update(&mut next, tau_cmd, measured, params);
        next.motor_torque = u;
        next.saturated = sat;
    }
    next.substep = (next.substep + 1) % per_update;
    let u = next.motor_torque;
    integrate_motor(&mut next, u, theta_external, dt, params);
    if !(next.beta.is_finite() && next.beta_dot.is_finite()) {
        return Err(SeaError::NonFinite { what: "state" });
    }
    Ok(next)
}

/// Physics substeps per controller update, at least one.
pub fn substeps_per_update(dt: f64, rate: f64) -> u32 {
    ((1.0 / (rate * dt)).round() as u32).max(1)
}

/// Physics step used by the blocked-joint experiments.
pub const EXPERIMENT_DT: f64 = 1.0 / 4000.0;

/// One sample of a blocked-joint experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeaSample {
    pub time: f64,
    pub command: f64,
    pub estimate: f64,
    pub beta: f64,
    pub theta: f64,
}

/// Simulate a blocked joint (θ ≡ 0) from rest under a command profile.
pub fn simulate_blocked<F: Fn(f64) -> f64>(
    params: &SeaParams,
    command: F,
    duration: f64,
    initial_torque: f64,
) -> Result<Vec<SeaSample>, SeaError> {
    params.validate()?;
    let n = (duration / EXPERIMENT_DT).round() as usize;
    let mut state = SeaState::at_rest(0.0, initial_torque, params.k);
    if params.pid.ki > 0.0 {
        // pre-load the integrator so an initial torque is an equilibrium
        state.integ = initial_torque / params.pid.ki;
    }
    let mut out = Vec::with_capacity(n + 1);
    // two orders of magnitude past the rating is a divergent loop
    let blowup = 100.0 * params.tau_max;
    for step in 0..=n {
        let t = step as f64 * EXPERIMENT_DT;
        let cmd = command(t);
        let est = joint_torque(&state, params);
        out.push(SeaSample {
            time: t,
            command: cmd,
            estimate: est,
            beta: state.beta,
            theta: state.theta,
        });
        if !est.is_finite() || est.abs() > blowup {
            return Err(SeaError::Unstable);
        }
        state = step_sea(&state, cmd, 0.0, EXPERIMENT_DT, params)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    /// Time after which the response stays within ±2% of the step (s).
    pub settling_time: f64,
    /// Peak excursion past the step as a fraction of the step.
    pub overshoot: f64,
    /// 10%–90% rise time (s).
    pub rise_time: f64,
}

/// Duration simulated for a step experiment.
pub const STEP_DURATION: f64 = 1.0;

/// Blocked-joint step response metrics for a step of `tau_step`.
pub fn blocked_step_response(params: &SeaParams, tau_step: f64) -> Result<StepMetrics, SeaError> {
    if tau_step == 0.0 {
        return Ok(StepMetrics {
            settling_time: 0.0,
            overshoot: 0.0,
            rise_time: 0.0,
        });
    }
    let samples = simulate_blocked(params, |_| tau_step, STEP_DURATION, 0.0)?;
    Ok(step_metrics(&samples, tau_step))
}

pub fn step_metrics(samples: &[SeaSample], tau_step: f64) -> StepMetrics {
    let band = 0.02 * tau_step.abs();
    let settling_time = samples
        .iter()
        .rev()
        .find(|s| (s.estimate - tau_step).abs() > band)
        .map(|s| s.time + EXPERIMENT_DT)
        .unwrap_or(0.0);
    let peak = samples
        .iter()
        .map(|s| s.estimate * tau_step.signum())
        .fold(f64::NEG_INFINITY, f64::max);
    let overshoot = ((peak - tau_step.abs()) / tau_step.abs()).max(0.0);
    let cross = |frac: f64| {
        samples
            .iter()
            .find(|s| s.estimate * tau_step.signum() >= frac * tau_step.abs())
            .map(|s| s.time)
            .unwrap_or(f64::INFINITY)
    };
    StepMetrics {
        settling_time,
        overshoot,
        rise_time: cross(0.9) - cross(0.1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FreqPoint {
    pub freq_hz: f64,
    pub magnitude_db: f64,
    pub phase_deg: f64,
}

/// Cycles discarded before measuring, and cycles measured.
const SETTLE_CYCLES: f64 = 12.0;
const MEASURE_CYCLES: f64 = 10.0;

/// Blocked-joint response to `offset + amplitude·sin(2πft)` at each
/// frequency, extracted by single-bin correlation. A frequency of zero
/// returns the DC gain of the offset alone.
pub fn blocked_freq_response(
    params: &SeaParams,
    freqs: &[f64],
    offset: f64,
    amplitude: f64,
) -> Result<Vec<FreqPoint>, SeaError> {
    freqs
        .iter()
        .map(|&f| {
            if f == 0.0 {
                let samples = simulate_blocked(params, |_| offset, 1.0, 0.0)?;
                let last = samples.last().map(|s| s.estimate).unwrap_or(0.0);
                return Ok(FreqPoint {
                    freq_hz: 0.0,
                    magnitude_db: 20.0 * (last / offset).abs().log10(),
                    phase_deg: 0.0,
                });
            }
            let spc = params.rate / f;
            if spc < 20.0 {
                return Err(SeaError::TooCoarse {
                    freq_hz: f,
                    samples_per_cycle: spc,
                });
            }
            let w = 2.0 * PI * f;
            let t_meas = MEASURE_CYCLES / f;
            let t0 = SETTLE_CYCLES / f;
            let samples = simulate_blocked(
                params,
                |t| offset + amplitude * (w * t).sin(),
                t0 + t_meas,
                offset,
            )?;
            let (mut re, mut im, mut n) = (0.0, 0.0, 0usize);
            for s in samples.iter().filter(|s| s.time >= t0 && s.time < t0 + t_meas) {
                let y = s.estimate - offset;
                re += y * (w * s.time).sin();
                im += y * (w * s.time).cos();
                n += 1;
            }
            let gain = 2.0 * (re * re + im * im).sqrt() / n as f64 / amplitude;
            Ok(FreqPoint {
                freq_hz: f,
                magnitude_db: 20.0 * gain.log10(),
                phase_deg: im.atan2(re).to_degrees(),
            })
        })
        .collect()
}

/// First −3 dB crossing of the blocked response, by a coarse sweep followed
/// by bisection on frequency.
pub fn bandwidth_hz(params: &SeaParams, offset: f64, amplitude: f64) -> Result<f64, SeaError> {
    let max_f = params.rate / 20.0;
    let mag = |f: f64| -> Result<f64, SeaError> {
        Ok(blocked_freq_response(params, &[f], offset, amplitude)?[0].magnitude_db)
    };
    let mut lo = 1.0;
    let mut hi = None;
    let mut f = 2.0;
    while f <= max_f {
        if mag(f)? < -3.0 {
            hi = Some(f);
            break;
        }
        lo = f;
        f += 2.0;
    }
    let mut hi = hi.ok_or(SeaError::TooCoarse {
        freq_hz: max_f,
        samples_per_cycle: 20.0,
    })?;
    for _ in 0..12 {
        let m = 0.5 * (lo + hi);
        if mag(m)? < -3.0 {
            hi = m;
        } else {
            lo = m;
        }
    }
    Ok(0.5 * (lo + hi))
}
