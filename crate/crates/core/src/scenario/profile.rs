//! Scripted human wrenches. Every profile is a deterministic function of
//! time; `Interactive` grips take their wrench from live commands instead.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::spatial::{Frame, Wrench};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Knot {
    pub t: f64,
    pub force: Vector3<f64>,
    #[serde(default = "Vector3::zeros")]
    pub moment: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WrenchProfile {
    Constant {
        force: Vector3<f64>,
        #[serde(default = "Vector3::zeros")]
        moment: Vector3<f64>,
    },
    /// Zero until `start`, linear to the full wrench over `ramp` seconds,
    /// then held.
    RampHold {
        force: Vector3<f64>,
        #[serde(default = "Vector3::zeros")]
        moment: Vector3<f64>,
        #[serde(default)]
        start: f64,
        ramp: f64,
    },
    /// Linear chirp from `f0` to `f1` Hz over `length` seconds after
    /// `start`; zero outside that window.
    SineSweep {
        amplitude: Vector3<f64>,
        #[serde(default = "Vector3::zeros")]
        moment_amplitude: Vector3<f64>,
        f0: f64,
        f1: f64,
        #[serde(default)]
        start: f64,
        length: f64,
    },
    /// Linear interpolation between knots, constant outside them.
    PiecewiseLinear { knots: Vec<Knot> },
    Interactive,
}

impl WrenchProfile {
    pub fn validate(&self) -> Result<(), String> {
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        match self {
            Self::Constant { force, moment } => {
                if !(finite(force) && finite(moment)) {
                    return Err("wrench must be finite".into());
                }
            }
            Self::RampHold {
                force,
                moment,
                start,
                ramp,
            } => {
                if !(finite(force) && finite(moment) && start.is_finite()) {
                    return Err("wrench and start must be finite".into());
                }
                if !(*ramp >= 0.0 && ramp.is_finite()) {
                    return Err("ramp must be non-negative".into());
                }
            }
            Self::SineSweep {
                amplitude,
                moment_amplitude,
                f0,
                f1,
                start,
                length,
            } => {
                if !(finite(amplitude) && finite(moment_amplitude) && start.is_finite()) {
                    return Err("amplitudes and start must be finite".into());
                }
                if !(*f0 >= 0.0 && *f1 >= 0.0 && f0.is_finite() && f1.is_finite()) {
                    return Err("sweep frequencies must be non-negative".into());
                }
                if !(*length > 0.0 && length.is_finite()) {
                    return Err("sweep length must be positive".into());
                }
            }
            Self::PiecewiseLinear { knots } => {
                if knots.is_empty() {
                    return Err("knots must not be empty".into());
                }
                if knots.iter().any(|k| !(k.t.is_finite() && finite(&k.force) && finite(&k.moment))) {
                    return Err("knots must be finite".into());
                }
                if knots.windows(2).any(|w| w[1].t <= w[0].t) {
                    return Err("knot times must be strictly increasing".into());
                }
            }
            Self::Interactive => {}
        }
        Ok(())
    }

    pub fn is_interactive(&self) -> bool {
        matches!(self, Self::Interactive)
    }

    /// Instantaneous sweep frequency (Hz); `None` outside the sweep or for
    /// other profiles.
    pub fn sweep_frequency(&self, t: f64) -> Option<f64> {
        match self {
            Self::SineSweep {
                f0,
                f1,
                start,
                length,
                ..
            } => {
                let tau = t - start;
                (0.0..=*length).contains(&tau).then(|| f0 + (f1 - f0) * tau / length)
            }
            _ => None,
        }
    }
}

/// Wrench of a profile at time `t`, world frame. `Interactive` profiles
/// give zero here; the live session substitutes the commanded wrench.
pub fn human_wrench(profile: &WrenchProfile, t: f64) -> Wrench {
    let (force, moment) = match profile {
        WrenchProfile::Constant { force, moment } => (*force, *moment),
        WrenchProfile::RampHold {
            force,
            moment,
            start,
            ramp,
        } => {
            let s = if t < *start {
                0.0
            } else if *ramp == 0.0 {
                1.0
            } else {
                ((t - start) / ramp).min(1.0)
            };
            (force * s, moment * s)
        }
        WrenchProfile::SineSweep {
            amplitude,
            moment_amplitude,
            f0,
            f1,
            start,
            length,
        } => {
            let tau = t - start;
            if (0.0..=*length).contains(&tau) {
                let s = (TAU * (f0 * tau + 0.5 * (f1 - f0) * tau * tau / length)).sin();
                (amplitude * s, moment_amplitude * s)
            } else {
                (Vector3::zeros(), Vector3::zeros())
            }
        }
        WrenchProfile::PiecewiseLinear { knots } => interpolate(knots, t),
        WrenchProfile::Interactive => (Vector3::zeros(), Vector3::zeros()),
    };
    Wrench::new(moment, force, Frame::World)
}

fn interpolate(knots: &[Knot], t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let (first, last) = match (knots.first(), knots.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return (Vector3::zeros(), Vector3::zeros()),
    };
    if t <= first.t {
        return (first.force, first.moment);
    }
    if t >= last.t {
        return (last.force, last.moment);
    }
    let i = knots.partition_point(|k| k.t <= t);
    let (a, b) = (&knots[i - 1], &knots[i]);
    let s = (t - a.t) / (b.t - a.t);
    (a.force.lerp(&b.force, s), a.moment.lerp(&b.moment, s))
}
