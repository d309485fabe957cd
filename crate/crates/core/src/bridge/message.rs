//! Wire messages. Every message is one JSON text with a `type` tag and a
//! `version`. Decoders ignore fields they do not know and accept any
//! version from 1 up, so newer peers can add fields freely.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::manip_ctrl::FloatMode;
use crate::multibody::{manipulability, RANK_TOL};
use crate::scenario::{Command, HumanTarget, SafetyLimits, Session};

pub const PROTOCOL_VERSION: u32 = 1;

/// Stiffness of the virtual spring a pointer drag creates (N/m).
pub const DRAG_STIFFNESS: f64 = 200.0;

/// Frame values are rounded to this many decimals (µm, µrad, mN).
const FRAME_DECIMALS: i32 = 6;

fn v1() -> u32 {
    PROTOCOL_VERSION
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("{0}")]
pub struct DecodeError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotInfo {
    pub base_pose: Vector3<f64>,
    /// Workspace sphere center in the chassis frame (m).
    pub workspace_center: Vector3<f64>,
    pub workspace_radius: f64,
    /// Width of the repulsion band inside the sphere (m).
    pub rest_band: f64,
    /// Height band of approximate float (m).
    pub eps: f64,
    pub mode: FloatMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanInfo {
    pub name: String,
    pub target: HumanTarget,
    /// Whether the human takes `apply_wrench` commands.
    pub interactive: bool,
}

/// Sent once to every client on connect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    #[serde(default = "v1")]
    pub version: u32,
    pub scenario: String,
    pub physics_rate: f64,
    pub frame_rate: f64,
    pub safety: SafetyLimits,
    pub drag_stiffness: f64,
    pub robots: Vec<RobotInfo>,
    pub humans: Vec<HumanInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub position: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`.
    pub orientation: Vector4<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotFrame {
    /// `(x, y, φ)`
    pub base_pose: Vector3<f64>,
    pub wrist: Vector3<f64>,
    pub theta: Vector3<f64>,
    pub alpha: Vector3<f64>,
    pub sea_torque: Vector3<f64>,
    pub f_com: Vector3<f64>,
    /// A joint torque command hit its limit this tick.
    pub clamped: bool,
    pub mode: FloatMode,
    pub z0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanFrame {
    pub name: String,
    pub position: Vector3<f64>,
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
    /// The last live command for this human was clamped to the safety bound.
    pub clamped: bool,
}

/// Snapshot of a running world. Frames are independent: a client that
/// misses some loses nothing but time resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    #[serde(default = "v1")]
    pub version: u32,
    pub tick: u64,
    pub time: f64,
    pub paused: bool,
    pub payload: Vec<PoseFrame>,
    pub hinge_angle: Option<f64>,
    pub robots: Vec<RobotFrame>,
    pub humans: Vec<HumanFrame>,
    /// Rank of the payload control map at this configuration.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    #[serde(default = "v1")]
    pub version: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello(Hello),
    Frame(TelemetryFrame),
    Error(ErrorMessage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        #[serde(default = "v1")]
        version: u32,
        #[serde(default)]
        client: String,
    },
    Command {
        #[serde(default = "v1")]
        version: u32,
        command: Command,
    },
}

impl ClientMessage {
    pub fn command(command: Command) -> Self {
        ClientMessage::Command {
            version: PROTOCOL_VERSION,
            command,
        }
    }

    fn version(&self) -> u32 {
        match self {
            ClientMessage::Hello { version, .. } | ClientMessage::Command { version, .. } => *version,
        }
    }
}

impl ServerMessage {
    fn version(&self) -> u32 {
        match self {
            ServerMessage::Hello(h) => h.version,
            ServerMessage::Frame(f) => f.version,
            ServerMessage::Error(e) => e.version,
        }
    }
}

fn check_version(v: u32) -> Result<(), DecodeError> {
    if v == 0 {
        return Err(DecodeError("unsupported protocol version 0".into()));
    }
    Ok(())
}

pub fn encode(msg: &ServerMessage) -> String {
    serde_json::to_string(msg).expect("messages serialize")
}

pub fn encode_frame(frame: &TelemetryFrame) -> String {
    encode(&ServerMessage::Frame(frame.clone()))
}

pub fn encode_client(msg: &ClientMessage) -> String {
    serde_json::to_string(msg).expect("messages serialize")
}

pub fn decode_server(bytes: &[u8]) -> Result<ServerMessage, DecodeError> {
    let msg: ServerMessage = serde_json::from_slice(bytes).map_err(|e| DecodeError(e.to_string()))?;
    check_version(msg.version())?;
    Ok(msg)
}

pub fn decode_frame(bytes: &[u8]) -> Result<TelemetryFrame, DecodeError> {
    match decode_server(bytes)? {
        ServerMessage::Frame(f) => Ok(f),
        _ => Err(DecodeError("not a frame".into())),
    }
}

pub fn decode_client(bytes: &[u8]) -> Result<ClientMessage, DecodeError> {
    let msg: ClientMessage = serde_json::from_slice(bytes).map_err(|e| DecodeError(e.to_string()))?;
    check_version(msg.version())?;
    Ok(msg)
}

pub fn decode_command(bytes: &[u8]) -> Result<Command, DecodeError> {
    match decode_client(bytes)? {
        ClientMessage::Command { command, .. } => Ok(command),
        _ => Err(DecodeError("not a command".into())),
    }
}

fn round(x: f64) -> f64 {
    let s = 10f64.powi(FRAME_DECIMALS);
    let r = (x * s).round() / s;
    // keep the sign of tiny values out of the encoding
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn round_v<const D: usize>(v: &nalgebra::SVector<f64, D>) -> nalgebra::SVector<f64, D> {
    v.map(round)
}

impl Hello {
    pub fn new(session: &Session, frame_rate: f64) -> Self {
        let cfg = session.config();
        Hello {
            version: PROTOCOL_VERSION,
            scenario: cfg.name.clone(),
            physics_rate: cfg.rates.physics,
            frame_rate,
            safety: cfg.safety,
            drag_stiffness: DRAG_STIFFNESS,
            robots: cfg
                .robots
                .iter()
                .zip(&session.world.controllers)
                .map(|(r, c)| {
                    let delta = &r.model.manip.delta;
                    RobotInfo {
                        base_pose: r.base_pose,
                        workspace_center: r.model.mount + delta.home_position(),
                        workspace_radius: delta.workspace_radius,
                        rest_band: r.gains.rest_band,
                        eps: r.gains.eps,
                        mode: c.state.mode,
                    }
                })
                .collect(),
            humans: cfg
                .humans
                .iter()
                .map(|h| HumanInfo {
                    name: h.name.clone(),
                    target: h.target.clone(),
                    interactive: h.profile.is_interactive(),
                })
                .collect(),
        }
    }
}

impl TelemetryFrame {
    /// Frame of the session's current state, rounded for the wire.
    pub fn capture(session: &Session) -> Self {
        let w = &session.world;
        let snap = w.snapshot();
        let rank = if w.models.payload.bodies.is_empty() {
            None
        } else {
            manipulability(&w.state, &w.models, RANK_TOL).ok()
        };
        let clamped = session.wrench_clamped();
        TelemetryFrame {
            version: PROTOCOL_VERSION,
            tick: snap.tick,
            time: snap.time,
            paused: session.paused(),
            payload: snap
                .payload
                .iter()
                .map(|b| PoseFrame {
                    position: round_v(&b.position),
                    orientation: round_v(&b.orientation),
                })
                .collect(),
            hinge_angle: snap.hinge_angle.map(round),
            robots: snap
                .robots
                .iter()
                .map(|r| RobotFrame {
                    base_pose: round_v(&r.base_pose),
                    wrist: round_v(&r.wrist),
                    theta: round_v(&r.theta),
                    alpha: round_v(&r.alpha),
                    sea_torque: round_v(&r.sea_torque),
                    f_com: round_v(&r.f_com),
                    clamped: r.clamped,
                    mode: r.mode,
                    z0: round(r.z0),
                })
                .collect(),
            humans: snap
                .hands
                .iter()
                .enumerate()
                .map(|(i, h)| HumanFrame {
                    name: h.name.clone(),
                    position: round_v(&h.position),
                    force: round_v(&h.force),
                    moment: round_v(&h.moment),
                    clamped: clamped.get(i).copied().unwrap_or(false),
                })
                .collect(),
            rank,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::presets;
    use proptest::prelude::*;

    fn running(cfg: crate::scenario::ScenarioConfig, ticks: u64) -> Session {
        let mut s = Session::new(cfg).unwrap();
        for _ in 0..ticks {
            s.step().unwrap();
        }
        s
    }

    #[test]
    fn frame_round_trips() {
        let s = running(presets::hinged_two_humans(), 2000);
        let f = TelemetryFrame::capture(&s);
        assert_eq!(decode_frame(encode_frame(&f).as_bytes()).unwrap(), f);
        assert!(f.hinge_angle.is_some());
        assert_eq!(f.rank, Some(7));
    }

    #[test]
    fn three_robot_frame_is_small() {
        let s = running(presets::pvc_float(), 6000);
        let bytes = encode_frame(&TelemetryFrame::capture(&s)).len();
        // 30 frames a second stays far below a megabit
        assert!(bytes < 2048, "{bytes} bytes");
        assert!(bytes * 30 * 8 < 1_000_000);
    }

    #[test]
    fn newer_messages_with_extra_fields_decode() {
        let cmd = r#"{"type":"command","version":2,"sent_at":17.5,
            "command":{"kind":"apply_wrench","grip":"left_hand","force":[1,2,3],"moment":[0,0,0],"spring":{"k":200}}}"#;
        assert_eq!(
            decode_command(cmd.as_bytes()).unwrap(),
            Command::ApplyWrench {
                grip: "left_hand".into(),
                force: Vector3::new(1.0, 2.0, 3.0),
                moment: Vector3::zeros(),
            }
        );
        let s = running(presets::walk_the_dog(), 10);
        let mut v = serde_json::to_value(ServerMessage::Frame(TelemetryFrame::capture(&s))).unwrap();
        v["version"] = 2.into();
        v["contacts"] = serde_json::json!([{"robot": 0}]);
        v["robots"][0]["battery"] = 0.8.into();
        assert!(decode_frame(v.to_string().as_bytes()).is_ok());
    }

    #[test]
    fn missing_moment_defaults_to_zero() {
        let cmd = r#"{"type":"command","version":1,"command":{"kind":"apply_wrench","grip":"g","force":[1,0,0]}}"#;
        assert!(matches!(
            decode_command(cmd.as_bytes()).unwrap(),
            Command::ApplyWrench { moment, .. } if moment == Vector3::zeros()
        ));
    }

    #[test]
    fn malformed_messages_are_rejected_with_a_reason() {
        for bad in [
            "",
            "not json",
            r#"{"type":"command","version":1}"#,
            r#"{"type":"launch","version":1}"#,
            r#"{"type":"command","version":0,"command":{"kind":"pause"}}"#,
            r#"{"type":"command","version":1,"command":{"kind":"set_mode","robot":0,"mode":"Hover"}}"#,
        ] {
            let e = decode_command(bad.as_bytes()).unwrap_err();
            assert!(!e.0.is_empty(), "{bad}");
        }
        assert!(decode_command(br#"{"type":"hello","version":1}"#).is_err());
    }

    #[test]
    fn hello_lists_interactive_humans() {
        let mut cfg = presets::hinged_two_humans();
        cfg.humans[1].profile = crate::scenario::WrenchProfile::Interactive;
        let s = Session::new(cfg).unwrap();
        let h = Hello::new(&s, 30.0);
        let flags: Vec<_> = h.humans.iter().map(|h| h.interactive).collect();
        assert_eq!(flags, [false, true]);
        assert_eq!(h.robots.len(), 3);
        assert_eq!(h.drag_stiffness, 200.0);
        let back = decode_server(encode(&ServerMessage::Hello(h.clone())).as_bytes()).unwrap();
        assert_eq!(back, ServerMessage::Hello(h));
    }

    fn arb_command() -> impl Strategy<Value = Command> {
        let v = || prop::array::uniform3(-1e3f64..1e3).prop_map(Vector3::from);
        prop_oneof![
            ("[a-z_]{1,12}", v(), v()).prop_map(|(grip, force, moment)| Command::ApplyWrench { grip, force, moment }),
            (0usize..8, prop::bool::ANY).prop_map(|(robot, f)| Command::SetMode {
                robot,
                mode: if f { FloatMode::Float } else { FloatMode::ApproxFloat },
            }),
            Just(Command::Pause),
            Just(Command::Resume),
            Just(Command::Reset),
        ]
    }

    proptest! {
        #[test]
        fn commands_round_trip(cmd in arb_command()) {
            let text = encode_client(&ClientMessage::command(cmd.clone()));
            prop_assert_eq!(decode_command(text.as_bytes()).unwrap(), cmd);
        }

        #[test]
        fn rounding_is_stable(x in -1e4f64..1e4) {
            let r = round(x);
            prop_assert_eq!(round(r), r);
            let back: f64 = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
