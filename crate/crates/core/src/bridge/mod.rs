//! Live link between a running world and a browser cockpit over a
//! websocket. See `docs/protocol.md` for the message schema.

pub mod message;
pub mod server;

use thiserror::Error;

use crate::scenario::ScenarioError;

pub use message::{
    decode_client, decode_command, decode_frame, decode_server, encode, encode_client, encode_frame, ClientMessage,
    DecodeError, ErrorMessage, Hello, HumanFrame, HumanInfo, PoseFrame, RobotFrame, RobotInfo, ServerMessage,
    TelemetryFrame, DRAG_STIFFNESS, PROTOCOL_VERSION,
};
pub use server::{Bridge, ServeOptions, ServeReport, COMMANDS_JSONL, DEFAULT_PORT, PORT_ENV};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("cannot listen on {0}")]
    Bind(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}
