//! Newline-delimited JSON messages exchanged with session clients.
//!
//! Every message is one JSON object on one line with a `type` field. Unknown
//! fields are ignored; unknown types and malformed lines are parse errors.

use serde::{Deserialize, Serialize};

use ghostgrid::disruption::DisruptionKind;
use ghostgrid::env::{Action, Cell, DoneReason, GridConfig};
use ghostgrid::ghost::{Ghost, GhostColor, GhostKind};
use ghostgrid::ids::{DisruptionId, TrajectoryId};
use ghostgrid::taxonomy::FailureMode;
use ghostgrid::ValidationReason;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhostView {
    pub id: String,
    pub kind: GhostKind,
    pub alpha: f64,
    pub color: GhostColor,
    pub source_episode: u64,
    pub path: Vec<Cell>,
}

impl From<&Ghost> for GhostView {
    fn from(g: &Ghost) -> Self {
        GhostView {
            id: g.id.clone(),
            kind: g.kind,
            alpha: g.alpha,
            color: g.color,
            source_episode: g.source_episode,
            path: g.path(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    #[serde(rename = "E_PARSE")]
    Parse,
    #[serde(rename = "E_VALIDATION")]
    Validation,
    #[serde(rename = "E_STATE")]
    State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    SessionHello {
        session_id: String,
        protocol_version: u32,
        grid_config: GridConfig,
        tick_rate_hz: u32,
    },
    StateUpdate {
        tick: u32,
        episode: u64,
        agent: Cell,
        last_action: Action,
        reward: f64,
        cumulative_return: f64,
        done: bool,
        done_reason: DoneReason,
        /// Current goal, so clients see relocations without a config message.
        goal: Cell,
    },
    GhostUpdate {
        ghosts: Vec<GhostView>,
    },
    MetricsUpdate {
        episode: u64,
        greedy_return: f64,
        epsilon: f64,
        live_failure_mode: Option<FailureMode>,
        trajectory_id: TrajectoryId,
    },
    DisruptionAck {
        id: DisruptionId,
        applied_at_tick: u32,
        grid_config: GridConfig,
    },
    LabelAck {
        trajectory_id: TrajectoryId,
    },
    Error {
        code: ErrorCode,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<ValidationReason>,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
            reason: None,
        }
    }

    /// Maps a library error onto the three wire error codes.
    pub fn from_error(e: &ghostgrid::Error) -> Self {
        let code = match e.code() {
            "E_PARSE" => ErrorCode::Parse,
            "E_STATE" | "E_DONE" | "E_IO" => ErrorCode::State,
            _ => ErrorCode::Validation,
        };
        ServerMessage::Error {
            code,
            message: e.to_string(),
            reason: e.reason(),
        }
    }

    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("server messages always serialize");
        line.push('\n');
        line
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCmd {
    Pause,
    Resume,
    Step,
    SetSpeed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Disruption {
        #[serde(flatten)]
        kind: DisruptionKind,
        /// Rater or operator id of the human issuing the disruption.
        author: String,
    },
    Label {
        trajectory_id: TrajectoryId,
        failure_mode: FailureMode,
        rater_id: String,
    },
    Control {
        cmd: ControlCmd,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
    },
}

impl ClientMessage {
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("client messages always serialize");
        line.push('\n');
        line
    }
}

/// Parses one client line; the error is ready to send back.
#[allow(clippy::result_large_err)]
pub fn parse_client(line: &str) -> Result<ClientMessage, ServerMessage> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|e| ServerMessage::error(ErrorCode::Parse, format!("malformed message: {e}")))
}

pub fn parse_server(line: &str) -> Result<ServerMessage, serde_json::Error> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
}
