//! WebSocket message schema.
//!
//! Every frame is a JSON object `{type, seq, t, version, payload}`. Clients
//! send commands; the server sends `telemetry`, `ack` and `error` frames.
//! Unknown fields are ignored.
//!
//! ```json
//! {"type":"apply_wrench","seq":7,"t":0.0,"version":1,"payload":{"wrench":[10,0,0,0,0,0]}}
//! {"type":"set_reference","seq":8,"version":1,"payload":{"position":[0.5,0,0.5],"rpy":[0,0,0]}}
//! {"type":"toggle_governor","seq":9,"version":1,"payload":{"enabled":false}}
//! {"type":"pause","seq":10,"version":1,"payload":{"paused":true}}
//! {"type":"reset","seq":11,"version":1}
//! ```

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use cwbc_core::sim::StepRecord;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("missing or invalid field '{0}'")]
    Field(&'static str),
    #[error("unsupported protocol version {0}, expected {PROTOCOL_VERSION}")]
    Version(u64),
    #[error("unknown message type '{0}'")]
    UnknownType(String),
    #[error("invalid payload for '{kind}': {reason}")]
    Payload { kind: String, reason: String },
    #[error("'{0}' is not a client command")]
    NotACommand(String),
}

impl ProtocolError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Malformed(_) => "malformed",
            Self::Field(_) => "missing_field",
            Self::Version(_) => "unsupported_version",
            Self::UnknownType(_) => "unknown_type",
            Self::Payload { .. } => "invalid_payload",
            Self::NotACommand(_) => "not_a_command",
        }
    }
}

/// Extra sensor-frame wrench added to the scripted profile until replaced;
/// all zeros releases it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApplyWrench {
    pub wrench: [f64; 6],
}

/// World-frame end-effector reference pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetReference {
    /// m
    pub position: [f64; 3],
    /// Roll, pitch, yaw in rad.
    pub rpy: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToggleGovernor {
    pub enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pause {
    pub paused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    /// `seq` of the command that was applied.
    pub ack: u64,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFrame {
    pub code: String,
    pub message: String,
    /// `seq` of the offending frame when it could be read.
    #[serde(default)]
    pub ack: Option<u64>,
}

/// One controller tick as streamed to subscribers. Twists are world-frame
/// `[v; w]`; per-axis arrays are ordered `[x, y, z, yaw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session: String,
    /// Incremented by every reset.
    pub run: u64,
    pub tick: u64,
    pub paused: bool,
    pub governor: bool,
    pub estimator: String,
    pub cmd: [f64; 6],
    pub achieved: [f64; 6],
    pub ee: [f64; 4],
    pub base: [f64; 4],
    pub base_twist: [f64; 6],
    pub base_estimate: [f64; 6],
    /// Estimator covariance diagonal, `[w; v]`.
    pub p_diag: [f64; 6],
    pub p_min_eig: f64,
    /// Sensor frame.
    pub sensed: [f64; 6],
    pub net_wrench: [f64; 6],
    /// Operator wrench currently added in the sensor frame.
    pub applied_wrench: [f64; 6],
    pub ref_raw: [f64; 4],
    pub ref_wrench_raw: [f64; 4],
    pub ref_gov: [f64; 4],
    pub ref_wrench_gov: [f64; 4],
    /// -1 ungoverned, 0 admissible, 1 governed, 2 infeasible.
    pub verdict: [i8; 4],
    /// Violation bitmask per axis: 1 position, 2 velocity, 4 wrench, 8 kinematic.
    pub violations: [u8; 4],
    /// Ticks with any violation since the last reset.
    pub violation_ticks: u64,
    /// Recent `cmd - achieved`, oldest first.
    pub tracking_error: Vec<[f64; 6]>,
}

impl Snapshot {
    pub fn from_record(r: &StepRecord) -> Self {
        Self {
            session: String::new(),
            run: 0,
            tick: 0,
            paused: false,
            governor: false,
            estimator: String::new(),
            cmd: r.cmd,
            achieved: r.achieved,
            ee: r.ee,
            base: r.base,
            base_twist: r.base_twist,
            base_estimate: r.base_estimate,
            p_diag: r.p_diag,
            p_min_eig: r.p_min_eig,
            sensed: r.sensed,
            net_wrench: r.net_wrench,
            applied_wrench: [0.0; 6],
            ref_raw: r.ref_raw,
            ref_wrench_raw: r.ref_wrench_raw,
            ref_gov: r.ref_gov,
            ref_wrench_gov: r.ref_wrench_gov,
            verdict: r.verdict,
            violations: r.violations,
            violation_ticks: 0,
            tracking_error: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    ApplyWrench(ApplyWrench),
    SetReference(SetReference),
    ToggleGovernor(ToggleGovernor),
    Reset,
    Pause(Pause),
}

impl Command {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ApplyWrench(_) => "apply_wrench",
            Self::SetReference(_) => "set_reference",
            Self::ToggleGovernor(_) => "toggle_governor",
            Self::Reset => "reset",
            Self::Pause(_) => "pause",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Command(Command),
    Telemetry(Box<Snapshot>),
    Ack(Ack),
    Error(ErrorFrame),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub seq: u64,
    /// Simulation time for server frames, client clock for commands.
    pub t: f64,
    pub payload: Payload,
}

fn payload_of<T: DeserializeOwned>(kind: &str, v: Value) -> Result<T, ProtocolError> {
    serde_json::from_value(v).map_err(|e| ProtocolError::Payload { kind: kind.to_string(), reason: e.to_string() })
}

fn finite(kind: &str, vals: &[f64]) -> Result<(), ProtocolError> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ProtocolError::Payload { kind: kind.to_string(), reason: "values must be finite".into() })
    }
}

impl Message {
    pub fn new(seq: u64, t: f64, payload: Payload) -> Self {
        Self { seq, t, payload }
    }

    pub fn kind(&self) -> &'static str {
        match &self.payload {
            Payload::Command(c) => c.kind(),
            Payload::Telemetry(_) => "telemetry",
            Payload::Ack(_) => "ack",
            Payload::Error(_) => "error",
        }
    }

    pub fn to_json(&self) -> String {
        let payload = match &self.payload {
            Payload::Command(Command::ApplyWrench(p)) => serde_json::to_value(p),
            Payload::Command(Command::SetReference(p)) => serde_json::to_value(p),
            Payload::Command(Command::ToggleGovernor(p)) => serde_json::to_value(p),
            Payload::Command(Command::Reset) => Ok(Value::Object(Default::default())),
            Payload::Command(Command::Pause(p)) => serde_json::to_value(p),
            Payload::Telemetry(s) => serde_json::to_value(s),
            Payload::Ack(a) => serde_json::to_value(a),
            Payload::Error(e) => serde_json::to_value(e),
        }
        .expect("payload serializes");
        serde_json::json!({
            "type": self.kind(),
            "seq": self.seq,
            "t": self.t,
            "version": PROTOCOL_VERSION,
            "payload": payload,
        })
        .to_string()
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        let mut obj = match v {
            Value::Object(m) => m,
            _ => return Err(ProtocolError::Malformed("expected a JSON object".into())),
        };
        let version = obj.get("version").and_then(Value::as_u64).ok_or(ProtocolError::Field("version"))?;
        if version != PROTOCOL_VERSION as u64 {
            return Err(ProtocolError::Version(version));
        }
        let kind = obj.get("type").and_then(Value::as_str).ok_or(ProtocolError::Field("type"))?.to_string();
        let seq = obj.get("seq").and_then(Value::as_u64).ok_or(ProtocolError::Field("seq"))?;
        let t = match obj.get("t") {
            None | Some(Value::Null) => 0.0,
            Some(v) => v.as_f64().ok_or(ProtocolError::Field("t"))?,
        };
        let body = obj.remove("payload").unwrap_or(Value::Null);
        let body = if body.is_null() { Value::Object(Default::default()) } else { body };
        let k = kind.as_str();
        let payload = match k {
            "apply_wrench" => {
                let p: ApplyWrench = payload_of(k, body)?;
                finite(k, &p.wrench)?;
                Payload::Command(Command::ApplyWrench(p))
            }
            "set_reference" => {
                let p: SetReference = payload_of(k, body)?;
                finite(k, &p.position)?;
                finite(k, &p.rpy)?;
                Payload::Command(Command::SetReference(p))
            }
            "toggle_governor" => Payload::Command(Command::ToggleGovernor(payload_of(k, body)?)),
            "reset" => Payload::Command(Command::Reset),
            "pause" => Payload::Command(Command::Pause(payload_of(k, body)?)),
            "telemetry" => Payload::Telemetry(Box::new(payload_of(k, body)?)),
            "ack" => Payload::Ack(payload_of(k, body)?),
            "error" => Payload::Error(payload_of(k, body)?),
            _ => return Err(ProtocolError::UnknownType(kind)),
        };
        Ok(Self { seq, t, payload })
    }

    /// Parses a client frame, rejecting server-only types.
    pub fn parse_command(text: &str) -> Result<(u64, Command), ProtocolError> {
        let m = Self::parse(text)?;
        let kind = m.kind();
        match m.payload {
            Payload::Command(c) => Ok((m.seq, c)),
            _ => Err(ProtocolError::NotACommand(kind.to_string())),
        }
    }

    /// Best-effort `seq` of a frame that failed to parse.
    pub fn peek_seq(text: &str) -> Option<u64> {
        serde_json::from_str::<Value>(text).ok()?.get("seq")?.as_u64()
    }
}

pub fn error_message(seq: u64, t: f64, code: &str, message: String, ack: Option<u64>) -> Message {
    Message::new(seq, t, Payload::Error(ErrorFrame { code: code.to_string(), message, ack }))
}
