//! Live deployment over a local socket: a tick-driven session in which a
//! human client can take control of the rollout and drive it directly.
//!
//! Wire records are `<byte length>\n<json>`; every message is an object with
//! the fields `kind`, `session`, `tick` and `payload`.

mod server;
mod session;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use server::{bind, serve, ServeConfig, ServeOutcome};
pub use session::{ClientId, Control, JournalEntry, Outbound, Session, SessionConfig, Target};

use crate::error::{Error, Result};

/// Largest accepted record body in bytes.
pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    State,
    TakeControl,
    ReleaseControl,
    HumanAction,
    EpisodeEnd,
    Error,
    Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub session: String,
    pub tick: u64,
    #[serde(default)]
    pub payload: serde_json::Value,
}

impl WireMessage {
    pub fn new(kind: MessageKind, session: &str, tick: u64, payload: serde_json::Value) -> Self {
        Self {
            kind,
            session: session.to_string(),
            tick,
            payload,
        }
    }

    pub fn to_frame(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_vec(self)?;
        let mut out = format!("{}\n", body.len()).into_bytes();
        out.extend_from_slice(&body);
        Ok(out)
    }
}

pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage) -> Result<()> {
    w.write_all(&msg.to_frame()?)?;
    w.flush()?;
    Ok(())
}

/// Reads one record body. `Ok(None)` on a clean end of stream.
pub fn read_frame_body<R: BufRead>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut header = String::new();
    if r.read_line(&mut header)? == 0 {
        return Ok(None);
    }
    let len: usize = header
        .trim_end()
        .parse()
        .map_err(|_| Error::Bridge(format!("bad frame header `{}`", header.trim_end())))?;
    if len > MAX_FRAME {
        return Err(Error::Bridge(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

/// Reads and parses one message. A framing error is fatal for the stream;
/// a well-framed body that fails to parse is reported as `Ok(Some(Err(..)))`.
pub fn read_frame<R: BufRead>(r: &mut R) -> Result<Option<std::result::Result<WireMessage, String>>> {
    Ok(read_frame_body(r)?.map(|body| serde_json::from_slice(&body).map_err(|e| e.to_string())))
}

/// Observation field names in order, as announced in the handshake.
pub const OBS_LAYOUT: [&str; crate::env::OBS_DIM] = [
    "gripper_x",
    "gripper_y",
    "object_dx",
    "object_dy",
    "target_dx",
    "target_dy",
    "holding",
    "nuisance_0",
    "nuisance_1",
    "nuisance_2",
    "nuisance_3",
];
