//! Steering wire format.
//!
//! A message is a `u32` little-endian header length, a JSON header, and an
//! optional binary payload whose length is the header's `payload_bytes`.
//! Only frames carry a payload (RGBA8, row-major, top row first).

use crate::lattice::{FieldId, FluidParams};
use crate::scene::{Scene, SceneObject};
use crate::viz::{Glyph, Polyline};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::sync::Arc;

/// Upper bound on a header, to reject garbage lengths early.
pub const MAX_HEADER_BYTES: u32 = 16 << 20;
pub const MAX_PAYLOAD_BYTES: u64 = 256 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    /// First message on a raw TCP connection when a token is configured.
    Hello { token: String },
    AddGeometry { object: SceneObject },
    DeleteGeometry { id: String },
    MoveGeometry { id: String, center: [f64; 2] },
    ScaleGeometry { id: String, factor: f64 },
    SetParams { params: FluidParams },
    SetBudget { ms: u64 },
    SetField { field: FieldId },
    SetStyle {
        technique: Technique,
        #[serde(default)]
        options: StyleOptions,
    },
    Subscribe {},
    Snapshot {},
    TriggerBatch { level: u32, steps: u64, out_path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    #[default]
    Colormap,
    Iso,
    Streamlines,
    Streambands,
    Glyphs,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleOptions {
    /// Fixed colour range; absent means automatic.
    pub range: Option<[f64; 2]>,
    pub colormap: Option<String>,
    pub px_per_cell: Option<usize>,
    pub iso_levels: Option<usize>,
    pub seeds: Option<usize>,
    pub glyph_stride: Option<usize>,
    pub band_width: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Frame {
        seq: u64,
        level: u32,
        field: FieldId,
        w: usize,
        h: usize,
        payload_bytes: usize,
        version: u64,
        timestamp_ms: u64,
    },
    Primitives {
        version: u64,
        level: u32,
        polylines: Vec<Polyline>,
        glyphs: Vec<Glyph>,
    },
    LevelDone {
        version: u64,
        level: u32,
        residual: f64,
        steps: usize,
        converged: bool,
        elapsed_ms: f64,
    },
    SceneAck {
        version: u64,
        scene: Scene,
    },
    Error {
        code: ErrorCode,
        text: String,
        version: u64,
    },
    Snapshot {
        version: u64,
        frame_seq: Option<u64>,
        dump: Option<String>,
    },
    Batch {
        job_id: u64,
        state: BatchState,
        level: u32,
        steps: u64,
        out_path: String,
        error: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    Unauthorized,
    ViewOnly,
    BadMessage,
    UnknownId,
    DuplicateId,
    InvalidGeometry,
    InvalidParams,
    NoInteractiveResult,
    JobLimitExceeded,
    Internal,
}

/// A server message with its payload, shared between subscriber queues.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub msg: ServerMsg,
    pub payload: Option<Arc<Vec<u8>>>,
}

impl Outgoing {
    pub fn plain(msg: ServerMsg) -> Self {
        Self { msg, payload: None }
    }

    /// Frames and primitives may be dropped under back-pressure.
    pub fn is_droppable(&self) -> bool {
        matches!(self.msg, ServerMsg::Frame { .. } | ServerMsg::Primitives { .. })
    }

    pub fn version(&self) -> Option<u64> {
        match self.msg {
            ServerMsg::Frame { version, .. }
            | ServerMsg::Primitives { version, .. }
            | ServerMsg::LevelDone { version, .. }
            | ServerMsg::SceneAck { version, .. }
            | ServerMsg::Error { version, .. }
            | ServerMsg::Snapshot { version, .. } => Some(version),
            ServerMsg::Batch { .. } => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode(&self.msg, self.payload.as_deref().map(Vec::as_slice))
    }
}

/// Frame one message.
pub fn encode<H: Serialize>(header: &H, payload: Option<&[u8]>) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + json.len() + payload.map_or(0, <[u8]>::len));
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    if let Some(p) = payload {
        out.extend_from_slice(p);
    }
    out
}

pub fn write_message<W: Write, H: Serialize>(out: &mut W, header: &H, payload: Option<&[u8]>) -> io::Result<()> {
    out.write_all(&encode(header, payload))?;
    out.flush()
}

/// Read one framed message: the JSON header and the payload announced by
/// its `payload_bytes` field, if any.
pub fn read_message<R: Read>(input: &mut R) -> io::Result<(serde_json::Value, Vec<u8>)> {
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("header of {len} bytes")));
    }
    let mut header = vec![0u8; len as usize];
    input.read_exact(&mut header)?;
    let header: serde_json::Value =
        serde_json::from_slice(&header).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let payload_len = header.get("payload_bytes").and_then(serde_json::Value::as_u64).unwrap_or(0);
    if payload_len > MAX_PAYLOAD_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("payload of {payload_len} bytes")));
    }
    let mut payload = vec![0u8; payload_len as usize];
    input.read_exact(&mut payload)?;
    Ok((header, payload))
}

/// Decode a framed message held in one buffer, e.g. a WebSocket binary
/// message.
pub fn decode(buf: &[u8]) -> io::Result<(serde_json::Value, Vec<u8>)> {
    let mut cursor = buf;
    let out = read_message(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "trailing bytes after message"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let msg = ServerMsg::Frame {
            seq: 7,
            level: 1,
            field: FieldId::Ux,
            w: 2,
            h: 1,
            payload_bytes: 8,
            version: 3,
            timestamp_ms: 0,
        };
        let bytes = encode(&msg, Some(&[1, 2, 3, 4, 5, 6, 7, 8]));
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 4 + len + 8);
        let (header, payload) = decode(&bytes).unwrap();
        assert_eq!(header["type"], "frame");
        assert_eq!(header["payload_bytes"], 8);
        assert_eq!(payload, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        let back: ServerMsg = serde_json::from_value(header).unwrap();
        assert_eq!(back, msg);
    }

    #[test]
    fn client_messages_parse_from_json() {
        let m: ClientMsg = serde_json::from_str(
            r#"{"type":"add_geometry","object":{"id":"c","shape":"circle","center":[0.5,0.5],"size":0.1}}"#,
        )
        .unwrap();
        assert!(matches!(m, ClientMsg::AddGeometry { .. }));
        let m: ClientMsg = serde_json::from_str(r#"{"type":"set_field","field":"rho"}"#).unwrap();
        assert_eq!(m, ClientMsg::SetField { field: FieldId::Rho });
        let m: ClientMsg = serde_json::from_str(r#"{"type":"subscribe"}"#).unwrap();
        assert_eq!(m, ClientMsg::Subscribe {});
        let m: ClientMsg = serde_json::from_str(r#"{"type":"set_style","technique":"iso"}"#).unwrap();
        assert!(matches!(m, ClientMsg::SetStyle { technique: Technique::Iso, .. }));
    }

    #[test]
    fn truncated_and_oversized_input_fail() {
        let bytes = encode(&ClientMsg::Subscribe {}, None);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut big = (MAX_HEADER_BYTES + 1).to_le_bytes().to_vec();
        big.extend_from_slice(b"{}");
        assert!(decode(&big).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
