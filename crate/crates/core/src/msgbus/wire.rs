//! Stream framing: a 4-byte big-endian length followed by a UTF-8 JSON
//! object `{v, kind, topic, sender, seq, qos, retain, ts, payload}`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::{Frame, FrameKind, MsgId, Qos};
use crate::types::Timestamp;

pub const WIRE_VERSION: u8 = 1;

/// Upper bound on a single encoded frame.
pub const MAX_FRAME_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireFrame {
    pub v: u8,
    pub kind: FrameKind,
    pub topic: String,
    pub sender: String,
    pub seq: u64,
    pub qos: u8,
    pub retain: bool,
    pub ts: Timestamp,
    pub payload: String,
}

impl WireFrame {
    pub fn new(kind: FrameKind, topic: &str, sender: &str, ts: Timestamp) -> Self {
        WireFrame {
            v: WIRE_VERSION,
            kind,
            topic: topic.to_string(),
            sender: sender.to_string(),
            seq: 0,
            qos: 0,
            retain: false,
            ts,
            payload: String::new(),
        }
    }

    pub fn connect(node_id: &str, credential: &str, ts: Timestamp) -> Self {
        let mut f = WireFrame::new(FrameKind::Connect, "", node_id, ts);
        f.payload = serde_json::to_string(&ConnectRequest {
            node_id: node_id.to_string(),
            credential: credential.to_string(),
        })
        .expect("plain struct serializes");
        f
    }

    pub fn msg_id(&self) -> MsgId {
        MsgId {
            sender: self.sender.clone(),
            seq: self.seq,
        }
    }
}

impl From<&Frame> for WireFrame {
    fn from(f: &Frame) -> Self {
        WireFrame {
            v: WIRE_VERSION,
            kind: f.kind,
            topic: f.topic.clone(),
            sender: f.msg_id.sender.clone(),
            seq: f.msg_id.seq,
            qos: f.qos as u8,
            retain: f.retain,
            ts: f.ts,
            payload: f.payload.clone(),
        }
    }
}

impl TryFrom<WireFrame> for Frame {
    type Error = io::Error;

    fn try_from(w: WireFrame) -> Result<Self, Self::Error> {
        let qos = Qos::from_u8(w.qos).ok_or_else(|| invalid(format!("bad qos {}", w.qos)))?;
        Ok(Frame {
            kind: w.kind,
            topic: w.topic,
            msg_id: MsgId {
                sender: w.sender,
                seq: w.seq,
            },
            qos,
            retain: w.retain,
            ts: w.ts,
            payload: w.payload,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectRequest {
    pub node_id: String,
    pub credential: String,
}

/// Broker answer to CONNECT: `{"ok":true}` or `{"err":"auth"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConnectReply {
    Ok { ok: bool },
    Err { err: String },
}

impl ConnectReply {
    pub fn ok() -> Self {
        ConnectReply::Ok { ok: true }
    }

    pub fn auth_error() -> Self {
        ConnectReply::Err { err: "auth".into() }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, ConnectReply::Ok { ok: true })
    }
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub fn encode_json<T: Serialize>(value: &T) -> Vec<u8> {
    let body = serde_json::to_vec(value).expect("wire types serialize");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn encode_frame(frame: &WireFrame) -> Vec<u8> {
    encode_json(frame)
}

pub fn write_json<W: Write, T: Serialize>(w: &mut W, value: &T) -> io::Result<()> {
    w.write_all(&encode_json(value))?;
    w.flush()
}

/// Reads one length-prefixed body. `Ok(None)` on clean EOF before the
/// length prefix.
pub fn read_body<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut len[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(invalid(format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn read_json<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> io::Result<Option<T>> {
    match read_body(r)? {
        None => Ok(None),
        Some(body) => serde_json::from_slice(&body).map(Some).map_err(|e| invalid(e.to_string())),
    }
}

pub fn decode_frame(bytes: &[u8]) -> io::Result<WireFrame> {
    let mut cursor = bytes;
    let frame: WireFrame = read_json(&mut cursor)?.ok_or_else(|| invalid("empty input".into()))?;
    if frame.v != WIRE_VERSION {
        return Err(invalid(format!("unsupported version {}", frame.v)));
    }
    Ok(frame)
}
