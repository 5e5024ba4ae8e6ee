//! Wire format shared by the episode server and its clients.
//!
//! A frame is a 4-byte big-endian length followed by that many bytes: a
//! UTF-8 JSON header terminated by `\n`, then an optional raw payload. The
//! header carries `type`, `session_id` and `seq`; when a payload is present
//! its size and image layout are declared under `layout`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TaskConfig;

pub const PROTOCOL_VERSION: u32 = 1;

/// Frames larger than this are rejected as malformed.
pub const MAX_FRAME_BYTES: u32 = 1 << 30;

pub const MESSAGE_TYPES: [&str; 11] = [
    "HELLO", "SESSION", "NEXT_SUPPORT", "SUPPORT", "STORE_BYTES", "ACK", "GET_TARGET", "TARGET",
    "PREDICT", "SCORE", "ERROR",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub len: u64,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoredKind {
    #[default]
    Representation,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Body {
    Hello {
        version: u32,
    },
    Session {
        version: u32,
        config: TaskConfig,
        height: u32,
        width: u32,
        channels: u32,
        episode_index: u64,
    },
    NextSupport {
        /// 1-based support set position; the next one when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        index: Option<u32>,
    },
    Support {
        position: u32,
        labels: Vec<u32>,
    },
    StoreBytes {
        tag: String,
        n: u64,
        #[serde(default = "one")]
        element_width: u32,
        #[serde(default)]
        kind: StoredKind,
    },
    Ack {
        bank_bytes: u64,
        peak_representation_bytes: u64,
    },
    GetTarget,
    Target {
        count: u32,
    },
    Predict {
        labels: Vec<u32>,
    },
    Score {
        accuracy: f64,
        correct: u64,
        total: u64,
        atm: f64,
        memory_bytes: u64,
        episode_index: u64,
    },
    Error {
        code: String,
        message: String,
    },
}

fn one() -> u32 {
    1
}

impl Body {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Body::Error {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(flatten)]
    pub body: Body,
    #[serde(default)]
    pub session_id: Option<u64>,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(body: Body, session_id: Option<u64>, seq: u64) -> Self {
        Frame {
            header: Header {
                body,
                session_id,
                seq,
                layout: None,
            },
            payload: Vec::new(),
        }
    }

    pub fn with_payload(mut self, layout: Layout, payload: Vec<u8>) -> Self {
        debug_assert_eq!(layout.len, payload.len() as u64);
        self.header.layout = Some(layout);
        self.payload = payload;
        self
    }

    pub fn body(&self) -> &Body {
        &self.header.body
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = serde_json::to_vec(&self.header).expect("header serializes");
        header.push(b'\n');
        let len = (header.len() + self.payload.len()) as u32;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error(transparent)]
    Io(#[from] io::Error),
    /// Connection closed cleanly between frames.
    #[error("connection closed")]
    Closed,
    #[error("malformed frame: {0}")]
    Malformed(String),
    /// Well-formed frame whose `type` is not part of the protocol.
    #[error("unknown message type `{kind}`")]
    UnknownType {
        kind: String,
        session_id: Option<u64>,
        seq: u64,
    },
}

/// Reads one length-prefixed frame body.
pub fn read_raw(r: &mut impl Read) -> Result<Vec<u8>, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(FrameError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::Malformed(format!("frame of {len} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Malformed("truncated frame".into()),
        _ => e.into(),
    })?;
    Ok(buf)
}

/// Splits and validates a frame body read by [`read_raw`].
pub fn decode(buf: &[u8]) -> Result<Frame, FrameError> {
    let malformed = |m: &str| FrameError::Malformed(m.to_string());
    let nl = buf.iter().position(|&b| b == b'\n').ok_or_else(|| malformed("header not terminated"))?;
    let text = std::str::from_utf8(&buf[..nl]).map_err(|_| malformed("header is not UTF-8"))?;
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| FrameError::Malformed(e.to_string()))?;
    let kind = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| malformed("header lacks a string `type`"))?;
    if !MESSAGE_TYPES.contains(&kind) {
        return Err(FrameError::UnknownType {
            kind: kind.to_string(),
            session_id: value.get("session_id").and_then(|v| v.as_u64()),
            seq: value.get("seq").and_then(|v| v.as_u64()).unwrap_or(0),
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| FrameError::Malformed(e.to_string()))?;
    let payload = buf[nl + 1..].to_vec();
    let declared = header.layout.map_or(0, |l| l.len);
    if declared != payload.len() as u64 {
        return Err(FrameError::Malformed(format!(
            "payload has {} bytes, header declares {declared}",
            payload.len()
        )));
    }
    Ok(Frame { header, payload })
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame, FrameError> {
    decode(&read_raw(r)?)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(frame: &Frame) -> Frame {
        read_frame(&mut frame.encode().as_slice()).unwrap()
    }

    #[test]
    fn length_prefix_covers_header_and_payload() {
        let layout = Layout {
            len: 8,
            height: 2,
            width: 2,
            channels: 1,
            count: 2,
        };
        let f = Frame::new(Body::Support { position: 1, labels: vec![0, 1] }, Some(3), 7)
            .with_payload(layout, (0..8).collect());
        let bytes = f.encode();
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 4);
        assert!(bytes[4..].starts_with(b"{\"type\":\"SUPPORT\""));
        assert_eq!(round_trip(&f), f);
    }

    #[test]
    fn all_bodies_round_trip() {
        let bodies = vec![
            Body::Hello { version: 1 },
            Body::Session {
                version: 1,
                config: TaskConfig::five_way_one_shot(3, 1, false),
                height: 4,
                width: 4,
                channels: 3,
                episode_index: 9,
            },
            Body::NextSupport { index: None },
            Body::NextSupport { index: Some(2) },
            Body::StoreBytes {
                tag: "x".into(),
                n: 12,
                element_width: 4,
                kind: StoredKind::Label,
            },
            Body::Ack {
                bank_bytes: 1,
                peak_representation_bytes: 1,
            },
            Body::GetTarget,
            Body::Target { count: 0 },
            Body::Predict { labels: vec![1, 2] },
            Body::Score {
                accuracy: 0.5,
                correct: 1,
                total: 2,
                atm: 0.25,
                memory_bytes: 3,
                episode_index: 0,
            },
            Body::error("stale_seq", "no"),
        ];
        for b in bodies {
            let f = Frame::new(b, Some(1), 2);
            assert_eq!(round_trip(&f), f);
        }
    }

    #[test]
    fn unknown_type_is_distinguished_from_garbage() {
        let mut raw = br#"{"type":"DANCE","session_id":4,"seq":9}"#.to_vec();
        raw.push(b'\n');
        match decode(&raw) {
            Err(FrameError::UnknownType { kind, session_id, seq }) => {
                assert_eq!((kind.as_str(), session_id, seq), ("DANCE", Some(4), 9))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"not json\n"), Err(FrameError::Malformed(_))));
        assert!(matches!(decode(br#"{"type":"HELLO","seq":1}"#), Err(FrameError::Malformed(_))));
        let mut undeclared = br#"{"type":"HELLO","version":1,"seq":1}"#.to_vec();
        undeclared.extend_from_slice(b"\nextra");
        assert!(matches!(decode(&undeclared), Err(FrameError::Malformed(_))));
    }

    #[test]
    fn short_reads() {
        assert!(matches!(read_raw(&mut &b""[..]), Err(FrameError::Closed)));
        assert!(matches!(read_raw(&mut &[0, 0, 0, 9, b'{'][..]), Err(FrameError::Malformed(_))));
        assert!(matches!(read_raw(&mut &[0xff, 0xff, 0xff, 0xff][..]), Err(FrameError::Malformed(_))));
    }
}
