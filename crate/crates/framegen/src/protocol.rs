//! Wire format of the `/stream` endpoint: JSON text messages for control and
//! one binary message per image plane set, 8 bits per sample, plane-major.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use framegen_core::Tensor32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Camera {
        seq: u64,
        position: [f64; 3],
        yaw: f64,
        pitch: f64,
    },
    Reset {
        frame_source: String,
    },
    Config {
        irradiance: bool,
        checkpoint: String,
        /// Planes to send with every frame; `rgb` is always first.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channels: Option<Vec<Channel>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    /// Followed by one binary message per entry of `channels`.
    Frame {
        seq: u64,
        width: usize,
        height: usize,
        channels: Vec<Channel>,
        millis: f64,
    },
    ConfigAck {
        irradiance: bool,
        checkpoint: String,
        channels: Vec<Channel>,
    },
    Error {
        reason: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Rgb,
    Basecolor,
    Normal,
    Depth,
    Roughness,
    Metallic,
    Irradiance,
}

impl Channel {
    pub fn planes(self) -> usize {
        match self {
            Channel::Rgb | Channel::Basecolor | Channel::Normal => 3,
            _ => 1,
        }
    }

    pub fn payload_len(self, width: usize, height: usize) -> usize {
        self.planes() * width * height
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("payload for {channel:?} has {got} bytes, expected {expected}")]
    PayloadLength { channel: Channel, got: usize, expected: usize },
}

pub fn parse_client(text: &str) -> Result<ClientMessage, ProtocolError> {
    serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn parse_server(text: &str) -> Result<ServerMessage, ProtocolError> {
    serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn to_text<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("wire messages always serialize")
}

/// `round(clamp(v, 0, 1) * 255)` per sample, in tensor order.
pub fn quantize(t: &Tensor32) -> Vec<u8> {
    t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn dequantize(bytes: &[u8], shape: &[usize]) -> Tensor32 {
    Tensor32::from_vec(shape, bytes.iter().map(|&b| b as f32 / 255.0).collect()).expect("caller passes matching shape")
}

/// Normals travel as `(n + 1) / 2`.
pub fn pack_normals(n: &Tensor32) -> Tensor32 {
    n.map(|v| (v + 1.0) * 0.5)
}

/// A decoded frame: header plus the planes it announced.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMessage {
    pub seq: u64,
    pub width: usize,
    pub height: usize,
    pub millis: f64,
    pub planes: Vec<(Channel, Vec<u8>)>,
}

impl FrameMessage {
    pub fn header(&self) -> ServerMessage {
        ServerMessage::Frame {
            seq: self.seq,
            width: self.width,
            height: self.height,
            channels: self.planes.iter().map(|(c, _)| *c).collect(),
            millis: self.millis,
        }
    }

    /// Pairs a frame header with the binary payloads that followed it.
    pub fn decode(header: &ServerMessage, payloads: &[Vec<u8>]) -> Result<Self, ProtocolError> {
        let ServerMessage::Frame { seq, width, height, channels, millis } = header else {
            return Err(ProtocolError::Malformed("not a frame header".into()));
        };
        if channels.len() != payloads.len() {
            return Err(ProtocolError::Malformed(format!(
                "header lists {} channels, got {} payloads",
                channels.len(),
                payloads.len()
            )));
        }
        let mut planes = Vec::with_capacity(channels.len());
        for (&c, p) in channels.iter().zip(payloads) {
            let expected = c.payload_len(*width, *height);
            if p.len() != expected {
                return Err(ProtocolError::PayloadLength { channel: c, got: p.len(), expected });
            }
            planes.push((c, p.clone()));
        }
        Ok(Self { seq: *seq, width: *width, height: *height, millis: *millis, planes })
    }
}

/// One message on the wire, as sent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WireFrame {
    Text(String),
    Binary(Vec<u8>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ClientToServer = 0,
    ServerToClient = 1,
}

/// Recorded exchange. Each record is
/// `[direction u8][kind u8: 0 text, 1 binary][len u32 LE][bytes]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    pub records: Vec<(Direction, WireFrame)>,
}

impl Transcript {
    pub fn push(&mut self, dir: Direction, frame: WireFrame) {
        self.records.push((dir, frame));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (dir, frame) in &self.records {
            let (kind, bytes) = match frame {
                WireFrame::Text(s) => (0u8, s.as_bytes()),
                WireFrame::Binary(b) => (1u8, b.as_slice()),
            };
            out.push(*dir as u8);
            out.push(kind);
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut t = Transcript::default();
        while !bytes.is_empty() {
            if bytes.len() < 6 {
                return Err(ProtocolError::Malformed("truncated transcript record header".into()));
            }
            let dir = match bytes[0] {
                0 => Direction::ClientToServer,
                1 => Direction::ServerToClient,
                d => return Err(ProtocolError::Malformed(format!("bad direction byte {d}"))),
            };
            let kind = bytes[1];
            let len = u32::from_le_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]) as usize;
            let body = bytes
                .get(6..6 + len)
                .ok_or_else(|| ProtocolError::Malformed("truncated transcript record".into()))?;
            let frame = match kind {
                0 => WireFrame::Text(
                    String::from_utf8(body.to_vec()).map_err(|e| ProtocolError::Malformed(e.to_string()))?,
                ),
                1 => WireFrame::Binary(body.to_vec()),
                k => return Err(ProtocolError::Malformed(format!("bad record kind {k}"))),
            };
            t.push(dir, frame);
            bytes = &bytes[6 + len..];
        }
        Ok(t)
    }
}
