use std::io::Read;

use super::codec::{MaskBody, WeightsBody};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MPFL";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
/// Largest payload a peer will accept.
pub const MAX_PAYLOAD: usize = 1 << 28;

const FLAG: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    InitWeights = 1,
    MaskUpload = 2,
    GlobalMask = 3,
    WeightUpload = 4,
    GlobalWeights = 5,
}

impl MessageKind {
    fn from_nibble(v: u8) -> Option<Self> {
        Some(match v {
            1 => MessageKind::InitWeights,
            2 => MessageKind::MaskUpload,
            3 => MessageKind::GlobalMask,
            4 => MessageKind::WeightUpload,
            5 => MessageKind::GlobalWeights,
            _ => return None,
        })
    }

    fn has_node_id(self) -> bool {
        matches!(self, MessageKind::MaskUpload | MessageKind::WeightUpload)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoundMessage {
    InitWeights(WeightsBody),
    MaskUpload { node: u32, mask: MaskBody },
    GlobalMask(MaskBody),
    WeightUpload { node: u32, weights: WeightsBody },
    GlobalWeights(WeightsBody),
}

impl RoundMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            RoundMessage::InitWeights(_) => MessageKind::InitWeights,
            RoundMessage::MaskUpload { .. } => MessageKind::MaskUpload,
            RoundMessage::GlobalMask(_) => MessageKind::GlobalMask,
            RoundMessage::WeightUpload { .. } => MessageKind::WeightUpload,
            RoundMessage::GlobalWeights(_) => MessageKind::GlobalWeights,
        }
    }

    fn flag(&self) -> bool {
        match self {
            RoundMessage::MaskUpload { mask, .. } | RoundMessage::GlobalMask(mask) => mask.delta,
            RoundMessage::InitWeights(w)
            | RoundMessage::WeightUpload { weights: w, .. }
            | RoundMessage::GlobalWeights(w) => w.sparse,
        }
    }

    fn node(&self) -> Option<u32> {
        match self {
            RoundMessage::MaskUpload { node, .. } | RoundMessage::WeightUpload { node, .. } => Some(*node),
            _ => None,
        }
    }

    /// The mask or weight bytes, excluding routing fields.
    pub fn body(&self) -> &[u8] {
        match self {
            RoundMessage::MaskUpload { mask, .. } | RoundMessage::GlobalMask(mask) => &mask.bytes,
            RoundMessage::InitWeights(w)
            | RoundMessage::WeightUpload { weights: w, .. }
            | RoundMessage::GlobalWeights(w) => &w.bytes,
        }
    }

    fn build(kind: MessageKind, flag: bool, node: Option<u32>, body: Vec<u8>) -> Self {
        let mask = || MaskBody {
            delta: flag,
            bytes: body.clone(),
        };
        let weights = || WeightsBody {
            sparse: flag,
            bytes: body.clone(),
        };
        match kind {
            MessageKind::InitWeights => RoundMessage::InitWeights(weights()),
            MessageKind::MaskUpload => RoundMessage::MaskUpload {
                node: node.expect("upload node id"),
                mask: mask(),
            },
            MessageKind::GlobalMask => RoundMessage::GlobalMask(mask()),
            MessageKind::WeightUpload => RoundMessage::WeightUpload {
                node: node.expect("upload node id"),
                weights: weights(),
            },
            MessageKind::GlobalWeights => RoundMessage::GlobalWeights(weights()),
        }
    }
}

/// A message stamped with its round index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub round: u32,
    pub message: RoundMessage,
}

impl Frame {
    pub fn new(round: u32, message: RoundMessage) -> Self {
        Frame { round, message }
    }

    pub fn payload_len(&self) -> usize {
        self.message.body().len() + if self.message.node().is_some() { 4 } else { 0 }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload_len()
    }

    pub fn body_len(&self) -> usize {
        self.message.body().len()
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let msg = &frame.message;
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.kind() as u8 | if msg.flag() { FLAG } else { 0 });
    out.extend_from_slice(&frame.round.to_le_bytes());
    out.extend_from_slice(&(frame.payload_len() as u32).to_le_bytes());
    if let Some(node) = msg.node() {
        out.extend_from_slice(&node.to_le_bytes());
    }
    out.extend_from_slice(msg.body());
    out
}

struct Header {
    kind: MessageKind,
    flag: bool,
    round: u32,
    len: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::protocol(bytes.len(), "truncated frame header"));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::protocol(0, "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::protocol(4, format!("unsupported version {}", bytes[4])));
    }
    let tag = bytes[5];
    let kind = MessageKind::from_nibble(tag & !FLAG)
        .ok_or_else(|| Error::protocol(5, format!("unknown message tag {tag:#04x}")))?;
    let round = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    let len = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::protocol(
            10,
            format!("payload length {len} exceeds {MAX_PAYLOAD}"),
        ));
    }
    if kind.has_node_id() && len < 4 {
        return Err(Error::protocol(10, "upload payload shorter than its node id"));
    }
    Ok(Header {
        kind,
        flag: tag & FLAG != 0,
        round,
        len,
    })
}

fn build_frame(header: Header, payload: &[u8]) -> Frame {
    let (node, body) = if header.kind.has_node_id() {
        let node = u32::from_le_bytes(payload[..4].try_into().expect("4 bytes"));
        (Some(node), payload[4..].to_vec())
    } else {
        (None, payload.to_vec())
    };
    Frame {
        round: header.round,
        message: RoundMessage::build(header.kind, header.flag, node, body),
    }
}

/// Decodes exactly one frame; the buffer must contain nothing else.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    let header = parse_header(bytes)?;
    let end = HEADER_LEN + header.len;
    if bytes.len() < end {
        return Err(Error::protocol(
            bytes.len(),
            format!("truncated payload: expected {} bytes", header.len),
        ));
    }
    if bytes.len() > end {
        return Err(Error::protocol(end, "trailing bytes after frame"));
    }
    Ok(build_frame(header, &bytes[HEADER_LEN..]))
}

/// Reads one complete frame from a stream and returns its raw bytes.
pub fn read_frame_bytes<R: Read>(reader: &mut R) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; HEADER_LEN];
    reader.read_exact(&mut buf)?;
    let header = parse_header(&buf)?;
    buf.resize(HEADER_LEN + header.len, 0);
    reader.read_exact(&mut buf[HEADER_LEN..])?;
    Ok(buf)
}
