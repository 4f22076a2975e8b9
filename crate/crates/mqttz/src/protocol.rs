//! Binary wire protocol between clients and the broker.
//!
//! Every message travels as a length-prefixed frame:
//!
//! ```text
//! +--------------+----------------------+----------------------+
//! | kind (1 B)   | body length (4 B BE) | body (variable)      |
//! +--------------+----------------------+----------------------+
//! ```
//!
//! Strings inside bodies are 2-byte big-endian length-prefixed UTF-8.
//! `PUBLISH` and `MESSAGE` bodies carry the topic string followed by an
//! encrypted envelope (16-byte IV, then ciphertext for the remainder of
//! the body). The body length is capped at 1 MiB; a frame that declares
//! more is rejected before any allocation.
//!
//! Decoding is total: any byte sequence either decodes to exactly one
//! packet or fails with [`ProtocolError::Malformed`]. Trailing bytes
//! after a well-formed body are an error, never silently ignored.

use std::fmt;

use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

/// Maximum body length of a single frame (1 MiB).
pub const MAX_BODY_LEN: usize = 1 << 20;

/// Size of an envelope initialization vector, and of an AES block.
pub const IV_LEN: usize = 16;

/// Size of a wrapped client key (RSA-2048 ciphertext).
pub const WRAPPED_KEY_LEN: usize = 256;

/// Topic reserved for key provisioning; clients may never subscribe to it.
pub const RESERVED_HANDSHAKE_TOPIC: &str = "mqttz/handshake";

/// Prefix of the provisioning ACK plaintext; the client id follows so a
/// captured ACK cannot be replayed to a different client.
pub const ACK_PREFIX: &str = "MQTTZ-ACK:";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(&'static str),

    #[error("frame body too large: {len} bytes (max {MAX_BODY_LEN})")]
    Oversize { len: usize },

    #[error("connection closed by peer")]
    ConnectionClosed,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Client identity string: 1..=64 bytes of UTF-8 with no `/`, `#`, `+`
/// and no control characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClientId(String);

impl ClientId {
    pub fn new(value: impl Into<String>) -> Result<Self, ProtocolError> {
        let value = value.into();
        if value.is_empty() {
            return Err(ProtocolError::Malformed("client id is empty"));
        }
        if value.len() > 64 {
            return Err(ProtocolError::Malformed("client id longer than 64 bytes"));
        }
        if value
            .chars()
            .any(|c| c == '/' || c == '#' || c == '+' || c.is_control())
        {
            return Err(ProtocolError::Malformed(
                "client id contains a forbidden character",
            ));
        }
        Ok(ClientId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Topic path: 1..=256 bytes of `/`-separated non-empty UTF-8 segments,
/// no leading or trailing separator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(value: impl Into<String>) -> Result<Self, ProtocolError> {
        let value = value.into();
        if value.is_empty() {
            return Err(ProtocolError::Malformed("topic is empty"));
        }
        if value.len() > 256 {
            return Err(ProtocolError::Malformed("topic longer than 256 bytes"));
        }
        if value.split('/').any(str::is_empty) {
            return Err(ProtocolError::Malformed(
                "topic has an empty segment or a leading/trailing slash",
            ));
        }
        Ok(TopicName(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// True for the provisioning topic, which is a valid publish target
    /// but never subscribable.
    pub fn is_reserved(&self) -> bool {
        self.0 == RESERVED_HANDSHAKE_TOPIC
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Validate a raw string as a topic path.
pub fn validate_topic(s: &str) -> Result<TopicName, ProtocolError> {
    TopicName::new(s)
}

/// IV plus AES-CBC ciphertext. This is the only payload form the
/// untrusted broker ever carries; its contents are opaque outside the
/// crypto and trusted modules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedEnvelope {
    pub iv: [u8; IV_LEN],
    pub ciphertext: Vec<u8>,
}

impl EncryptedEnvelope {
    pub fn new(iv: [u8; IV_LEN], ciphertext: Vec<u8>) -> Result<Self, ProtocolError> {
        if ciphertext.len() < IV_LEN || !ciphertext.len().is_multiple_of(IV_LEN) {
            return Err(ProtocolError::Malformed(
                "envelope ciphertext length is not a positive multiple of 16",
            ));
        }
        Ok(EncryptedEnvelope { iv, ciphertext })
    }

    /// Serialized length on the wire: IV followed by ciphertext.
    pub fn wire_len(&self) -> usize {
        IV_LEN + self.ciphertext.len()
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.ciphertext);
    }

    fn read_from(cur: &mut Cursor<'_>) -> Result<Self, ProtocolError> {
        let iv: [u8; IV_LEN] = cur
            .take(IV_LEN)?
            .try_into()
            .expect("take returned exactly IV_LEN bytes");
        let ciphertext = cur.take_rest().to_vec();
        EncryptedEnvelope::new(iv, ciphertext)
    }
}

/// Error codes carried by `ERROR` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    Unauthorized = 1,
    Malformed = 2,
    NoKey = 3,
    Internal = 4,
}

impl ErrorCode {
    fn from_byte(b: u8) -> Result<Self, ProtocolError> {
        match b {
            1 => Ok(ErrorCode::Unauthorized),
            2 => Ok(ErrorCode::Malformed),
            3 => Ok(ErrorCode::NoKey),
            4 => Ok(ErrorCode::Internal),
            _ => Err(ProtocolError::Malformed("unknown error code")),
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ErrorCode::Unauthorized => "UNAUTHORIZED",
            ErrorCode::Malformed => "MALFORMED",
            ErrorCode::NoKey => "NO_KEY",
            ErrorCode::Internal => "INTERNAL",
        };
        f.write_str(name)
    }
}

/// One frame of client/broker traffic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect { client_id: ClientId },
    ConnAck,
    Subscribe { topic: TopicName },
    SubAck { topic: TopicName },
    Publish { topic: TopicName, envelope: EncryptedEnvelope },
    Message { topic: TopicName, envelope: EncryptedEnvelope },
    HandshakeReq { wrapped_key: Box<[u8; WRAPPED_KEY_LEN]> },
    HandshakeAck { envelope: EncryptedEnvelope },
    Error { code: ErrorCode },
}

impl Packet {
    pub fn kind(&self) -> u8 {
        match self {
            Packet::Connect { .. } => 0x01,
            Packet::ConnAck => 0x02,
            Packet::Subscribe { .. } => 0x03,
            Packet::SubAck { .. } => 0x04,
            Packet::Publish { .. } => 0x05,
            Packet::Message { .. } => 0x06,
            Packet::HandshakeReq { .. } => 0x07,
            Packet::HandshakeAck { .. } => 0x08,
            Packet::Error { .. } => 0x09,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Packet::Connect { .. } => "CONNECT",
            Packet::ConnAck => "CONNACK",
            Packet::Subscribe { .. } => "SUBSCRIBE",
            Packet::SubAck { .. } => "SUBACK",
            Packet::Publish { .. } => "PUBLISH",
            Packet::Message { .. } => "MESSAGE",
            Packet::HandshakeReq { .. } => "HANDSHAKE_REQ",
            Packet::HandshakeAck { .. } => "HANDSHAKE_ACK",
            Packet::Error { .. } => "ERROR",
        }
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    debug_assert!(s.len() <= u16::MAX as usize);
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Encode a packet into a complete frame.
pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, ProtocolError> {
    let mut body = Vec::new();
    match packet {
        Packet::Connect { client_id } => write_str(&mut body, client_id.as_str()),
        Packet::ConnAck => {}
        Packet::Subscribe { topic } => write_str(&mut body, topic.as_str()),
        Packet::SubAck { topic } => write_str(&mut body, topic.as_str()),
        Packet::Publish { topic, envelope } | Packet::Message { topic, envelope } => {
            write_str(&mut body, topic.as_str());
            envelope.write_to(&mut body);
        }
        Packet::HandshakeReq { wrapped_key } => body.extend_from_slice(&wrapped_key[..]),
        Packet::HandshakeAck { envelope } => envelope.write_to(&mut body),
        Packet::Error { code } => body.push(*code as u8),
    }
    if body.len() > MAX_BODY_LEN {
        return Err(ProtocolError::Oversize { len: body.len() });
    }
    let mut frame = Vec::with_capacity(5 + body.len());
    frame.push(packet.kind());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.data.len() - self.pos < n {
            return Err(ProtocolError::Malformed("truncated body"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_rest(&mut self) -> &'a [u8] {
        let out = &self.data[self.pos..];
        self.pos = self.data.len();
        out
    }

    fn read_str(&mut self) -> Result<&'a str, ProtocolError> {
        let len_bytes: [u8; 2] = self.take(2)?.try_into().expect("exactly two bytes");
        let len = u16::from_be_bytes(len_bytes) as usize;
        let raw = self.take(len)?;
        std::str::from_utf8(raw).map_err(|_| ProtocolError::Malformed("invalid utf-8 in string"))
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        if self.pos != self.data.len() {
            return Err(ProtocolError::Malformed("trailing bytes after body"));
        }
        Ok(())
    }
}

/// Decode one complete frame. Rejects anything that is not the exact
/// encoding of a valid packet.
pub fn decode_packet(frame: &[u8]) -> Result<Packet, ProtocolError> {
    if frame.len() < 5 {
        return Err(ProtocolError::Malformed("frame shorter than header"));
    }
    let kind = frame[0];
    let declared = u32::from_be_bytes(frame[1..5].try_into().expect("four bytes")) as usize;
    if declared > MAX_BODY_LEN {
        return Err(ProtocolError::Oversize { len: declared });
    }
    let body = &frame[5..];
    if body.len() != declared {
        return Err(ProtocolError::Malformed("body length mismatch"));
    }
    decode_body(kind, body)
}

fn decode_body(kind: u8, body: &[u8]) -> Result<Packet, ProtocolError> {
    let mut cur = Cursor::new(body);
    let packet = match kind {
        0x01 => Packet::Connect {
            client_id: ClientId::new(cur.read_str()?)?,
        },
        0x02 => Packet::ConnAck,
        0x03 => Packet::Subscribe {
            topic: TopicName::new(cur.read_str()?)?,
        },
        0x04 => Packet::SubAck {
            topic: TopicName::new(cur.read_str()?)?,
        },
        0x05 | 0x06 => {
            let topic = TopicName::new(cur.read_str()?)?;
            let envelope = EncryptedEnvelope::read_from(&mut cur)?;
            if kind == 0x05 {
                Packet::Publish { topic, envelope }
            } else {
                Packet::Message { topic, envelope }
            }
        }
        0x07 => {
            let raw: [u8; WRAPPED_KEY_LEN] = cur
                .take(WRAPPED_KEY_LEN)?
                .try_into()
                .expect("exactly WRAPPED_KEY_LEN bytes");
            Packet::HandshakeReq {
                wrapped_key: Box::new(raw),
            }
        }
        0x08 => Packet::HandshakeAck {
            envelope: EncryptedEnvelope::read_from(&mut cur)?,
        },
        0x09 => Packet::Error {
            code: ErrorCode::from_byte(cur.take(1)?[0])?,
        },
        _ => return Err(ProtocolError::Malformed("unknown packet kind")),
    };
    cur.finish()?;
    Ok(packet)
}

/// Write one packet to an async stream.
pub async fn write_packet<W: AsyncWriteExt + Unpin>(
    writer: &mut W,
    packet: &Packet,
) -> Result<(), ProtocolError> {
    let frame = encode_packet(packet)?;
    writer.write_all(&frame).await?;
    writer.flush().await?;
    Ok(())
}

/// Read one packet from an async stream. Returns `ConnectionClosed` on a
/// clean EOF at a frame boundary.
pub async fn read_packet<R: AsyncReadExt + Unpin>(reader: &mut R) -> Result<Packet, ProtocolError> {
    let mut header = [0u8; 5];
    match reader.read_exact(&mut header).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            return Err(ProtocolError::ConnectionClosed);
        }
        Err(e) => return Err(ProtocolError::Io(e)),
    }
    let declared = u32::from_be_bytes(header[1..5].try_into().expect("four bytes")) as usize;
    if declared > MAX_BODY_LEN {
        return Err(ProtocolError::Oversize { len: declared });
    }
    let mut body = vec![0u8; declared];
    reader.read_exact(&mut body).await?;
    decode_body(header[0], &body)
}
