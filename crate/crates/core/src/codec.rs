//! SOME/IP header encoding and decoding.
//!
//! Wire layout, all multi-byte fields big-endian:
//!
//! ```text
//! 0       4       8       12  13  14  15  16
//! | msgid | len   | reqid | pv| iv| mt| rc| payload...
//! ```
//! `len` counts the bytes from the request id to the end of the payload.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER_LEN: usize = 16;
/// Header bytes covered by the length field.
pub const LENGTH_BASE: u32 = 8;
pub const PROTOCOL_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("truncated input: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("unknown message type 0x{0:02x}")]
    UnknownMessageType(u8),
    #[error("unknown return code 0x{0:02x}")]
    UnknownReturnCode(u8),
    #[error("length field {declared} does not match {actual} (8 + payload)")]
    LengthMismatch { declared: u32, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MessageId {
    pub service_id: u16,
    pub method_id: u16,
}

impl MessageId {
    pub fn new(service_id: u16, method_id: u16) -> Self {
        Self { service_id, method_id }
    }

    pub fn to_u32(self) -> u32 {
        (u32::from(self.service_id) << 16) | u32::from(self.method_id)
    }

    pub fn from_u32(v: u32) -> Self {
        Self { service_id: (v >> 16) as u16, method_id: v as u16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestId {
    pub client_id: u16,
    pub session_id: u16,
}

impl RequestId {
    pub fn new(client_id: u16, session_id: u16) -> Self {
        Self { client_id, session_id }
    }

    pub fn to_u32(self) -> u32 {
        (u32::from(self.client_id) << 16) | u32::from(self.session_id)
    }

    pub fn from_u32(v: u32) -> Self {
        Self { client_id: (v >> 16) as u16, session_id: v as u16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageType {
    Request,
    RequestNoReturn,
    Notification,
    Response,
    Error,
}

impl MessageType {
    /// One-hot order.
    pub const ALL: [MessageType; 5] =
        [Self::Request, Self::RequestNoReturn, Self::Notification, Self::Response, Self::Error];

    pub fn code(self) -> u8 {
        match self {
            Self::Request => 0x00,
            Self::RequestNoReturn => 0x01,
            Self::Notification => 0x02,
            Self::Response => 0x80,
            Self::Error => 0x81,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, CodecError> {
        Self::ALL.into_iter().find(|t| t.code() == code).ok_or(CodecError::UnknownMessageType(code))
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReturnCode {
    EOk,
    ENotOk,
    EUnknownService,
    EWrongInterfaceVersion,
}

impl ReturnCode {
    /// One-hot order.
    pub const ALL: [ReturnCode; 4] = [Self::EOk, Self::ENotOk, Self::EUnknownService, Self::EWrongInterfaceVersion];

    pub fn code(self) -> u8 {
        match self {
            Self::EOk => 0x00,
            Self::ENotOk => 0x01,
            Self::EUnknownService => 0x02,
            Self::EWrongInterfaceVersion => 0x08,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, CodecError> {
        Self::ALL.into_iter().find(|r| r.code() == code).ok_or(CodecError::UnknownReturnCode(code))
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&r| r == self).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SomeIpPacket {
    pub message_id: MessageId,
    /// Bytes from the request id to the end: `8 + payload.len()`.
    pub length: u32,
    pub request_id: RequestId,
    pub protocol_version: u8,
    pub interface_version: u8,
    pub message_type: MessageType,
    pub return_code: ReturnCode,
    pub payload: Vec<u8>,
}

impl SomeIpPacket {
    /// Builds a packet with a consistent length field and protocol version 1.
    pub fn new(
        message_id: MessageId,
        request_id: RequestId,
        interface_version: u8,
        message_type: MessageType,
        return_code: ReturnCode,
        payload: Vec<u8>,
    ) -> Self {
        Self {
            message_id,
            length: LENGTH_BASE + payload.len() as u32,
            request_id,
            protocol_version: PROTOCOL_VERSION,
            interface_version,
            message_type,
            return_code,
            payload,
        }
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode_packet(p: &SomeIpPacket) -> Result<Vec<u8>, CodecError> {
    let actual = LENGTH_BASE as usize + p.payload.len();
    if p.length as usize != actual {
        return Err(CodecError::LengthMismatch { declared: p.length, actual });
    }
    let mut out = Vec::with_capacity(p.wire_len());
    out.extend_from_slice(&p.message_id.to_u32().to_be_bytes());
    out.extend_from_slice(&p.length.to_be_bytes());
    out.extend_from_slice(&p.request_id.to_u32().to_be_bytes());
    out.push(p.protocol_version);
    out.push(p.interface_version);
    out.push(p.message_type.code());
    out.push(p.return_code.code());
    out.extend_from_slice(&p.payload);
    Ok(out)
}

/// Decodes exactly one packet; the input must end where the length field says.
pub fn decode_packet(bytes: &[u8]) -> Result<SomeIpPacket, CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated { needed: HEADER_LEN, got: bytes.len() });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    let length = word(4);
    if length < LENGTH_BASE {
        return Err(CodecError::LengthMismatch { declared: length, actual: bytes.len() - 8 });
    }
    let needed = 8 + length as usize;
    if bytes.len() < needed {
        return Err(CodecError::Truncated { needed, got: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(CodecError::LengthMismatch { declared: length, actual: bytes.len() - 8 });
    }
    Ok(SomeIpPacket {
        message_id: MessageId::from_u32(word(0)),
        length,
        request_id: RequestId::from_u32(word(8)),
        protocol_version: bytes[12],
        interface_version: bytes[13],
        message_type: MessageType::from_code(bytes[14])?,
        return_code: ReturnCode::from_code(bytes[15])?,
        payload: bytes[HEADER_LEN..].to_vec(),
    })
}

/// True iff `res` is a well-formed answer to `req`.
pub fn validate_exchange(req: &SomeIpPacket, res: &SomeIpPacket) -> bool {
    req.message_id == res.message_id
        && req.request_id == res.request_id
        && req.protocol_version == res.protocol_version
        && req.interface_version == res.interface_version
        && req.message_type == MessageType::Request
        && matches!(res.message_type, MessageType::Response | MessageType::Error)
}
