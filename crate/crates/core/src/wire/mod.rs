//! QUIC v1 wire elements used by the probes.
//!
//! Only the long-header packet forms and the frame subset that may appear in
//! the Initial and Handshake packet-number spaces are modelled. Everything is a
//! pure function over byte slices.

mod frame;
mod header;
mod vn;

pub use frame::{parse_frames, parse_frames_spanned, AckFrame, ConnectionClose, Frame};
pub use header::{parse_long_header, split_coalesced, LongHeader, LongHeaderFields, PacketSpan, PacketType};
pub use vn::{
    build_version_negotiation, build_vn_trigger_datagram, is_reserved_version, parse_version_negotiation,
    VersionNegotiation, DEFAULT_RESERVED_VERSION,
};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// QUIC version 1 (RFC 9000).
pub const QUIC_V1: u32 = 0x0000_0001;

/// Smallest UDP payload a client may use for a datagram carrying an Initial.
pub const MIN_INITIAL_DATAGRAM: usize = 1200;

pub const MAX_CID_LEN: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("varint value {0} exceeds 2^62-1")]
    VarIntOutOfRange(u64),
    #[error("truncated {what} at offset {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("connection id length {len} exceeds 20 (offset {offset})")]
    ConnectionIdTooLong { len: usize, offset: usize },
    #[error("not a long header packet")]
    NotLongHeader,
    #[error("packet length {length} overruns datagram at offset {offset}")]
    LengthOverrun { length: u64, offset: usize },
    #[error("version negotiation carries no versions")]
    EmptyVersionList,
    #[error("version negotiation has {0} trailing bytes")]
    PartialVersion(usize),
    #[error("not a version negotiation packet (version {0:#010x})")]
    NotVersionNegotiation(u32),
    #[error("invalid ack range at offset {offset}")]
    InvalidAckRange { offset: usize },
    #[error("crypto frame at offset {offset} exceeds the 2^62-1 stream limit")]
    CryptoOverflow { offset: usize },
}

/// Variable-length integer, `0..2^62`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct VarInt(u64);

impl VarInt {
    pub const MAX: VarInt = VarInt((1 << 62) - 1);
    pub const ZERO: VarInt = VarInt(0);

    pub fn new(v: u64) -> Result<Self, WireError> {
        if v > Self::MAX.0 {
            return Err(WireError::VarIntOutOfRange(v));
        }
        Ok(VarInt(v))
    }

    pub const fn from_u32(v: u32) -> Self {
        VarInt(v as u64)
    }

    pub const fn into_inner(self) -> u64 {
        self.0
    }

    /// Length of the shortest encoding.
    pub const fn encoded_len(self) -> usize {
        match self.0 {
            0..=0x3f => 1,
            0x40..=0x3fff => 2,
            0x4000..=0x3fff_ffff => 4,
            _ => 8,
        }
    }

    pub fn encode(self, out: &mut Vec<u8>) {
        let v = self.0;
        match self.encoded_len() {
            1 => out.push(v as u8),
            2 => out.extend_from_slice(&((v as u16) | 0x4000).to_be_bytes()),
            4 => out.extend_from_slice(&((v as u32) | 0x8000_0000).to_be_bytes()),
            _ => out.extend_from_slice(&(v | 0xc000_0000_0000_0000).to_be_bytes()),
        }
    }
}

impl TryFrom<u64> for VarInt {
    type Error = WireError;
    fn try_from(v: u64) -> Result<Self, WireError> {
        VarInt::new(v)
    }
}

impl From<VarInt> for u64 {
    fn from(v: VarInt) -> u64 {
        v.0
    }
}

impl From<u32> for VarInt {
    fn from(v: u32) -> Self {
        VarInt(v as u64)
    }
}

impl fmt::Display for VarInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Shortest encoding of `v`.
pub fn encode_varint(v: u64) -> Result<Vec<u8>, WireError> {
    let v = VarInt::new(v)?;
    let mut out = Vec::with_capacity(8);
    v.encode(&mut out);
    Ok(out)
}

/// Decodes one varint from the front of `buf`, returning it with the number of
/// bytes consumed.
pub fn decode_varint(buf: &[u8]) -> Result<(VarInt, usize), WireError> {
    let mut r = Reader::new(buf);
    let v = r.varint()?;
    Ok((v, r.position()))
}

/// Connection ID of at most 20 bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ConnectionId {
    len: u8,
    bytes: [u8; MAX_CID_LEN],
}

impl ConnectionId {
    pub const EMPTY: ConnectionId = ConnectionId { len: 0, bytes: [0; MAX_CID_LEN] };

    pub fn new(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() > MAX_CID_LEN {
            return Err(WireError::ConnectionIdTooLong { len: bytes.len(), offset: 0 });
        }
        let mut cid = ConnectionId { len: bytes.len() as u8, bytes: [0; MAX_CID_LEN] };
        cid.bytes[..bytes.len()].copy_from_slice(bytes);
        Ok(cid)
    }

    /// Random connection ID of `len` bytes (clamped to 20).
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Self {
        let len = len.min(MAX_CID_LEN);
        let mut cid = ConnectionId { len: len as u8, bytes: [0; MAX_CID_LEN] };
        rng.fill(&mut cid.bytes[..len]);
        cid
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }
}

impl std::ops::Deref for ConnectionId {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        self.as_slice()
    }
}

impl fmt::Debug for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cid(")?;
        for b in self.as_slice() {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// Bounds-checked cursor over a byte slice. Errors carry the absolute offset of
/// the read that failed.
#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0, base: 0 }
    }

    /// Reader whose reported offsets are shifted by `base`.
    pub fn with_base(buf: &'a [u8], base: usize) -> Self {
        Reader { buf, pos: 0, base }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let r = &self.buf[self.pos..];
        self.pos = self.buf.len();
        r
    }

    pub fn peek_u8(&self) -> Option<u8> {
        self.buf.get(self.pos).copied()
    }

    pub fn bytes(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated { what, offset: self.offset() });
        }
        let r = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(r)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, WireError> {
        Ok(self.bytes(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16, WireError> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    pub fn u24(&mut self, what: &'static str) -> Result<u32, WireError> {
        let b = self.bytes(3, what)?;
        Ok(u32::from_be_bytes([0, b[0], b[1], b[2]]))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, WireError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn varint(&mut self) -> Result<VarInt, WireError> {
        let first = self.peek_u8().ok_or(WireError::Truncated { what: "varint", offset: self.offset() })?;
        let len = 1usize << (first >> 6);
        let b = self.bytes(len, "varint")?;
        let mut v = u64::from(b[0] & 0x3f);
        for &x in &b[1..] {
            v = (v << 8) | u64::from(x);
        }
        Ok(VarInt(v))
    }

    /// Length-prefixed (u8) connection ID.
    pub fn cid(&mut self) -> Result<ConnectionId, WireError> {
        let at = self.offset();
        let len = self.u8("connection id length")? as usize;
        if len > MAX_CID_LEN {
            return Err(WireError::ConnectionIdTooLong { len, offset: at });
        }
        ConnectionId::new(self.bytes(len, "connection id")?)
    }
}
