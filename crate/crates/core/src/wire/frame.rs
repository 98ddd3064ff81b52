use std::borrow::Cow;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Reader, VarInt, WireError};

const PADDING: u64 = 0x00;
const PING: u64 = 0x01;
const ACK: u64 = 0x02;
const ACK_ECN: u64 = 0x03;
const CRYPTO: u64 = 0x06;
const CLOSE_TRANSPORT: u64 = 0x1c;
const CLOSE_APPLICATION: u64 = 0x1d;

/// Frames that may appear in Initial and Handshake packets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    /// A run of consecutive PADDING bytes.
    Padding {
        len: usize,
    },
    Ping,
    Ack(AckFrame),
    Crypto {
        offset: u64,
        data: Vec<u8>,
    },
    ConnectionClose(ConnectionClose),
    /// Frame type this parser does not model. Its length is unknown, so it
    /// absorbs the remainder of the payload.
    Opaque {
        frame_type: u64,
        data: Vec<u8>,
    },
}

/// ACK ranges as inclusive `(smallest, largest)` pairs in descending order.
/// ECN counts are skipped on parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckFrame {
    pub delay: u64,
    pub ranges: Vec<(u64, u64)>,
}

impl AckFrame {
    pub fn largest(&self) -> u64 {
        self.ranges.first().map_or(0, |r| r.1)
    }

    /// Builds ranges from a set of packet numbers.
    pub fn from_packet_numbers(pns: &[u64], delay: u64) -> Option<Self> {
        let mut pns = pns.to_vec();
        pns.sort_unstable_by(|a, b| b.cmp(a));
        pns.dedup();
        let mut ranges: Vec<(u64, u64)> = Vec::new();
        for pn in pns {
            match ranges.last_mut() {
                Some(r) if r.0 == pn + 1 => r.0 = pn,
                _ => ranges.push((pn, pn)),
            }
        }
        (!ranges.is_empty()).then_some(AckFrame { delay, ranges })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionClose {
    pub code: VarInt,
    /// Present iff this is a transport-level close (type 0x1c).
    pub frame_type: Option<VarInt>,
    pub reason: String,
    /// Reason bytes as received.
    pub raw_reason: Vec<u8>,
    /// Set when `raw_reason` was not valid UTF-8 and `reason` is a lossy copy.
    pub reason_lossy: bool,
    pub is_application: bool,
}

impl ConnectionClose {
    pub fn transport(code: u64, frame_type: u64, reason: &str) -> Self {
        ConnectionClose {
            code: VarInt::new(code).expect("error code"),
            frame_type: Some(VarInt::new(frame_type).expect("frame type")),
            reason: reason.to_owned(),
            raw_reason: reason.as_bytes().to_vec(),
            reason_lossy: false,
            is_application: false,
        }
    }

    pub fn application(code: u64, reason: &str) -> Self {
        ConnectionClose {
            code: VarInt::new(code).expect("error code"),
            frame_type: None,
            reason: reason.to_owned(),
            raw_reason: reason.as_bytes().to_vec(),
            reason_lossy: false,
            is_application: true,
        }
    }
}

impl Frame {
    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Frame::Padding { len } => out.extend(std::iter::repeat_n(0u8, *len)),
            Frame::Ping => out.push(PING as u8),
            Frame::Ack(ack) => {
                out.push(ACK as u8);
                let (first_small, largest) = ack.ranges[0];
                vi(largest, out);
                vi(ack.delay, out);
                vi(ack.ranges.len() as u64 - 1, out);
                vi(largest - first_small, out);
                let mut prev_small = first_small;
                for &(small, large) in &ack.ranges[1..] {
                    vi(prev_small - large - 2, out);
                    vi(large - small, out);
                    prev_small = small;
                }
            }
            Frame::Crypto { offset, data } => {
                out.push(CRYPTO as u8);
                vi(*offset, out);
                vi(data.len() as u64, out);
                out.extend_from_slice(data);
            }
            Frame::ConnectionClose(c) => {
                match c.frame_type {
                    Some(ft) if !c.is_application => {
                        out.push(CLOSE_TRANSPORT as u8);
                        c.code.encode(out);
                        ft.encode(out);
                    }
                    _ => {
                        out.push(CLOSE_APPLICATION as u8);
                        c.code.encode(out);
                    }
                }
                vi(c.raw_reason.len() as u64, out);
                out.extend_from_slice(&c.raw_reason);
            }
            Frame::Opaque { frame_type, data } => {
                vi(*frame_type, out);
                out.extend_from_slice(data);
            }
        }
    }
}

fn vi(v: u64, out: &mut Vec<u8>) {
    VarInt::new(v).expect("varint in range").encode(out)
}

/// Parses a decrypted packet payload into frames in wire order.
pub fn parse_frames(plaintext: &[u8]) -> Result<Vec<Frame>, WireError> {
    Ok(parse_frames_spanned(plaintext)?.into_iter().map(|(_, f)| f).collect())
}

/// Like [`parse_frames`], also returning the byte range each frame occupied.
pub fn parse_frames_spanned(plaintext: &[u8]) -> Result<Vec<(Range<usize>, Frame)>, WireError> {
    let mut r = Reader::new(plaintext);
    let mut frames = Vec::new();
    while !r.is_empty() {
        let at = r.offset();
        let ty = r.varint()?.into_inner();
        let frame = match ty {
            PADDING => {
                let mut len = 1;
                while r.peek_u8() == Some(0) {
                    r.u8("padding")?;
                    len += 1;
                }
                Frame::Padding { len }
            }
            PING => Frame::Ping,
            ACK | ACK_ECN => {
                let largest = r.varint()?.into_inner();
                let delay = r.varint()?.into_inner();
                let count = r.varint()?.into_inner();
                let first = r.varint()?.into_inner();
                let mut small = largest.checked_sub(first).ok_or(WireError::InvalidAckRange { offset: at })?;
                let mut ranges = vec![(small, largest)];
                for _ in 0..count {
                    let gap = r.varint()?.into_inner();
                    let len = r.varint()?.into_inner();
                    let large = small
                        .checked_sub(gap)
                        .and_then(|v| v.checked_sub(2))
                        .ok_or(WireError::InvalidAckRange { offset: r.offset() })?;
                    small = large.checked_sub(len).ok_or(WireError::InvalidAckRange { offset: r.offset() })?;
                    ranges.push((small, large));
                }
                if ty == ACK_ECN {
                    for _ in 0..3 {
                        r.varint()?;
                    }
                }
                Frame::Ack(AckFrame { delay, ranges })
            }
            CRYPTO => {
                let offset = r.varint()?.into_inner();
                let len = r.varint()?.into_inner() as usize;
                if offset + len as u64 > VarInt::MAX.into_inner() {
                    return Err(WireError::CryptoOverflow { offset: at });
                }
                Frame::Crypto { offset, data: r.bytes(len, "crypto data")?.to_vec() }
            }
            CLOSE_TRANSPORT | CLOSE_APPLICATION => {
                let code = r.varint()?;
                let frame_type = if ty == CLOSE_TRANSPORT { Some(r.varint()?) } else { None };
                let len = r.varint()?.into_inner() as usize;
                let raw = r.bytes(len, "reason phrase")?;
                let (reason, reason_lossy) = match String::from_utf8_lossy(raw) {
                    Cow::Borrowed(s) => (s.to_owned(), false),
                    Cow::Owned(s) => (s, true),
                };
                Frame::ConnectionClose(ConnectionClose {
                    code,
                    frame_type,
                    reason,
                    raw_reason: raw.to_vec(),
                    reason_lossy,
                    is_application: ty == CLOSE_APPLICATION,
                })
            }
            other => Frame::Opaque { frame_type: other, data: r.rest().to_vec() },
        };
        frames.push((at..r.offset(), frame));
    }
    Ok(frames)
}
