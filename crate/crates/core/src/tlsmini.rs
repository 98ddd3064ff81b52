//! Just enough TLS 1.3 to run a QUIC probe: build the ClientHello, read the
//! ServerHello and EncryptedExtensions, and keep the extension and
//! transport-parameter orders exactly as they appeared on the wire.
//!
//! The server-side builders at the bottom are used by the lab harness.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pktcrypto::{
    KeyExchange, Space, TranscriptState, GROUP_X25519, TLS_AES_128_GCM_SHA256, TLS_CHACHA20_POLY1305_SHA256,
};
use crate::wire::{ConnectionId, Reader, VarInt, WireError};

pub const HS_CLIENT_HELLO: u8 = 1;
pub const HS_SERVER_HELLO: u8 = 2;
pub const HS_ENCRYPTED_EXTENSIONS: u8 = 8;

pub const EXT_SERVER_NAME: u16 = 0;
pub const EXT_SUPPORTED_GROUPS: u16 = 10;
pub const EXT_SIGNATURE_ALGORITHMS: u16 = 13;
pub const EXT_ALPN: u16 = 16;
pub const EXT_SUPPORTED_VERSIONS: u16 = 43;
pub const EXT_COOKIE: u16 = 44;
pub const EXT_KEY_SHARE: u16 = 51;
pub const EXT_QUIC_TRANSPORT_PARAMETERS: u16 = 57;

pub const TLS13: u16 = 0x0304;

/// ServerHello.random value that marks a HelloRetryRequest.
pub const HRR_RANDOM: [u8; 32] = [
    0xcf, 0x21, 0xad, 0x74, 0xe5, 0x9a, 0x61, 0x11, 0xbe, 0x1d, 0x8c, 0x02, 0x1e, 0x65, 0xb8, 0x91, 0xc2, 0xa2, 0x11,
    0x16, 0x7a, 0xbb, 0x8c, 0x5e, 0x07, 0x9e, 0x09, 0xe2, 0xc8, 0xa8, 0x33, 0x9c,
];

/// Transport parameter ids used by the probe client.
pub mod tp {
    pub const ORIGINAL_DESTINATION_CONNECTION_ID: u64 = 0x00;
    pub const MAX_IDLE_TIMEOUT: u64 = 0x01;
    pub const STATELESS_RESET_TOKEN: u64 = 0x02;
    pub const MAX_UDP_PAYLOAD_SIZE: u64 = 0x03;
    pub const INITIAL_MAX_DATA: u64 = 0x04;
    pub const INITIAL_MAX_STREAM_DATA_BIDI_LOCAL: u64 = 0x05;
    pub const INITIAL_MAX_STREAM_DATA_BIDI_REMOTE: u64 = 0x06;
    pub const INITIAL_MAX_STREAM_DATA_UNI: u64 = 0x07;
    pub const INITIAL_MAX_STREAMS_BIDI: u64 = 0x08;
    pub const INITIAL_MAX_STREAMS_UNI: u64 = 0x09;
    pub const ACK_DELAY_EXPONENT: u64 = 0x0a;
    pub const MAX_ACK_DELAY: u64 = 0x0b;
    pub const DISABLE_ACTIVE_MIGRATION: u64 = 0x0c;
    pub const ACTIVE_CONNECTION_ID_LIMIT: u64 = 0x0e;
    pub const INITIAL_SOURCE_CONNECTION_ID: u64 = 0x0f;
    pub const RETRY_SOURCE_CONNECTION_ID: u64 = 0x10;
}

const SIGNATURE_ALGORITHMS: [u16; 9] = [0x0403, 0x0804, 0x0401, 0x0503, 0x0805, 0x0501, 0x0806, 0x0601, 0x0807];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TlsError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("expected handshake message type {expected}, got {got}")]
    UnexpectedMessage { expected: u8, got: u8 },
    #[error("mandatory extension {0} missing")]
    MissingExtension(u16),
    #[error("extension {0} appears more than once")]
    DuplicateExtension(u16),
    #[error("ALPN list must hold at least one protocol")]
    EmptyAlpn,
    #[error("ALPN entry of {0} bytes is outside 1..=255")]
    AlpnEntryLength(usize),
    #[error("handshake message length {declared} disagrees with {actual} available bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("conflicting {space:?} CRYPTO data at stream offset {offset}")]
    CryptoConflict { space: Space, offset: u64 },
    #[error("{space:?} CRYPTO stream exceeds {limit} bytes")]
    CryptoTooLarge { space: Space, limit: usize },
}

/// One transport parameter as (id, raw value).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransportParam {
    pub id: u64,
    #[serde(with = "crate::hexbytes")]
    pub value: Vec<u8>,
}

impl TransportParam {
    pub fn new(id: u64, value: impl Into<Vec<u8>>) -> Self {
        TransportParam { id, value: value.into() }
    }

    pub fn varint(id: u64, v: u64) -> Self {
        let mut value = Vec::new();
        VarInt::new(v).expect("parameter value").encode(&mut value);
        TransportParam { id, value }
    }
}

pub fn encode_transport_params(params: &[TransportParam]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in params {
        VarInt::new(p.id).expect("parameter id").encode(&mut out);
        VarInt::new(p.value.len() as u64).expect("length").encode(&mut out);
        out.extend_from_slice(&p.value);
    }
    out
}

pub fn parse_transport_params(body: &[u8]) -> Result<Vec<TransportParam>, TlsError> {
    let mut r = Reader::new(body);
    let mut out = Vec::new();
    while !r.is_empty() {
        let id = r.varint()?.into_inner();
        let len = r.varint()?.into_inner() as usize;
        let value = r.bytes(len, "transport parameter")?.to_vec();
        out.push(TransportParam { id, value });
    }
    Ok(out)
}

/// The parameters the probe client sends.
pub fn default_client_transport_params(scid: &ConnectionId) -> Vec<TransportParam> {
    vec![
        TransportParam::varint(tp::INITIAL_MAX_DATA, 1 << 20),
        TransportParam::varint(tp::INITIAL_MAX_STREAM_DATA_BIDI_REMOTE, 1 << 19),
        TransportParam::varint(tp::INITIAL_MAX_STREAM_DATA_UNI, 1 << 19),
        TransportParam::varint(tp::INITIAL_MAX_STREAMS_BIDI, 100),
        TransportParam::varint(tp::INITIAL_MAX_STREAMS_UNI, 100),
        TransportParam::new(tp::INITIAL_SOURCE_CONNECTION_ID, scid.as_slice()),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientHelloConfig {
    pub sni: Option<String>,
    pub alpn: Vec<String>,
    pub transport_params: Vec<TransportParam>,
    pub key_exchange: KeyExchange,
    pub ciphers: Vec<u16>,
    pub random: [u8; 32],
    /// Echoed from a HelloRetryRequest.
    pub cookie: Option<Vec<u8>>,
}

impl ClientHelloConfig {
    pub fn new(key_exchange: KeyExchange, random: [u8; 32], scid: &ConnectionId, alpn: &[&str]) -> Self {
        ClientHelloConfig {
            sni: None,
            alpn: alpn.iter().map(|s| s.to_string()).collect(),
            transport_params: default_client_transport_params(scid),
            key_exchange,
            ciphers: vec![TLS_AES_128_GCM_SHA256, TLS_CHACHA20_POLY1305_SHA256],
            random,
            cookie: None,
        }
    }

    pub fn with_sni(mut self, sni: Option<String>) -> Self {
        self.sni = sni;
        self
    }

    fn validate(&self) -> Result<(), TlsError> {
        if self.alpn.is_empty() {
            return Err(TlsError::EmptyAlpn);
        }
        if let Some(bad) = self.alpn.iter().find(|p| p.is_empty() || p.len() > 255) {
            return Err(TlsError::AlpnEntryLength(bad.len()));
        }
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v)
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes())
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b)
    }
    /// Writes a length prefix of `width` bytes around whatever `f` writes.
    fn prefixed(&mut self, width: usize, f: impl FnOnce(&mut Writer)) {
        let at = self.0.len();
        self.0.extend(std::iter::repeat_n(0, width));
        f(self);
        let len = self.0.len() - at - width;
        let be = (len as u32).to_be_bytes();
        self.0[at..at + width].copy_from_slice(&be[4 - width..]);
    }
    fn extension(&mut self, id: u16, f: impl FnOnce(&mut Writer)) {
        self.u16(id);
        self.prefixed(2, f);
    }
}

pub fn alpn_extension_body(protocols: &[&[u8]]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.prefixed(2, |w| {
        for p in protocols {
            w.u8(p.len() as u8);
            w.bytes(p);
        }
    });
    w.0
}

/// Builds the ClientHello handshake message and starts the transcript with it.
pub fn build_client_hello(cfg: &ClientHelloConfig) -> Result<(Vec<u8>, TranscriptState), TlsError> {
    cfg.validate()?;
    let mut w = Writer(Vec::with_capacity(512));
    w.u8(HS_CLIENT_HELLO);
    w.prefixed(3, |w| {
        w.u16(0x0303);
        w.bytes(&cfg.random);
        w.u8(0);
        w.prefixed(2, |w| cfg.ciphers.iter().for_each(|&c| w.u16(c)));
        w.u8(1);
        w.u8(0);
        w.prefixed(2, |w| {
            if let Some(sni) = &cfg.sni {
                w.extension(EXT_SERVER_NAME, |w| {
                    w.prefixed(2, |w| {
                        w.u8(0);
                        w.prefixed(2, |w| w.bytes(sni.as_bytes()));
                    })
                });
            }
            w.extension(EXT_SUPPORTED_GROUPS, |w| w.prefixed(2, |w| w.u16(GROUP_X25519)));
            w.extension(EXT_SIGNATURE_ALGORITHMS, |w| {
                w.prefixed(2, |w| SIGNATURE_ALGORITHMS.iter().for_each(|&s| w.u16(s)))
            });
            let alpn: Vec<&[u8]> = cfg.alpn.iter().map(|s| s.as_bytes()).collect();
            w.extension(EXT_ALPN, |w| w.bytes(&alpn_extension_body(&alpn)));
            w.extension(EXT_KEY_SHARE, |w| {
                w.prefixed(2, |w| {
                    w.u16(GROUP_X25519);
                    w.prefixed(2, |w| w.bytes(&cfg.key_exchange.public));
                })
            });
            w.extension(EXT_SUPPORTED_VERSIONS, |w| w.prefixed(1, |w| w.u16(TLS13)));
            if let Some(cookie) = &cfg.cookie {
                w.extension(EXT_COOKIE, |w| w.prefixed(2, |w| w.bytes(cookie)));
            }
            w.extension(EXT_QUIC_TRANSPORT_PARAMETERS, |w| w.bytes(&encode_transport_params(&cfg.transport_params)));
        });
    });
    let mut transcript = TranscriptState::new();
    transcript.push(&w.0);
    Ok((w.0, transcript))
}

/// Reads the handshake header and returns the body. The message must span
/// `msg` exactly.
fn handshake_body(msg: &[u8], expected: u8) -> Result<&[u8], TlsError> {
    let mut r = Reader::new(msg);
    let ty = r.u8("handshake type")?;
    if ty != expected {
        return Err(TlsError::UnexpectedMessage { expected, got: ty });
    }
    let len = r.u24("handshake length")? as usize;
    if len != r.remaining() {
        return Err(TlsError::LengthMismatch { declared: len, actual: r.remaining() });
    }
    Ok(r.rest())
}

/// Extensions as (id, body, absolute offset of the id) in wire order.
fn read_extensions<'a>(r: &mut Reader<'a>) -> Result<Vec<(u16, &'a [u8])>, TlsError> {
    let len = r.u16("extensions length")? as usize;
    let base = r.offset();
    let mut er = Reader::with_base(r.bytes(len, "extensions")?, base);
    let mut out = Vec::new();
    while !er.is_empty() {
        let id = er.u16("extension type")?;
        let n = er.u16("extension length")? as usize;
        out.push((id, er.bytes(n, "extension body")?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientHelloSummary {
    pub random: [u8; 32],
    pub session_id: Vec<u8>,
    pub ciphers: Vec<u16>,
    pub ext_order: Vec<u16>,
    pub sni: Option<String>,
    pub alpn: Vec<Vec<u8>>,
    pub x25519_share: Option<[u8; 32]>,
    pub transport_params: Vec<TransportParam>,
    pub cookie: Option<Vec<u8>>,
}

pub fn parse_client_hello(msg: &[u8]) -> Result<ClientHelloSummary, TlsError> {
    let body = handshake_body(msg, HS_CLIENT_HELLO)?;
    let mut r = Reader::with_base(body, 4);
    r.u16("legacy version")?;
    let random: [u8; 32] = r.bytes(32, "random")?.try_into().expect("32");
    let sid_len = r.u8("session id length")? as usize;
    let session_id = r.bytes(sid_len, "session id")?.to_vec();
    let n = r.u16("cipher suites length")? as usize;
    let ciphers = r.bytes(n, "cipher suites")?.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    let n = r.u8("compression length")? as usize;
    r.bytes(n, "compression methods")?;
    let exts = read_extensions(&mut r)?;

    let mut out = ClientHelloSummary {
        random,
        session_id,
        ciphers,
        ext_order: exts.iter().map(|e| e.0).collect(),
        sni: None,
        alpn: Vec::new(),
        x25519_share: None,
        transport_params: Vec::new(),
        cookie: None,
    };
    for (id, body) in exts {
        let mut b = Reader::new(body);
        match id {
            EXT_SERVER_NAME => {
                b.u16("server name list")?;
                if b.u8("name type")? == 0 {
                    let n = b.u16("host name length")? as usize;
                    out.sni = Some(String::from_utf8_lossy(b.bytes(n, "host name")?).into_owned());
                }
            }
            EXT_ALPN => {
                let n = b.u16("alpn list length")? as usize;
                let mut l = Reader::new(b.bytes(n, "alpn list")?);
                while !l.is_empty() {
                    let n = l.u8("protocol length")? as usize;
                    out.alpn.push(l.bytes(n, "protocol")?.to_vec());
                }
            }
            EXT_KEY_SHARE => {
                let n = b.u16("client shares length")? as usize;
                let mut l = Reader::new(b.bytes(n, "client shares")?);
                while !l.is_empty() {
                    let group = l.u16("group")?;
                    let n = l.u16("key length")? as usize;
                    let key = l.bytes(n, "key exchange")?;
                    if group == GROUP_X25519 && key.len() == 32 {
                        out.x25519_share = Some(key.try_into().expect("32"));
                    }
                }
            }
            EXT_COOKIE => {
                let n = b.u16("cookie length")? as usize;
                out.cookie = Some(b.bytes(n, "cookie")?.to_vec());
            }
            EXT_QUIC_TRANSPORT_PARAMETERS => out.transport_params = parse_transport_params(body)?,
            _ => {}
        }
    }
    Ok(out)
}

/// Relative order of supported_versions (43) and key_share (51) in the
/// ServerHello.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ExtOrderSignature {
    /// `43-51`
    VersionsFirst,
    /// `51-43`
    KeyShareFirst,
}

impl ExtOrderSignature {
    pub const ALL: [ExtOrderSignature; 2] = [ExtOrderSignature::VersionsFirst, ExtOrderSignature::KeyShareFirst];

    /// Derives the signature from a ServerHello extension order.
    pub fn from_ext_order(order: &[u16]) -> Option<Self> {
        let sv = order.iter().position(|&e| e == EXT_SUPPORTED_VERSIONS)?;
        let ks = order.iter().position(|&e| e == EXT_KEY_SHARE)?;
        Some(if sv < ks { ExtOrderSignature::VersionsFirst } else { ExtOrderSignature::KeyShareFirst })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExtOrderSignature::VersionsFirst => "43-51",
            ExtOrderSignature::KeyShareFirst => "51-43",
        }
    }
}

impl fmt::Display for ExtOrderSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExtOrderSignature {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "43-51" => Ok(ExtOrderSignature::VersionsFirst),
            "51-43" => Ok(ExtOrderSignature::KeyShareFirst),
            other => Err(format!("unknown extension order signature {other:?}")),
        }
    }
}

impl TryFrom<String> for ExtOrderSignature {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ExtOrderSignature> for String {
    fn from(s: ExtOrderSignature) -> String {
        s.as_str().to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyShareEntry {
    X25519([u8; 32]),
    Other {
        group: u16,
    },
    /// HelloRetryRequest: the group the server wants.
    Selected {
        group: u16,
    },
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerHelloSummary {
    pub cipher: u16,
    pub ext_order: Vec<u16>,
    pub key_share: KeyShareEntry,
    pub legacy_session_echo: Vec<u8>,
    pub is_hello_retry: bool,
    pub cookie: Option<Vec<u8>>,
}

impl ServerHelloSummary {
    pub fn ext_signature(&self) -> ExtOrderSignature {
        ExtOrderSignature::from_ext_order(&self.ext_order).expect("checked at parse")
    }

    pub fn server_key_share(&self) -> Option<[u8; 32]> {
        match self.key_share {
            KeyShareEntry::X25519(k) => Some(k),
            _ => None,
        }
    }
}

/// Parses a complete ServerHello (or HelloRetryRequest). Extension bodies are
/// read leniently so the recorded order never depends on their contents.
pub fn parse_server_hello(msg: &[u8]) -> Result<ServerHelloSummary, TlsError> {
    let body = handshake_body(msg, HS_SERVER_HELLO)?;
    let mut r = Reader::with_base(body, 4);
    r.u16("legacy version")?;
    let random = r.bytes(32, "random")?;
    let is_hello_retry = random == HRR_RANDOM;
    let n = r.u8("session id length")? as usize;
    let legacy_session_echo = r.bytes(n, "session id")?.to_vec();
    let cipher = r.u16("cipher suite")?;
    r.u8("compression method")?;
    let exts = read_extensions(&mut r)?;

    let ext_order: Vec<u16> = exts.iter().map(|e| e.0).collect();
    for id in [EXT_SUPPORTED_VERSIONS, EXT_KEY_SHARE] {
        match ext_order.iter().filter(|&&e| e == id).count() {
            0 => return Err(TlsError::MissingExtension(id)),
            1 => {}
            _ => return Err(TlsError::DuplicateExtension(id)),
        }
    }

    let mut key_share = KeyShareEntry::Malformed;
    let mut cookie = None;
    for (id, body) in &exts {
        match *id {
            EXT_KEY_SHARE => key_share = read_server_key_share(body, is_hello_retry),
            EXT_COOKIE => {
                let mut b = Reader::new(body);
                cookie =
                    b.u16("cookie length").ok().and_then(|n| b.bytes(n as usize, "cookie").ok()).map(<[u8]>::to_vec);
            }
            _ => {}
        }
    }
    Ok(ServerHelloSummary { cipher, ext_order, key_share, legacy_session_echo, is_hello_retry, cookie })
}

fn read_server_key_share(body: &[u8], is_hello_retry: bool) -> KeyShareEntry {
    let mut b = Reader::new(body);
    let Ok(group) = b.u16("group") else { return KeyShareEntry::Malformed };
    if is_hello_retry {
        return KeyShareEntry::Selected { group };
    }
    let Ok(n) = b.u16("key length") else { return KeyShareEntry::Malformed };
    match b.bytes(n as usize, "key") {
        Ok(k) if group == GROUP_X25519 && k.len() == 32 => KeyShareEntry::X25519(k.try_into().expect("32")),
        Ok(_) if group != GROUP_X25519 => KeyShareEntry::Other { group },
        _ => KeyShareEntry::Malformed,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedExtensionsSummary {
    pub ext_order: Vec<u16>,
    /// Transport parameters in wire order, values kept raw.
    pub tp_order: Vec<TransportParam>,
    /// Parameter ids that appeared more than once.
    pub duplicate_tp_ids: Vec<u64>,
    pub alpn: Option<Vec<u8>>,
}

pub fn parse_encrypted_extensions(msg: &[u8]) -> Result<EncryptedExtensionsSummary, TlsError> {
    let body = handshake_body(msg, HS_ENCRYPTED_EXTENSIONS)?;
    let mut r = Reader::with_base(body, 4);
    let exts = read_extensions(&mut r)?;
    let ext_order: Vec<u16> = exts.iter().map(|e| e.0).collect();
    let tp_body = exts
        .iter()
        .find(|e| e.0 == EXT_QUIC_TRANSPORT_PARAMETERS)
        .ok_or(TlsError::MissingExtension(EXT_QUIC_TRANSPORT_PARAMETERS))?
        .1;
    let tp_order = parse_transport_params(tp_body)?;

    let mut seen = std::collections::HashSet::new();
    let mut duplicate_tp_ids = Vec::new();
    for p in &tp_order {
        if !seen.insert(p.id) && !duplicate_tp_ids.contains(&p.id) {
            duplicate_tp_ids.push(p.id);
        }
    }
    let alpn = exts.iter().find(|e| e.0 == EXT_ALPN).and_then(|(_, body)| {
        let mut b = Reader::new(body);
        b.u16("alpn list").ok()?;
        let n = b.u8("protocol length").ok()?;
        b.bytes(n as usize, "protocol").ok().map(<[u8]>::to_vec)
    });
    Ok(EncryptedExtensionsSummary { ext_order, tp_order, duplicate_tp_ids, alpn })
}

/// Splits a CRYPTO stream into complete handshake messages. Returns the
/// messages and the number of bytes they cover; a trailing partial message is
/// left unconsumed.
pub fn split_handshake_messages(stream: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while stream.len() - pos >= 4 {
        let len = u32::from_be_bytes([0, stream[pos + 1], stream[pos + 2], stream[pos + 3]]) as usize;
        if stream.len() - pos < 4 + len {
            break;
        }
        out.push(&stream[pos..pos + 4 + len]);
        pos += 4 + len;
    }
    (out, pos)
}

/// Reassembly buffer for one space's CRYPTO stream.
#[derive(Debug, Clone)]
pub struct CryptoStream {
    space: Space,
    buf: Vec<u8>,
    filled: Vec<bool>,
}

impl CryptoStream {
    pub const LIMIT: usize = 1 << 20;

    pub fn new(space: Space) -> Self {
        CryptoStream { space, buf: Vec::new(), filled: Vec::new() }
    }

    pub fn insert(&mut self, offset: u64, data: &[u8]) -> Result<(), TlsError> {
        let end = offset as usize + data.len();
        if offset as usize > Self::LIMIT || end > Self::LIMIT {
            return Err(TlsError::CryptoTooLarge { space: self.space, limit: Self::LIMIT });
        }
        if end > self.buf.len() {
            self.buf.resize(end, 0);
            self.filled.resize(end, false);
        }
        let start = offset as usize;
        for (i, &b) in data.iter().enumerate() {
            let at = start + i;
            if self.filled[at] {
                if self.buf[at] != b {
                    return Err(TlsError::CryptoConflict { space: self.space, offset: at as u64 });
                }
            } else {
                self.buf[at] = b;
                self.filled[at] = true;
            }
        }
        Ok(())
    }

    /// Bytes available contiguously from offset 0.
    pub fn contiguous(&self) -> &[u8] {
        let n = self.filled.iter().position(|f| !f).unwrap_or(self.filled.len());
        &self.buf[..n]
    }

    /// Whether data beyond a hole has been received.
    pub fn has_gaps(&self) -> bool {
        self.contiguous().len() < self.buf.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reassembled {
    pub data: Vec<u8>,
    pub complete: bool,
}

/// Orders CRYPTO frame data by offset. Overlaps must agree byte for byte;
/// `complete` is false when a gap leaves later data unreachable.
pub fn reassemble_crypto(frames: &[(u64, Vec<u8>)], space: Space) -> Result<Reassembled, TlsError> {
    let mut s = CryptoStream::new(space);
    for (offset, data) in frames {
        s.insert(*offset, data)?;
    }
    Ok(Reassembled { data: s.contiguous().to_vec(), complete: !s.has_gaps() })
}

pub struct ServerHelloParams<'a> {
    pub random: [u8; 32],
    pub session_echo: &'a [u8],
    pub cipher: u16,
    pub key_share: [u8; 32],
    pub order: ExtOrderSignature,
}

pub fn build_server_hello(p: &ServerHelloParams<'_>) -> Vec<u8> {
    let mut key_share = Writer(Vec::new());
    key_share.u16(GROUP_X25519);
    key_share.prefixed(2, |w| w.bytes(&p.key_share));
    build_server_hello_raw(&p.random, p.session_echo, p.cipher, p.order, &key_share.0, None)
}

pub fn build_hello_retry_request(
    session_echo: &[u8],
    cipher: u16,
    group: u16,
    order: ExtOrderSignature,
    cookie: Option<&[u8]>,
) -> Vec<u8> {
    build_server_hello_raw(&HRR_RANDOM, session_echo, cipher, order, &group.to_be_bytes(), cookie)
}

fn build_server_hello_raw(
    random: &[u8; 32],
    session_echo: &[u8],
    cipher: u16,
    order: ExtOrderSignature,
    key_share_body: &[u8],
    cookie: Option<&[u8]>,
) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(128));
    w.u8(HS_SERVER_HELLO);
    w.prefixed(3, |w| {
        w.u16(0x0303);
        w.bytes(random);
        w.u8(session_echo.len() as u8);
        w.bytes(session_echo);
        w.u16(cipher);
        w.u8(0);
        w.prefixed(2, |w| {
            let versions = |w: &mut Writer| w.extension(EXT_SUPPORTED_VERSIONS, |w| w.u16(TLS13));
            let share = |w: &mut Writer| w.extension(EXT_KEY_SHARE, |w| w.bytes(key_share_body));
            match order {
                ExtOrderSignature::VersionsFirst => {
                    versions(w);
                    share(w);
                }
                ExtOrderSignature::KeyShareFirst => {
                    share(w);
                    versions(w);
                }
            }
            if let Some(c) = cookie {
                w.extension(EXT_COOKIE, |w| w.prefixed(2, |w| w.bytes(c)));
            }
        });
    });
    w.0
}

/// EncryptedExtensions carrying the given extensions in order.
pub fn build_encrypted_extensions(extensions: &[(u16, Vec<u8>)]) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(256));
    w.u8(HS_ENCRYPTED_EXTENSIONS);
    w.prefixed(3, |w| {
        w.prefixed(2, |w| {
            for (id, body) in extensions {
                w.extension(*id, |w| w.bytes(body));
            }
        })
    });
    w.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(alpn: &[&str]) -> ClientHelloConfig {
        let scid = ConnectionId::new(&[5; 8]).unwrap();
        ClientHelloConfig::new(KeyExchange::from_private([3; 32]), [9; 32], &scid, alpn)
    }

    #[test]
    fn invalid_alpn_client_hello() {
        let (msg, transcript) = build_client_hello(&cfg(&["invalid"])).unwrap();
        assert_eq!(transcript.message_types(), &[HS_CLIENT_HELLO]);
        let ch = parse_client_hello(&msg).unwrap();
        assert_eq!(ch.alpn, vec![b"invalid".to_vec()]);
        assert_eq!(ch.sni, None);
        assert!(!ch.ext_order.contains(&EXT_SERVER_NAME));
        for ext in [EXT_SUPPORTED_VERSIONS, EXT_KEY_SHARE, EXT_SIGNATURE_ALGORITHMS, EXT_QUIC_TRANSPORT_PARAMETERS] {
            assert!(ch.ext_order.contains(&ext), "{ext}");
        }
        assert_eq!(ch.x25519_share, Some(KeyExchange::from_private([3; 32]).public));
        assert!(ch.session_id.is_empty());
    }

    #[test]
    fn sni_is_echoed() {
        let (msg, _) = build_client_hello(&cfg(&["h3"]).with_sni(Some("example.com".into()))).unwrap();
        let ch = parse_client_hello(&msg).unwrap();
        assert_eq!(ch.sni.as_deref(), Some("example.com"));
        assert_eq!(ch.ext_order[0], EXT_SERVER_NAME);
    }

    #[test]
    fn transport_params_round_trip() {
        let c = cfg(&["h3"]);
        let (msg, _) = build_client_hello(&c).unwrap();
        let ch = parse_client_hello(&msg).unwrap();
        assert_eq!(ch.transport_params, c.transport_params);
        let scid = ch.transport_params.iter().find(|p| p.id == tp::INITIAL_SOURCE_CONNECTION_ID).unwrap();
        assert_eq!(scid.value, vec![5; 8]);
    }

    #[test]
    fn alpn_validation() {
        assert_eq!(build_client_hello(&cfg(&[])).unwrap_err(), TlsError::EmptyAlpn);
        let long = "x".repeat(256);
        assert_eq!(build_client_hello(&cfg(&[&long])).unwrap_err(), TlsError::AlpnEntryLength(256));
        assert_eq!(build_client_hello(&cfg(&[""])).unwrap_err(), TlsError::AlpnEntryLength(0));
    }

    #[test]
    fn client_hello_is_deterministic() {
        assert_eq!(build_client_hello(&cfg(&["h3"])).unwrap().0, build_client_hello(&cfg(&["h3"])).unwrap().0);
    }

    fn sh(order: ExtOrderSignature) -> Vec<u8> {
        build_server_hello(&ServerHelloParams {
            random: [1; 32],
            session_echo: &[],
            cipher: TLS_AES_128_GCM_SHA256,
            key_share: [7; 32],
            order,
        })
    }

    #[test]
    fn server_hello_orders() {
        let s = parse_server_hello(&sh(ExtOrderSignature::KeyShareFirst)).unwrap();
        assert_eq!(s.ext_order, vec![51, 43]);
        assert_eq!(s.ext_signature().to_string(), "51-43");
        assert_eq!(s.server_key_share(), Some([7; 32]));
        let s = parse_server_hello(&sh(ExtOrderSignature::VersionsFirst)).unwrap();
        assert_eq!(s.ext_signature().to_string(), "43-51");
        assert!(!s.is_hello_retry);
    }

    #[test]
    fn server_hello_missing_key_share() {
        let mut w = Writer(Vec::new());
        w.u8(HS_SERVER_HELLO);
        w.prefixed(3, |w| {
            w.u16(0x0303);
            w.bytes(&[0; 32]);
            w.u8(0);
            w.u16(TLS_AES_128_GCM_SHA256);
            w.u8(0);
            w.prefixed(2, |w| w.extension(EXT_SUPPORTED_VERSIONS, |w| w.u16(TLS13)));
        });
        assert_eq!(parse_server_hello(&w.0), Err(TlsError::MissingExtension(EXT_KEY_SHARE)));
        let full = sh(ExtOrderSignature::VersionsFirst);
        assert!(matches!(parse_server_hello(&full[..full.len() - 1]), Err(TlsError::LengthMismatch { .. })));
    }

    #[test]
    fn hello_retry_detected() {
        let hrr =
            build_hello_retry_request(&[], TLS_AES_128_GCM_SHA256, 0x17, ExtOrderSignature::VersionsFirst, Some(b"ck"));
        let s = parse_server_hello(&hrr).unwrap();
        assert!(s.is_hello_retry);
        assert_eq!(s.key_share, KeyShareEntry::Selected { group: 0x17 });
        assert_eq!(s.cookie.as_deref(), Some(&b"ck"[..]));
    }

    fn ee(ids: &[u64], with_alpn: bool) -> Vec<u8> {
        let params: Vec<_> = ids.iter().map(|&id| TransportParam::varint(id, id * 3)).collect();
        let mut exts = Vec::new();
        if with_alpn {
            exts.push((EXT_ALPN, alpn_extension_body(&[b"h3"])));
        }
        exts.push((EXT_QUIC_TRANSPORT_PARAMETERS, encode_transport_params(&params)));
        build_encrypted_extensions(&exts)
    }

    #[test]
    fn encrypted_extensions_orders() {
        let quic_go = [0x6, 0x7, 0x4, 0x8, 0x3, 0xb, 0x2, 0x0, 0xf];
        let s = parse_encrypted_extensions(&ee(&quic_go, true)).unwrap();
        assert_eq!(s.tp_order.iter().map(|p| p.id).collect::<Vec<_>>(), quic_go);
        assert_eq!(s.ext_order, vec![EXT_ALPN, EXT_QUIC_TRANSPORT_PARAMETERS]);
        assert_eq!(s.alpn.as_deref(), Some(&b"h3"[..]));
        assert!(s.duplicate_tp_ids.is_empty());

        let s = parse_encrypted_extensions(&ee(&[0x0, 0x4, 0x0], false)).unwrap();
        assert_eq!(s.duplicate_tp_ids, vec![0]);
        assert_eq!(s.alpn, None);

        let no_tp = build_encrypted_extensions(&[(EXT_ALPN, alpn_extension_body(&[b"h3"]))]);
        assert_eq!(parse_encrypted_extensions(&no_tp), Err(TlsError::MissingExtension(57)));
    }

    #[test]
    fn reassembly() {
        let a = (0u64, vec![1u8; 100]);
        let b = (100u64, vec![2u8; 20]);
        let r = reassemble_crypto(&[a.clone(), b.clone()], Space::Initial).unwrap();
        assert_eq!(r.data.len(), 120);
        assert!(r.complete);
        assert_eq!(reassemble_crypto(&[b.clone(), a.clone()], Space::Initial).unwrap(), r);
        let conflict = (90u64, vec![9u8; 20]);
        assert_eq!(
            reassemble_crypto(&[a.clone(), conflict], Space::Handshake),
            Err(TlsError::CryptoConflict { space: Space::Handshake, offset: 90 })
        );
        let gap = reassemble_crypto(&[b], Space::Initial).unwrap();
        assert!(gap.data.is_empty() && !gap.complete);
    }

    #[test]
    fn handshake_split() {
        let s1 = sh(ExtOrderSignature::VersionsFirst);
        let e = ee(&[1, 2], false);
        let mut stream = [s1.clone(), e.clone()].concat();
        stream.extend_from_slice(&[8, 0, 0, 9, 1]);
        let (msgs, used) = split_handshake_messages(&stream);
        assert_eq!(msgs, vec![&s1[..], &e[..]]);
        assert_eq!(used, s1.len() + e.len());
    }

    proptest! {
        #[test]
        fn reassembly_permutation_invariant(
            data in proptest::collection::vec(any::<u8>(), 1..400),
            cuts in proptest::collection::vec(0usize..400, 0..8),
            seed in any::<u64>(),
        ) {
            let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c % data.len()).collect();
            cuts.push(0);
            cuts.push(data.len());
            cuts.sort_unstable();
            cuts.dedup();
            let mut frames: Vec<(u64, Vec<u8>)> =
                cuts.windows(2).map(|w| (w[0] as u64, data[w[0]..w[1]].to_vec())).collect();
            let mut rng = <rand::rngs::StdRng as rand::SeedableRng>::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(frames.as_mut_slice(), &mut rng);
            let r = reassemble_crypto(&frames, Space::Handshake).unwrap();
            prop_assert_eq!(r.data, data);
            prop_assert!(r.complete);
        }

        #[test]
        fn ext_order_ignores_extension_values(order in prop::sample::select(ExtOrderSignature::ALL.to_vec()), which in 0usize..2) {
            // Rebuild the ServerHello with one extension body truncated to zero.
            let full = parse_server_hello(&sh(order)).unwrap();
            let mut w = Writer(Vec::new());
            w.u8(HS_SERVER_HELLO);
            w.prefixed(3, |w| {
                w.u16(0x0303);
                w.bytes(&[1; 32]);
                w.u8(0);
                w.u16(TLS_AES_128_GCM_SHA256);
                w.u8(0);
                w.prefixed(2, |w| {
                    for (i, id) in full.ext_order.iter().enumerate() {
                        w.u16(*id);
                        if i == which {
                            w.u16(0);
                        } else if *id == EXT_KEY_SHARE {
                            w.prefixed(2, |w| { w.u16(GROUP_X25519); w.prefixed(2, |w| w.bytes(&[7; 32])); });
                        } else {
                            w.prefixed(2, |w| w.u16(TLS13));
                        }
                    }
                });
            });
            let emptied = parse_server_hello(&w.0).unwrap();
            prop_assert_eq!(&emptied.ext_order, &full.ext_order);
            prop_assert_eq!(emptied.ext_signature(), full.ext_signature());
        }
    }
}
