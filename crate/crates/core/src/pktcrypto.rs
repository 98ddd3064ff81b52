//! Packet protection for the Initial and Handshake packet-number spaces.
//!
//! Initial keys follow RFC 9001 section 5.2. Handshake keys run the TLS 1.3 key
//! schedule up to the handshake traffic secrets and expand them with the QUIC
//! labels (`quic key`, `quic iv`, `quic hp`).

use aes::cipher::BlockEncrypt;
use aes_gcm::aead::{Aead as _, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Aes256Gcm};
use chacha20::cipher::{KeyIvInit, StreamCipher, StreamCipherSeek};
use chacha20poly1305::ChaCha20Poly1305;
use hkdf::Hkdf;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::{ConnectionId, Frame, LongHeader, LongHeaderFields, VarInt, WireError, QUIC_V1};

pub const TLS_AES_128_GCM_SHA256: u16 = 0x1301;
pub const TLS_AES_256_GCM_SHA384: u16 = 0x1302;
pub const TLS_CHACHA20_POLY1305_SHA256: u16 = 0x1303;

/// Named group for x25519 in TLS.
pub const GROUP_X25519: u16 = 0x001d;

pub const TAG_LEN: usize = 16;
const SAMPLE_LEN: usize = 16;

const INITIAL_SALT_V1: [u8; 20] = [
    0x38, 0x76, 0x2c, 0xf7, 0xf5, 0x59, 0x34, 0xb3, 0x4d, 0x17, 0x9a, 0xe6, 0xa4, 0xc8, 0x0c, 0xad, 0xcc, 0xbb, 0x7f,
    0x0a,
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("no initial keys for version {0:#010x}")]
    UnsupportedVersion(u32),
    #[error("unsupported cipher suite {0:#06x}")]
    UnsupportedCipher(u16),
    #[error("transcript must hold ClientHello..ServerHello, got message types {0:?}")]
    TranscriptPrecondition(Vec<u8>),
    #[error("packet authentication failed")]
    Authentication,
    #[error("header protection sample out of bounds")]
    SampleOutOfBounds,
    #[error("payload too short to sample: need at least {need} bytes")]
    PayloadTooShort { need: usize },
    #[error("payload does not fit the length field")]
    LengthMismatch,
    #[error("x25519 produced the all-zero shared secret")]
    AllZeroSharedSecret,
    #[error("key material length mismatch for {0:?}")]
    BadKeyLength(AeadAlg),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AeadAlg {
    Aes128Gcm,
    Aes256Gcm,
    ChaCha20Poly1305,
}

impl AeadAlg {
    pub fn key_len(self) -> usize {
        match self {
            AeadAlg::Aes128Gcm => 16,
            AeadAlg::Aes256Gcm | AeadAlg::ChaCha20Poly1305 => 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HashAlg {
    Sha256,
    Sha384,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Initial,
    Handshake,
}

/// Maps a TLS 1.3 cipher suite to its AEAD and hash.
pub fn cipher_suite(id: u16) -> Result<(AeadAlg, HashAlg), CryptoError> {
    match id {
        TLS_AES_128_GCM_SHA256 => Ok((AeadAlg::Aes128Gcm, HashAlg::Sha256)),
        TLS_AES_256_GCM_SHA384 => Ok((AeadAlg::Aes256Gcm, HashAlg::Sha384)),
        TLS_CHACHA20_POLY1305_SHA256 => Ok((AeadAlg::ChaCha20Poly1305, HashAlg::Sha256)),
        other => Err(CryptoError::UnsupportedCipher(other)),
    }
}

/// Key material for one direction of one packet-number space.
#[derive(Clone, PartialEq, Eq)]
pub struct DirectionalKeys {
    pub aead: AeadAlg,
    pub hash: HashAlg,
    pub key: Vec<u8>,
    pub iv: [u8; 12],
    pub hp: Vec<u8>,
}

impl std::fmt::Debug for DirectionalKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DirectionalKeys").field("aead", &self.aead).field("hash", &self.hash).finish_non_exhaustive()
    }
}

impl DirectionalKeys {
    pub fn new(aead: AeadAlg, hash: HashAlg, key: Vec<u8>, iv: [u8; 12], hp: Vec<u8>) -> Result<Self, CryptoError> {
        if key.len() != aead.key_len() || hp.len() != aead.key_len() {
            return Err(CryptoError::BadKeyLength(aead));
        }
        Ok(DirectionalKeys { aead, hash, key, iv, hp })
    }

    /// Expands a SHA-256 traffic secret into packet protection keys.
    pub fn from_secret(secret: &[u8], aead: AeadAlg) -> Self {
        let n = aead.key_len();
        let key = hkdf_expand_label(secret, b"quic key", &[], n);
        let iv: [u8; 12] = hkdf_expand_label(secret, b"quic iv", &[], 12).try_into().expect("12 bytes");
        let hp = hkdf_expand_label(secret, b"quic hp", &[], n);
        DirectionalKeys { aead, hash: HashAlg::Sha256, key, iv, hp }
    }

    fn nonce(&self, pn: u64) -> [u8; 12] {
        let mut nonce = self.iv;
        for (n, p) in nonce[4..].iter_mut().zip(pn.to_be_bytes()) {
            *n ^= p;
        }
        nonce
    }

    pub fn seal(&self, pn: u64, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let nonce = self.nonce(pn);
        let payload = Payload { msg: plaintext, aad };
        let out = match self.aead {
            AeadAlg::Aes128Gcm => Aes128Gcm::new_from_slice(&self.key).expect("len").encrypt((&nonce).into(), payload),
            AeadAlg::Aes256Gcm => Aes256Gcm::new_from_slice(&self.key).expect("len").encrypt((&nonce).into(), payload),
            AeadAlg::ChaCha20Poly1305 => {
                ChaCha20Poly1305::new_from_slice(&self.key).expect("len").encrypt((&nonce).into(), payload)
            }
        };
        out.expect("aead seal is infallible for in-range lengths")
    }

    pub fn open(&self, pn: u64, aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let nonce = self.nonce(pn);
        let payload = Payload { msg: ciphertext, aad };
        let out = match self.aead {
            AeadAlg::Aes128Gcm => Aes128Gcm::new_from_slice(&self.key).expect("len").decrypt((&nonce).into(), payload),
            AeadAlg::Aes256Gcm => Aes256Gcm::new_from_slice(&self.key).expect("len").decrypt((&nonce).into(), payload),
            AeadAlg::ChaCha20Poly1305 => {
                ChaCha20Poly1305::new_from_slice(&self.key).expect("len").decrypt((&nonce).into(), payload)
            }
        };
        out.map_err(|_| CryptoError::Authentication)
    }

    /// Header protection mask for a 16-byte sample.
    pub fn hp_mask(&self, sample: &[u8; SAMPLE_LEN]) -> [u8; 5] {
        let mut mask = [0u8; 5];
        match self.aead {
            AeadAlg::Aes128Gcm => {
                let mut block = (*sample).into();
                aes::Aes128::new_from_slice(&self.hp).expect("len").encrypt_block(&mut block);
                mask.copy_from_slice(&block[..5]);
            }
            AeadAlg::Aes256Gcm => {
                let mut block = (*sample).into();
                aes::Aes256::new_from_slice(&self.hp).expect("len").encrypt_block(&mut block);
                mask.copy_from_slice(&block[..5]);
            }
            AeadAlg::ChaCha20Poly1305 => {
                let counter = u32::from_le_bytes(sample[..4].try_into().expect("4 bytes"));
                let nonce: [u8; 12] = sample[4..].try_into().expect("12 bytes");
                let key: [u8; 32] = self.hp.as_slice().try_into().expect("32 bytes");
                let mut c = chacha20::ChaCha20::new(&key.into(), &nonce.into());
                c.seek(u64::from(counter) * 64);
                c.apply_keystream(&mut mask);
            }
        }
        mask
    }
}

/// Client and server keys for one packet-number space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceKeys {
    pub space: Space,
    pub client: DirectionalKeys,
    pub server: DirectionalKeys,
}

impl SpaceKeys {
    /// Keys a local endpoint uses to (seal, open) in the given role.
    pub fn for_role(&self, is_server: bool) -> (&DirectionalKeys, &DirectionalKeys) {
        if is_server {
            (&self.server, &self.client)
        } else {
            (&self.client, &self.server)
        }
    }
}

/// TLS 1.3 HKDF-Expand-Label with SHA-256.
pub fn hkdf_expand_label(secret: &[u8], label: &[u8], context: &[u8], len: usize) -> Vec<u8> {
    let mut info = Vec::with_capacity(4 + 6 + label.len() + context.len());
    info.extend_from_slice(&(len as u16).to_be_bytes());
    info.push((6 + label.len()) as u8);
    info.extend_from_slice(b"tls13 ");
    info.extend_from_slice(label);
    info.push(context.len() as u8);
    info.extend_from_slice(context);
    let hk = Hkdf::<Sha256>::from_prk(secret).expect("secret at least hash length");
    let mut out = vec![0u8; len];
    hk.expand(&info, &mut out).expect("output length in range");
    out
}

fn hkdf_extract(salt: &[u8], ikm: &[u8]) -> Vec<u8> {
    let (prk, _) = Hkdf::<Sha256>::extract(Some(salt), ikm);
    prk.to_vec()
}

/// RFC 9001 Initial secrets for the client's first Destination Connection ID.
pub fn initial_secrets(dcid: &ConnectionId, version: u32) -> Result<([u8; 32], [u8; 32]), CryptoError> {
    if version != QUIC_V1 {
        return Err(CryptoError::UnsupportedVersion(version));
    }
    let initial = hkdf_extract(&INITIAL_SALT_V1, dcid);
    let client = hkdf_expand_label(&initial, b"client in", &[], 32).try_into().expect("32");
    let server = hkdf_expand_label(&initial, b"server in", &[], 32).try_into().expect("32");
    Ok((client, server))
}

pub fn derive_initial_keys(dcid: &ConnectionId, version: u32) -> Result<SpaceKeys, CryptoError> {
    let (client, server) = initial_secrets(dcid, version)?;
    Ok(SpaceKeys {
        space: Space::Initial,
        client: DirectionalKeys::from_secret(&client, AeadAlg::Aes128Gcm),
        server: DirectionalKeys::from_secret(&server, AeadAlg::Aes128Gcm),
    })
}

/// Running transcript over TLS handshake messages (SHA-256 only).
#[derive(Clone, Default)]
pub struct TranscriptState {
    hasher: Sha256,
    types: Vec<u8>,
}

impl std::fmt::Debug for TranscriptState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TranscriptState").field("types", &self.types).finish()
    }
}

impl TranscriptState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one complete handshake message (type, u24 length, body).
    pub fn push(&mut self, msg: &[u8]) {
        self.types.push(msg.first().copied().unwrap_or(0));
        self.hasher.update(msg);
    }

    /// Replaces the transcript so far (a lone ClientHello) with the synthetic
    /// `message_hash` message used after a HelloRetryRequest.
    pub fn replace_with_message_hash(&mut self) {
        let digest = std::mem::take(&mut self.hasher).finalize();
        self.types.clear();
        let mut synthetic = vec![254, 0, 0, 32];
        synthetic.extend_from_slice(&digest);
        self.push(&synthetic);
    }

    pub fn message_types(&self) -> &[u8] {
        &self.types
    }

    pub fn hash(&self) -> [u8; 32] {
        self.hasher.clone().finalize().into()
    }
}

/// Runs the TLS 1.3 key schedule to the handshake traffic secrets and expands
/// QUIC packet protection keys for both directions.
pub fn derive_handshake_keys(
    shared_secret: &[u8],
    transcript: &TranscriptState,
    cipher: u16,
) -> Result<SpaceKeys, CryptoError> {
    let (aead, hash) = cipher_suite(cipher)?;
    if hash != HashAlg::Sha256 {
        return Err(CryptoError::UnsupportedCipher(cipher));
    }
    let types = transcript.message_types();
    let well_formed = types.len() >= 2 && matches!(types[0], 1 | 254) && types[types.len() - 1] == 2;
    if !well_formed {
        return Err(CryptoError::TranscriptPrecondition(types.to_vec()));
    }
    let (c, s) = handshake_traffic_secrets(shared_secret, &transcript.hash());
    Ok(SpaceKeys {
        space: Space::Handshake,
        client: DirectionalKeys::from_secret(&c, aead),
        server: DirectionalKeys::from_secret(&s, aead),
    })
}

fn handshake_traffic_secrets(shared_secret: &[u8], transcript_hash: &[u8; 32]) -> (Vec<u8>, Vec<u8>) {
    let early = hkdf_extract(&[0u8; 32], &[0u8; 32]);
    let empty_hash = Sha256::digest([]);
    let derived = hkdf_expand_label(&early, b"derived", &empty_hash, 32);
    let handshake = hkdf_extract(&derived, shared_secret);
    (
        hkdf_expand_label(&handshake, b"c hs traffic", transcript_hash, 32),
        hkdf_expand_label(&handshake, b"s hs traffic", transcript_hash, 32),
    )
}

/// x25519 key pair.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyExchange {
    pub private: [u8; 32],
    pub public: [u8; 32],
}

impl std::fmt::Debug for KeyExchange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyExchange").field("public", &self.public).finish_non_exhaustive()
    }
}

impl KeyExchange {
    pub fn from_private(private: [u8; 32]) -> Self {
        let secret = x25519_dalek::StaticSecret::from(private);
        let public = x25519_dalek::PublicKey::from(&secret).to_bytes();
        KeyExchange { private, public }
    }

    pub fn generate<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        let mut private = [0u8; 32];
        rng.fill(&mut private);
        Self::from_private(private)
    }
}

pub fn x25519_shared(own: &KeyExchange, peer_public: &[u8; 32]) -> Result<[u8; 32], CryptoError> {
    let secret = x25519_dalek::StaticSecret::from(own.private);
    let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(*peer_public)).to_bytes();
    if shared.iter().all(|&b| b == 0) {
        return Err(CryptoError::AllZeroSharedSecret);
    }
    Ok(shared)
}

/// Smallest packet number encoding that lets the peer recover `pn` given the
/// largest packet number it has acknowledged.
pub fn packet_number_len(pn: u64, largest_acked: Option<u64>) -> usize {
    let range = match largest_acked {
        Some(l) => pn.saturating_sub(l),
        None => pn + 1,
    } * 2;
    match range {
        0..=0xff => 1,
        0x100..=0xffff => 2,
        0x1_0000..=0xff_ffff => 3,
        _ => 4,
    }
}

/// Recovers a full packet number from its truncated form (RFC 9000 A.3).
pub fn decode_packet_number(largest: Option<u64>, truncated: u64, pn_len: usize) -> u64 {
    let expected = largest.map_or(0, |l| l + 1);
    let win = 1u64 << (pn_len * 8);
    let hwin = win / 2;
    let mask = win - 1;
    let candidate = (expected & !mask) | truncated;
    if candidate + hwin <= expected && candidate < (1 << 62) - win {
        candidate + win
    } else if candidate > expected + hwin && candidate >= win {
        candidate - win
    } else {
        candidate
    }
}

/// Largest packet number received in one space; starts at "none" (-1).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PacketNumberTracker {
    largest: Option<u64>,
}

impl PacketNumberTracker {
    pub fn largest(&self) -> Option<u64> {
        self.largest
    }

    pub fn observe(&mut self, pn: u64) {
        self.largest = Some(self.largest.map_or(pn, |l| l.max(pn)));
    }
}

/// Builds a protected long-header packet. The plaintext must be long enough for
/// the header protection sample; callers pad with PADDING frames.
pub fn protect_packet(
    keys: &DirectionalKeys,
    fields: &LongHeaderFields,
    pn: u64,
    pn_len: usize,
    plaintext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    if !(1..=4).contains(&pn_len) {
        return Err(CryptoError::LengthMismatch);
    }
    if pn_len + plaintext.len() < 4 {
        return Err(CryptoError::PayloadTooShort { need: 4 - pn_len });
    }
    let length = pn_len + plaintext.len() + TAG_LEN;
    if length > 0x3fff {
        return Err(CryptoError::LengthMismatch);
    }
    let mut out = Vec::with_capacity(64 + length);
    fields.encode_prefix(pn_len, &mut out);
    out.extend_from_slice(&(0x4000u16 | length as u16).to_be_bytes());
    let pn_offset = out.len();
    out.extend_from_slice(&pn.to_be_bytes()[8 - pn_len..]);
    let sealed = keys.seal(pn, &out, plaintext);
    out.extend_from_slice(&sealed);

    let sample: [u8; SAMPLE_LEN] = out[pn_offset + 4..pn_offset + 4 + SAMPLE_LEN].try_into().expect("16");
    let mask = keys.hp_mask(&sample);
    out[0] ^= mask[0] & 0x0f;
    for i in 0..pn_len {
        out[pn_offset + i] ^= mask[1 + i];
    }
    Ok(out)
}

/// Removes header protection and opens a long-header packet. `packet` spans
/// exactly one packet and `pn_offset` is the offset returned by
/// [`crate::wire::parse_long_header`].
pub fn unprotect_packet(
    keys: &DirectionalKeys,
    packet: &[u8],
    header: &LongHeader,
    pn_offset: usize,
    largest: Option<u64>,
) -> Result<(Vec<u8>, u64), CryptoError> {
    let end = pn_offset + header.length.into_inner() as usize;
    if end > packet.len() {
        return Err(WireError::LengthOverrun { length: header.length.into_inner(), offset: pn_offset }.into());
    }
    let sample_at = pn_offset + 4;
    if sample_at + SAMPLE_LEN > end {
        return Err(CryptoError::SampleOutOfBounds);
    }
    let sample: [u8; SAMPLE_LEN] = packet[sample_at..sample_at + SAMPLE_LEN].try_into().expect("16");
    let mask = keys.hp_mask(&sample);

    let mut head = packet[..pn_offset + 4].to_vec();
    head[0] ^= mask[0] & 0x0f;
    let pn_len = (head[0] & 0x03) as usize + 1;
    let mut truncated = 0u64;
    for i in 0..pn_len {
        head[pn_offset + i] ^= mask[1 + i];
        truncated = (truncated << 8) | u64::from(head[pn_offset + i]);
    }
    let pn = decode_packet_number(largest, truncated, pn_len);
    let aad = &head[..pn_offset + pn_len];
    let plaintext = keys.open(pn, aad, &packet[pn_offset + pn_len..end])?;
    Ok((plaintext, pn))
}

/// Encodes `frames` and protects them as one packet with a 2-byte packet
/// number, appending PADDING until the packet is at least `min_len` bytes.
pub fn seal_frames(
    keys: &DirectionalKeys,
    fields: &LongHeaderFields,
    pn: u64,
    frames: &[Frame],
    min_len: usize,
) -> Vec<u8> {
    const PN_LEN: usize = 2;
    let mut plaintext = Vec::new();
    for f in frames {
        f.encode(&mut plaintext);
    }
    let overhead = fields.encoded_len(PN_LEN) + TAG_LEN;
    let floor = min_len.saturating_sub(overhead).max(4 - PN_LEN + SAMPLE_LEN);
    if plaintext.len() < floor {
        plaintext.resize(floor, 0);
    }
    protect_packet(keys, fields, pn, PN_LEN, &plaintext).expect("packet fits")
}

const RETRY_KEY_V1: [u8; 16] =
    [0xbe, 0x0c, 0x69, 0x0b, 0x9f, 0x66, 0x57, 0x5a, 0x1d, 0x76, 0x6b, 0x54, 0xe3, 0x68, 0xc8, 0x4e];
const RETRY_NONCE_V1: [u8; 12] = [0x46, 0x15, 0x99, 0xd3, 0x5d, 0x63, 0x2b, 0xf2, 0x23, 0x98, 0x25, 0xbb];

/// Retry integrity tag over the pseudo-packet (RFC 9001 section 5.8).
/// `retry` is the Retry packet without its trailing tag.
pub fn retry_integrity_tag(odcid: &ConnectionId, retry: &[u8]) -> [u8; TAG_LEN] {
    let mut pseudo = Vec::with_capacity(1 + odcid.len() + retry.len());
    pseudo.push(odcid.len() as u8);
    pseudo.extend_from_slice(odcid);
    pseudo.extend_from_slice(retry);
    let tag = Aes128Gcm::new_from_slice(&RETRY_KEY_V1)
        .expect("len")
        .encrypt((&RETRY_NONCE_V1).into(), Payload { msg: &[], aad: &pseudo })
        .expect("empty plaintext");
    tag.try_into().expect("tag length")
}

pub fn verify_retry(odcid: &ConnectionId, packet: &[u8]) -> bool {
    packet.len() > TAG_LEN && {
        let (body, tag) = packet.split_at(packet.len() - TAG_LEN);
        retry_integrity_tag(odcid, body) == tag
    }
}

/// Builds a v1 Retry packet answering a client Initial sent to `odcid`.
pub fn build_retry(
    dcid: &ConnectionId,
    scid: &ConnectionId,
    token: &[u8],
    odcid: &ConnectionId,
    unused: u8,
) -> Vec<u8> {
    let mut p = vec![0xf0 | (unused & 0x0f)];
    p.extend_from_slice(&QUIC_V1.to_be_bytes());
    p.push(dcid.len() as u8);
    p.extend_from_slice(dcid);
    p.push(scid.len() as u8);
    p.extend_from_slice(scid);
    p.extend_from_slice(token);
    let tag = retry_integrity_tag(odcid, &p);
    p.extend_from_slice(&tag);
    p
}

/// Length field value a packet with this plaintext would carry.
pub fn protected_length(pn_len: usize, plaintext_len: usize) -> VarInt {
    VarInt::new((pn_len + plaintext_len + TAG_LEN) as u64).expect("small")
}
