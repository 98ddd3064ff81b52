use rand::{Rng, RngCore};
use thiserror::Error;

use quicfp::pktcrypto::{seal_frames, unprotect_packet};
use quicfp::probe::{Direction, Flight, FlightExtractor};
use quicfp::tlsmini::{
    build_encrypted_extensions, encode_transport_params, parse_transport_params, split_handshake_messages,
    EXT_QUIC_TRANSPORT_PARAMETERS, HS_ENCRYPTED_EXTENSIONS,
};
use quicfp::wire::{decode_varint, parse_frames, split_coalesced, Frame, LongHeaderFields, PacketType, Reader, VarInt};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MutateError {
    #[error("flight never reached handshake keys")]
    NoHandshakeKeys,
    #[error("no EncryptedExtensions in a single CRYPTO frame")]
    NoEncryptedExtensions,
}

/// Replaces every transport parameter value in the server's
/// EncryptedExtensions with a different one, keeping ids and order, and
/// re-seals the packet with the original keys. Returns the rewritten flight
/// and how many values changed.
pub fn mutate_tp_values(flight: &Flight, rng: &mut impl RngCore) -> Result<(Flight, usize), MutateError> {
    let mut x = FlightExtractor::new(flight.kind, flight.client_private);
    for r in &flight.records {
        x.feed(r.direction, &r.bytes);
    }
    let keys = x.handshake_keys().ok_or(MutateError::NoHandshakeKeys)?.server.clone();

    let mut out = flight.clone();
    let mut changed = None;
    for rec in out.records.iter_mut().filter(|r| r.direction == Direction::ServerToClient) {
        let Ok(spans) = split_coalesced(&rec.bytes) else { continue };
        let mut rebuilt = Vec::with_capacity(rec.bytes.len());
        for span in &spans {
            let packet = span.bytes(&rec.bytes);
            let rewritten = match &span.header {
                Some(h) if h.packet_type == PacketType::Handshake && changed.is_none() => {
                    unprotect_packet(&keys, packet, h, span.payload_offset, None).ok().and_then(|(plain, pn)| {
                        let mut frames = parse_frames(&plain).ok()?;
                        let n = rewrite_ee(&mut frames, rng)?;
                        changed = Some(n);
                        let fields = LongHeaderFields::handshake(h.version, h.dcid, h.scid);
                        Some(seal_frames(&keys, &fields, pn, &frames, 0))
                    })
                }
                _ => None,
            };
            rebuilt.extend_from_slice(rewritten.as_deref().unwrap_or(packet));
        }
        rec.bytes = rebuilt;
    }
    let n = changed.ok_or(MutateError::NoEncryptedExtensions)?;
    Ok((out, n))
}

fn rewrite_ee(frames: &mut [Frame], rng: &mut impl RngCore) -> Option<usize> {
    for f in frames.iter_mut() {
        let Frame::Crypto { offset: 0, data } = f else { continue };
        let (msgs, _) = split_handshake_messages(data);
        let ee = msgs.first().filter(|m| m[0] == HS_ENCRYPTED_EXTENSIONS)?;
        let mut exts = read_extensions(&ee[4..])?;
        let mut n = 0;
        for (id, body) in exts.iter_mut().filter(|e| e.0 == EXT_QUIC_TRANSPORT_PARAMETERS) {
            let mut params = parse_transport_params(body).ok()?;
            for p in &mut params {
                p.value = different_value(&p.value, rng);
                n += 1;
            }
            debug_assert_eq!(*id, EXT_QUIC_TRANSPORT_PARAMETERS);
            *body = encode_transport_params(&params);
        }
        let mut rest = data[ee.len()..].to_vec();
        *data = build_encrypted_extensions(&exts);
        data.append(&mut rest);
        return Some(n);
    }
    None
}

fn read_extensions(body: &[u8]) -> Option<Vec<(u16, Vec<u8>)>> {
    let mut r = Reader::new(body);
    let n = r.u16("extensions length").ok()? as usize;
    let mut e = Reader::new(r.bytes(n, "extensions").ok()?);
    let mut out = Vec::new();
    while !e.is_empty() {
        let id = e.u16("extension type").ok()?;
        let len = e.u16("extension length").ok()? as usize;
        out.push((id, e.bytes(len, "extension body").ok()?.to_vec()));
    }
    Some(out)
}

fn different_value(old: &[u8], rng: &mut impl RngCore) -> Vec<u8> {
    if let Ok((v, used)) = decode_varint(old) {
        if used == old.len() {
            let mut new = v.into_inner();
            while new == v.into_inner() {
                new = rng.random_range(0..VarInt::MAX.into_inner());
            }
            let mut out = Vec::new();
            VarInt::new(new).expect("in range").encode(&mut out);
            return out;
        }
    }
    let len = if old.is_empty() { 1 } else { old.len() };
    loop {
        let mut v = vec![0u8; len];
        rng.fill_bytes(&mut v);
        if v != old {
            return v;
        }
    }
}
