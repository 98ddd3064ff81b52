use super::{ConnectionId, LongHeaderFields, Reader, WireError, MIN_INITIAL_DATAGRAM, QUIC_V1};
use crate::pktcrypto::{derive_initial_keys, protect_packet, TAG_LEN};
use crate::wire::Frame;

/// Reserved version used by the stateless probe unless overridden.
pub const DEFAULT_RESERVED_VERSION: u32 = 0x1a2a3a4a;

/// Whether `v` follows the `0x?a?a?a?a` pattern reserved for greasing.
pub fn is_reserved_version(v: u32) -> bool {
    v & 0x0f0f_0f0f == 0x0a0a_0a0a
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionNegotiation {
    pub dcid: ConnectionId,
    pub scid: ConnectionId,
    pub versions: Vec<u32>,
}

pub fn parse_version_negotiation(datagram: &[u8]) -> Result<VersionNegotiation, WireError> {
    let mut r = Reader::new(datagram);
    let first = r.u8("first byte")?;
    if first & 0x80 == 0 {
        return Err(WireError::NotLongHeader);
    }
    let version = r.u32("version")?;
    if version != 0 {
        return Err(WireError::NotVersionNegotiation(version));
    }
    let dcid = r.cid()?;
    let scid = r.cid()?;
    let rest = r.rest();
    if !rest.len().is_multiple_of(4) {
        return Err(WireError::PartialVersion(rest.len() % 4));
    }
    if rest.is_empty() {
        return Err(WireError::EmptyVersionList);
    }
    let versions = rest.chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(VersionNegotiation { dcid, scid, versions })
}

/// Server-side Version Negotiation packet. `unused` supplies the seven
/// arbitrary bits of the first byte.
pub fn build_version_negotiation(dcid: &ConnectionId, scid: &ConnectionId, versions: &[u32], unused: u8) -> Vec<u8> {
    let mut out = vec![0x80 | (unused & 0x7f), 0, 0, 0, 0];
    out.push(dcid.len() as u8);
    out.extend_from_slice(dcid);
    out.push(scid.len() as u8);
    out.extend_from_slice(scid);
    for v in versions {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Builds the stateless version-negotiation trigger: a complete client
/// Initial carrying `client_hello` in a CRYPTO frame, padded to 1200 bytes and
/// protected with v1 Initial keys, whose version field is then set to
/// `version`.
pub fn build_vn_trigger_datagram(
    dcid: &ConnectionId,
    scid: &ConnectionId,
    version: u32,
    client_hello: &[u8],
) -> Vec<u8> {
    let keys = derive_initial_keys(dcid, QUIC_V1).expect("v1 keys");
    let fields = LongHeaderFields::initial(QUIC_V1, *dcid, *scid, Vec::new());
    let pn_len = 1;
    let mut plaintext = Vec::with_capacity(MIN_INITIAL_DATAGRAM);
    Frame::Crypto { offset: 0, data: client_hello.to_vec() }.encode(&mut plaintext);
    let overhead = fields.encoded_len(pn_len) + TAG_LEN;
    if plaintext.len() + overhead < MIN_INITIAL_DATAGRAM {
        plaintext.resize(MIN_INITIAL_DATAGRAM - overhead, 0);
    }
    let mut packet = protect_packet(&keys.client, &fields, 0, pn_len, &plaintext).expect("fits");
    packet[1..5].copy_from_slice(&version.to_be_bytes());
    packet
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{parse_long_header, PacketType};

    #[test]
    fn reserved_pattern() {
        assert!(is_reserved_version(0x1a2a3a4a));
        assert!(is_reserved_version(0xfafafafa));
        assert!(!is_reserved_version(1));
        assert!(!is_reserved_version(0x6b3343cf));
    }

    #[test]
    fn trigger_is_a_full_initial() {
        let dcid = ConnectionId::new(&[0x11; 8]).unwrap();
        let d =
            build_vn_trigger_datagram(&dcid, &ConnectionId::EMPTY, DEFAULT_RESERVED_VERSION, &[1, 0, 0, 4, 0, 0, 0, 0]);
        assert_eq!(d.len(), 1200);
        let (h, off) = parse_long_header(&d).unwrap();
        assert_eq!(h.packet_type, PacketType::Initial);
        assert_eq!(h.version, 0x1a2a3a4a);
        assert_eq!(h.dcid, dcid);
        assert_eq!(off + h.length.into_inner() as usize, d.len());
    }

    #[test]
    fn vn_parse() {
        let a = ConnectionId::new(&[1, 2]).unwrap();
        let d = build_version_negotiation(&a, &ConnectionId::EMPTY, &[1], 0x2b);
        assert_eq!(parse_version_negotiation(&d).unwrap().versions, vec![1]);
        let d = build_version_negotiation(&a, &a, &[0x6b3343cf, 1], 0);
        let vn = parse_version_negotiation(&d).unwrap();
        assert_eq!(vn.versions, vec![0x6b3343cf, 1]);
        assert_eq!(vn.scid, a);
        let empty = build_version_negotiation(&a, &a, &[], 0);
        assert_eq!(parse_version_negotiation(&empty), Err(WireError::EmptyVersionList));
        let mut partial = d.clone();
        partial.pop();
        assert_eq!(parse_version_negotiation(&partial), Err(WireError::PartialVersion(3)));
        let mut not_vn = d;
        not_vn[4] = 1;
        assert_eq!(parse_version_negotiation(&not_vn), Err(WireError::NotVersionNegotiation(1)));
    }
}
