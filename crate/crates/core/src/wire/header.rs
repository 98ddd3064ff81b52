use super::{ConnectionId, Reader, VarInt, WireError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketType {
    Initial,
    ZeroRtt,
    Handshake,
    Retry,
    VersionNegotiation,
}

impl PacketType {
    fn from_type_bits(bits: u8) -> Self {
        match bits & 0x03 {
            0 => PacketType::Initial,
            1 => PacketType::ZeroRtt,
            2 => PacketType::Handshake,
            _ => PacketType::Retry,
        }
    }

    fn type_bits(self) -> u8 {
        match self {
            PacketType::Initial | PacketType::VersionNegotiation => 0,
            PacketType::ZeroRtt => 1,
            PacketType::Handshake => 2,
            PacketType::Retry => 3,
        }
    }

    /// Whether the packet carries a length field and a protected packet number.
    pub fn is_protected(self) -> bool {
        matches!(self, PacketType::Initial | PacketType::ZeroRtt | PacketType::Handshake)
    }
}

/// Decoded long header. For protected packets `first_byte` is the value as
/// seen on the wire (still header-protected) until the packet is opened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LongHeader {
    pub packet_type: PacketType,
    pub first_byte: u8,
    pub version: u32,
    pub dcid: ConnectionId,
    pub scid: ConnectionId,
    /// Initial token, or the Retry token (without integrity tag).
    pub token: Vec<u8>,
    pub length: VarInt,
    pub packet_number: Option<u64>,
}

impl LongHeader {
    /// Total packet size given the offset returned by [`parse_long_header`].
    pub fn packet_len(&self, payload_offset: usize, available: usize) -> usize {
        if self.packet_type.is_protected() {
            payload_offset + self.length.into_inner() as usize
        } else {
            available
        }
    }
}

/// Parses the long header at the start of `datagram`. The returned offset is
/// where the protected packet number starts (Initial/0-RTT/Handshake), where
/// the version list starts (Version Negotiation) or where the Retry token starts.
pub fn parse_long_header(datagram: &[u8]) -> Result<(LongHeader, usize), WireError> {
    let mut r = Reader::new(datagram);
    let first_byte = r.u8("first byte")?;
    if first_byte & 0x80 == 0 {
        return Err(WireError::NotLongHeader);
    }
    let version = r.u32("version")?;
    let dcid = r.cid()?;
    let scid = r.cid()?;

    let packet_type =
        if version == 0 { PacketType::VersionNegotiation } else { PacketType::from_type_bits(first_byte >> 4) };

    let mut token = Vec::new();
    let mut length = VarInt::ZERO;
    match packet_type {
        PacketType::VersionNegotiation => {}
        PacketType::Retry => {
            let rest = r.remaining();
            if rest < 16 {
                return Err(WireError::Truncated { what: "retry integrity tag", offset: r.offset() });
            }
            let at = r.position();
            token = datagram[at..at + rest - 16].to_vec();
            return Ok((
                LongHeader { packet_type, first_byte, version, dcid, scid, token, length, packet_number: None },
                at,
            ));
        }
        PacketType::Initial => {
            let len = r.varint()?.into_inner() as usize;
            token = r.bytes(len, "token")?.to_vec();
            length = r.varint()?;
        }
        PacketType::ZeroRtt | PacketType::Handshake => {
            length = r.varint()?;
        }
    }
    let offset = r.position();
    if packet_type.is_protected() && length.into_inner() > (datagram.len() - offset) as u64 {
        return Err(WireError::LengthOverrun { length: length.into_inner(), offset });
    }
    Ok((LongHeader { packet_type, first_byte, version, dcid, scid, token, length, packet_number: None }, offset))
}

/// One packet within a datagram. `header` is `None` for a trailing short-header
/// packet or trailing bytes that are not a long header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketSpan {
    pub start: usize,
    pub payload_offset: usize,
    pub end: usize,
    pub header: Option<LongHeader>,
}

impl PacketSpan {
    pub fn bytes<'a>(&self, datagram: &'a [u8]) -> &'a [u8] {
        &datagram[self.start..self.end]
    }
}

/// Splits a datagram into its coalesced packets using each long header's
/// length field. The spans are contiguous and cover the whole datagram.
pub fn split_coalesced(datagram: &[u8]) -> Result<Vec<PacketSpan>, WireError> {
    let mut spans = Vec::new();
    let mut pos = 0;
    while pos < datagram.len() {
        if datagram[pos] & 0x80 == 0 {
            spans.push(PacketSpan { start: pos, payload_offset: 0, end: datagram.len(), header: None });
            break;
        }
        let (header, off) = parse_long_header(&datagram[pos..]).map_err(|e| shift(e, pos))?;
        let end = pos + header.packet_len(off, datagram.len() - pos);
        spans.push(PacketSpan { start: pos, payload_offset: off, end, header: Some(header) });
        pos = end;
    }
    Ok(spans)
}

fn shift(e: WireError, by: usize) -> WireError {
    match e {
        WireError::Truncated { what, offset } => WireError::Truncated { what, offset: offset + by },
        WireError::ConnectionIdTooLong { len, offset } => WireError::ConnectionIdTooLong { len, offset: offset + by },
        WireError::LengthOverrun { length, offset } => WireError::LengthOverrun { length, offset: offset + by },
        other => other,
    }
}

/// The unprotected parts of a long header that a sender chooses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LongHeaderFields {
    pub packet_type: PacketType,
    pub version: u32,
    pub dcid: ConnectionId,
    pub scid: ConnectionId,
    pub token: Vec<u8>,
}

impl LongHeaderFields {
    pub fn initial(version: u32, dcid: ConnectionId, scid: ConnectionId, token: Vec<u8>) -> Self {
        LongHeaderFields { packet_type: PacketType::Initial, version, dcid, scid, token }
    }

    pub fn handshake(version: u32, dcid: ConnectionId, scid: ConnectionId) -> Self {
        LongHeaderFields { packet_type: PacketType::Handshake, version, dcid, scid, token: Vec::new() }
    }

    /// Writes everything up to (not including) the length field. The packet
    /// number length bits of the first byte are set from `pn_len`.
    pub fn encode_prefix(&self, pn_len: usize, out: &mut Vec<u8>) {
        debug_assert!((1..=4).contains(&pn_len));
        out.push(0xc0 | (self.packet_type.type_bits() << 4) | (pn_len as u8 - 1));
        out.extend_from_slice(&self.version.to_be_bytes());
        out.push(self.dcid.len() as u8);
        out.extend_from_slice(&self.dcid);
        out.push(self.scid.len() as u8);
        out.extend_from_slice(&self.scid);
        if self.packet_type == PacketType::Initial {
            VarInt::new(self.token.len() as u64).expect("token length").encode(out);
            out.extend_from_slice(&self.token);
        }
    }

    /// Header length including a two-byte length field and the packet number.
    pub fn encoded_len(&self, pn_len: usize) -> usize {
        let mut v = Vec::new();
        self.encode_prefix(pn_len, &mut v);
        v.len() + 2 + pn_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn initial_bytes(version: u32, dcid_len: u8, payload: usize) -> Vec<u8> {
        let mut d = vec![0xc0, 0, 0, 0, 0];
        d[1..5].copy_from_slice(&version.to_be_bytes());
        d.push(dcid_len);
        d.extend(std::iter::repeat_n(0xaa, dcid_len as usize));
        d.push(0); // scid
        d.push(0); // token length
        d.extend_from_slice(&(0x4000u16 | payload as u16).to_be_bytes());
        d.extend(std::iter::repeat_n(0, payload));
        d
    }

    #[test]
    fn parses_v1_initial() {
        let d = initial_bytes(1, 8, 30);
        let (h, off) = parse_long_header(&d).unwrap();
        assert_eq!(h.packet_type, PacketType::Initial);
        assert_eq!(h.version, 1);
        assert_eq!(h.dcid.len(), 8);
        assert_eq!(h.length.into_inner(), 30);
        assert_eq!(off, d.len() - 30);
    }

    #[test]
    fn version_zero_is_vn() {
        let mut d = initial_bytes(0, 4, 0);
        d.truncate(1 + 4 + 1 + 4 + 1);
        d.extend_from_slice(&1u32.to_be_bytes());
        let (h, off) = parse_long_header(&d).unwrap();
        assert_eq!(h.packet_type, PacketType::VersionNegotiation);
        assert_eq!(off, d.len() - 4);
    }

    #[test]
    fn oversize_cid_rejected() {
        let d = initial_bytes(1, 21, 30);
        assert_eq!(parse_long_header(&d), Err(WireError::ConnectionIdTooLong { len: 21, offset: 5 }));
    }

    #[test]
    fn truncated_and_overrun() {
        let d = initial_bytes(1, 8, 30);
        assert!(matches!(parse_long_header(&d[..7]), Err(WireError::Truncated { .. })));
        assert!(matches!(parse_long_header(&d[..d.len() - 1]), Err(WireError::LengthOverrun { .. })));
        assert_eq!(parse_long_header(&[0x40, 1, 2]), Err(WireError::NotLongHeader));
    }

    #[test]
    fn coalesced_spans_cover_datagram() {
        let mut d = initial_bytes(1, 8, 40);
        let second = initial_bytes(1, 0, 25);
        d.extend_from_slice(&second);
        d.extend_from_slice(&[0x00, 0x00, 0x00]);
        let spans = split_coalesced(&d).unwrap();
        assert_eq!(spans.len(), 3);
        assert!(spans[2].header.is_none());
        let mut pos = 0;
        for s in &spans {
            assert_eq!(s.start, pos);
            pos = s.end;
        }
        assert_eq!(pos, d.len());
    }

    #[test]
    fn encode_prefix_reparses() {
        let f = LongHeaderFields::initial(
            0x1a2a3a4a,
            ConnectionId::new(&[1, 2, 3]).unwrap(),
            ConnectionId::new(&[9]).unwrap(),
            vec![7; 5],
        );
        let mut d = Vec::new();
        f.encode_prefix(2, &mut d);
        d.extend_from_slice(&[0x40, 0x04, 0, 0, 0, 0]);
        assert_eq!(f.encoded_len(2), d.len() - 2);
        let (h, _) = parse_long_header(&d).unwrap();
        assert_eq!(h.version, 0x1a2a3a4a);
        assert_eq!(h.token, vec![7; 5]);
        assert_eq!(h.first_byte & 0x03, 1);
    }
}
