//! Turns the datagrams of one session into a [`HandshakeObservation`].
//!
//! The extractor sees both directions. Client Initials tell it the connection
//! ids, Initial keys and ClientHello bytes; with the client's x25519 private
//! key that is enough to follow the server's flight. The live session feeds
//! datagrams as they are sent and received, replay feeds them from a capture,
//! so both produce the same observation.

use log::debug;

use super::{Direction, ErrorObservation, Flight, HandshakeObservation, Outcome, ProbeKind};
use crate::pktcrypto::{
    derive_handshake_keys, derive_initial_keys, unprotect_packet, verify_retry, x25519_shared, KeyExchange,
    PacketNumberTracker, Space, SpaceKeys, TranscriptState,
};
use crate::tlsmini::{
    parse_encrypted_extensions, parse_server_hello, split_handshake_messages, CryptoStream, EncryptedExtensionsSummary,
    KeyShareEntry, ServerHelloSummary, HS_CLIENT_HELLO, HS_ENCRYPTED_EXTENSIONS, HS_SERVER_HELLO,
};
use crate::wire::{
    parse_frames, parse_version_negotiation, split_coalesced, ConnectionId, Frame, LongHeader, PacketType, QUIC_V1,
};

#[derive(Debug, Clone)]
struct SpaceState {
    tracker: PacketNumberTracker,
    received: Vec<u64>,
    stream: CryptoStream,
    consumed: usize,
}

impl SpaceState {
    fn new(space: Space) -> Self {
        SpaceState {
            tracker: PacketNumberTracker::default(),
            received: Vec::new(),
            stream: CryptoStream::new(space),
            consumed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlightExtractor {
    kind: ProbeKind,
    key: KeyExchange,

    client_dcid: Option<ConnectionId>,
    initial_keys: Option<SpaceKeys>,
    client_tracker: PacketNumberTracker,
    client_stream: CryptoStream,
    client_consumed: usize,

    server_scid: Option<ConnectionId>,
    initial: SpaceState,
    handshake: SpaceState,
    handshake_keys: Option<SpaceKeys>,
    pending_handshake: Vec<Vec<u8>>,
    transcript: TranscriptState,

    hello_retry: Option<ServerHelloSummary>,
    server_hello: Option<ServerHelloSummary>,
    encrypted_extensions: Option<EncryptedExtensionsSummary>,
    retry: Option<(ConnectionId, Vec<u8>)>,
    restarted_for_retry: bool,
    vn_versions: Option<Vec<u32>>,
    errors: Vec<ErrorObservation>,
    anomalies: Vec<String>,
    server_datagrams: usize,
    unparseable: bool,
}

impl FlightExtractor {
    pub fn new(kind: ProbeKind, client_private: [u8; 32]) -> Self {
        FlightExtractor {
            kind,
            key: KeyExchange::from_private(client_private),
            client_dcid: None,
            initial_keys: None,
            client_tracker: PacketNumberTracker::default(),
            client_stream: CryptoStream::new(Space::Initial),
            client_consumed: 0,
            server_scid: None,
            initial: SpaceState::new(Space::Initial),
            handshake: SpaceState::new(Space::Handshake),
            handshake_keys: None,
            pending_handshake: Vec::new(),
            transcript: TranscriptState::new(),
            hello_retry: None,
            server_hello: None,
            encrypted_extensions: None,
            retry: None,
            restarted_for_retry: false,
            vn_versions: None,
            errors: Vec::new(),
            anomalies: Vec::new(),
            server_datagrams: 0,
            unparseable: false,
        }
    }

    pub fn feed(&mut self, direction: Direction, datagram: &[u8]) {
        match direction {
            Direction::ClientToServer if self.kind != ProbeKind::Vn => self.client_datagram(datagram),
            Direction::ClientToServer => {}
            Direction::ServerToClient => {
                self.server_datagrams += 1;
                self.server_datagram(datagram);
            }
        }
    }

    pub fn initial_keys(&self) -> Option<&SpaceKeys> {
        self.initial_keys.as_ref()
    }

    pub fn handshake_keys(&self) -> Option<&SpaceKeys> {
        self.handshake_keys.as_ref()
    }

    pub fn server_scid(&self) -> Option<ConnectionId> {
        self.server_scid
    }

    /// Server packet numbers received in `space`, for acknowledgement.
    pub fn received(&self, space: Space) -> &[u64] {
        match space {
            Space::Initial => &self.initial.received,
            Space::Handshake => &self.handshake.received,
        }
    }

    /// Source connection id and token of the first Retry.
    pub fn retry(&self) -> Option<&(ConnectionId, Vec<u8>)> {
        self.retry.as_ref()
    }

    pub fn hello_retry(&self) -> Option<&ServerHelloSummary> {
        self.hello_retry.as_ref()
    }

    pub fn server_hello(&self) -> Option<&ServerHelloSummary> {
        self.server_hello.as_ref()
    }

    pub fn has_encrypted_extensions(&self) -> bool {
        self.encrypted_extensions.is_some()
    }

    pub fn closed_by_server(&self) -> bool {
        !self.errors.is_empty()
    }

    pub fn version_negotiated(&self) -> bool {
        self.vn_versions.is_some()
    }

    pub fn server_datagrams(&self) -> usize {
        self.server_datagrams
    }

    fn anomaly(&mut self, what: String) {
        debug!("flight anomaly: {what}");
        if !self.anomalies.contains(&what) {
            self.anomalies.push(what);
        }
    }

    fn client_datagram(&mut self, datagram: &[u8]) {
        let Ok(spans) = split_coalesced(datagram) else { return };
        for span in spans {
            let Some(header) = &span.header else { continue };
            if header.packet_type != PacketType::Initial || header.version != QUIC_V1 {
                continue;
            }
            let after_retry = self.retry.as_ref().is_some_and(|r| r.0 == header.dcid) && !self.restarted_for_retry;
            if self.client_dcid.is_none() || after_retry {
                self.restarted_for_retry |= after_retry;
                self.restart(header.dcid);
            }
            let Some(keys) = &self.initial_keys else { continue };
            let packet = span.bytes(datagram);
            let Ok((plain, pn)) =
                unprotect_packet(&keys.client, packet, header, span.payload_offset, self.client_tracker.largest())
            else {
                continue;
            };
            self.client_tracker.observe(pn);
            for frame in parse_frames(&plain).unwrap_or_default() {
                if let Frame::Crypto { offset, data } = frame {
                    if self.client_stream.insert(offset, &data).is_err() {
                        self.anomaly("client-crypto-conflict".into());
                    }
                }
            }
            self.client_messages();
        }
    }

    /// The first client Initial, and the first one sent to a Retry's source
    /// connection id, start a fresh attempt with their own Initial keys.
    fn restart(&mut self, dcid: ConnectionId) {
        self.client_dcid = Some(dcid);
        self.initial_keys = derive_initial_keys(&dcid, QUIC_V1).ok();
        self.client_tracker = PacketNumberTracker::default();
        self.client_stream = CryptoStream::new(Space::Initial);
        self.client_consumed = 0;
        self.initial = SpaceState::new(Space::Initial);
        self.handshake = SpaceState::new(Space::Handshake);
        self.handshake_keys = None;
        self.pending_handshake.clear();
        self.transcript = TranscriptState::new();
        self.hello_retry = None;
        self.server_hello = None;
        self.encrypted_extensions = None;
    }

    fn client_messages(&mut self) {
        let stream = self.client_stream.contiguous().to_vec();
        let (msgs, used) = split_handshake_messages(&stream[self.client_consumed..]);
        for msg in msgs {
            if msg[0] == HS_CLIENT_HELLO {
                self.transcript.push(msg);
            }
        }
        self.client_consumed += used;
    }

    fn server_datagram(&mut self, datagram: &[u8]) {
        let spans = match split_coalesced(datagram) {
            Ok(s) => s,
            Err(e) => {
                self.unparseable = true;
                self.anomaly(format!("malformed-datagram: {e}"));
                return;
            }
        };
        for span in spans {
            let Some(header) = span.header.clone() else { continue };
            let packet = span.bytes(datagram);
            match header.packet_type {
                PacketType::VersionNegotiation => match parse_version_negotiation(packet) {
                    Ok(vn) => {
                        if self.vn_versions.is_none() {
                            self.vn_versions = Some(vn.versions);
                        }
                    }
                    Err(e) => {
                        self.unparseable = true;
                        self.anomaly(format!("malformed-version-negotiation: {e}"));
                    }
                },
                _ if self.kind == ProbeKind::Vn => {
                    self.unparseable = true;
                    self.anomaly(format!("unexpected-version: {:#010x}", header.version));
                }
                PacketType::Retry => {
                    let Some(odcid) = self.client_dcid else { continue };
                    if !verify_retry(&odcid, packet) {
                        self.anomaly("retry-integrity".into());
                    } else if self.retry.is_none() {
                        self.retry = Some((header.scid, header.token.clone()));
                    }
                }
                PacketType::Initial => self.server_initial(packet, &header, span.payload_offset),
                PacketType::Handshake => {
                    if self.handshake_keys.is_some() {
                        self.server_handshake(packet, &header, span.payload_offset);
                    } else {
                        self.pending_handshake.push(packet.to_vec());
                    }
                }
                PacketType::ZeroRtt => self.anomaly("server-0rtt".into()),
            }
        }
    }

    fn server_initial(&mut self, packet: &[u8], header: &LongHeader, pn_offset: usize) {
        let Some(keys) = &self.initial_keys else {
            self.anomaly("server-initial-without-client".into());
            return;
        };
        let opened = unprotect_packet(&keys.server, packet, header, pn_offset, self.initial.tracker.largest());
        let (plain, pn) = match opened {
            Ok(v) => v,
            Err(e) => {
                self.unparseable = true;
                self.anomaly(format!("undecryptable-initial: {e}"));
                return;
            }
        };
        self.initial.tracker.observe(pn);
        self.initial.received.push(pn);
        self.server_scid.get_or_insert(header.scid);
        self.frames(&plain, Space::Initial);
        self.server_initial_messages();
    }

    fn server_handshake(&mut self, packet: &[u8], header: &LongHeader, pn_offset: usize) {
        let keys = self.handshake_keys.as_ref().expect("checked by caller");
        let opened = unprotect_packet(&keys.server, packet, header, pn_offset, self.handshake.tracker.largest());
        let (plain, pn) = match opened {
            Ok(v) => v,
            Err(e) => {
                self.unparseable = true;
                self.anomaly(format!("undecryptable-handshake: {e}"));
                return;
            }
        };
        self.handshake.tracker.observe(pn);
        self.handshake.received.push(pn);
        self.frames(&plain, Space::Handshake);
        let stream = self.handshake.stream.contiguous().to_vec();
        let (msgs, used) = split_handshake_messages(&stream[self.handshake.consumed..]);
        for msg in msgs {
            if msg[0] == HS_ENCRYPTED_EXTENSIONS && self.encrypted_extensions.is_none() {
                match parse_encrypted_extensions(msg) {
                    Ok(ee) => {
                        if !ee.duplicate_tp_ids.is_empty() {
                            self.anomaly(format!("duplicate-tp: {:?}", ee.duplicate_tp_ids));
                        }
                        self.encrypted_extensions = Some(ee);
                    }
                    Err(e) => {
                        self.unparseable = true;
                        self.anomaly(format!("unparseable-encrypted-extensions: {e}"));
                    }
                }
            }
        }
        self.handshake.consumed += used;
    }

    fn frames(&mut self, plain: &[u8], space: Space) {
        let frames = match parse_frames(plain) {
            Ok(f) => f,
            Err(e) => {
                self.anomaly(format!("malformed-frames: {e}"));
                return;
            }
        };
        for frame in frames {
            match frame {
                Frame::Crypto { offset, data } => {
                    let state = match space {
                        Space::Initial => &mut self.initial,
                        Space::Handshake => &mut self.handshake,
                    };
                    if let Err(e) = state.stream.insert(offset, &data) {
                        self.unparseable = true;
                        self.anomaly(e.to_string());
                    }
                }
                Frame::ConnectionClose(c) => {
                    if c.reason_lossy {
                        self.anomaly("lossy-reason".into());
                    }
                    self.errors.push(ErrorObservation::from_close(&c, space));
                }
                _ => {}
            }
        }
    }

    fn server_initial_messages(&mut self) {
        let stream = self.initial.stream.contiguous().to_vec();
        let (msgs, used) = split_handshake_messages(&stream[self.initial.consumed..]);
        self.initial.consumed += used;
        for msg in msgs {
            if msg[0] != HS_SERVER_HELLO || self.server_hello.is_some() {
                continue;
            }
            let sh = match parse_server_hello(msg) {
                Ok(sh) => sh,
                Err(e) => {
                    self.unparseable = true;
                    self.anomaly(format!("unparseable-server-hello: {e}"));
                    continue;
                }
            };
            if sh.is_hello_retry {
                if self.hello_retry.is_none() {
                    self.transcript.replace_with_message_hash();
                    self.transcript.push(msg);
                    self.hello_retry = Some(sh);
                }
                continue;
            }
            self.transcript.push(msg);
            self.derive_handshake(&sh);
            self.server_hello = Some(sh);
        }
    }

    fn derive_handshake(&mut self, sh: &ServerHelloSummary) {
        let peer = match sh.key_share {
            KeyShareEntry::X25519(k) => k,
            ref other => {
                self.anomaly(format!("unsupported-key-share: {other:?}"));
                return;
            }
        };
        let keys = x25519_shared(&self.key, &peer)
            .and_then(|shared| derive_handshake_keys(&shared, &self.transcript, sh.cipher));
        match keys {
            Ok(k) => {
                self.handshake_keys = Some(k);
                for packet in std::mem::take(&mut self.pending_handshake) {
                    match crate::wire::parse_long_header(&packet) {
                        Ok((h, off)) => self.server_handshake(&packet, &h, off),
                        Err(e) => self.anomaly(format!("malformed-handshake: {e}")),
                    }
                }
            }
            Err(e) => self.anomaly(format!("handshake-keys: {e}")),
        }
    }

    pub fn finish(&self) -> HandshakeObservation {
        let mut anomalies = self.anomalies.clone();
        if self.hello_retry.is_some() && self.server_hello.is_none() {
            anomalies.push("hrr-unsupported".into());
        }
        let outcome = if self.kind == ProbeKind::Vn {
            if self.vn_versions.is_some() {
                Outcome::VersionNegotiation
            } else if self.server_datagrams > 0 {
                Outcome::Unparseable
            } else {
                Outcome::Timeout
            }
        } else if !self.errors.is_empty() {
            Outcome::Closed
        } else if self.server_hello.is_some() {
            Outcome::HandshakeProgressed
        } else if self.vn_versions.is_some() {
            Outcome::VersionNegotiation
        } else if self.server_datagrams > 0 || self.unparseable {
            Outcome::Unparseable
        } else {
            Outcome::Timeout
        };
        let ee = self.encrypted_extensions.as_ref();
        HandshakeObservation {
            kind: self.kind,
            outcome,
            ext_signature: self.server_hello.as_ref().map(|sh| sh.ext_signature()),
            tp_order: ee.map(|ee| ee.tp_order.iter().map(|p| p.id).collect()),
            error: self.errors.first().cloned(),
            extra_errors: self.errors.iter().skip(1).cloned().collect(),
            alpn_missing_in_ee: ee.is_some_and(|ee| ee.alpn.is_none()),
            retry_seen: self.retry.is_some(),
            hello_retry_seen: self.hello_retry.is_some(),
            vn_versions: self.vn_versions.clone(),
            anomalies,
            raw_flight: Flight::default(),
        }
    }
}

/// Rebuilds the observation of a captured session.
pub fn replay_flight(flight: &Flight) -> HandshakeObservation {
    let mut x = FlightExtractor::new(flight.kind, flight.client_private);
    for r in &flight.records {
        x.feed(r.direction, &r.bytes);
    }
    let mut obs = x.finish();
    obs.raw_flight = flight.clone();
    obs
}
