use std::io::ErrorKind;
use std::net::{SocketAddr, UdpSocket};
use std::time::{Duration, Instant};

use log::{debug, trace};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{
    Direction, Flight, FlightExtractor, HandshakeObservation, Pacer, ProbeConfig, ProbeError, ProbeKind, Target,
    H3_ALPN, INVALID_ALPN,
};
use crate::pktcrypto::{seal_frames, KeyExchange, Space, GROUP_X25519};
use crate::tlsmini::{build_client_hello, ClientHelloConfig};
use crate::wire::{
    build_vn_trigger_datagram, AckFrame, ConnectionClose, ConnectionId, Frame, LongHeaderFields, MIN_INITIAL_DATAGRAM,
    QUIC_V1,
};

const CLIENT_CID_LEN: usize = 8;

struct Session<'a> {
    socket: UdpSocket,
    started: Instant,
    flight: Flight,
    extractor: FlightExtractor,
    pacer: Option<&'a dyn Pacer>,
    sent: usize,
}

impl<'a> Session<'a> {
    fn open(
        target: &Target,
        kind: ProbeKind,
        private: [u8; 32],
        pacer: Option<&'a dyn Pacer>,
    ) -> Result<Self, ProbeError> {
        let local: SocketAddr = if target.address.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("literal");
        let socket = UdpSocket::bind(local)?;
        socket.connect(target.socket_addr())?;
        let mut flight = Flight::new(kind, private);
        flight.label = target.to_string();
        Ok(Session {
            socket,
            started: Instant::now(),
            flight,
            extractor: FlightExtractor::new(kind, private),
            pacer,
            sent: 0,
        })
    }

    fn elapsed_us(&self) -> u64 {
        self.started.elapsed().as_micros() as u64
    }

    fn send(&mut self, datagram: &[u8]) -> Result<(), ProbeError> {
        if let Some(p) = self.pacer {
            p.acquire();
        }
        match self.socket.send(datagram) {
            Ok(_) => {}
            // An ICMP unreachable from an earlier datagram; the target is
            // silent, which the caller sees as a timeout.
            Err(e) if e.kind() == ErrorKind::ConnectionRefused => debug!("send refused: {e}"),
            Err(e) => return Err(e.into()),
        }
        self.sent += 1;
        let ts = self.elapsed_us();
        self.flight.push(Direction::ClientToServer, ts, datagram);
        self.extractor.feed(Direction::ClientToServer, datagram);
        Ok(())
    }

    /// Receives until `deadline` or until `stop` holds after a datagram.
    /// Returns whether anything arrived.
    fn receive_until(
        &mut self,
        deadline: Instant,
        stop: impl Fn(&FlightExtractor) -> bool,
    ) -> Result<bool, ProbeError> {
        let mut buf = [0u8; 65535];
        let mut got = false;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Ok(got);
            }
            self.socket.set_read_timeout(Some((deadline - now).max(Duration::from_millis(1))))?;
            match self.socket.recv(&mut buf) {
                Ok(n) => {
                    got = true;
                    let ts = self.elapsed_us();
                    trace!("received {n} bytes");
                    self.flight.push(Direction::ServerToClient, ts, &buf[..n]);
                    self.extractor.feed(Direction::ServerToClient, &buf[..n]);
                    if stop(&self.extractor) {
                        return Ok(true);
                    }
                }
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Ok(got),
                Err(e) if e.kind() == ErrorKind::ConnectionRefused => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn finish(self) -> HandshakeObservation {
        let mut obs = self.extractor.finish();
        obs.raw_flight = self.flight;
        obs
    }
}

fn session_rng(cfg: &ProbeConfig) -> StdRng {
    match cfg.seed {
        Some(s) => StdRng::seed_from_u64(s),
        None => StdRng::from_os_rng(),
    }
}

/// Stateless version-negotiation probe: a complete Initial whose version is
/// reserved, so any QUIC server must answer with Version Negotiation.
pub fn probe_version_negotiation(
    target: &Target,
    cfg: &ProbeConfig,
    pacer: Option<&dyn Pacer>,
) -> Result<HandshakeObservation, ProbeError> {
    cfg.validate()?;
    let mut rng = session_rng(cfg);
    let dcid = ConnectionId::random(&mut rng, CLIENT_CID_LEN);
    let scid = ConnectionId::random(&mut rng, CLIENT_CID_LEN);
    let key = KeyExchange::generate(&mut rng);
    let ch_cfg = ClientHelloConfig::new(key, rng.random(), &scid, &[H3_ALPN]).with_sni(target.sni.clone());
    let (ch, _) = build_client_hello(&ch_cfg)?;
    let datagram = build_vn_trigger_datagram(&dcid, &scid, cfg.reserved_version, &ch);

    let mut s = Session::open(target, ProbeKind::Vn, [0; 32], pacer)?;
    for _ in 0..=cfg.retries {
        s.send(&datagram)?;
        let deadline = Instant::now() + cfg.response_timeout;
        if s.receive_until(deadline, |x| x.version_negotiated())? {
            break;
        }
    }
    Ok(s.finish())
}

struct Client {
    dcid: ConnectionId,
    scid: ConnectionId,
    token: Vec<u8>,
    next_pn: [u64; 2],
    crypto_offset: u64,
}

impl Client {
    fn initial(&mut self, x: &FlightExtractor, frames: &[Frame]) -> Vec<u8> {
        let keys = x.initial_keys().expect("client Initial fed first");
        let dcid = x.server_scid().unwrap_or(self.dcid);
        let fields = LongHeaderFields::initial(QUIC_V1, dcid, self.scid, self.token.clone());
        let pn = self.next_pn[0];
        self.next_pn[0] += 1;
        seal_frames(&keys.client, &fields, pn, frames, 0)
    }

    fn handshake(&mut self, x: &FlightExtractor, frames: &[Frame]) -> Option<Vec<u8>> {
        let keys = x.handshake_keys()?;
        let fields = LongHeaderFields::handshake(QUIC_V1, x.server_scid().unwrap_or(self.dcid), self.scid);
        let pn = self.next_pn[1];
        self.next_pn[1] += 1;
        Some(seal_frames(&keys.client, &fields, pn, frames, 0))
    }

    /// First packet of an attempt: fresh Initial keys come from `dcid`, so it
    /// is sealed before the extractor has seen it.
    fn first_initial(&mut self, ch: &[u8]) -> Vec<u8> {
        let keys = crate::pktcrypto::derive_initial_keys(&self.dcid, QUIC_V1).expect("v1");
        let fields = LongHeaderFields::initial(QUIC_V1, self.dcid, self.scid, self.token.clone());
        let pn = self.next_pn[0];
        self.next_pn[0] += 1;
        self.crypto_offset = ch.len() as u64;
        let frames = [Frame::Crypto { offset: 0, data: ch.to_vec() }];
        seal_frames(&keys.client, &fields, pn, &frames, MIN_INITIAL_DATAGRAM)
    }

    /// Initial (and Handshake, once keys exist) packets carrying `initial` and
    /// `handshake` frames, padded to a full client datagram.
    fn datagram(&mut self, x: &FlightExtractor, initial: Vec<Frame>, handshake: Vec<Frame>) -> Vec<u8> {
        let mut tail = Vec::new();
        if !handshake.is_empty() {
            if let Some(p) = self.handshake(x, &handshake) {
                tail = p;
            }
        }
        let mut first = self.initial(x, &initial);
        let short = MIN_INITIAL_DATAGRAM.saturating_sub(first.len() + tail.len());
        if short > 0 {
            let mut padded = initial;
            padded.push(Frame::Padding { len: short });
            self.next_pn[0] -= 1;
            first = self.initial(x, &padded);
        }
        first.extend_from_slice(&tail);
        first
    }

    fn acks(&mut self, x: &FlightExtractor) -> Vec<u8> {
        let ack = |space| AckFrame::from_packet_numbers(x.received(space), 0).map(Frame::Ack);
        let initial: Vec<Frame> = ack(Space::Initial).into_iter().collect();
        let handshake: Vec<Frame> = ack(Space::Handshake).into_iter().collect();
        self.datagram(x, initial, handshake)
    }

    fn close(&mut self, x: &FlightExtractor) -> Vec<u8> {
        let close = || vec![Frame::ConnectionClose(ConnectionClose::transport(0, 0, ""))];
        let handshake = if x.handshake_keys().is_some() { close() } else { Vec::new() };
        self.datagram(x, close(), handshake)
    }
}

/// Handshake probe offering `alpn`. Every failure to hear back surfaces as an
/// observation outcome; only local socket errors are returned as errors.
pub fn probe_handshake(
    target: &Target,
    alpn: &[&str],
    cfg: &ProbeConfig,
    pacer: Option<&dyn Pacer>,
) -> Result<HandshakeObservation, ProbeError> {
    cfg.validate()?;
    let kind = if alpn == [INVALID_ALPN] { ProbeKind::Invalid } else { ProbeKind::H3 };
    let mut rng = session_rng(cfg);
    let dcid = ConnectionId::random(&mut rng, CLIENT_CID_LEN);
    let scid = ConnectionId::random(&mut rng, CLIENT_CID_LEN);
    let key = KeyExchange::generate(&mut rng);
    let private = key.private;
    let mut ch_cfg = ClientHelloConfig::new(key, rng.random(), &scid, alpn).with_sni(target.sni.clone());
    if let Some(tps) = &cfg.transport_params {
        ch_cfg.transport_params = tps.clone();
    }
    let (ch, _) = build_client_hello(&ch_cfg)?;

    let mut s = Session::open(target, kind, private, pacer)?;
    let mut c = Client { dcid, scid, token: Vec::new(), next_pn: [0, 0], crypto_offset: 0 };
    let mut first = c.first_initial(&ch);
    s.send(&first)?;

    let mut resends = 0;
    let mut round_trips = 0;
    let mut retry_done = false;
    let mut hrr_done = false;
    let done = |x: &FlightExtractor| x.closed_by_server() || x.has_encrypted_extensions() || x.version_negotiated();
    loop {
        let deadline = Instant::now() + cfg.response_timeout;
        let got = s.receive_until(deadline, |x| {
            done(x) || (x.retry().is_some() && !retry_done) || (x.hello_retry().is_some() && !hrr_done)
        })?;
        let x = &s.extractor;

        if x.closed_by_server() {
            let linger = Instant::now() + cfg.close_linger;
            s.receive_until(linger, |_| false)?;
            break;
        }
        if done(x) {
            break;
        }
        if let (Some((retry_scid, token)), false) = (x.retry().cloned(), retry_done) {
            retry_done = true;
            debug!("{target}: retry, resending with token");
            c.dcid = retry_scid;
            c.token = token;
            first = c.first_initial(&ch);
            s.send(&first)?;
            continue;
        }
        if let (Some(hrr), false) = (x.hello_retry().cloned(), hrr_done) {
            hrr_done = true;
            let wants_x25519 =
                matches!(hrr.key_share, crate::tlsmini::KeyShareEntry::Selected { group } if group == GROUP_X25519);
            if !wants_x25519 || hrr.cookie.is_none() {
                debug!("{target}: hello retry for an unsupported group");
                break;
            }
            let mut retry_cfg = ch_cfg.clone();
            retry_cfg.cookie = hrr.cookie.clone();
            let (ch2, _) = build_client_hello(&retry_cfg)?;
            let frames = vec![Frame::Crypto { offset: c.crypto_offset, data: ch2 }];
            let d = c.datagram(&s.extractor, frames, Vec::new());
            s.send(&d)?;
            continue;
        }
        if !got && x.server_datagrams() == 0 {
            if resends < cfg.retries {
                resends += 1;
                s.send(&first)?;
                continue;
            }
            break;
        }
        if !got {
            // Part of the flight is missing; acknowledge what arrived so the
            // server can send the rest.
            if round_trips < cfg.max_round_trips && x.initial_keys().is_some() && x.server_scid().is_some() {
                round_trips += 1;
                let d = c.acks(&s.extractor);
                s.send(&d)?;
                continue;
            }
            break;
        }
    }

    let x = &s.extractor;
    if !x.closed_by_server() && !x.version_negotiated() {
        let d = c.close(x);
        s.send(&d)?;
    }
    debug!("{target}: {kind} probe done after {} datagrams", s.sent);
    Ok(s.finish())
}

#[derive(Debug, Clone, Default)]
pub struct Rehandshakes {
    /// Sessions that produced a transport-parameter order.
    pub observations: Vec<HandshakeObservation>,
    pub attempts: usize,
}

impl Rehandshakes {
    pub fn orders(&self) -> Vec<Vec<u64>> {
        self.observations.iter().filter_map(|o| o.tp_order.clone()).collect()
    }
}

/// `n` additional h3 handshakes to tell a fixed order from a randomized one.
pub fn probe_disambiguate(
    target: &Target,
    n: usize,
    cfg: &ProbeConfig,
    pacer: Option<&dyn Pacer>,
) -> Result<Rehandshakes, ProbeError> {
    let mut out = Rehandshakes::default();
    for i in 0..n {
        out.attempts += 1;
        let obs = probe_handshake(target, &[H3_ALPN], &cfg.derive(0x100 + i as u64), pacer)?;
        if obs.tp_order.is_some() {
            out.observations.push(obs);
        }
    }
    Ok(out)
}

/// Runs one probe by kind.
pub fn probe(
    target: &Target,
    kind: ProbeKind,
    cfg: &ProbeConfig,
    pacer: Option<&dyn Pacer>,
) -> Result<HandshakeObservation, ProbeError> {
    match kind {
        ProbeKind::Vn => probe_version_negotiation(target, cfg, pacer),
        ProbeKind::Invalid => probe_handshake(target, &[INVALID_ALPN], cfg, pacer),
        ProbeKind::H3 => probe_handshake(target, &[H3_ALPN], cfg, pacer),
    }
}
