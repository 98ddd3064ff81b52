use std::collections::HashMap;
use std::io::{self, ErrorKind};
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, trace};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quicfp::pktcrypto::{
    build_retry, derive_handshake_keys, derive_initial_keys, seal_frames, unprotect_packet, x25519_shared, KeyExchange,
    PacketNumberTracker, SpaceKeys, TranscriptState, GROUP_X25519, TLS_AES_128_GCM_SHA256,
    TLS_CHACHA20_POLY1305_SHA256,
};
use quicfp::tlsmini::{
    alpn_extension_body, build_encrypted_extensions, build_hello_retry_request, build_server_hello,
    encode_transport_params, parse_client_hello, split_handshake_messages, ClientHelloSummary, CryptoStream,
    ExtOrderSignature, ServerHelloParams, TransportParam, EXT_ALPN, EXT_QUIC_TRANSPORT_PARAMETERS, HS_CLIENT_HELLO,
};
use quicfp::wire::{
    build_version_negotiation, split_coalesced, AckFrame, ConnectionClose, ConnectionId, Frame, LongHeader,
    LongHeaderFields, PacketType, MIN_INITIAL_DATAGRAM, QUIC_V1,
};

use crate::script::{FlightScript, Refusal, SniPolicy, TpBehavior};

const H3: &[u8] = b"h3";
const SERVER_CID_LEN: usize = 8;
const RETRY_TOKEN_PREFIX: &[u8] = b"qfp-retry:";

/// Source of the choices a randomizing library makes per handshake.
pub trait Sampler: Send {
    fn permute(&mut self, ids: &[u64]) -> Vec<u64>;
    /// Index in `0..n`.
    fn pick(&mut self, n: usize) -> usize;
}

/// Uniform permutations from a seeded ChaCha stream.
pub struct UniformSampler(ChaCha8Rng);

impl UniformSampler {
    pub fn new(seed: u64) -> Self {
        UniformSampler(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl Sampler for UniformSampler {
    fn permute(&mut self, ids: &[u64]) -> Vec<u64> {
        let mut v = ids.to_vec();
        v.shuffle(&mut self.0);
        v
    }

    fn pick(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }
}

struct Conn {
    keys: SpaceKeys,
    odcid: ConnectionId,
    scid: ConnectionId,
    client_scid: ConnectionId,
    client_pns: PacketNumberTracker,
    received: Vec<u64>,
    stream: CryptoStream,
    consumed: usize,
    transcript: TranscriptState,
    hrr_cookie: Option<Vec<u8>>,
    signature: Option<ExtOrderSignature>,
    crypto_offset: u64,
    next_pn: u64,
    /// Last flight sent, repeated when the client retransmits.
    flight: Vec<Vec<u8>>,
    finished: bool,
}

/// The protocol side of a scripted endpoint, independent of sockets.
pub struct ServerState {
    script: FlightScript,
    sampler: Box<dyn Sampler>,
    rng: ChaCha8Rng,
    conns: HashMap<SocketAddr, Conn>,
}

impl ServerState {
    /// Permutations and crypto material come from separate streams of `seed`,
    /// so the permutation sequence depends only on the number of handshakes.
    pub fn new(script: FlightScript, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        ServerState { script, sampler: Box::new(UniformSampler::new(seed)), rng, conns: HashMap::new() }
    }

    pub fn with_sampler(mut self, sampler: Box<dyn Sampler>) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn script(&self) -> &FlightScript {
        &self.script
    }

    /// Datagrams to send back to `from` in reply to `datagram`.
    pub fn handle(&mut self, datagram: &[u8], from: SocketAddr) -> Vec<Vec<u8>> {
        let Ok(spans) = split_coalesced(datagram) else { return Vec::new() };
        let Some(first) = spans.first().and_then(|s| s.header.as_ref()) else { return Vec::new() };
        if first.version != QUIC_V1 {
            if first.version == 0 || (self.script.strict_vn && datagram.len() < MIN_INITIAL_DATAGRAM) {
                return Vec::new();
            }
            let unused = self.rng.random();
            return vec![build_version_negotiation(&first.scid, &first.dcid, &self.script.versions, unused)];
        }
        let mut out = Vec::new();
        for span in &spans {
            let Some(h) = &span.header else { continue };
            if h.packet_type == PacketType::Initial {
                out.extend(self.initial(from, h, span.bytes(datagram), span.payload_offset));
            }
        }
        out
    }

    fn initial(&mut self, from: SocketAddr, h: &LongHeader, packet: &[u8], pn_offset: usize) -> Vec<Vec<u8>> {
        if !self.conns.contains_key(&from) {
            let odcid = match h.token.strip_prefix(RETRY_TOKEN_PREFIX) {
                Some(odcid) if self.script.retry => match ConnectionId::new(odcid) {
                    Ok(c) => c,
                    Err(_) => return Vec::new(),
                },
                _ if self.script.retry => {
                    let scid = ConnectionId::random(&mut self.rng, SERVER_CID_LEN);
                    let token = [RETRY_TOKEN_PREFIX, &h.dcid[..]].concat();
                    let unused = self.rng.random();
                    return vec![build_retry(&h.scid, &scid, &token, &h.dcid, unused)];
                }
                _ => h.dcid,
            };
            let Ok(keys) = derive_initial_keys(&h.dcid, QUIC_V1) else { return Vec::new() };
            let conn = Conn {
                keys,
                odcid,
                scid: ConnectionId::random(&mut self.rng, SERVER_CID_LEN),
                client_scid: h.scid,
                client_pns: PacketNumberTracker::default(),
                received: Vec::new(),
                stream: CryptoStream::new(quicfp::pktcrypto::Space::Initial),
                consumed: 0,
                transcript: TranscriptState::new(),
                hrr_cookie: None,
                signature: None,
                crypto_offset: 0,
                next_pn: 0,
                flight: Vec::new(),
                finished: false,
            };
            self.conns.insert(from, conn);
        }
        let conn = self.conns.get_mut(&from).expect("inserted");
        let Ok((plain, pn)) = unprotect_packet(&conn.keys.client, packet, h, pn_offset, conn.client_pns.largest())
        else {
            trace!("undecryptable client Initial");
            return Vec::new();
        };
        conn.client_pns.observe(pn);
        conn.received.push(pn);
        let frames = quicfp::wire::parse_frames(&plain).unwrap_or_default();
        if frames.iter().any(|f| matches!(f, Frame::ConnectionClose(_))) {
            self.conns.remove(&from);
            return Vec::new();
        }
        let mut saw_crypto = false;
        for f in frames {
            if let Frame::Crypto { offset, data } = f {
                saw_crypto = true;
                if conn.stream.insert(offset, &data).is_err() {
                    return Vec::new();
                }
            }
        }
        let stream = conn.stream.contiguous().to_vec();
        let (msgs, used) = split_handshake_messages(&stream[conn.consumed..]);
        let msgs: Vec<Vec<u8>> = msgs.into_iter().map(<[u8]>::to_vec).collect();
        conn.consumed += used;
        if msgs.is_empty() {
            // A retransmitted ClientHello gets the same answer again.
            return if saw_crypto { conn.flight.clone() } else { Vec::new() };
        }
        let mut out = Vec::new();
        for m in msgs.iter().filter(|m| m[0] == HS_CLIENT_HELLO) {
            out.extend(self.client_hello(from, m));
        }
        out
    }

    fn client_hello(&mut self, from: SocketAddr, msg: &[u8]) -> Vec<Vec<u8>> {
        let Ok(ch) = parse_client_hello(msg) else { return Vec::new() };
        let script = &self.script;
        let conn = self.conns.get_mut(&from).expect("caller holds the conn");
        if conn.finished {
            return Vec::new();
        }
        let signature = *conn
            .signature
            .get_or_insert_with(|| script.ext_signatures[self.sampler.pick(script.ext_signatures.len())]);
        let Some(cipher) =
            ch.ciphers.iter().copied().find(|c| [TLS_AES_128_GCM_SHA256, TLS_CHACHA20_POLY1305_SHA256].contains(c))
        else {
            return self.refuse(from, &Refusal::Close(vec![crate::CloseSpec::new(0x128, 0x6, "")]), &ch);
        };

        if conn.hrr_cookie.is_none() && conn.transcript.message_types().is_empty() && script.hello_retry {
            let mut cookie = vec![0u8; 16];
            self.rng.fill_bytes(&mut cookie);
            let hrr = build_hello_retry_request(&ch.session_id, cipher, GROUP_X25519, signature, Some(&cookie));
            conn.transcript.push(msg);
            conn.transcript.replace_with_message_hash();
            conn.transcript.push(&hrr);
            conn.hrr_cookie = Some(cookie);
            let d = initial_packet(conn, vec![Frame::Crypto { offset: 0, data: hrr.clone() }]);
            conn.crypto_offset = hrr.len() as u64;
            conn.flight = vec![d.clone()];
            return vec![d];
        }
        if conn.hrr_cookie.is_some() && ch.cookie != conn.hrr_cookie {
            debug!("second ClientHello without our cookie");
            return Vec::new();
        }
        conn.transcript.push(msg);

        if let SniPolicy::Require(names) = &script.sni {
            if !ch.sni.as_ref().is_some_and(|s| names.contains(s)) {
                let r = script.sni_reject.clone();
                return self.refuse(from, &r, &ch);
            }
        }
        if !ch.alpn.iter().any(|p| p == H3) {
            let r = script.alpn_failure.clone();
            return self.refuse(from, &r, &ch);
        }
        self.first_flight(from, &ch, cipher, true)
    }

    fn refuse(&mut self, from: SocketAddr, refusal: &Refusal, ch: &ClientHelloSummary) -> Vec<Vec<u8>> {
        match refusal {
            Refusal::Silent => {
                if let Some(c) = self.conns.get_mut(&from) {
                    c.finished = true;
                }
                Vec::new()
            }
            Refusal::ContinueWithoutAlpn => {
                let cipher = ch.ciphers.first().copied().unwrap_or(TLS_AES_128_GCM_SHA256);
                let cipher = if cipher == TLS_CHACHA20_POLY1305_SHA256 { cipher } else { TLS_AES_128_GCM_SHA256 };
                self.first_flight(from, ch, cipher, false)
            }
            Refusal::Close(specs) => {
                let alpn = ch.alpn.first().map(|p| String::from_utf8_lossy(p).into_owned()).unwrap_or_default();
                let Some(mut conn) = self.conns.remove(&from) else { return Vec::new() };
                specs
                    .iter()
                    .map(|s| {
                        let close = ConnectionClose::transport(s.code, s.frame_type, &s.render(&alpn));
                        initial_packet(&mut conn, vec![Frame::ConnectionClose(close)])
                    })
                    .collect()
            }
        }
    }

    fn first_flight(&mut self, from: SocketAddr, ch: &ClientHelloSummary, cipher: u16, alpn: bool) -> Vec<Vec<u8>> {
        let Some(client_share) = ch.x25519_share else {
            return self.refuse(from, &Refusal::Close(vec![crate::CloseSpec::new(0x128, 0x6, "")]), ch);
        };
        let ids = match &self.script.tp {
            TpBehavior::Fixed(ids) => ids.clone(),
            TpBehavior::Randomized(ids) => self.sampler.permute(ids),
        };
        let key = KeyExchange::generate(&mut self.rng);
        let mut random = [0u8; 32];
        self.rng.fill_bytes(&mut random);
        let conn = self.conns.get_mut(&from).expect("caller holds the conn");
        let sh = build_server_hello(&ServerHelloParams {
            random,
            session_echo: &ch.session_id,
            cipher,
            key_share: key.public,
            order: conn.signature.expect("chosen with the ClientHello"),
        });
        conn.transcript.push(&sh);
        let Ok(shared) = x25519_shared(&key, &client_share) else { return Vec::new() };
        let Ok(hs) = derive_handshake_keys(&shared, &conn.transcript, cipher) else { return Vec::new() };

        let mut params: Vec<TransportParam> = ids.iter().map(|&id| tp_value(id, conn, &mut self.rng)).collect();
        if self.script.grease_tp {
            let n: u64 = self.rng.random_range(0..1000);
            let mut value = vec![0u8; self.rng.random_range(0..8)];
            self.rng.fill_bytes(&mut value);
            let at = self.rng.random_range(0..=params.len());
            params.insert(at, TransportParam::new(31 * n + 27, value));
        }
        let mut exts = Vec::new();
        if alpn {
            exts.push((EXT_ALPN, alpn_extension_body(&[H3])));
        }
        exts.push((EXT_QUIC_TRANSPORT_PARAMETERS, encode_transport_params(&params)));
        let ee = build_encrypted_extensions(&exts);

        let offset = conn.crypto_offset;
        conn.crypto_offset += sh.len() as u64;
        let mut d = initial_packet(conn, vec![Frame::Crypto { offset, data: sh }]);
        let fields = LongHeaderFields::handshake(QUIC_V1, conn.client_scid, conn.scid);
        d.extend(seal_frames(&hs.server, &fields, 0, &[Frame::Crypto { offset: 0, data: ee }], 0));
        conn.flight = vec![d.clone()];
        conn.finished = true;
        vec![d]
    }
}

/// Server Initial acknowledging everything received so far.
fn initial_packet(conn: &mut Conn, mut frames: Vec<Frame>) -> Vec<u8> {
    if let Some(ack) = AckFrame::from_packet_numbers(&conn.received, 0) {
        frames.insert(0, Frame::Ack(ack));
    }
    let fields = LongHeaderFields::initial(QUIC_V1, conn.client_scid, conn.scid, Vec::new());
    let pn = conn.next_pn;
    conn.next_pn += 1;
    seal_frames(&conn.keys.server, &fields, pn, &frames, 0)
}

fn tp_value(id: u64, conn: &Conn, rng: &mut ChaCha8Rng) -> TransportParam {
    match id {
        0x0 => TransportParam::new(id, conn.odcid.to_vec()),
        0x1 => TransportParam::varint(id, 30_000),
        0x2 => {
            let mut token = vec![0u8; 16];
            rng.fill_bytes(&mut token);
            TransportParam::new(id, token)
        }
        0x3 => TransportParam::varint(id, 1472),
        0x4 => TransportParam::varint(id, 1 << 20),
        0x5..=0x7 => TransportParam::varint(id, 1 << 18),
        0x8 => TransportParam::varint(id, 100),
        0x9 => TransportParam::varint(id, 3),
        0xa => TransportParam::varint(id, 3),
        0xb => TransportParam::varint(id, 25),
        0xc => TransportParam::new(id, Vec::new()),
        0xe => TransportParam::varint(id, 2),
        0xf => TransportParam::new(id, conn.scid.to_vec()),
        _ => TransportParam::new(id, Vec::new()),
    }
}

/// Arrival times of every datagram received by a set of endpoints.
pub type ArrivalLog = Arc<Mutex<Vec<Instant>>>;

/// A scripted endpoint serving one UDP socket on a background thread.
pub struct Endpoint {
    library: String,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Endpoint {
    pub fn spawn(state: ServerState, bind: SocketAddr, arrivals: ArrivalLog) -> io::Result<Endpoint> {
        let socket = UdpSocket::bind(bind)?;
        socket.set_read_timeout(Some(Duration::from_millis(20)))?;
        let addr = socket.local_addr()?;
        let library = state.script().library.clone();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name(format!("lab-{library}"))
            .spawn(move || serve(socket, state, flag, arrivals))?;
        Ok(Endpoint { library, addr, stop, handle: Some(handle) })
    }

    pub fn library(&self) -> &str {
        &self.library
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(socket: UdpSocket, mut state: ServerState, stop: Arc<AtomicBool>, arrivals: ArrivalLog) {
    let mut buf = vec![0u8; 65535];
    while !stop.load(Ordering::Relaxed) {
        let (n, from) = match socket.recv_from(&mut buf) {
            Ok(r) => r,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::ConnectionReset) => {
                continue
            }
            Err(e) => {
                debug!("{}: receive failed: {e}", state.script.library);
                continue;
            }
        };
        arrivals.lock().expect("arrival log").push(Instant::now());
        for reply in state.handle(&buf[..n], from) {
            if let Err(e) = socket.send_to(&reply, from) {
                debug!("{}: send failed: {e}", state.script.library);
            }
        }
    }
}
