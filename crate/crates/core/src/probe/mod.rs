//! The three probes: stateless version negotiation, invalid-ALPN handshake and
//! h3 handshake. Live sessions and capture replay share one extraction path.

mod capture;
mod extract;
mod session;

use std::collections::BTreeSet;
use std::fmt;
use std::net::{IpAddr, SocketAddr};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pktcrypto::Space;
use crate::tlsmini::{ExtOrderSignature, TransportParam};
use crate::wire::{ConnectionClose, VarInt, DEFAULT_RESERVED_VERSION};

pub use capture::{CaptureError, Direction, Flight, FlightRecord};
pub use extract::{replay_flight, FlightExtractor};
pub use session::{probe, probe_disambiguate, probe_handshake, probe_version_negotiation, Rehandshakes};

/// ALPN list of the error probe.
pub const INVALID_ALPN: &str = "invalid";
pub const H3_ALPN: &str = "h3";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Target {
    pub address: IpAddr,
    pub port: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sni: Option<String>,
}

impl Target {
    pub fn new(address: IpAddr, port: u16, sni: Option<String>) -> Self {
        Target { address, port, sni }
    }

    pub fn socket_addr(&self) -> SocketAddr {
        SocketAddr::new(self.address, self.port)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.socket_addr())?;
        if let Some(sni) = &self.sni {
            write!(f, " ({sni})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeConfig {
    pub response_timeout: Duration,
    /// ACK datagrams the client may send to coax out the rest of a flight.
    pub max_round_trips: u32,
    /// Resends of the first datagram when nothing comes back.
    pub retries: u32,
    pub reserved_version: u32,
    /// How long to keep listening after the first CONNECTION_CLOSE.
    pub close_linger: Duration,
    /// Overrides the client's default transport parameters.
    pub transport_params: Option<Vec<TransportParam>>,
    /// Seeds connection ids, client random and key share. `None` uses OS
    /// randomness.
    pub seed: Option<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            response_timeout: Duration::from_secs(3),
            max_round_trips: 2,
            retries: 1,
            reserved_version: DEFAULT_RESERVED_VERSION,
            close_linger: Duration::from_millis(100),
            transport_params: None,
            seed: None,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.response_timeout.is_zero() {
            return Err(ProbeError::Config("response timeout must be positive".into()));
        }
        Ok(())
    }

    /// Copy with a seed derived from this one, so a series of sessions stays
    /// reproducible without reusing connection ids.
    pub fn derive(&self, salt: u64) -> ProbeConfig {
        let mut c = self.clone();
        c.seed = self.seed.map(|s| s ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17));
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Vn,
    Invalid,
    H3,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::Vn, ProbeKind::Invalid, ProbeKind::H3];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Vn => "vn",
            ProbeKind::Invalid => "invalid",
            ProbeKind::H3 => "h3",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ProbeKind::Vn => 0,
            ProbeKind::Invalid => 1,
            ProbeKind::H3 => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        ProbeKind::ALL.into_iter().find(|k| k.code() == c)
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "vn" => Ok(ProbeKind::Vn),
            "invalid" | "alpn_invalid" => Ok(ProbeKind::Invalid),
            "h3" => Ok(ProbeKind::H3),
            other => Err(format!("unknown probe {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorObservation {
    pub code: VarInt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_type: Option<VarInt>,
    pub reason: String,
    pub space: Space,
    pub is_application: bool,
}

impl ErrorObservation {
    pub fn from_close(c: &ConnectionClose, space: Space) -> Self {
        ErrorObservation {
            code: c.code,
            frame_type: c.frame_type,
            reason: c.reason.clone(),
            space,
            is_application: c.is_application,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    VersionNegotiation,
    Closed,
    HandshakeProgressed,
    Timeout,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeObservation {
    pub kind: ProbeKind,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ext_signature: Option<ExtOrderSignature>,
    /// Transport parameter ids in wire order, before normalization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp_order: Option<Vec<u64>>,
    /// First CONNECTION_CLOSE received from the server.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorObservation>,
    /// Later CONNECTION_CLOSE frames in the same session.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_errors: Vec<ErrorObservation>,
    #[serde(default)]
    pub alpn_missing_in_ee: bool,
    #[serde(default)]
    pub retry_seen: bool,
    #[serde(default)]
    pub hello_retry_seen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vn_versions: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anomalies: Vec<String>,
    #[serde(skip)]
    pub raw_flight: Flight,
}

impl HandshakeObservation {
    pub fn tp_set(&self) -> Option<BTreeSet<u64>> {
        self.tp_order.as_ref().map(|o| o.iter().copied().collect())
    }

    /// The first close followed by any later ones.
    pub fn all_errors(&self) -> impl Iterator<Item = &ErrorObservation> {
        self.error.iter().chain(self.extra_errors.iter())
    }
}

/// Gate consulted before every datagram a probe sends.
pub trait Pacer: Sync {
    fn acquire(&self);
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("socket error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid probe configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tls(#[from] crate::tlsmini::TlsError),
}
