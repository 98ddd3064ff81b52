use serde::{Deserialize, Serialize};

use quicfp::tlsmini::ExtOrderSignature::{self, KeyShareFirst as KS, VersionsFirst as VF};
use quicfp::wire::QUIC_V1;

/// What the endpoint puts in its transport parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TpBehavior {
    Fixed(Vec<u64>),
    /// A fresh uniform permutation of these ids for every handshake.
    Randomized(Vec<u64>),
}

impl TpBehavior {
    pub fn ids(&self) -> &[u64] {
        match self {
            TpBehavior::Fixed(v) | TpBehavior::Randomized(v) => v,
        }
    }
}

/// One CONNECTION_CLOSE. `{alpn}` in the reason is replaced with the first
/// protocol the client offered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseSpec {
    pub code: u64,
    #[serde(default)]
    pub frame_type: u64,
    #[serde(default)]
    pub reason: String,
}

impl CloseSpec {
    pub fn new(code: u64, frame_type: u64, reason: &str) -> Self {
        CloseSpec { code, frame_type, reason: reason.to_owned() }
    }

    pub fn render(&self, alpn: &str) -> String {
        self.reason.replace("{alpn}", alpn)
    }
}

/// How the endpoint turns a client down.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refusal {
    /// One datagram per close, in order.
    Close(Vec<CloseSpec>),
    /// Finish the first flight but leave ALPN out of EncryptedExtensions.
    ContinueWithoutAlpn,
    Silent,
}

impl Refusal {
    fn close(code: u64, frame_type: u64, reason: &str) -> Self {
        Refusal::Close(vec![CloseSpec::new(code, frame_type, reason)])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SniPolicy {
    Ignore,
    /// Refuse clients whose SNI is missing or not listed.
    Require(Vec<String>),
}

/// Scripted first-flight behavior of one server library.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlightScript {
    pub library: String,
    /// ServerHello extension orders; one is picked per handshake.
    pub ext_signatures: Vec<ExtOrderSignature>,
    pub tp: TpBehavior,
    /// Reply to a ClientHello without a supported ALPN.
    pub alpn_failure: Refusal,
    pub sni: SniPolicy,
    pub sni_reject: Refusal,
    /// Only answer unknown versions in datagrams of at least 1200 bytes.
    pub strict_vn: bool,
    pub versions: Vec<u32>,
    pub retry: bool,
    pub hello_retry: bool,
    /// Add one reserved transport parameter at a random position.
    pub grease_tp: bool,
}

impl FlightScript {
    fn new(library: &str, sigs: &[ExtOrderSignature], tp: TpBehavior, alpn_failure: Refusal) -> Self {
        FlightScript {
            library: library.to_owned(),
            ext_signatures: sigs.to_vec(),
            tp,
            alpn_failure,
            sni: SniPolicy::Ignore,
            sni_reject: Refusal::Silent,
            strict_vn: false,
            versions: vec![QUIC_V1],
            retry: false,
            hello_retry: false,
            grease_tp: false,
        }
    }

    pub fn requiring_sni(mut self, names: &[&str]) -> Self {
        self.sni = SniPolicy::Require(names.iter().map(|s| s.to_string()).collect());
        self
    }
}

const NO_APP_PROTOCOL: u64 = 0x178;

fn fixed(ids: &[u64]) -> TpBehavior {
    TpBehavior::Fixed(ids.to_vec())
}

fn shuffled(ids: &[u64]) -> TpBehavior {
    TpBehavior::Randomized(ids.to_vec())
}

fn generic(library: &str, sigs: &[ExtOrderSignature], tp: TpBehavior) -> FlightScript {
    FlightScript::new(library, sigs, tp, Refusal::close(NO_APP_PROTOCOL, 0, ""))
}

/// One script per library in the lab.
pub fn library_scripts() -> Vec<FlightScript> {
    let mut s = vec![
        generic("msquic", &[VF], fixed(&[0x0, 0x2, 0x3, 0x4, 0x6, 0x7, 0x8, 0xa, 0xb, 0xf])),
        generic("quic-go", &[VF], fixed(&[0x6, 0x7, 0x4, 0x8, 0x3, 0xb, 0x2, 0x0, 0xf])),
        generic("picoquic", &[VF], fixed(&[0x4, 0x8, 0x3, 0x6, 0x7, 0xb, 0xf, 0x0, 0x2])),
        generic("haproxy", &[VF], fixed(&[0x0, 0x2, 0xf, 0x3, 0x4, 0x6, 0x7, 0x8])),
        generic("ngtcp2", &[VF], fixed(&[0x0, 0x2, 0xf, 0x6, 0x7, 0x4, 0x8])),
        generic("quiche", &[KS], fixed(&[0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xa, 0xb, 0xf])),
        FlightScript::new(
            "neqo",
            &[KS],
            shuffled(&[0x0, 0x6, 0x4, 0xf, 0x8, 0x7]),
            Refusal::close(NO_APP_PROTOCOL, 0x6, ""),
        ),
        FlightScript::new("xquic", &[VF], fixed(&[0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xf]), Refusal::ContinueWithoutAlpn),
        FlightScript::new(
            "aioquic",
            &[VF],
            fixed(&[0x0, 0x2, 0x4, 0x6, 0x7, 0x8, 0xa, 0xb, 0xf]),
            Refusal::close(0x128, 0x6, "No common ALPN protocols"),
        ),
        FlightScript::new(
            "kwik",
            &[VF],
            fixed(&[0x0, 0xf, 0x4, 0x5, 0x6, 0x7, 0x8, 0x9, 0xe]),
            Refusal::close(NO_APP_PROTOCOL, 0, "unsupported application protocol: {alpn}"),
        ),
        FlightScript::new(
            "lsquic",
            &[KS],
            fixed(&[0x4, 0x6, 0x7, 0x8, 0x0, 0xf, 0x2]),
            Refusal::close(NO_APP_PROTOCOL, 0, "no suitable application protocol"),
        ),
        FlightScript::new(
            "nginx",
            &[KS, VF],
            fixed(&[0x4, 0x8, 0x6, 0x7, 0x3, 0xb, 0xa, 0x0, 0xf, 0x2]),
            Refusal::close(NO_APP_PROTOCOL, 0, "handshake failed"),
        ),
        FlightScript::new(
            "quant",
            &[VF],
            shuffled(&[0x0, 0x2, 0x3, 0x4, 0x6, 0x8, 0xf]),
            Refusal::close(NO_APP_PROTOCOL, 0x6, "PTLS error 120 (NO_APPLICATION_PROTOCOL)"),
        ),
        FlightScript::new(
            "quinn",
            &[KS],
            fixed(&[0x3, 0x4, 0x6, 0x7, 0x8, 0x2, 0x0, 0xf]),
            Refusal::close(NO_APP_PROTOCOL, 0, "peer doesn't support any known protocol"),
        ),
        FlightScript::new(
            "gquiche",
            &[KS],
            shuffled(&[0x0, 0x2, 0x3, 0x4, 0x6, 0x7, 0x8, 0xf]),
            Refusal::close(
                NO_APP_PROTOCOL,
                0x6,
                "28:TLS handshake failure (ENCRYPTION_INITIAL) 120: no application protocol",
            ),
        ),
        FlightScript::new(
            "haskell-quic",
            &[KS],
            fixed(&[0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xf]),
            Refusal::close(NO_APP_PROTOCOL, 0, "no supported application protocols"),
        ),
        FlightScript::new(
            "akaquic",
            &[VF],
            shuffled(&[0x0, 0x2, 0x3, 0x4, 0x6, 0x7, 0x8, 0xf]),
            Refusal::Close(vec![
                CloseSpec::new(0x150, 0, "200:TLS handshake failure (ENCRYPTION_INITIAL) 80: internal error"),
                CloseSpec::new(0x0a, 0, "28:No known ALPN provided by client"),
            ]),
        ),
        FlightScript::new(
            "mvfst",
            &[VF],
            fixed(&[0x0, 0x6, 0x7, 0x4, 0x8, 0xa, 0x3, 0x2, 0xf]),
            Refusal::close(
                NO_APP_PROTOCOL,
                0x1c,
                "fizz::FizzException: Unable to negotiate ALPN, as required by policy. policy=AlpnMode::Required",
            ),
        ),
        FlightScript::new("s2n-quic", &[VF, KS], fixed(&[0x4, 0x6, 0x7, 0x8, 0x0, 0xf]), Refusal::Silent),
        FlightScript::new("quicly", &[VF], fixed(&[0x3, 0x6, 0x7, 0x4, 0x0, 0xf, 0x2, 0x8, 0xa]), Refusal::Silent),
    ];
    for script in &mut s {
        if script.library == "lsquic" {
            script.sni_reject = Refusal::close(0x150, 0, "TLS alert 80");
        }
    }
    s
}

pub fn library_script(name: &str) -> Option<FlightScript> {
    library_scripts().into_iter().find(|s| s.library == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn twenty_distinct_libraries() {
        let s = library_scripts();
        let names: BTreeSet<_> = s.iter().map(|s| s.library.as_str()).collect();
        assert_eq!(s.len(), 20);
        assert_eq!(names.len(), 20);
        for script in &s {
            let ids: BTreeSet<_> = script.tp.ids().iter().collect();
            assert_eq!(ids.len(), script.tp.ids().len(), "{}: repeated id", script.library);
            assert!(!script.ext_signatures.is_empty());
        }
    }

    #[test]
    fn reason_template() {
        let c = CloseSpec::new(1, 0, "unsupported application protocol: {alpn}");
        assert_eq!(c.render("invalid"), "unsupported application protocol: invalid");
    }
}
