use std::collections::BTreeMap;
use std::time::Duration;

use quicfp::fingerprint::FingerprintDb;
use quicfp::probe::{probe, Outcome, ProbeConfig, ProbeKind, Target};
use quicfp::scanner::{run_scan, ScanJob};
use quicfp_lab::{library_script, library_scripts, Farm};

fn quick() -> ProbeConfig {
    ProbeConfig { response_timeout: Duration::from_millis(400), seed: Some(11), ..ProbeConfig::default() }
}

#[test]
fn every_library_is_identified() {
    let farm = Farm::start(library_scripts(), 1).unwrap();
    let db = FingerprintDb::bundled();
    let mut job = ScanJob::new(farm.targets(), db);
    job.probe = quick();
    job.rate = 2000.0;
    let mut got = BTreeMap::new();
    run_scan(&job, |rec| {
        let lib = farm.library_at(rec.target.port).unwrap().to_owned();
        got.insert(lib, rec);
        Ok(())
    })
    .unwrap();
    assert_eq!(got.len(), 20);
    let mut wrong = Vec::new();
    for (lib, rec) in &got {
        if rec.library() != Some(lib.as_str()) {
            wrong.push(format!("{lib}: {:?}", rec.classification));
        }
    }
    assert!(wrong.is_empty(), "{wrong:#?}");
}

#[test]
fn version_negotiation_lists_v1() {
    let farm = Farm::start(vec![library_script("quinn").unwrap()], 2).unwrap();
    let t = &farm.targets()[0];
    let obs = probe(t, ProbeKind::Vn, &quick(), None).unwrap();
    assert_eq!(obs.outcome, Outcome::VersionNegotiation);
    assert_eq!(obs.vn_versions.as_deref(), Some(&[1u32][..]));
}

#[test]
fn nothing_listening_times_out() {
    let sock = std::net::UdpSocket::bind("127.0.0.1:0").unwrap();
    let port = sock.local_addr().unwrap().port();
    drop(sock);
    let t = Target::new("127.0.0.1".parse().unwrap(), port, None);
    let obs = probe(&t, ProbeKind::H3, &quick(), None).unwrap();
    assert_eq!(obs.outcome, Outcome::Timeout);
}

fn one(script: quicfp_lab::FlightScript, seed: u64) -> (Farm, Target) {
    let farm = Farm::start(vec![script], seed).unwrap();
    let t = farm.targets()[0].clone();
    (farm, t)
}

#[test]
fn retry_then_handshake() {
    let mut s = library_script("quiche").unwrap();
    s.retry = true;
    let (_farm, t) = one(s, 3);
    let obs = probe(&t, ProbeKind::H3, &quick(), None).unwrap();
    assert!(obs.retry_seen);
    assert_eq!(obs.outcome, Outcome::HandshakeProgressed, "{obs:?}");
    assert_eq!(obs.tp_order.as_deref(), Some(&[0x0, 0x3, 0x4, 0x6, 0x7, 0x8, 0xa, 0xb, 0xf][..]));
}

#[test]
fn hello_retry_then_handshake() {
    let mut s = library_script("msquic").unwrap();
    s.hello_retry = true;
    let (_farm, t) = one(s, 4);
    let obs = probe(&t, ProbeKind::H3, &quick(), None).unwrap();
    assert!(obs.hello_retry_seen);
    assert_eq!(obs.outcome, Outcome::HandshakeProgressed, "{obs:?}");
    assert!(obs.tp_order.is_some());
}

#[test]
fn sni_required_before_alpn() {
    let (_farm, t) = one(library_script("lsquic").unwrap().requiring_sni(&["a.example"]), 5);
    let obs = probe(&t, ProbeKind::Invalid, &quick(), None).unwrap();
    let err = obs.error.as_ref().unwrap();
    assert_eq!((err.code.into_inner(), err.reason.as_str()), (0x150, "TLS alert 80"));

    let named = Target { sni: Some("a.example".into()), ..t };
    let obs = probe(&named, ProbeKind::Invalid, &quick(), None).unwrap();
    assert_eq!(obs.error.as_ref().unwrap().reason, "no suitable application protocol");
    let obs = probe(&named, ProbeKind::H3, &quick(), None).unwrap();
    assert_eq!(obs.outcome, Outcome::HandshakeProgressed);
}

#[test]
fn strict_vn_ignores_short_datagrams() {
    let mut s = library_script("quiche").unwrap();
    s.strict_vn = true;
    let mut state = quicfp_lab::ServerState::new(s, 0);
    let from = "127.0.0.1:9".parse().unwrap();
    let mut d = vec![0xc0, 0x1a, 0x2a, 0x3a, 0x4a, 1, 0xaa, 1, 0xbb, 0, 1, 0];
    assert!(state.handle(&d, from).is_empty());
    d.resize(1200, 0);
    let replies = state.handle(&d, from);
    assert_eq!(replies.len(), 1);
    let vn = quicfp::wire::parse_version_negotiation(&replies[0]).unwrap();
    assert_eq!(vn.dcid.as_slice(), &[0xbb]);
    assert_eq!(vn.scid.as_slice(), &[0xaa]);
}

#[test]
fn grease_is_filtered() {
    let mut s = library_script("haproxy").unwrap();
    s.grease_tp = true;
    let (_farm, t) = one(s, 6);
    let obs = probe(&t, ProbeKind::H3, &quick(), None).unwrap();
    let raw = obs.tp_order.clone().unwrap();
    assert_eq!(raw.len(), 9);
    assert_eq!(quicfp::fingerprint::normalize_tp_ids(&raw), vec![0x0, 0x2, 0xf, 0x3, 0x4, 0x6, 0x7, 0x8]);
    // Alone, this order collides with akaquic's set; the close settles it.
    let invalid = probe(&t, ProbeKind::Invalid, &quick(), None).unwrap();
    assert_eq!(FingerprintDb::bundled().classify(&[invalid, obs]).library.as_deref(), Some("haproxy"));
}

fn quant_orders(seed: u64, n: u64) -> Vec<Vec<u64>> {
    let (_farm, t) = one(library_script("quant").unwrap(), seed);
    (0..n).map(|i| probe(&t, ProbeKind::H3, &quick().derive(i), None).unwrap().tp_order.unwrap()).collect()
}

#[test]
fn permutations_follow_the_seed() {
    let a = quant_orders(1, 4);
    assert_eq!(a, quant_orders(1, 4));
    assert_ne!(a, quant_orders(2, 4));
    let mut ids = a[0].clone();
    ids.sort();
    assert_eq!(ids, vec![0x0, 0x2, 0x3, 0x4, 0x6, 0x8, 0xf]);
}

#[test]
fn scripts_and_database_describe_the_same_libraries() {
    use quicfp::fingerprint::TpKind;
    use quicfp_lab::{Refusal, TpBehavior};
    let db = FingerprintDb::bundled();
    let scripts = library_scripts();
    let mut libs: Vec<String> = scripts.iter().map(|s| s.library.clone()).collect();
    libs.sort();
    let mut known = db.libraries();
    known.sort();
    assert_eq!(libs, known);
    for s in &scripts {
        let rules: Vec<_> = db.tp_rules.iter().filter(|r| r.library == s.library).collect();
        for r in &rules {
            for sig in &s.ext_signatures {
                assert!(r.ext_signatures.contains(sig), "{}: {sig}", s.library);
            }
            match (&r.kind, &s.tp) {
                (TpKind::FixedOrder(a), TpBehavior::Fixed(b)) => assert_eq!(a, b, "{}", s.library),
                (TpKind::RandomizedSet(a), TpBehavior::Randomized(b)) => {
                    assert_eq!(a, &b.iter().copied().collect(), "{}", s.library)
                }
                _ => panic!("{}: fixed/randomized mismatch", s.library),
            }
        }
        let has_error_rule = db.error_rules.iter().any(|r| r.library == s.library);
        assert_eq!(has_error_rule, s.alpn_failure != Refusal::Silent, "{}", s.library);
        assert!(!rules.is_empty() || has_error_rule, "{}", s.library);
    }
}

#[test]
fn mutated_values_keep_the_verdict() {
    use rand::SeedableRng;
    let (_farm, t) = one(library_script("quiche").unwrap(), 7);
    let db = FingerprintDb::bundled();
    let invalid = probe(&t, ProbeKind::Invalid, &quick(), None).unwrap();
    let h3 = probe(&t, ProbeKind::H3, &quick(), None).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let (flight, n) = quicfp_lab::mutate_tp_values(&h3.raw_flight, &mut rng).unwrap();
    assert_eq!(n, 9);
    assert_ne!(flight, h3.raw_flight);
    let replayed = quicfp::probe::replay_flight(&flight);
    assert_eq!(replayed.tp_order, h3.tp_order);
    assert_eq!(db.classify(&[invalid.clone(), replayed]), db.classify(&[invalid, h3]));
}
