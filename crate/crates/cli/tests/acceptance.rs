//! Acceptance checks for the whole toolchain. Prints one line per criterion
//! and exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;

use quicfp::fingerprint::{Classification, FingerprintDb};
use quicfp::pktcrypto::{derive_initial_keys, protect_packet, x25519_shared, KeyExchange};
use quicfp::probe::{replay_flight, Flight, ProbeConfig, ProbeKind, Target};
use quicfp::scanner::{merge_results, read_records, run_scan, MergeStatus, ScanJob, ScanRecord};
use quicfp::wire::{
    decode_varint, parse_frames, parse_long_header, AckFrame, ConnectionClose, ConnectionId, Frame, LongHeaderFields,
    PacketType, VarInt, QUIC_V1,
};
use quicfp_lab::{
    library_script, library_scripts, max_in_window, ArrivalLog, Endpoint, Farm, Sampler, ServerState, UniformSampler,
};

/// Wall-clock budget for the end-to-end farm scan.
const FARM_SCAN_BUDGET: Duration = Duration::from_secs(60);
/// Cases per randomized codec suite.
const CODEC_CASES: u32 = 1000;
const COLLISION_TRIALS: u64 = 1000;
/// Datagrams per second requested from the scanner, and the most the
/// harness may count in any one-second window.
const RATE_CAP: usize = 100;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_quicfp")
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../labharness/golden")
}

fn vector(name: &str) -> Vec<u8> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/vectors").join(format!("{name}.hex"));
    let text: String = std::fs::read_to_string(path).unwrap().split_whitespace().collect();
    hex::decode(text).unwrap()
}

fn unhex(s: &str) -> Vec<u8> {
    hex::decode(s).unwrap()
}

fn golden(library: &str, probe: &str) -> Flight {
    Flight::read_from(&golden_dir().join(library).join(format!("{probe}.qflt"))).unwrap()
}

fn write_targets(dir: &Path, farm: &Farm) -> PathBuf {
    let path = dir.join("targets.txt");
    let mut text = String::new();
    for t in farm.targets() {
        writeln!(text, "{},{}", t.address, t.port).unwrap();
    }
    std::fs::write(&path, text).unwrap();
    path
}

// 1: every scripted library classified correctly, end to end through the CLI.
struct FarmRun {
    by_library: BTreeMap<String, ScanRecord>,
    captures: PathBuf,
}

fn fingerprint_table_fidelity(work: &Path) -> (Check, Option<FarmRun>) {
    let farm = Farm::start(library_scripts(), 2021).unwrap();
    let targets = write_targets(work, &farm);
    let out = work.join("scan.jsonl");
    let captures = work.join("captures");
    let started = Instant::now();
    let status = Command::new(bin())
        .args(["scan", "--seed", "1", "--targets"])
        .arg(&targets)
        .arg("--out")
        .arg(&out)
        .arg("--capture-dir")
        .arg(&captures)
        .status()
        .unwrap();
    let elapsed = started.elapsed();
    if !status.success() {
        return (Err(format!("scan exited with {status}")), None);
    }
    let mut by_library = BTreeMap::new();
    let mut wrong = Vec::new();
    for rec in read_records(&out).unwrap() {
        let lib = farm.library_at(rec.target.port).unwrap().to_owned();
        if rec.library() != Some(lib.as_str()) {
            wrong.push(format!("{lib} -> {:?}", rec.classification));
        }
        by_library.insert(lib, rec);
    }
    let total = library_scripts().len();
    let ok = wrong.is_empty() && by_library.len() == total && elapsed < FARM_SCAN_BUDGET;
    let mut detail = format!(
        "{}/{total} identified in {:.1} s (budget {} s)",
        total - wrong.len(),
        elapsed.as_secs_f64(),
        FARM_SCAN_BUDGET.as_secs()
    );
    if !wrong.is_empty() {
        write!(detail, "; wrong: {}", wrong.join(", ")).unwrap();
    }
    (ensure(ok, detail), Some(FarmRun { by_library, captures }))
}

// 2: error messages alone identify exactly ten libraries.
fn error_uniqueness() -> Check {
    let db = FingerprintDb::bundled();
    let generic: BTreeSet<String> =
        ["msquic", "quic-go", "picoquic", "haproxy", "ngtcp2", "quiche"].iter().map(|s| s.to_string()).collect();
    let mut unique = Vec::new();
    let mut problems = Vec::new();
    for script in library_scripts() {
        let obs = replay_flight(&golden(&script.library, "invalid"));
        let candidates = db.match_error(obs.error.as_ref(), false);
        if candidates.len() == 1 {
            if candidates[0] != script.library {
                problems.push(format!("{} matched {}", script.library, candidates[0]));
            }
            unique.push(script.library.clone());
        }
        let no_reason_0x178 = obs.error.as_ref().is_some_and(|e| {
            e.code.into_inner() == 0x178 && e.reason.is_empty() && e.frame_type.is_none_or(|t| t.into_inner() == 0)
        });
        if no_reason_0x178 && candidates.iter().cloned().collect::<BTreeSet<_>>() != generic {
            problems.push(format!("{}: generic close matched {candidates:?}", script.library));
        }
    }
    let ok = unique.len() == 10 && problems.is_empty();
    let mut detail = format!("{} unique: {}", unique.len(), unique.join(", "));
    if !problems.is_empty() {
        write!(detail, "; {}", problems.join("; ")).unwrap();
    }
    ensure(ok, detail)
}

/// Hands out a fixed first permutation, then uniform ones.
struct Forced {
    first: Option<Vec<u64>>,
    rest: UniformSampler,
}

impl Sampler for Forced {
    fn permute(&mut self, ids: &[u64]) -> Vec<u64> {
        self.first.take().unwrap_or_else(|| self.rest.permute(ids))
    }

    fn pick(&mut self, n: usize) -> usize {
        self.rest.pick(n)
    }
}

fn h3_only_job(targets: Vec<Target>) -> ScanJob {
    let mut job = ScanJob::new(targets, FingerprintDb::bundled());
    job.probes = vec![ProbeKind::H3];
    job.rehandshakes = 2;
    job.rate = 1e6;
    job.workers = 32;
    job.probe = ProbeConfig { response_timeout: Duration::from_secs(1), ..ProbeConfig::default() };
    job
}

// 3: the bundled collisions, and randomized akaquic never mistaken for haproxy.
fn collision_handling() -> Check {
    let db = FingerprintDb::bundled();
    let pairs: BTreeSet<(String, String)> = db.collisions().into_iter().map(|c| (c.fixed, c.randomized)).collect();
    let expected: BTreeSet<(String, String)> =
        [("haproxy", "akaquic"), ("quinn", "gquiche")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    let pairs_ok = pairs == expected;

    let akaquic = library_script("akaquic").unwrap();
    let mut haproxy = 0;
    let mut rehandshaked = 0;
    let mut unidentified = 0;
    let batch = 100;
    for b in 0..COLLISION_TRIALS / batch {
        let farm = Farm::start(vec![akaquic.clone(); batch as usize], 0xc011_0000 + b).unwrap();
        let job = h3_only_job(farm.targets());
        run_scan(&job, |rec| {
            match rec.library() {
                Some("haproxy") => haproxy += 1,
                Some("akaquic") => {}
                _ => unidentified += 1,
            }
            if !rec.rehandshakes.is_empty() {
                rehandshaked += 1;
            }
            Ok(())
        })
        .unwrap();
    }

    // The same pipeline with the first draw forced onto haproxy's order.
    let haproxy_order = vec![0x0, 0x2, 0xf, 0x3, 0x4, 0x6, 0x7, 0x8];
    let sampler = Forced { first: Some(haproxy_order), rest: UniformSampler::new(9) };
    let state = ServerState::new(akaquic, 9).with_sampler(Box::new(sampler));
    let arrivals: ArrivalLog = Default::default();
    let ep = Endpoint::spawn(state, "127.0.0.1:0".parse::<SocketAddr>().unwrap(), arrivals).unwrap();
    let mut forced = None;
    run_scan(&h3_only_job(vec![Target::new(ep.addr().ip(), ep.addr().port(), None)]), |rec| {
        forced = Some(rec);
        Ok(())
    })
    .unwrap();
    let forced = forced.unwrap();
    let forced_ok = forced.rehandshakes.len() == 2 && forced.library() == Some("akaquic");

    let ok = pairs_ok && haproxy == 0 && unidentified == 0 && forced_ok;
    let pairs_txt: Vec<String> = pairs.iter().map(|(a, b)| format!("({a}, {b})")).collect();
    ensure(
        ok,
        format!(
            "collision pairs {} (expected exactly (haproxy, akaquic), (quinn, gquiche)); {COLLISION_TRIALS} akaquic trials: {haproxy} haproxy, {unidentified} unidentified, {rehandshaked} needed rehandshakes; forced haproxy-order draw resolved to {:?} after {} rehandshakes",
            pairs_txt.join(" "),
            forced.library(),
            forced.rehandshakes.len()
        ),
    )
}

// 4: RFC 9001 A.1-A.3 and RFC 7748 known answers.
fn crypto_known_answers() -> Check {
    let dcid = ConnectionId::new(&unhex("8394c8f03e515708")).unwrap();
    let keys = derive_initial_keys(&dcid, QUIC_V1).unwrap();
    let mut failures = Vec::new();
    let mut check = |what: &str, got: &[u8], want: &str| {
        if hex::encode(got) != want {
            failures.push(what.to_owned());
        }
    };
    check("client key", &keys.client.key, "1f369613dd76d5467730efcbe3b1a22d");
    check("client iv", &keys.client.iv, "fa044b2f42a3fd3b46fb255c");
    check("client hp", &keys.client.hp, "9f50449e04a0e810283a1e9933adedd2");
    check("server key", &keys.server.key, "cf3a5331653c364c88f0f379b6067e37");
    check("server iv", &keys.server.iv, "0ac1493ca1905853b0bba03e");
    check("server hp", &keys.server.hp, "c206b8d9b9f0f37644430b490eeaa314");

    let mut ch = vector("rfc9001_client_crypto");
    ch.resize(1162, 0);
    let fields = LongHeaderFields::initial(QUIC_V1, dcid, ConnectionId::EMPTY, Vec::new());
    let client_packet = protect_packet(&keys.client, &fields, 2, 4, &ch).unwrap();
    if client_packet != vector("rfc9001_client_initial") {
        failures.push("protected ClientHello".into());
    }
    let server_scid = ConnectionId::new(&unhex("f067a5502a4262b5")).unwrap();
    let fields = LongHeaderFields::initial(QUIC_V1, ConnectionId::EMPTY, server_scid, Vec::new());
    let server_packet = protect_packet(&keys.server, &fields, 1, 2, &vector("rfc9001_server_crypto")).unwrap();
    if server_packet != vector("rfc9001_server_initial") {
        failures.push("protected ServerHello".into());
    }

    let key = |h: &str| KeyExchange::from_private(unhex(h).try_into().unwrap());
    let alice = key("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a");
    let bob = key("5dab087e624a8a4b79e17f8b83800ee66f3bb1292618b6fd1c2f8b27ff88e0eb");
    let shared = x25519_shared(&alice, &bob.public).unwrap();
    if hex::encode(shared) != "4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742" {
        failures.push("x25519 shared secret".into());
    }
    ensure(
        failures.is_empty(),
        if failures.is_empty() {
            "initial keys, protected ClientHello (1200 bytes), protected ServerHello, x25519 all byte-exact".into()
        } else {
            format!("mismatch: {}", failures.join(", "))
        },
    )
}

fn cid() -> impl Strategy<Value = ConnectionId> {
    prop::collection::vec(any::<u8>(), 0..=20).prop_map(|b| ConnectionId::new(&b).unwrap())
}

fn frame() -> impl Strategy<Value = Frame> {
    prop_oneof![
        (1usize..64).prop_map(|len| Frame::Padding { len }),
        Just(Frame::Ping),
        (prop::collection::btree_set(0u64..5000, 1..40), 0u64..10_000).prop_map(|(pns, delay)| Frame::Ack(
            AckFrame::from_packet_numbers(&pns.into_iter().collect::<Vec<_>>(), delay).unwrap()
        )),
        (0u64..(1 << 40), prop::collection::vec(any::<u8>(), 0..300))
            .prop_map(|(offset, data)| Frame::Crypto { offset, data }),
        (0u64..(1 << 62), 0u64..0x40, "[ -~]{0,60}")
            .prop_map(|(code, ft, reason)| Frame::ConnectionClose(ConnectionClose::transport(code, ft, &reason))),
        (0u64..(1 << 62), "[ -~]{0,60}")
            .prop_map(|(code, reason)| Frame::ConnectionClose(ConnectionClose::application(code, &reason))),
    ]
}

/// Adjacent PADDING frames are indistinguishable from one longer run.
fn canonical(frames: Vec<Frame>) -> Vec<Frame> {
    let mut out: Vec<Frame> = Vec::new();
    for f in frames {
        match (out.last_mut(), &f) {
            (Some(Frame::Padding { len }), Frame::Padding { len: more }) => *len += more,
            _ => out.push(f),
        }
    }
    out
}

// 5: randomized codec round trips.
fn codec_properties() -> Check {
    let runner = || TestRunner::new(Config { cases: CODEC_CASES, failure_persistence: None, ..Config::default() });
    let varints = runner().run(&(0u64..=VarInt::MAX.into_inner()), |v| {
        let mut buf = Vec::new();
        VarInt::new(v).unwrap().encode(&mut buf);
        let (got, used) = decode_varint(&buf).unwrap();
        prop_assert_eq!(got.into_inner(), v);
        prop_assert_eq!(used, buf.len());
        Ok(())
    });
    let headers = runner().run(
        &(
            any::<bool>(),
            any::<u32>(),
            cid(),
            cid(),
            prop::collection::vec(any::<u8>(), 0..80),
            1usize..=4,
            20usize..2000,
        ),
        |(initial, version, dcid, scid, token, pn_len, payload)| {
            let fields = if initial {
                LongHeaderFields::initial(version, dcid, scid, token.clone())
            } else {
                LongHeaderFields::handshake(version, dcid, scid)
            };
            let mut buf = Vec::new();
            fields.encode_prefix(pn_len, &mut buf);
            VarInt::new((pn_len + payload) as u64).unwrap().encode(&mut buf);
            let pn_at = buf.len();
            buf.resize(pn_at + pn_len + payload, 0xab);
            if version == 0 {
                return Ok(());
            }
            let (h, off) = parse_long_header(&buf).unwrap();
            prop_assert_eq!(h.packet_type, if initial { PacketType::Initial } else { PacketType::Handshake });
            prop_assert_eq!((h.version, h.dcid, h.scid), (version, dcid, scid));
            prop_assert_eq!(h.token, if initial { token } else { Vec::new() });
            prop_assert_eq!(off, pn_at);
            prop_assert_eq!(h.length.into_inner() as usize, pn_len + payload);
            Ok(())
        },
    );
    let frames = runner().run(&prop::collection::vec(frame(), 1..8), |frames| {
        let mut buf = Vec::new();
        for f in &frames {
            f.encode(&mut buf);
        }
        prop_assert_eq!(canonical(parse_frames(&buf).unwrap()), canonical(frames));
        Ok(())
    });
    let results = [
        ("varint", varints.map_err(|e| e.to_string())),
        ("long header", headers.map_err(|e| e.to_string())),
        ("frames", frames.map_err(|e| e.to_string())),
    ];
    let failed: Vec<String> =
        results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    ensure(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{CODEC_CASES} cases each for varint, long header, frames: 0 failures")
        } else {
            failed.join("; ")
        },
    )
}

// 6: transport parameter values do not matter, only ids and order.
fn value_insensitivity() -> Check {
    let db = FingerprintDb::bundled();
    let invalid = replay_flight(&golden("quiche", "invalid"));
    let h3 = golden("quiche", "h3");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
    let (mutated, changed) = quicfp_lab::mutate_tp_values(&h3, &mut rng).unwrap();
    let before = db.classify(&[invalid.clone(), replay_flight(&h3)]);
    let after = db.classify(&[invalid, replay_flight(&mutated)]);
    let params = replay_flight(&h3).tp_order.map_or(0, |o| o.len());
    ensure(
        before == after && changed == params && params > 0 && before.library.as_deref() == Some("quiche"),
        format!(
            "{changed}/{params} values rewritten; classification {:?} before, {:?} after",
            before.library, after.library
        ),
    )
}

fn record(addr: &str, library: Option<&str>) -> ScanRecord {
    let target = Target::new(addr.parse().unwrap(), 443, None);
    let mut line = serde_json::json!({
        "target": target, "status": "completed", "started_unix_ms": 0, "duration_ms": 0, "db_version": "2021.1",
    });
    if let Some(l) = library {
        line["classification"] = serde_json::json!({ "library": l, "method": "error" });
    } else {
        line["status"] = serde_json::json!("vn-gated");
    }
    serde_json::from_value(line).unwrap()
}

// 7: merging scans with and without SNI.
fn merge_semantics() -> Check {
    let mut failures = Vec::new();
    let one =
        |a: &ScanRecord, b: &ScanRecord| merge_results(std::slice::from_ref(a), std::slice::from_ref(b)).remove(0);

    let m = one(&record("192.0.2.1", None), &record("192.0.2.1", Some("s2n-quic")));
    if m.library.as_deref() != Some("s2n-quic") || m.status != MergeStatus::SniOnly {
        failures.push(format!("timeout+identified gave {:?} {:?}", m.status, m.library));
    }
    let m = one(&record("192.0.2.2", Some("quiche")), &record("192.0.2.2", Some("quiche")));
    if m.library.as_deref() != Some("quiche") || m.status != MergeStatus::BothScans {
        failures.push(format!("agreement gave {:?} {:?}", m.status, m.library));
    }
    let m = one(&record("192.0.2.3", Some("lsquic")), &record("192.0.2.3", Some("nginx")));
    if m.status != MergeStatus::Conflict || m.library.is_some() || m.libraries != ["lsquic", "nginx"] {
        failures.push(format!("disagreement gave {:?} {:?}", m.status, m.libraries));
    }
    let x = vec![record("192.0.2.4", Some("quinn")), record("192.0.2.5", None)];
    let merged = merge_results(&x, &[]);
    let same = merged.len() == x.len()
        && merged.iter().zip(&x).all(|(m, r)| {
            m.library.as_deref() == r.library()
                && m.no_sni == r.classification.clone().into_iter().collect::<Vec<Classification>>()
        });
    if !same {
        failures.push("merge with empty changed the records".into());
    }
    ensure(
        failures.is_empty(),
        if failures.is_empty() {
            "identified, both-scans, conflict; empty merge is identity".into()
        } else {
            failures.join("; ")
        },
    )
}

// 8: the rate cap as seen by the servers.
fn rate_cap(work: &Path) -> Check {
    let farm = Farm::start(library_scripts(), 8).unwrap();
    let targets = write_targets(work, &farm);
    let status = Command::new(bin())
        .args(["scan", "--rate", &RATE_CAP.to_string(), "--timeout", "500", "--out"])
        .arg(work.join("rate.jsonl"))
        .arg("--targets")
        .arg(&targets)
        .status()
        .unwrap();
    let arrivals = farm.arrivals();
    let peak = max_in_window(&arrivals, Duration::from_secs(1));
    ensure(
        status.success() && peak <= RATE_CAP && !arrivals.is_empty(),
        format!("{} datagrams received, peak {peak} in any 1 s window (cap {RATE_CAP})", arrivals.len()),
    )
}

fn classify_cli(dir: &Path) -> BTreeMap<String, Classification> {
    let out = Command::new(bin()).args(["classify", "--flights"]).arg(dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["name"].as_str().unwrap().to_owned(), serde_json::from_value(v["classification"].clone()).unwrap())
        })
        .collect()
}

// 9: offline replay of stored captures.
fn offline_replay(run: Option<&FarmRun>) -> Check {
    let Some(run) = run else { return Err("no farm scan to compare against".into()) };
    let golden = classify_cli(&golden_dir());
    let mut mismatches = Vec::new();
    for (lib, rec) in &run.by_library {
        let got = golden.get(lib).and_then(|c| c.library.clone());
        if got.as_deref() != rec.library() {
            mismatches.push(format!("golden {lib}: {got:?} vs {:?}", rec.library()));
        }
    }
    // The scan's own captures must replay to exactly the same verdicts.
    let replayed = classify_cli(&run.captures);
    for rec in run.by_library.values() {
        let name = format!("{}_{}", rec.target.address, rec.target.port);
        if replayed.get(&name) != rec.classification.as_ref() {
            mismatches.push(format!("{name}: {:?} vs {:?}", replayed.get(&name), rec.classification));
        }
    }
    ensure(
        mismatches.is_empty() && golden.len() == run.by_library.len(),
        if mismatches.is_empty() {
            format!("{} golden directories and {} scan captures match the live verdicts", golden.len(), replayed.len())
        } else {
            mismatches.join("; ")
        },
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        ))
    });
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} {name}: {tag}: {detail}");
    result.is_ok()
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let mut passed = Vec::new();
    let mut farm_run = None;
    passed.push(run(1, "fingerprint table fidelity", || {
        let (check, r) = fingerprint_table_fidelity(work.path());
        farm_run = r;
        check
    }));
    passed.push(run(2, "error uniqueness", error_uniqueness));
    passed.push(run(3, "collision handling", collision_handling));
    passed.push(run(4, "crypto known answers", crypto_known_answers));
    passed.push(run(5, "codec properties", codec_properties));
    passed.push(run(6, "value insensitivity", value_insensitivity));
    passed.push(run(7, "merge semantics", merge_semantics));
    passed.push(run(8, "rate cap", || rate_cap(work.path())));
    passed.push(run(9, "offline replay", || offline_replay(farm_run.as_ref())));
    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
