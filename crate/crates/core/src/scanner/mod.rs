//! Batch scanning: targets in, one classified record per target out.

mod merge;
mod ratelimit;
mod targets;

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::fingerprint::{Classification, FingerprintDb};
use crate::probe::{
    self, replay_flight, CaptureError, Flight, HandshakeObservation, Outcome, Pacer, ProbeConfig, ProbeError,
    ProbeKind, Target,
};

pub use merge::{merge_results, MergeStatus, MergedRecord};
pub use ratelimit::RateLimiter;
pub use targets::{ingest_targets, ingest_targets_file, Blocklist, InputError};

pub const DEFAULT_SNI_LIMIT: usize = 100;
pub const DEFAULT_REHANDSHAKES: usize = 2;

#[derive(Debug, Clone)]
pub struct ScanJob {
    pub targets: Vec<Target>,
    pub probes: Vec<ProbeKind>,
    /// Datagrams per second across all workers.
    pub rate: f64,
    pub blocklist: Blocklist,
    pub db: FingerprintDb,
    pub probe: ProbeConfig,
    pub rehandshakes: usize,
    /// SNI targets allowed per address.
    pub sni_limit: usize,
    /// Skip the handshake probes when the version-negotiation probe times out.
    pub vn_gate: bool,
    pub workers: usize,
    /// Where to store each session's capture, if anywhere.
    pub capture_dir: Option<PathBuf>,
}

impl ScanJob {
    pub fn new(targets: Vec<Target>, db: FingerprintDb) -> Self {
        ScanJob {
            targets,
            probes: ProbeKind::ALL.to_vec(),
            rate: 100.0,
            blocklist: Blocklist::default(),
            db,
            probe: ProbeConfig::default(),
            rehandshakes: DEFAULT_REHANDSHAKES,
            sni_limit: DEFAULT_SNI_LIMIT,
            vn_gate: true,
            workers: 16,
            capture_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordStatus {
    Completed,
    SkippedBlocklist,
    SkippedSniLimit,
    /// The version-negotiation probe got no answer, so nothing else was sent.
    VnGated,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub target: Target,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vn: Option<HandshakeObservation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid: Option<HandshakeObservation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h3: Option<HandshakeObservation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rehandshakes: Vec<HandshakeObservation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<Classification>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub started_unix_ms: u64,
    pub duration_ms: u64,
    pub db_version: String,
}

impl ScanRecord {
    fn skipped(target: Target, status: RecordStatus, db: &FingerprintDb) -> Self {
        ScanRecord {
            target,
            status,
            vn: None,
            invalid: None,
            h3: None,
            rehandshakes: Vec::new(),
            classification: None,
            error: None,
            started_unix_ms: unix_ms(),
            duration_ms: 0,
            db_version: db.version.clone(),
        }
    }

    /// Handshake observations in probe order: invalid, h3, rehandshakes.
    pub fn observations(&self) -> Vec<HandshakeObservation> {
        self.invalid.iter().chain(self.h3.iter()).chain(self.rehandshakes.iter()).cloned().collect()
    }

    pub fn library(&self) -> Option<&str> {
        self.classification.as_ref()?.library.as_deref()
    }
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanSummary {
    pub records: usize,
    pub identified: usize,
    pub skipped: usize,
    pub failed: usize,
}

fn capture_name(target: &Target) -> String {
    let mut s = format!("{}_{}", target.address, target.port);
    if let Some(sni) = &target.sni {
        s.push('_');
        s.push_str(sni);
    }
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '-' }).collect()
}

fn save(dir: &Option<PathBuf>, target: &Target, name: &str, obs: &HandshakeObservation) {
    let Some(dir) = dir else { return };
    let path = dir.join(capture_name(target)).join(format!("{name}.qflt"));
    if let Err(e) = obs.raw_flight.write_to(&path) {
        warn!("{target}: cannot store capture: {e}");
    }
}

/// Runs every probe for one target in order, then classifies.
fn scan_target(job: &ScanJob, index: usize, target: &Target, pacer: &dyn Pacer) -> Result<ScanRecord, ProbeError> {
    let started = Instant::now();
    let mut rec = ScanRecord::skipped(target.clone(), RecordStatus::Completed, &job.db);
    let cfg = |kind: ProbeKind| job.probe.derive((index as u64) << 8 | u64::from(kind as u8));
    let wants = |k| job.probes.contains(&k);

    if wants(ProbeKind::Vn) {
        let obs = probe::probe_version_negotiation(target, &cfg(ProbeKind::Vn), Some(pacer))?;
        save(&job.capture_dir, target, "vn", &obs);
        let gated = job.vn_gate && obs.outcome == Outcome::Timeout;
        rec.vn = Some(obs);
        if gated {
            rec.status = RecordStatus::VnGated;
            rec.duration_ms = started.elapsed().as_millis() as u64;
            return Ok(rec);
        }
    }
    if wants(ProbeKind::Invalid) {
        let obs = probe::probe(target, ProbeKind::Invalid, &cfg(ProbeKind::Invalid), Some(pacer))?;
        save(&job.capture_dir, target, "invalid", &obs);
        rec.invalid = Some(obs);
    }
    if wants(ProbeKind::H3) {
        let obs = probe::probe(target, ProbeKind::H3, &cfg(ProbeKind::H3), Some(pacer))?;
        save(&job.capture_dir, target, "h3", &obs);
        rec.h3 = Some(obs);
    }
    let mut class = job.db.classify(&rec.observations());
    if class.needs_rehandshake && job.rehandshakes > 0 && wants(ProbeKind::H3) {
        let more = probe::probe_disambiguate(target, job.rehandshakes, &cfg(ProbeKind::H3), Some(pacer))?;
        for (i, obs) in more.observations.iter().enumerate() {
            save(&job.capture_dir, target, &format!("h3-{}", i + 1), obs);
        }
        rec.rehandshakes = more.observations;
        class = job.db.classify(&rec.observations());
    }
    rec.classification = Some(class);
    rec.duration_ms = started.elapsed().as_millis() as u64;
    Ok(rec)
}

/// Scans all targets with `job.workers` concurrent sessions under one shared
/// rate limit. Records reach `sink` as they complete; only a failing sink
/// aborts the scan.
pub fn run_scan(job: &ScanJob, mut sink: impl FnMut(ScanRecord) -> io::Result<()>) -> io::Result<ScanSummary> {
    let limiter = RateLimiter::new(job.rate)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "rate must be positive"))?;
    job.probe.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;

    // Decide up front which targets may be contacted.
    let mut per_address: HashMap<IpAddr, usize> = HashMap::new();
    let mut skipped = Vec::new();
    let mut work = Vec::new();
    for (i, t) in job.targets.iter().enumerate() {
        if job.blocklist.contains(t.address) {
            skipped.push(ScanRecord::skipped(t.clone(), RecordStatus::SkippedBlocklist, &job.db));
            continue;
        }
        if t.sni.is_some() {
            let n = per_address.entry(t.address).or_default();
            *n += 1;
            if *n > job.sni_limit {
                skipped.push(ScanRecord::skipped(t.clone(), RecordStatus::SkippedSniLimit, &job.db));
                continue;
            }
        }
        work.push((i, t));
    }

    let mut summary = ScanSummary::default();
    let mut emit = |rec: ScanRecord, summary: &mut ScanSummary| -> io::Result<()> {
        summary.records += 1;
        match rec.status {
            RecordStatus::SkippedBlocklist | RecordStatus::SkippedSniLimit => summary.skipped += 1,
            RecordStatus::Failed => summary.failed += 1,
            _ => {}
        }
        if rec.library().is_some() {
            summary.identified += 1;
        }
        sink(rec)
    };
    for rec in skipped {
        emit(rec, &mut summary)?;
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<ScanRecord>();
    let workers = job.workers.clamp(1, work.len().max(1));
    info!("scanning {} targets with {workers} workers at {} datagrams/s", work.len(), job.rate);
    std::thread::scope(|scope| -> io::Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, work, limiter) = (&next, &work, &limiter);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(index, target)) = work.get(i) else { break };
                let rec = scan_target(job, index, target, limiter).unwrap_or_else(|e| {
                    warn!("{target}: {e}");
                    let mut r = ScanRecord::skipped(target.clone(), RecordStatus::Failed, &job.db);
                    r.error = Some(e.to_string());
                    r
                });
                if tx.send(rec).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for rec in rx {
            emit(rec, &mut summary)?;
        }
        Ok(())
    })?;
    Ok(summary)
}

/// Classifies stored captures without touching the network. Each
/// subdirectory of `root` holds one target's `.qflt` sessions, as written by
/// a scan with a capture directory. Results are sorted by directory name.
pub fn classify_captures(root: &Path, db: &FingerprintDb) -> Result<Vec<(String, Classification)>, CaptureError> {
    let io_err = |p: &Path, e: io::Error| CaptureError::Io(format!("{}: {e}", p.display()));
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| io_err(root, e))? {
        let path = entry.map_err(|e| io_err(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let mut files = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
            let path = entry.map_err(|e| io_err(&dir, e))?.path();
            if path.extension().is_some_and(|x| x == "qflt") {
                files.push(path);
            }
        }
        files.sort();
        let mut observations = Vec::new();
        for f in files {
            let flight = Flight::read_from(&f)?;
            if flight.kind != ProbeKind::Vn {
                observations.push(replay_flight(&flight));
            }
        }
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((name, db.classify(&observations)));
    }
    Ok(out)
}

pub fn write_record(out: &mut impl Write, rec: &ScanRecord) -> io::Result<()> {
    serde_json::to_writer(&mut *out, rec).map_err(io::Error::other)?;
    out.write_all(b"\n")
}

/// Reads line-delimited records as written by [`write_record`].
pub fn read_records(path: &Path) -> io::Result<Vec<ScanRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
