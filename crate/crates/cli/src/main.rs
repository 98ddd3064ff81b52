use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use quicfp::fingerprint::FingerprintDb;
use quicfp::probe::{ProbeConfig, ProbeKind};
use quicfp::scanner::{
    classify_captures, ingest_targets_file, merge_results, read_records, run_scan, write_record, Blocklist, ScanJob,
    DEFAULT_REHANDSHAKES, DEFAULT_SNI_LIMIT,
};
use quicfp::wire::DEFAULT_RESERVED_VERSION;
use quicfp_lab::{Farm, Manifest};

/// Identify QUIC server libraries from their first handshake flight.
#[derive(Parser)]
#[command(name = "quicfp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Probe targets and write one JSON record per target.
    Scan(ScanArgs),
    /// Classify stored captures offline, one JSON line per target directory.
    Classify {
        #[arg(long)]
        flights: PathBuf,
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Validate a fingerprint database and report colliding rules.
    DbLint {
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Combine a scan without SNI and one with SNI, per address.
    Merge {
        #[arg(long)]
        no_sni: PathBuf,
        #[arg(long)]
        sni: PathBuf,
    },
    /// Run scripted lab endpoints until interrupted.
    LabServe {
        /// Endpoint manifest; without it every library gets a free port.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct ScanArgs {
    /// `address[,port[,sni]]` per line.
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    db: Option<PathBuf>,
    /// Output file, `-` for stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "vn,invalid,h3")]
    probes: Vec<ProbeKind>,
    /// Datagrams per second.
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long)]
    blocklist: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SNI_LIMIT)]
    sni_limit: usize,
    /// Response timeout per attempt, in milliseconds.
    #[arg(long, default_value_t = 3000)]
    timeout: u64,
    #[arg(long, default_value_t = DEFAULT_REHANDSHAKES)]
    rehandshakes: usize,
    #[arg(long, value_parser = parse_hex_u32, default_value = "0x1a2a3a4a")]
    reserved_version: u32,
    /// Store every session's datagrams here.
    #[arg(long)]
    capture_dir: Option<PathBuf>,
    /// Run the handshake probes even when version negotiation timed out.
    #[arg(long)]
    no_vn_gate: bool,
    #[arg(long, default_value_t = 16)]
    workers: usize,
    /// Fixed seed for client randomness.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_hex_u32(s: &str) -> Result<u32, String> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    u32::from_str_radix(digits, 16).map_err(|e| format!("{s:?}: {e}"))
}

fn load_db(path: &Option<PathBuf>) -> Result<FingerprintDb> {
    match path {
        Some(p) => FingerprintDb::load_file(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(FingerprintDb::bundled()),
    }
}

fn output(path: &PathBuf) -> Result<Box<dyn Write>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(io::stdout().lock()));
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn scan(a: ScanArgs) -> Result<()> {
    let db = load_db(&a.db)?;
    let targets = ingest_targets_file(&a.targets)?;
    let mut job = ScanJob::new(targets, db);
    job.probes = a.probes;
    job.rate = a.rate;
    if let Some(b) = &a.blocklist {
        job.blocklist = Blocklist::load(b)?;
    }
    job.sni_limit = a.sni_limit;
    job.rehandshakes = a.rehandshakes;
    job.vn_gate = !a.no_vn_gate;
    job.workers = a.workers;
    job.capture_dir = a.capture_dir;
    job.probe = ProbeConfig {
        response_timeout: Duration::from_millis(a.timeout),
        reserved_version: a.reserved_version,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    if job.probe.reserved_version != DEFAULT_RESERVED_VERSION {
        info!("using reserved version {:#010x}", job.probe.reserved_version);
    }
    let mut out = output(&a.out)?;
    let summary = run_scan(&job, |rec| write_record(&mut out, &rec))?;
    out.flush()?;
    eprintln!(
        "{} records, {} identified, {} skipped, {} failed",
        summary.records, summary.identified, summary.skipped, summary.failed
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Scan(a) => scan(a),
        Command::Classify { flights, db } => {
            let db = load_db(&db)?;
            let mut out = io::stdout().lock();
            for (name, class) in classify_captures(&flights, &db)? {
                let line = serde_json::json!({ "name": name, "classification": class });
                writeln!(out, "{line}")?;
            }
            Ok(())
        }
        Command::DbLint { db } => {
            let report = load_db(&db)?.lint();
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Merge { no_sni, sni } => {
            let merged = merge_results(&read_records(&no_sni)?, &read_records(&sni)?);
            let mut out = io::stdout().lock();
            for m in merged {
                writeln!(out, "{}", serde_json::to_string(&m)?)?;
            }
            Ok(())
        }
        Command::LabServe { manifest, seed } => {
            let m = match manifest {
                Some(p) => Manifest::load(&p)?,
                None => Manifest::all_libraries(seed),
            };
            if m.endpoints.is_empty() {
                bail!("manifest lists no endpoints");
            }
            let farm = Farm::from_manifest(&m)?;
            let mut out = io::stdout().lock();
            for e in farm.endpoints() {
                writeln!(out, "{} {}", e.addr(), e.library())?;
            }
            out.flush()?;
            drop(out);
            loop {
                std::thread::park();
            }
        }
    }
}
