use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use quicfp::probe::Target;

use crate::script::{library_script, library_scripts, FlightScript};
use crate::server::{ArrivalLog, Endpoint, ServerState};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("manifest endpoint {index}: unknown library {library:?}")]
    UnknownLibrary { index: usize, library: String },
    #[error("{0}")]
    Io(#[from] io::Error),
}

/// Which scripted endpoints to run and where.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "loopback")]
    pub bind: IpAddr,
    #[serde(default, rename = "endpoint")]
    pub endpoints: Vec<ManifestEndpoint>,
}

fn loopback() -> IpAddr {
    IpAddr::V4(Ipv4Addr::LOCALHOST)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEndpoint {
    pub library: String,
    /// 0 picks a free port.
    #[serde(default)]
    pub port: u16,
    /// Refuse handshakes whose SNI is not one of these.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub require_sni: Option<Vec<String>>,
    #[serde(default)]
    pub retry: bool,
    #[serde(default)]
    pub hello_retry: bool,
    #[serde(default)]
    pub grease_tp: bool,
}

impl ManifestEndpoint {
    pub fn new(library: &str) -> Self {
        ManifestEndpoint {
            library: library.to_owned(),
            port: 0,
            require_sni: None,
            retry: false,
            hello_retry: false,
            grease_tp: false,
        }
    }
}

impl Manifest {
    /// One endpoint per library on free loopback ports.
    pub fn all_libraries(seed: u64) -> Self {
        Manifest {
            seed,
            bind: loopback(),
            endpoints: library_scripts().iter().map(|s| ManifestEndpoint::new(&s.library)).collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        Manifest::parse(&std::fs::read_to_string(path)?)
    }

    pub fn scripts(&self) -> Result<Vec<FlightScript>, ManifestError> {
        self.endpoints
            .iter()
            .enumerate()
            .map(|(index, e)| {
                let mut s = library_script(&e.library)
                    .ok_or_else(|| ManifestError::UnknownLibrary { index, library: e.library.clone() })?;
                if let Some(names) = &e.require_sni {
                    let names: Vec<&str> = names.iter().map(String::as_str).collect();
                    s = s.requiring_sni(&names);
                }
                s.retry = e.retry;
                s.hello_retry = e.hello_retry;
                s.grease_tp = e.grease_tp;
                Ok(s)
            })
            .collect()
    }
}

/// Per-endpoint seed; distinct endpoints of one farm draw independent streams.
pub fn endpoint_seed(farm_seed: u64, index: usize) -> u64 {
    farm_seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// A set of running endpoints sharing one arrival log.
pub struct Farm {
    endpoints: Vec<Endpoint>,
    arrivals: ArrivalLog,
}

impl Farm {
    pub fn start(scripts: Vec<FlightScript>, seed: u64) -> io::Result<Farm> {
        let bind = SocketAddr::new(loopback(), 0);
        Farm::start_at(scripts.into_iter().map(|s| (s, bind)).collect(), seed)
    }

    pub fn from_manifest(m: &Manifest) -> Result<Farm, ManifestError> {
        let scripts = m.scripts()?;
        let placed = scripts.into_iter().zip(&m.endpoints).map(|(s, e)| (s, SocketAddr::new(m.bind, e.port))).collect();
        Ok(Farm::start_at(placed, m.seed)?)
    }

    fn start_at(placed: Vec<(FlightScript, SocketAddr)>, seed: u64) -> io::Result<Farm> {
        let arrivals: ArrivalLog = Arc::new(Mutex::new(Vec::new()));
        let endpoints = placed
            .into_iter()
            .enumerate()
            .map(|(i, (script, bind))| {
                Endpoint::spawn(ServerState::new(script, endpoint_seed(seed, i)), bind, arrivals.clone())
            })
            .collect::<io::Result<Vec<_>>>()?;
        Ok(Farm { endpoints, arrivals })
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }

    pub fn targets(&self) -> Vec<Target> {
        self.endpoints.iter().map(|e| Target::new(e.addr().ip(), e.addr().port(), None)).collect()
    }

    pub fn library_at(&self, port: u16) -> Option<&str> {
        self.endpoints.iter().find(|e| e.addr().port() == port).map(Endpoint::library)
    }

    pub fn arrivals(&self) -> Vec<Instant> {
        self.arrivals.lock().expect("arrival log").clone()
    }
}

/// Largest number of arrivals inside any window of length `window`.
pub fn max_in_window(arrivals: &[Instant], window: Duration) -> usize {
    let mut t = arrivals.to_vec();
    t.sort();
    let mut best = 0;
    let mut lo = 0;
    for hi in 0..t.len() {
        while t[hi] - t[lo] >= window {
            lo += 1;
        }
        best = best.max(hi - lo + 1);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_overrides() {
        let m = Manifest::parse(
            "seed = 3\n[[endpoint]]\nlibrary = \"lsquic\"\nrequire_sni = [\"a.example\"]\n[[endpoint]]\nlibrary = \"quiche\"\nretry = true\n",
        )
        .unwrap();
        let s = m.scripts().unwrap();
        assert_eq!(s[0].sni, crate::SniPolicy::Require(vec!["a.example".into()]));
        assert!(s[1].retry);
        assert!(matches!(
            Manifest::parse("[[endpoint]]\nlibrary = \"nope\"\n").unwrap().scripts(),
            Err(ManifestError::UnknownLibrary { index: 0, .. })
        ));
        assert!(Manifest::parse("[[endpoint]]\nlibrary = \"quiche\"\ncolour = 1\n").is_err());
    }

    #[test]
    fn sliding_window() {
        let t0 = Instant::now();
        let ms = |n| t0 + Duration::from_millis(n);
        let a = [ms(0), ms(500), ms(999), ms(1000), ms(1001), ms(3000)];
        assert_eq!(max_in_window(&a, Duration::from_secs(1)), 4);
        assert_eq!(max_in_window(&[], Duration::from_secs(1)), 0);
    }
}
