use std::collections::HashSet;
use std::net::IpAddr;
use std::path::Path;

use ipnet::IpNet;
use thiserror::Error;

use crate::probe::Target;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InputError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Io(String),
}

fn line_error(line: usize, message: impl Into<String>) -> InputError {
    InputError::Line { line, message: message.into() }
}

/// Parses `address[,port[,sni]]` lines. Blank lines and `#` comments are
/// skipped; repeated lines collapse to one target.
pub fn ingest_targets(text: &str) -> Result<Vec<Target>, InputError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let addr = fields.next().unwrap_or_default();
        let address: IpAddr = addr.parse().map_err(|_| line_error(i + 1, format!("not an IP address: {addr:?}")))?;
        let port = match fields.next() {
            None | Some("") => 443,
            Some(p) => match p.parse::<u16>() {
                Ok(0) | Err(_) => return Err(line_error(i + 1, format!("invalid port {p:?}"))),
                Ok(p) => p,
            },
        };
        let sni = fields.next().filter(|s| !s.is_empty()).map(str::to_owned);
        if fields.next().is_some() {
            return Err(line_error(i + 1, "expected at most three comma-separated fields"));
        }
        let t = Target::new(address, port, sni);
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    Ok(out)
}

pub fn ingest_targets_file(path: &Path) -> Result<Vec<Target>, InputError> {
    let text = std::fs::read_to_string(path).map_err(|e| InputError::Io(format!("{}: {e}", path.display())))?;
    ingest_targets(&text)
}

/// Address prefixes that must never be contacted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blocklist {
    prefixes: Vec<IpNet>,
}

impl Blocklist {
    pub fn new(prefixes: Vec<IpNet>) -> Self {
        Blocklist { prefixes }
    }

    /// One prefix or bare address per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, InputError> {
        let mut prefixes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let net = line
                .parse::<IpNet>()
                .or_else(|_| line.parse::<IpAddr>().map(IpNet::from))
                .map_err(|_| line_error(i + 1, format!("not an address prefix: {line:?}")))?;
            prefixes.push(net);
        }
        Ok(Blocklist { prefixes })
    }

    pub fn load(path: &Path) -> Result<Self, InputError> {
        let text = std::fs::read_to_string(path).map_err(|e| InputError::Io(format!("{}: {e}", path.display())))?;
        Blocklist::parse(&text)
    }

    pub fn contains(&self, addr: IpAddr) -> bool {
        self.prefixes.iter().any(|p| p.contains(&addr))
    }

    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }
}
