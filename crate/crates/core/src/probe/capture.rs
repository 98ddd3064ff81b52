//! Capture files: every datagram of one probe session with its direction and
//! a microsecond timestamp, plus the client key needed to decrypt it later.
//!
//! Layout: `QFLT`, format byte, probe kind byte, 32-byte client x25519
//! private key, u16-prefixed label, then records of
//! `direction:u8 ts_us:u64 len:u32 bytes` until end of file.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::ProbeKind;

const MAGIC: &[u8; 4] = b"QFLT";
const FORMAT: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlightRecord {
    pub direction: Direction,
    pub ts_us: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flight {
    pub kind: ProbeKind,
    pub client_private: [u8; 32],
    pub label: String,
    pub records: Vec<FlightRecord>,
}

impl Default for Flight {
    fn default() -> Self {
        Flight { kind: ProbeKind::H3, client_private: [0; 32], label: String::new(), records: Vec::new() }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CaptureError {
    #[error("not a flight capture (bad magic)")]
    BadMagic,
    #[error("unsupported capture format {0}")]
    UnsupportedFormat(u8),
    #[error("corrupt capture: unknown probe kind {value} at byte {offset}")]
    UnknownKind { value: u8, offset: usize },
    #[error("corrupt capture: unknown direction {value} at byte {offset}")]
    BadDirection { value: u8, offset: usize },
    #[error("corrupt capture: truncated {what} at byte {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("corrupt capture: label is not UTF-8")]
    BadLabel,
    #[error("{0}")]
    Io(String),
}

impl Flight {
    pub fn new(kind: ProbeKind, client_private: [u8; 32]) -> Self {
        Flight { kind, client_private, ..Flight::default() }
    }

    pub fn push(&mut self, direction: Direction, ts_us: u64, bytes: &[u8]) {
        self.records.push(FlightRecord { direction, ts_us, bytes: bytes.to_vec() });
    }

    pub fn datagrams(&self, direction: Direction) -> impl Iterator<Item = &[u8]> {
        self.records.iter().filter(move |r| r.direction == direction).map(|r| r.bytes.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.records.iter().map(|r| r.bytes.len() + 13).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT);
        out.push(self.kind.code());
        out.extend_from_slice(&self.client_private);
        out.extend_from_slice(&(self.label.len() as u16).to_be_bytes());
        out.extend_from_slice(self.label.as_bytes());
        for r in &self.records {
            out.push(match r.direction {
                Direction::ClientToServer => 0,
                Direction::ServerToClient => 1,
            });
            out.extend_from_slice(&r.ts_us.to_be_bytes());
            out.extend_from_slice(&(r.bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&r.bytes);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CaptureError> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4, "magic")?.0 != MAGIC {
            return Err(CaptureError::BadMagic);
        }
        let format = c.take(1, "format")?.0[0];
        if format != FORMAT {
            return Err(CaptureError::UnsupportedFormat(format));
        }
        let (k, at) = c.take(1, "probe kind")?;
        let kind = ProbeKind::from_code(k[0]).ok_or(CaptureError::UnknownKind { value: k[0], offset: at })?;
        let client_private: [u8; 32] = c.take(32, "client key")?.0.try_into().expect("32");
        let label_len = u16::from_be_bytes(c.take(2, "label length")?.0.try_into().expect("2")) as usize;
        let label = std::str::from_utf8(c.take(label_len, "label")?.0).map_err(|_| CaptureError::BadLabel)?.to_owned();

        let mut records = Vec::new();
        while c.pos < buf.len() {
            let (d, at) = c.take(1, "record direction")?;
            let direction = match d[0] {
                0 => Direction::ClientToServer,
                1 => Direction::ServerToClient,
                value => return Err(CaptureError::BadDirection { value, offset: at }),
            };
            let ts_us = u64::from_be_bytes(c.take(8, "record timestamp")?.0.try_into().expect("8"));
            let len = u32::from_be_bytes(c.take(4, "record length")?.0.try_into().expect("4")) as usize;
            let bytes = c.take(len, "record datagram")?.0.to_vec();
            records.push(FlightRecord { direction, ts_us, bytes });
        }
        Ok(Flight { kind, client_private, label, records })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), CaptureError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CaptureError::Io(format!("{}: {e}", dir.display())))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| CaptureError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read_from(path: &Path) -> Result<Self, CaptureError> {
        let buf = fs::read(path).map_err(|e| CaptureError::Io(format!("{}: {e}", path.display())))?;
        Flight::from_bytes(&buf)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<(&'a [u8], usize), CaptureError> {
        if self.buf.len() - self.pos < n {
            return Err(CaptureError::Truncated { what, offset: self.pos });
        }
        let at = self.pos;
        self.pos += n;
        Ok((&self.buf[at..at + n], at))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Flight {
        let mut f = Flight::new(ProbeKind::Invalid, [7; 32]);
        f.label = "lsquic".into();
        f.push(Direction::ClientToServer, 0, &[0xc0; 1200]);
        f.push(Direction::ServerToClient, 812, &[1, 2, 3]);
        f
    }

    #[test]
    fn round_trip() {
        let f = sample();
        assert_eq!(Flight::from_bytes(&f.to_bytes()).unwrap(), f);
    }

    #[test]
    fn truncation_is_positioned() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 1];
        let header = 4 + 1 + 1 + 32 + 2 + 6;
        let second_record = header + 13 + 1200;
        assert_eq!(
            Flight::from_bytes(cut),
            Err(CaptureError::Truncated { what: "record datagram", offset: second_record + 13 })
        );
        assert_eq!(Flight::from_bytes(&bytes[..10]), Err(CaptureError::Truncated { what: "client key", offset: 6 }));
        assert_eq!(Flight::from_bytes(b"PCAP"), Err(CaptureError::BadMagic));
    }

    #[test]
    fn bad_direction() {
        let mut bytes = sample().to_bytes();
        let header = 4 + 1 + 1 + 32 + 2 + 6;
        bytes[header] = 9;
        assert_eq!(Flight::from_bytes(&bytes), Err(CaptureError::BadDirection { value: 9, offset: header }));
    }

    proptest! {
        #[test]
        fn any_prefix_errors_or_round_trips(cut in 0usize..1300) {
            let bytes = sample().to_bytes();
            let cut = cut.min(bytes.len());
            match Flight::from_bytes(&bytes[..cut]) {
                Ok(f) => prop_assert!(f.records.len() <= 2),
                Err(e) => {
                    let truncated = matches!(e, CaptureError::Truncated { .. });
                    prop_assert!(truncated, "unexpected {:?}", e);
                }
            }
        }
    }
}
