//! Library identification from error messages and transport-parameter orders.

mod classify;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::ErrorObservation;
use crate::tlsmini::{ExtOrderSignature, TransportParam};

pub use classify::{Classification, Method};

/// The database built from the published tables.
pub const DEFAULT_DB: &str = include_str!("default_db.toml");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DbError {
    #[error("fingerprint db does not parse: {0}")]
    Parse(String),
    #[error("rule {index} ({library}): {message}")]
    Schema { index: usize, library: String, message: String },
    #[error("{first} and {second} share transport parameter order {order:?} under {sig}")]
    DuplicateFixedOrder { first: String, second: String, sig: ExtOrderSignature, order: Vec<u64> },
    #[error("{0}")]
    Io(String),
}

/// Anchored pattern over a reason phrase; `*` matches any run of characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasonPattern {
    source: String,
    parts: Vec<String>,
}

impl ReasonPattern {
    pub fn new(source: &str) -> Self {
        ReasonPattern { source: source.to_owned(), parts: source.split('*').map(str::to_owned).collect() }
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn matches(&self, text: &str) -> bool {
        let (first, rest) = self.parts.split_first().expect("split yields one part");
        let Some(mut text) = text.strip_prefix(first.as_str()) else { return false };
        let Some((last, middle)) = rest.split_last() else { return text.is_empty() };
        for part in middle {
            match text.find(part.as_str()) {
                Some(i) => text = &text[i + part.len()..],
                None => return false,
            }
        }
        text.len() >= last.len() && text.ends_with(last.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorFlags {
    /// The library closes with a code but no reason phrase.
    pub no_reason_with_code: bool,
    /// The library completes the handshake without an ALPN extension.
    pub alpn_missing_in_ee: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorRule {
    pub library: String,
    pub code: Option<u64>,
    pub frame_type: Option<u64>,
    pub reason: Option<ReasonPattern>,
    pub flags: BehaviorFlags,
}

impl ErrorRule {
    pub fn matches(&self, error: Option<&ErrorObservation>, alpn_missing_in_ee: bool) -> bool {
        if self.flags.alpn_missing_in_ee {
            return alpn_missing_in_ee;
        }
        let Some(e) = error else { return false };
        if self.code.is_some_and(|c| c != e.code.into_inner()) {
            return false;
        }
        if self.frame_type.is_some_and(|ft| e.frame_type.map(|f| f.into_inner()) != Some(ft)) {
            return false;
        }
        if self.flags.no_reason_with_code && !e.reason.is_empty() {
            return false;
        }
        self.reason.as_ref().is_none_or(|p| p.matches(&e.reason))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TpKind {
    FixedOrder(Vec<u64>),
    RandomizedSet(BTreeSet<u64>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TpRule {
    pub library: String,
    pub ext_signatures: BTreeSet<ExtOrderSignature>,
    pub kind: TpKind,
}

impl TpRule {
    pub fn matches(&self, sig: ExtOrderSignature, order: &[u64]) -> bool {
        if !self.ext_signatures.contains(&sig) {
            return false;
        }
        match &self.kind {
            TpKind::FixedOrder(o) => o == order,
            TpKind::RandomizedSet(s) => {
                let ids: BTreeSet<u64> = order.iter().copied().collect();
                ids.len() == order.len() && &ids == s
            }
        }
    }

    pub fn id_set(&self) -> BTreeSet<u64> {
        match &self.kind {
            TpKind::FixedOrder(o) => o.iter().copied().collect(),
            TpKind::RandomizedSet(s) => s.clone(),
        }
    }

    pub fn is_randomized(&self) -> bool {
        matches!(self.kind, TpKind::RandomizedSet(_))
    }
}

/// A fixed-order rule whose order is also a permutation a randomizing
/// library may draw.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Collision {
    pub fixed: String,
    pub randomized: String,
    pub ext_signatures: Vec<ExtOrderSignature>,
}

impl fmt::Display for Collision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.fixed, self.randomized)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TpMatch {
    pub fixed: Vec<String>,
    pub randomized: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FingerprintDb {
    pub version: String,
    pub error_rules: Vec<ErrorRule>,
    pub tp_rules: Vec<TpRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDb {
    version: String,
    #[serde(default)]
    tp_rule: Vec<RawTpRule>,
    #[serde(default)]
    error_rule: Vec<RawErrorRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTpRule {
    library: String,
    ext: Vec<ExtOrderSignature>,
    order: Option<Vec<u64>>,
    set: Option<Vec<u64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawErrorRule {
    library: String,
    code: Option<u64>,
    frame_type: Option<u64>,
    reason: Option<String>,
    #[serde(default)]
    flags: Vec<String>,
}

/// GREASE transport parameter ids have the form `31 * N + 27`.
pub fn is_grease_tp(id: u64) -> bool {
    id >= 27 && (id - 27).is_multiple_of(31)
}

/// Drops values and GREASE ids, keeping wire order.
pub fn normalize_tp_order(raw: &[TransportParam]) -> Vec<u64> {
    raw.iter().map(|p| p.id).filter(|&id| !is_grease_tp(id)).collect()
}

pub fn normalize_tp_ids(ids: &[u64]) -> Vec<u64> {
    ids.iter().copied().filter(|&id| !is_grease_tp(id)).collect()
}

impl FingerprintDb {
    pub fn bundled() -> Self {
        FingerprintDb::load(DEFAULT_DB).expect("bundled fingerprint db is valid")
    }

    pub fn load_file(path: &Path) -> Result<Self, DbError> {
        let text = std::fs::read_to_string(path).map_err(|e| DbError::Io(format!("{}: {e}", path.display())))?;
        FingerprintDb::load(&text)
    }

    pub fn load(source: &str) -> Result<Self, DbError> {
        let raw: RawDb = toml::from_str(source).map_err(|e| DbError::Parse(e.to_string()))?;
        let schema = |index: usize, library: &str, message: &str| DbError::Schema {
            index,
            library: library.to_owned(),
            message: message.to_owned(),
        };

        let mut tp_rules = Vec::new();
        for (i, r) in raw.tp_rule.into_iter().enumerate() {
            if r.library.trim().is_empty() {
                return Err(schema(i, &r.library, "library name is empty"));
            }
            if r.ext.is_empty() {
                return Err(schema(i, &r.library, "no extension order signature"));
            }
            let kind = match (r.order, r.set) {
                (Some(o), None) => {
                    let unique: BTreeSet<u64> = o.iter().copied().collect();
                    if o.is_empty() || unique.len() != o.len() {
                        return Err(schema(i, &r.library, "order must be nonempty without repeated ids"));
                    }
                    TpKind::FixedOrder(o)
                }
                (None, Some(s)) => {
                    let set: BTreeSet<u64> = s.iter().copied().collect();
                    if set.is_empty() || set.len() != s.len() {
                        return Err(schema(i, &r.library, "set must be nonempty without repeated ids"));
                    }
                    TpKind::RandomizedSet(set)
                }
                _ => return Err(schema(i, &r.library, "exactly one of `order` and `set` is required")),
            };
            tp_rules.push(TpRule { library: r.library, ext_signatures: r.ext.into_iter().collect(), kind });
        }

        let mut error_rules = Vec::new();
        for (i, r) in raw.error_rule.into_iter().enumerate() {
            if r.library.trim().is_empty() {
                return Err(schema(i, &r.library, "library name is empty"));
            }
            let mut flags = BehaviorFlags::default();
            for f in &r.flags {
                match f.as_str() {
                    "no_reason_with_code" => flags.no_reason_with_code = true,
                    "alpn_missing_in_ee" => flags.alpn_missing_in_ee = true,
                    other => return Err(schema(i, &r.library, &format!("unknown flag {other:?}"))),
                }
            }
            if r.reason.is_none() && !flags.alpn_missing_in_ee {
                return Err(schema(i, &r.library, "a reason pattern is required"));
            }
            if flags.no_reason_with_code && (r.code.is_none() || r.reason.as_deref().is_some_and(|p| !p.is_empty())) {
                return Err(schema(i, &r.library, "no_reason_with_code needs a code and an empty reason"));
            }
            error_rules.push(ErrorRule {
                library: r.library,
                code: r.code,
                frame_type: r.frame_type,
                reason: r.reason.as_deref().map(ReasonPattern::new),
                flags,
            });
        }

        let db = FingerprintDb { version: raw.version, error_rules, tp_rules };
        db.check_duplicate_fixed()?;
        Ok(db)
    }

    fn check_duplicate_fixed(&self) -> Result<(), DbError> {
        for (i, a) in self.tp_rules.iter().enumerate() {
            for b in &self.tp_rules[i + 1..] {
                let (TpKind::FixedOrder(oa), TpKind::FixedOrder(ob)) = (&a.kind, &b.kind) else { continue };
                if oa != ob {
                    continue;
                }
                if let Some(sig) = a.ext_signatures.intersection(&b.ext_signatures).next() {
                    return Err(DbError::DuplicateFixedOrder {
                        first: a.library.clone(),
                        second: b.library.clone(),
                        sig: *sig,
                        order: oa.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Libraries in db order, each once.
    pub fn libraries(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let names = self.tp_rules.iter().map(|r| &r.library).chain(self.error_rules.iter().map(|r| &r.library));
        for n in names {
            if !out.contains(n) {
                out.push(n.clone());
            }
        }
        out
    }

    /// Number of (library, extension signature) rows of the tp table.
    pub fn tp_rows(&self) -> usize {
        self.tp_rules.iter().map(|r| r.ext_signatures.len()).sum()
    }

    /// Libraries whose error rule matches, each once, in db order.
    pub fn match_error(&self, error: Option<&ErrorObservation>, alpn_missing_in_ee: bool) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.error_rules {
            if r.matches(error, alpn_missing_in_ee) && !out.contains(&r.library) {
                out.push(r.library.clone());
            }
        }
        out
    }

    /// `order` must already be normalized.
    pub fn match_tp(&self, sig: ExtOrderSignature, order: &[u64]) -> TpMatch {
        let mut m = TpMatch::default();
        for r in self.tp_rules.iter().filter(|r| r.matches(sig, order)) {
            let list = if r.is_randomized() { &mut m.randomized } else { &mut m.fixed };
            if !list.contains(&r.library) {
                list.push(r.library.clone());
            }
        }
        m
    }

    /// Fixed-order rules whose order a randomized rule can also produce.
    pub fn collisions(&self) -> Vec<Collision> {
        let mut out = Vec::new();
        for f in self.tp_rules.iter().filter(|r| !r.is_randomized()) {
            for r in self.tp_rules.iter().filter(|r| r.is_randomized()) {
                let shared: Vec<_> = f.ext_signatures.intersection(&r.ext_signatures).copied().collect();
                if !shared.is_empty() && f.id_set() == r.id_set() {
                    out.push(Collision {
                        fixed: f.library.clone(),
                        randomized: r.library.clone(),
                        ext_signatures: shared,
                    });
                }
            }
        }
        out.sort();
        out
    }

    pub fn lint(&self) -> LintReport {
        let mut warnings = Vec::new();
        for lib in self.libraries() {
            let has_tp = self.tp_rules.iter().any(|r| r.library == lib);
            let has_err = self.error_rules.iter().any(|r| r.library == lib);
            if !has_tp {
                warnings.push(format!("{lib}: no transport parameter rule, identifiable by error only"));
            }
            if !has_err {
                warnings.push(format!("{lib}: no error rule, identifiable by transport parameters only"));
            }
        }
        for (i, a) in self.error_rules.iter().enumerate() {
            for b in &self.error_rules[i + 1..] {
                let same =
                    a.code == b.code && a.frame_type == b.frame_type && a.reason == b.reason && a.flags == b.flags;
                if same && a.library != b.library {
                    warnings.push(format!("{} and {} have indistinguishable error rules", a.library, b.library));
                }
            }
        }
        LintReport {
            version: self.version.clone(),
            libraries: self.libraries().len(),
            tp_rules: self.tp_rules.len(),
            tp_rows: self.tp_rows(),
            error_rules: self.error_rules.len(),
            collisions: self.collisions(),
            warnings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LintReport {
    pub version: String,
    pub libraries: usize,
    pub tp_rules: usize,
    pub tp_rows: usize,
    pub error_rules: usize,
    pub collisions: Vec<Collision>,
    pub warnings: Vec<String>,
}
