use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{normalize_tp_ids, FingerprintDb};
use crate::probe::{HandshakeObservation, ProbeKind};
use crate::tlsmini::ExtOrderSignature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Error,
    TransportParams,
    Both,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub library: Option<String>,
    pub method: Method,
    #[serde(default)]
    pub ambiguous_with: Vec<String>,
    #[serde(default)]
    pub needs_rehandshake: bool,
    #[serde(default)]
    pub conflict: bool,
}

impl Classification {
    fn identified(library: &str, method: Method) -> Self {
        Classification {
            library: Some(library.to_owned()),
            method,
            ambiguous_with: Vec::new(),
            needs_rehandshake: false,
            conflict: false,
        }
    }

    fn unresolved(candidates: impl IntoIterator<Item = String>) -> Self {
        Classification {
            library: None,
            method: Method::None,
            ambiguous_with: candidates.into_iter().collect(),
            needs_rehandshake: false,
            conflict: false,
        }
    }
}

/// Transport-parameter verdict over all observations that carried one.
struct TpVerdict {
    candidates: BTreeSet<String>,
    /// A single observation matched both a fixed order and a randomized set.
    collision: bool,
}

impl FingerprintDb {
    /// Candidate set from every error signal, intersected across signals.
    /// `Err` carries the union when the signals contradict each other.
    fn error_candidates(
        &self,
        observations: &[HandshakeObservation],
    ) -> Result<Option<BTreeSet<String>>, BTreeSet<String>> {
        let mut sets: Vec<BTreeSet<String>> = Vec::new();
        for obs in observations {
            for e in obs.all_errors() {
                let m = self.match_error(Some(e), false);
                if !m.is_empty() {
                    sets.push(m.into_iter().collect());
                }
            }
            if obs.kind == ProbeKind::Invalid && obs.alpn_missing_in_ee {
                let m = self.match_error(None, true);
                if !m.is_empty() {
                    sets.push(m.into_iter().collect());
                }
            }
        }
        let Some(first) = sets.first().cloned() else { return Ok(None) };
        let all = sets.iter().skip(1).fold(first, |acc, s| acc.intersection(s).cloned().collect());
        if all.is_empty() {
            return Err(sets.into_iter().flatten().collect());
        }
        Ok(Some(all))
    }

    fn tp_verdict(&self, observations: &[HandshakeObservation]) -> Option<TpVerdict> {
        let seen: Vec<(ExtOrderSignature, Vec<u64>)> = observations
            .iter()
            .filter_map(|o| Some((o.ext_signature?, normalize_tp_ids(o.tp_order.as_ref()?))))
            .collect();
        if seen.is_empty() {
            return None;
        }
        let all_match = |randomized: bool| -> BTreeSet<String> {
            self.tp_rules
                .iter()
                .filter(|r| r.is_randomized() == randomized && seen.iter().all(|(sig, o)| r.matches(*sig, o)))
                .map(|r| r.library.clone())
                .collect()
        };
        let fixed = all_match(false);
        let randomized = all_match(true);
        let distinct: BTreeSet<&Vec<u64>> = seen.iter().map(|(_, o)| o).collect();

        Some(if distinct.len() >= 2 {
            TpVerdict { candidates: randomized, collision: false }
        } else if seen.len() >= 2 && !fixed.is_empty() {
            // The order held steady over repeated handshakes.
            TpVerdict { candidates: fixed, collision: false }
        } else if seen.len() >= 2 {
            TpVerdict { candidates: randomized, collision: false }
        } else {
            let collision = !fixed.is_empty() && !randomized.is_empty();
            TpVerdict { candidates: fixed.union(&randomized).cloned().collect(), collision }
        })
    }

    /// Combines error and transport-parameter evidence. Pure: the same
    /// observations always give the same answer.
    pub fn classify(&self, observations: &[HandshakeObservation]) -> Classification {
        let errors = match self.error_candidates(observations) {
            Ok(e) => e,
            Err(union) => {
                let mut c = Classification::unresolved(union);
                c.conflict = true;
                return c;
            }
        };
        let tp = self.tp_verdict(observations).filter(|t| !t.candidates.is_empty());

        match (errors, tp) {
            (None, None) => Classification::unresolved([]),
            (None, Some(t)) => tp_only(t),
            (Some(e), None) if e.len() == 1 => Classification::identified(first(&e), Method::Error),
            (Some(e), None) => Classification::unresolved(e),
            (Some(e), Some(t)) if e.len() == 1 => {
                let lib = first(&e);
                if t.candidates.contains(lib) {
                    Classification::identified(lib, Method::Both)
                } else {
                    let mut c = Classification::unresolved(e.union(&t.candidates).cloned());
                    c.conflict = true;
                    c
                }
            }
            (Some(e), Some(t)) => {
                let both: BTreeSet<String> = e.intersection(&t.candidates).cloned().collect();
                if both.len() == 1 {
                    return Classification::identified(first(&both), Method::Both);
                }
                if !both.is_empty() {
                    let mut c = Classification::unresolved(both);
                    c.needs_rehandshake = t.collision;
                    return c;
                }
                if t.collision {
                    let mut c = Classification::unresolved(t.candidates);
                    c.needs_rehandshake = true;
                    return c;
                }
                let mut c = Classification::unresolved(e.union(&t.candidates).cloned());
                c.conflict = t.candidates.len() == 1;
                c
            }
        }
    }
}

fn first(set: &BTreeSet<String>) -> &str {
    set.iter().next().expect("nonempty")
}

fn tp_only(t: TpVerdict) -> Classification {
    if t.candidates.len() == 1 {
        return Classification::identified(first(&t.candidates), Method::TransportParams);
    }
    let mut c = Classification::unresolved(t.candidates);
    c.needs_rehandshake = t.collision;
    c
}
