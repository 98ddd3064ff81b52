use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use super::ScanRecord;
use crate::fingerprint::Classification;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeStatus {
    /// Both scans identified the same library.
    BothScans,
    NoSniOnly,
    SniOnly,
    /// The scans name different libraries.
    Conflict,
    Unidentified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedRecord {
    pub address: IpAddr,
    pub status: MergeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library: Option<String>,
    /// Every library either scan named.
    pub libraries: Vec<String>,
    pub no_sni: Vec<Classification>,
    pub sni: Vec<Classification>,
}

fn identified(cs: &[Classification]) -> BTreeSet<String> {
    cs.iter().filter_map(|c| c.library.clone()).collect()
}

/// Combines a scan without SNI and one with SNI, per address.
pub fn merge_results(no_sni: &[ScanRecord], sni: &[ScanRecord]) -> Vec<MergedRecord> {
    let mut by_addr: BTreeMap<IpAddr, (Vec<Classification>, Vec<Classification>)> = BTreeMap::new();
    for r in no_sni {
        let e = by_addr.entry(r.target.address).or_default();
        e.0.extend(r.classification.clone());
    }
    for r in sni {
        let e = by_addr.entry(r.target.address).or_default();
        e.1.extend(r.classification.clone());
    }
    by_addr
        .into_iter()
        .map(|(address, (no_sni, sni))| {
            let a = identified(&no_sni);
            let b = identified(&sni);
            let all: BTreeSet<String> = a.union(&b).cloned().collect();
            let status = match (all.len(), a.is_empty(), b.is_empty()) {
                (0, _, _) => MergeStatus::Unidentified,
                (1, false, false) => MergeStatus::BothScans,
                (1, false, true) => MergeStatus::NoSniOnly,
                (1, true, false) => MergeStatus::SniOnly,
                _ => MergeStatus::Conflict,
            };
            let library = (all.len() == 1).then(|| all.iter().next().cloned()).flatten();
            MergedRecord { address, status, library, libraries: all.into_iter().collect(), no_sni, sni }
        })
        .collect()
}
