//! The run manifest: a durable, replayable description of a finished run.
//!
//! The manifest holds only deterministic facts (config snapshot and hash,
//! template hashes, partition summary, emitted coreset paths), so two runs
//! with the same config and seed write byte-identical manifests. Volatile
//! metrics — per-stage wall-clock and cache hit/miss counts — go to the
//! sibling run log, which is informational and excluded from replay
//! comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Error;
use crate::selector::Partition;

/// Write via a temp file + rename so an interrupted run never leaves a torn
/// artifact behind.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("write {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::io(format!("rename to {}", path.display()), e))
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let body = serde_json::to_string_pretty(value).expect("value serializes");
    write_atomic(path, format!("{body}\n").as_bytes())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSizes {
    pub total: usize,
    pub pk: usize,
    pub wk: usize,
    pub quarantine: usize,
    pub w2c: usize,
    pub ww: usize,
    /// Per-tau (icl_c, icl_ic) sizes for every requested tau, recomputed from
    /// the stored counts.
    pub icl_by_tau: BTreeMap<u32, (usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub sizes: SubsetSizes,
    pub probed: bool,
    pub probe_records: u64,
    pub probe_failures: u64,
    pub judge_unparseable: u64,
    pub judge_failures: u64,
}

impl PartitionSummary {
    pub fn from_partition(partition: &Partition, taus: &[u32]) -> Self {
        let mut icl_by_tau = BTreeMap::new();
        if partition.stats.probed {
            for &tau in taus {
                let icl_c = partition
                    .pk
                    .iter()
                    .filter(|id| partition.counts.get(*id).copied().unwrap_or(0) >= tau)
                    .count();
                icl_by_tau.insert(tau, (icl_c, partition.pk.len() - icl_c));
            }
        }
        PartitionSummary {
            sizes: SubsetSizes {
                total: partition.pk.len() + partition.wk.len() + partition.quarantine.len(),
                pk: partition.pk.len(),
                wk: partition.wk.len(),
                quarantine: partition.quarantine.len(),
                w2c: partition.w2c.len(),
                ww: partition.ww.len(),
                icl_by_tau,
            },
            probed: partition.stats.probed,
            probe_records: partition.stats.probe_records,
            probe_failures: partition.stats.probe_failures,
            judge_unparseable: partition.stats.zero_shot_judge_unparseable
                + partition.stats.probe_judge_unparseable,
            judge_failures: partition.stats.zero_shot_judge_failures
                + partition.stats.probe_judge_failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoresetEntry {
    pub path: String,
    pub size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PplSection {
    pub csv_path: String,
    pub records: usize,
    pub flagged_empty: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub template_hashes: BTreeMap<String, String>,
    /// Stages that have completed, in no particular order.
    pub stages: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub partition: Option<PartitionSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ppl: Option<PplSection>,
    #[serde(default)]
    pub coresets: BTreeMap<String, CoresetEntry>,
}

impl SelectionManifest {
    pub fn for_config(config: &RunConfig) -> Self {
        SelectionManifest {
            tool_version: crate::VERSION.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            config_hash: config.hash(),
            template_hashes: config.templates().hashes(),
            stages: Vec::new(),
            partition: None,
            ppl: None,
            coresets: BTreeMap::new(),
        }
    }

    /// Load the manifest at `path` if it exists and matches this config;
    /// otherwise start fresh. A changed config hash invalidates prior
    /// sections so stale summaries never leak into a new run.
    pub fn load_or_new(path: &Path, config: &RunConfig) -> Self {
        let fresh = Self::for_config(config);
        match std::fs::read_to_string(path) {
            Ok(text) => match serde_json::from_str::<SelectionManifest>(&text) {
                Ok(existing) if existing.config_hash == fresh.config_hash => existing,
                _ => fresh,
            },
            Err(_) => fresh,
        }
    }

    pub fn record_stage(&mut self, stage: &str) {
        if !self.stages.iter().any(|s| s == stage) {
            self.stages.push(stage.to_string());
            self.stages.sort();
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        write_json_atomic(path, self)
    }
}

/// Volatile per-stage metrics: wall-clock and batch cache statistics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub stages: BTreeMap<String, StageLog>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageLog {
    pub wall_clock_s: f64,
    pub requests: usize,
    /// Fresh backend fetches; requests minus this were served from cache.
    pub cache_entries_added: usize,
}

impl RunLog {
    pub fn load_or_default(path: &Path) -> Self {
        std::fs::read_to_string(path)
            .ok()
            .and_then(|text| serde_json::from_str(&text).ok())
            .unwrap_or_default()
    }

    pub fn record(&mut self, stage: &str, log: StageLog) {
        self.stages.insert(stage.to_string(), log);
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        write_json_atomic(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::{PartitionParams, PartitionStats};

    fn partition() -> Partition {
        let mut p = Partition::new(PartitionParams { r: 3, tau: 1, seed: 42 });
        p.pk = vec!["a".into(), "b".into()];
        p.wk = vec!["x".into(), "y".into(), "z".into()];
        p.counts = [("a".to_string(), 3), ("b".to_string(), 1)].into();
        p.w2c = vec!["x".into()];
        p.ww = vec!["y".into(), "z".into()];
        p.stats = PartitionStats {
            probed: true,
            probe_records: 6,
            ..PartitionStats::default()
        };
        p
    }

    #[test]
    fn summary_reports_sizes_for_every_tau() {
        let summary = PartitionSummary::from_partition(&partition(), &[1, 2, 3]);
        assert_eq!(summary.sizes.pk, 2);
        assert_eq!(summary.sizes.icl_by_tau[&1], (2, 0));
        assert_eq!(summary.sizes.icl_by_tau[&2], (1, 1));
        assert_eq!(summary.sizes.icl_by_tau[&3], (1, 1));
    }

    #[test]
    fn manifest_reload_keeps_sections_for_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let cfg = RunConfig {
            dataset: "d.jsonl".into(),
            ..RunConfig::default()
        };
        let mut m = SelectionManifest::for_config(&cfg);
        m.record_stage("categorize");
        m.partition = Some(PartitionSummary::from_partition(&partition(), &[1]));
        m.save(&path).unwrap();

        let again = SelectionManifest::load_or_new(&path, &cfg);
        assert_eq!(again, m);

        // a different config starts fresh
        let mut other = cfg.clone();
        other.seed = 7;
        let fresh = SelectionManifest::load_or_new(&path, &other);
        assert!(fresh.partition.is_none());
        assert!(fresh.stages.is_empty());
    }

    #[test]
    fn manifest_bytes_are_deterministic() {
        let cfg = RunConfig {
            dataset: "d.jsonl".into(),
            ..RunConfig::default()
        };
        let mut m = SelectionManifest::for_config(&cfg);
        m.record_stage("probe");
        m.record_stage("categorize");
        let a = serde_json::to_string_pretty(&m).unwrap();
        let mut m2 = SelectionManifest::for_config(&cfg);
        m2.record_stage("categorize");
        m2.record_stage("probe");
        let b = serde_json::to_string_pretty(&m2).unwrap();
        assert_eq!(a, b);
    }
}
