//! The selection algorithm: zero-shot categorization into parameter vs world
//! knowledge, one-shot ICL probing of demonstration guidance, the four-way
//! partition, coreset combination, and mixture construction.
//!
//! Stage 1 sorts each sample into PK (zero-shot answer judged correct) or WK.
//! Stage 2 uses every PK sample as a one-shot demonstration for R seeded
//! draws of WK queries, counting per-demonstration correct answers c_i.
//! Thresholding c_i >= tau splits PK into ICL_C / ICL_IC; WK queries answered
//! correctly by at least one demonstration form W2C, the rest (including WK
//! samples never drawn) form WW.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    run_batch, Decoding, IclRequest, InferenceCache, InferenceRequest, ModelBackend,
    PromptTemplates, ZeroShotRequest,
};
use crate::corpus::{subset_by_ids, Dataset, Sample};
use crate::error::Error;
use crate::judge::{Judge, JudgeItem, Verdict};
use crate::perplexity::{select_mid_ppl, PplRecord};

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("no world knowledge to probe")]
    NoWorldKnowledge,

    #[error("tau {tau} exceeds R={r}; every demonstration would be filtered out")]
    TauAboveR { tau: u32, r: u32 },

    #[error("combo {combo:?} requires probe counts; run `clipper probe` first")]
    ProbesMissing { combo: String },

    #[error("{side} pool too small: need {required}, have {available}")]
    InsufficientPool {
        side: &'static str,
        required: usize,
        available: usize,
    },

    #[error("requested {n} samples but the dataset has {available}")]
    NotEnoughSamples { n: usize, available: usize },

    #[error("invalid coreset spec {0:?}")]
    BadCoresetSpec(String),

    #[error("mixture fraction {0} outside [0, 1]")]
    BadFraction(f64),
}

/// How Stage-2 queries are drawn for each demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Without replacement whenever the WK pool is large enough.
    #[default]
    WithoutReplacement,
    /// Always with replacement.
    StrictIid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub r: u32,
    pub tau: u32,
    pub seed: u64,
}

/// Run statistics, split by the stage that owns them so re-running one stage
/// overwrites its own numbers instead of accumulating.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionStats {
    /// Whether Stage-2 probing has populated the counts.
    pub probed: bool,
    pub zero_shot_judge_unparseable: u64,
    pub zero_shot_judge_failures: u64,
    pub probe_judge_unparseable: u64,
    pub probe_judge_failures: u64,
    pub probe_failures: u64,
    pub probe_records: u64,
}

/// The evolving assignment of samples to the selection subsets. All id lists
/// are in original dataset order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub params: PartitionParams,
    pub pk: Vec<String>,
    pub wk: Vec<String>,
    pub counts: BTreeMap<String, u32>,
    pub icl_c: Vec<String>,
    pub icl_ic: Vec<String>,
    pub w2c: Vec<String>,
    pub ww: Vec<String>,
    pub quarantine: Vec<String>,
    pub stats: PartitionStats,
}

impl Partition {
    pub fn new(params: PartitionParams) -> Self {
        Partition {
            params,
            pk: Vec::new(),
            wk: Vec::new(),
            counts: BTreeMap::new(),
            icl_c: Vec::new(),
            icl_ic: Vec::new(),
            w2c: Vec::new(),
            ww: Vec::new(),
            quarantine: Vec::new(),
            stats: PartitionStats::default(),
        }
    }

    /// Verify the partition laws against the full id universe:
    /// pk ⊔ wk ⊔ quarantine = all ids, icl_c ⊔ icl_ic = pk (once probed),
    /// w2c ⊔ ww = wk (once probed), and 0 <= c_i <= R on pk.
    pub fn check_laws(&self, all_ids: &[String]) -> Result<(), String> {
        let as_set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
        let pk = as_set(&self.pk);
        let wk = as_set(&self.wk);
        let quarantine = as_set(&self.quarantine);
        let all = as_set(all_ids);

        if pk.len() != self.pk.len() || wk.len() != self.wk.len() {
            return Err("duplicate ids within pk or wk".into());
        }
        if !pk.is_disjoint(&wk) {
            return Err("pk and wk overlap".into());
        }
        let mut union: BTreeSet<String> = pk.union(&wk).cloned().collect();
        union.extend(quarantine.iter().cloned());
        if union != all {
            return Err("pk ∪ wk ∪ quarantine does not cover the dataset".into());
        }
        for (id, &c) in &self.counts {
            if c > self.params.r {
                return Err(format!("count {c} for {id} exceeds R={}", self.params.r));
            }
            if !pk.contains(id) {
                return Err(format!("count recorded for non-pk id {id}"));
            }
        }
        if self.stats.probed {
            let icl_c = as_set(&self.icl_c);
            let icl_ic = as_set(&self.icl_ic);
            if !icl_c.is_disjoint(&icl_ic)
                || icl_c.union(&icl_ic).cloned().collect::<BTreeSet<_>>() != pk
            {
                return Err("icl_c ⊔ icl_ic ≠ pk".into());
            }
            let w2c = as_set(&self.w2c);
            let ww = as_set(&self.ww);
            if !w2c.is_disjoint(&ww)
                || w2c.union(&ww).cloned().collect::<BTreeSet<_>>() != wk
            {
                return Err("w2c ⊔ ww ≠ wk".into());
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        let body = serde_json::to_string_pretty(self).expect("partition serializes");
        crate::manifest::write_atomic(path.as_ref(), format!("{body}\n").as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read partition {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Other(format!("parse partition {}: {e}", path.display())))
    }
}

/// One demonstration→query ICL trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub demo_id: String,
    pub query_id: String,
    pub probe_index: u32,
    pub response: String,
    pub verdict: Verdict,
}

pub fn write_probe_records(records: &[ProbeRecord], path: impl AsRef<Path>) -> Result<(), Error> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("probe record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_probe_records(path: impl AsRef<Path>) -> Result<Vec<ProbeRecord>, Error> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            Error::Other(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Everything the pipeline stages need besides the dataset.
pub struct PipelineCtx<'a> {
    pub backend: Arc<dyn ModelBackend>,
    pub judge: Judge,
    pub templates: PromptTemplates,
    pub decoding: Decoding,
    pub concurrency: usize,
    pub cache: &'a InferenceCache,
    pub allow_partial: bool,
    pub strict_probes: bool,
    pub sample_mode: SampleMode,
    pub coverage_mode: bool,
}

/// Stage 1: zero-shot inference over every sample; judged-correct answers go
/// to PK, the rest to WK, preserving dataset order within each set. Terminal
/// backend failures abort the run unless `allow_partial`, in which case the
/// failed samples land in quarantine, excluded from both sets.
pub async fn categorize(
    dataset: &Dataset,
    ctx: &PipelineCtx<'_>,
    params: PartitionParams,
) -> Result<Partition, Error> {
    let mut partition = Partition::new(params);
    if dataset.is_empty() {
        return Ok(partition);
    }

    let requests: Vec<InferenceRequest> = dataset
        .samples()
        .iter()
        .map(|s| {
            InferenceRequest::ZeroShot(ZeroShotRequest {
                sample: s.clone(),
                system_prompt: ctx.templates.system.clone(),
                decoding: ctx.decoding.clone(),
            })
        })
        .collect();
    let digests: Vec<String> = requests
        .iter()
        .map(|r| crate::backend::request_digest(ctx.backend.name(), &ctx.templates, r))
        .collect();
    let outcome = run_batch(
        ctx.backend.clone(),
        &ctx.templates,
        requests,
        ctx.concurrency,
        ctx.cache,
    )
    .await;

    if !outcome.failures.is_empty() && !ctx.allow_partial {
        return Err(batch_failure(&outcome.failures));
    }

    // Collect responses in order, quarantining failures when allowed.
    let mut answered: Vec<(&Sample, String)> = Vec::with_capacity(dataset.len());
    for (sample, digest) in dataset.samples().iter().zip(&digests) {
        match outcome.results.get(digest).and_then(|r| r.as_text()) {
            Some(text) => answered.push((sample, text.to_string())),
            None => partition.quarantine.push(sample.id.clone()),
        }
    }

    let items: Vec<JudgeItem> = answered
        .iter()
        .map(|(s, response)| JudgeItem {
            question: s.query.clone(),
            response: response.clone(),
            label: s.label.clone(),
        })
        .collect();
    let (verdicts, judge_stats) = ctx
        .judge
        .judge_many(&items, &ctx.templates, ctx.concurrency, ctx.cache)
        .await;
    partition.stats.zero_shot_judge_unparseable = judge_stats.unparseable;
    partition.stats.zero_shot_judge_failures = judge_stats.failures;

    for ((sample, _), verdict) in answered.iter().zip(&verdicts) {
        if verdict.matched {
            partition.pk.push(sample.id.clone());
        } else {
            partition.wk.push(sample.id.clone());
        }
    }
    Ok(partition)
}

fn batch_failure(failures: &HashMap<String, String>) -> Error {
    let first = failures.values().next().cloned().unwrap_or_default();
    crate::backend::BackendError::Transport {
        attempts: 0,
        message: format!(
            "{} request(s) failed terminally; first: {first}",
            failures.len()
        ),
    }
    .into()
}

fn derive_rng(seed: u64, tag: &str, extra: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    for part in extra {
        h.update(part.as_bytes());
        h.update([0]);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Draw R query ids from WK for one demonstration, keyed on (seed, demo_id)
/// so draws are reproducible independent of scheduling. Without replacement
/// when the pool allows (unless strict-iid), otherwise with replacement.
/// Queries come from WK and demos from PK, so the demo can never be drawn;
/// asserted anyway.
pub fn sample_queries(
    wk_ids: &[String],
    r: u32,
    seed: u64,
    demo_id: &str,
    mode: SampleMode,
) -> Result<Vec<String>, SelectorError> {
    if r == 0 {
        return Ok(Vec::new());
    }
    if wk_ids.is_empty() {
        return Err(SelectorError::NoWorldKnowledge);
    }
    let mut rng = derive_rng(seed, "queries", &[demo_id]);
    let r = r as usize;
    let drawn: Vec<String> =
        if mode == SampleMode::WithoutReplacement && wk_ids.len() >= r {
            rand::seq::index::sample(&mut rng, wk_ids.len(), r)
                .into_iter()
                .map(|i| wk_ids[i].clone())
                .collect()
        } else {
            (0..r)
                .map(|_| wk_ids[rng.gen_range(0..wk_ids.len())].clone())
                .collect()
        };
    assert!(
        drawn.iter().all(|id| id != demo_id),
        "demonstration drawn as its own query"
    );
    Ok(drawn)
}

/// Coverage mode: one global seeded shuffle of WK cycled across the whole
/// probe budget, so every WK id is drawn floor or ceil of |PK|·R / |WK| times.
fn coverage_plan(
    pk_ids: &[String],
    wk_ids: &[String],
    r: u32,
    seed: u64,
) -> Vec<Vec<String>> {
    let mut order: Vec<usize> = (0..wk_ids.len()).collect();
    order.shuffle(&mut derive_rng(seed, "coverage", &[]));
    let mut cursor = 0usize;
    pk_ids
        .iter()
        .map(|_| {
            (0..r)
                .map(|_| {
                    let id = wk_ids[order[cursor % order.len()]].clone();
                    cursor += 1;
                    id
                })
                .collect()
        })
        .collect()
}

/// Stage 2: probe every PK demonstration against its R drawn WK queries,
/// fill `counts`, and split WK into W2C (answered correctly under at least
/// one demonstration) and WW (never corrected, or never drawn). Probe records
/// are returned for persistence in (demo order, probe index) order.
pub async fn probe_all(
    dataset: &Dataset,
    partition: &mut Partition,
    ctx: &PipelineCtx<'_>,
) -> Result<Vec<ProbeRecord>, Error> {
    let r = partition.params.r;
    let seed = partition.params.seed;

    partition.counts.clear();
    partition.w2c.clear();
    partition.ww.clear();
    partition.stats.probe_judge_unparseable = 0;
    partition.stats.probe_judge_failures = 0;
    partition.stats.probe_failures = 0;
    partition.stats.probe_records = 0;

    if partition.pk.is_empty() {
        partition.ww = partition.wk.clone();
        partition.stats.probed = true;
        apply_threshold(partition, partition.params.tau)?;
        return Ok(Vec::new());
    }
    if partition.wk.is_empty() {
        return Err(SelectorError::NoWorldKnowledge.into());
    }

    let by_id: HashMap<&str, &Sample> = dataset
        .samples()
        .iter()
        .map(|s| (s.id.as_str(), s))
        .collect();

    // Per-demo query draws (Stage-2 inner loop), or the coverage plan.
    let plans: Vec<Vec<String>> = if ctx.coverage_mode {
        coverage_plan(&partition.pk, &partition.wk, r, seed)
    } else {
        partition
            .pk
            .iter()
            .map(|demo_id| sample_queries(&partition.wk, r, seed, demo_id, ctx.sample_mode))
            .collect::<Result<_, _>>()?
    };

    let mut probes: Vec<(String, String, u32)> = Vec::new();
    for (demo_id, queries) in partition.pk.iter().zip(&plans) {
        for (j, query_id) in queries.iter().enumerate() {
            probes.push((demo_id.clone(), query_id.clone(), j as u32));
        }
    }

    let requests: Vec<InferenceRequest> = probes
        .iter()
        .map(|(demo_id, query_id, _)| {
            InferenceRequest::OneShot(IclRequest {
                demonstration: (*by_id[demo_id.as_str()]).clone(),
                query_sample: (*by_id[query_id.as_str()]).clone(),
                system_prompt: ctx.templates.system.clone(),
                decoding: ctx.decoding.clone(),
            })
        })
        .collect();
    let digests: Vec<String> = requests
        .iter()
        .map(|req| crate::backend::request_digest(ctx.backend.name(), &ctx.templates, req))
        .collect();
    let outcome = run_batch(
        ctx.backend.clone(),
        &ctx.templates,
        requests,
        ctx.concurrency,
        ctx.cache,
    )
    .await;

    if !outcome.failures.is_empty() && ctx.strict_probes {
        return Err(batch_failure(&outcome.failures));
    }

    // Judge successful probes in one batch.
    let mut items = Vec::new();
    let mut item_index: Vec<Option<usize>> = Vec::with_capacity(probes.len());
    for ((_, query_id, _), digest) in probes.iter().zip(&digests) {
        match outcome.results.get(digest).and_then(|r| r.as_text()) {
            Some(text) => {
                let query = by_id[query_id.as_str()];
                item_index.push(Some(items.len()));
                items.push(JudgeItem {
                    question: query.query.clone(),
                    response: text.to_string(),
                    label: query.label.clone(),
                });
            }
            None => item_index.push(None),
        }
    }
    let (verdicts, judge_stats) = ctx
        .judge
        .judge_many(&items, &ctx.templates, ctx.concurrency, ctx.cache)
        .await;
    partition.stats.probe_judge_unparseable = judge_stats.unparseable;
    partition.stats.probe_judge_failures = judge_stats.failures;

    // Single deterministic aggregation pass in (demo, probe index) order.
    let mut counts: BTreeMap<String, u32> =
        partition.pk.iter().map(|id| (id.clone(), 0)).collect();
    let mut corrected: BTreeSet<String> = BTreeSet::new();
    let mut records = Vec::with_capacity(probes.len());
    for (slot, (demo_id, query_id, probe_index)) in item_index.iter().zip(probes) {
        let (response, verdict) = match slot {
            Some(i) => (items[*i].response.clone(), verdicts[*i].clone()),
            None => {
                // failed probe: counted incorrect, flagged
                partition.stats.probe_failures += 1;
                (
                    String::new(),
                    Verdict {
                        matched: false,
                        method: ctx.judge.method(),
                        raw_judge_reply: None,
                    },
                )
            }
        };
        if verdict.matched {
            *counts.get_mut(&demo_id).expect("demo in counts") += 1;
            corrected.insert(query_id.clone());
        }
        records.push(ProbeRecord {
            demo_id,
            query_id,
            probe_index,
            response,
            verdict,
        });
    }

    partition.counts = counts;
    partition.w2c = partition
        .wk
        .iter()
        .filter(|id| corrected.contains(*id))
        .cloned()
        .collect();
    partition.ww = partition
        .wk
        .iter()
        .filter(|id| !corrected.contains(*id))
        .cloned()
        .collect();
    partition.stats.probed = true;
    partition.stats.probe_records = records.len() as u64;
    apply_threshold(partition, partition.params.tau)?;
    Ok(records)
}

/// Split PK by the probe counts: icl_c = {i : c_i >= tau}, icl_ic the rest.
/// Works from stored counts, so tau can be swept without re-probing.
pub fn apply_threshold(partition: &mut Partition, tau: u32) -> Result<(), SelectorError> {
    let r = partition.params.r;
    if tau > r {
        return Err(SelectorError::TauAboveR { tau, r });
    }
    if !partition.stats.probed {
        return Err(SelectorError::ProbesMissing {
            combo: "apply_threshold".into(),
        });
    }
    partition.params.tau = tau;
    partition.icl_c = partition
        .pk
        .iter()
        .filter(|id| partition.counts.get(*id).copied().unwrap_or(0) >= tau)
        .cloned()
        .collect();
    let in_c: BTreeSet<&String> = partition.icl_c.iter().collect();
    partition.icl_ic = partition
        .pk
        .iter()
        .filter(|id| !in_c.contains(id))
        .cloned()
        .collect();
    Ok(())
}

/// A coreset recipe: one of the partition combinations or a baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum CoresetSpec {
    Full,
    Pk,
    Wk,
    IclCWithWk,
    IclCWithW2c,
    IclCWithWw,
    Random { n: usize },
    MidPpl { n: usize },
    Mix { p: f64, n: usize },
}

impl CoresetSpec {
    /// Parse `full | pk | wk | icl_c+wk | icl_c+w2c | icl_c+ww |
    /// random:N | mid_ppl:N | mix:P:N`.
    pub fn parse(s: &str) -> Result<Self, SelectorError> {
        let bad = || SelectorError::BadCoresetSpec(s.to_string());
        match s {
            "full" => Ok(CoresetSpec::Full),
            "pk" => Ok(CoresetSpec::Pk),
            "wk" => Ok(CoresetSpec::Wk),
            "icl_c+wk" => Ok(CoresetSpec::IclCWithWk),
            "icl_c+w2c" => Ok(CoresetSpec::IclCWithW2c),
            "icl_c+ww" => Ok(CoresetSpec::IclCWithWw),
            _ => {
                if let Some(n) = s.strip_prefix("random:") {
                    return Ok(CoresetSpec::Random {
                        n: n.parse().map_err(|_| bad())?,
                    });
                }
                if let Some(n) = s.strip_prefix("mid_ppl:") {
                    return Ok(CoresetSpec::MidPpl {
                        n: n.parse().map_err(|_| bad())?,
                    });
                }
                if let Some(rest) = s.strip_prefix("mix:") {
                    let (p, n) = rest.split_once(':').ok_or_else(bad)?;
                    return Ok(CoresetSpec::Mix {
                        p: p.parse().map_err(|_| bad())?,
                        n: n.parse().map_err(|_| bad())?,
                    });
                }
                Err(bad())
            }
        }
    }

    /// Filesystem-safe name for output files.
    pub fn slug(&self) -> String {
        match self {
            CoresetSpec::Full => "full".into(),
            CoresetSpec::Pk => "pk".into(),
            CoresetSpec::Wk => "wk".into(),
            CoresetSpec::IclCWithWk => "icl_c_wk".into(),
            CoresetSpec::IclCWithW2c => "icl_c_w2c".into(),
            CoresetSpec::IclCWithWw => "icl_c_ww".into(),
            CoresetSpec::Random { n } => format!("random-{n}"),
            CoresetSpec::MidPpl { n } => format!("mid_ppl-{n}"),
            CoresetSpec::Mix { p, n } => format!("mix-{p}-{n}"),
        }
    }

    /// Combos built from ICL_C depend on probe counts and a tau.
    pub fn needs_tau(&self) -> bool {
        matches!(
            self,
            CoresetSpec::IclCWithWk | CoresetSpec::IclCWithW2c | CoresetSpec::IclCWithWw
        )
    }

    fn needs_probes(&self) -> bool {
        self.needs_tau()
    }
}

/// Materialize the coreset named by `spec` as a dataset in original order.
/// `ppl` is only consulted for the mid-perplexity baseline.
pub fn build_coreset(
    dataset: &Dataset,
    partition: &Partition,
    spec: &CoresetSpec,
    ppl: Option<&[PplRecord]>,
) -> Result<Dataset, Error> {
    if spec.needs_probes() && !partition.stats.probed {
        return Err(SelectorError::ProbesMissing {
            combo: spec.slug(),
        }
        .into());
    }
    let union = |a: &[String], b: &[String]| -> BTreeSet<String> {
        a.iter().chain(b.iter()).cloned().collect()
    };
    let ids: BTreeSet<String> = match spec {
        CoresetSpec::Full => return Ok(dataset.clone()),
        CoresetSpec::Pk => union(&partition.pk, &[]),
        CoresetSpec::Wk => union(&partition.wk, &[]),
        CoresetSpec::IclCWithWk => union(&partition.icl_c, &partition.wk),
        CoresetSpec::IclCWithW2c => union(&partition.icl_c, &partition.w2c),
        CoresetSpec::IclCWithWw => union(&partition.icl_c, &partition.ww),
        CoresetSpec::Random { n } => {
            if *n > dataset.len() {
                return Err(SelectorError::NotEnoughSamples {
                    n: *n,
                    available: dataset.len(),
                }
                .into());
            }
            let all: Vec<&str> = dataset.ids().collect();
            let mut rng =
                derive_rng(partition.params.seed, "random", &[&n.to_string()]);
            rand::seq::index::sample(&mut rng, all.len(), *n)
                .into_iter()
                .map(|i| all[i].to_string())
                .collect()
        }
        CoresetSpec::MidPpl { n } => {
            let records = ppl.ok_or_else(|| {
                Error::MissingArtifact(
                    "perplexity records required for mid_ppl; run `clipper ppl` first".into(),
                )
            })?;
            select_mid_ppl(records, *n)
                .map_err(Error::from)?
                .into_iter()
                .collect()
        }
        CoresetSpec::Mix { p, n } => {
            return build_mixture(dataset, partition, *p, *n, partition.params.seed)
        }
    };
    Ok(subset_by_ids(dataset, &ids)?)
}

/// Seeded draw of floor(p*n) PK samples and n - floor(p*n) WK samples,
/// without replacement, merged in original dataset order.
pub fn build_mixture(
    dataset: &Dataset,
    partition: &Partition,
    p: f64,
    n: usize,
    seed: u64,
) -> Result<Dataset, Error> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SelectorError::BadFraction(p).into());
    }
    let from_pk = (p * n as f64).floor() as usize;
    let from_wk = n - from_pk;
    if from_pk > partition.pk.len() {
        return Err(SelectorError::InsufficientPool {
            side: "pk",
            required: from_pk,
            available: partition.pk.len(),
        }
        .into());
    }
    if from_wk > partition.wk.len() {
        return Err(SelectorError::InsufficientPool {
            side: "wk",
            required: from_wk,
            available: partition.wk.len(),
        }
        .into());
    }
    let key = format!("{p}:{n}");
    let mut rng = derive_rng(seed, "mix", &[&key]);
    let mut ids: BTreeSet<String> = BTreeSet::new();
    if from_pk > 0 {
        ids.extend(
            rand::seq::index::sample(&mut rng, partition.pk.len(), from_pk)
                .into_iter()
                .map(|i| partition.pk[i].clone()),
        );
    }
    if from_wk > 0 {
        ids.extend(
            rand::seq::index::sample(&mut rng, partition.wk.len(), from_wk)
                .into_iter()
                .map(|i| partition.wk[i].clone()),
        );
    }
    Ok(subset_by_ids(dataset, &ids)?)
}
