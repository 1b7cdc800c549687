//! Per-sample perplexity, distribution summaries, distribution-similarity
//! scoring, and the mid-perplexity baseline selector.
//!
//! Perplexity is `exp(-mean(token_logprobs))` over the label tokens, natural
//! logs, so all-certain labels score 1 and every record is >= 1 when logprobs
//! are <= 0. The math here is generic over the float type; the pipeline
//! instantiates it at [`crate::Scalar`].

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    run_batch, InferenceCache, InferenceRequest, LogprobRequest, ModelBackend, PromptTemplates,
};
use crate::corpus::Dataset;
use crate::error::Error;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum PplError {
    #[error("subset {0:?} has no perplexity records")]
    EmptySubset(String),

    #[error("histograms have different bin edges")]
    EdgeMismatch,

    #[error("histogram carries no mass")]
    EmptyHistogram,

    #[error("requested {n} records but only {available} available")]
    NotEnoughRecords { n: usize, available: usize },

    #[error("no perplexity records to histogram")]
    NoRecords,
}

/// exp of the negative mean token log-probability.
pub fn perplexity<F: Float>(token_logprobs: &[F]) -> F {
    assert!(!token_logprobs.is_empty(), "perplexity of zero tokens");
    let n = F::from(token_logprobs.len()).unwrap();
    let sum = token_logprobs
        .iter()
        .fold(F::zero(), |acc, &lp| acc + lp);
    (-(sum / n)).exp()
}

/// `bins + 1` strictly increasing, log-spaced edges spanning [lo, hi].
/// A degenerate span is widened so the edges stay strictly increasing.
pub fn log_spaced_edges<F: Float>(lo: F, hi: F, bins: usize) -> Vec<F> {
    assert!(bins >= 1);
    assert!(lo > F::zero() && hi >= lo);
    let pad = F::from(1e-9).unwrap();
    let hi = if hi > lo { hi } else { lo * (F::one() + pad) + pad };
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let step = (ln_hi - ln_lo) / F::from(bins).unwrap();
    (0..=bins)
        .map(|k| {
            if k == bins {
                hi
            } else {
                (ln_lo + step * F::from(k).unwrap()).exp()
            }
        })
        .collect()
}

fn bin_index<F: Float>(edges: &[F], value: F) -> usize {
    let bins = edges.len() - 1;
    // linear scan is fine at 40 bins; clamp keeps max values in range
    for k in 0..bins {
        if value < edges[k + 1] {
            return k;
        }
    }
    bins - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary<F> {
    pub mean: F,
    pub median: F,
    pub p5: F,
    pub p95: F,
}

/// Binned distribution over log-spaced edges shared across subsets, so the
/// per-subset histograms of one run are directly comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram<F> {
    pub edges: Vec<F>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub summary: Summary<F>,
}

impl<F: Float> Histogram<F> {
    pub fn from_values(edges: Vec<F>, values: &[F]) -> Self {
        assert!(!values.is_empty());
        assert!(edges.windows(2).all(|w| w[0] < w[1]), "edges must increase");
        let mut counts = vec![0u64; edges.len() - 1];
        for &v in values {
            counts[bin_index(&edges, v)] += 1;
        }
        let mut sorted: Vec<F> = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let quantile = |q: f64| sorted[(((n - 1) as f64) * q).round() as usize];
        let mean = sorted.iter().fold(F::zero(), |a, &b| a + b) / F::from(n).unwrap();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / F::from(2).unwrap()
        };
        Histogram {
            counts,
            total: n as u64,
            summary: Summary {
                mean,
                median,
                p5: quantile(0.05),
                p95: quantile(0.95),
            },
            edges,
        }
    }

    pub fn midpoints(&self) -> Vec<F> {
        self.edges
            .windows(2)
            .map(|w| (w[0] + w[1]) / F::from(2).unwrap())
            .collect()
    }

    pub fn normalized(&self) -> Vec<F> {
        let total = F::from(self.total).unwrap();
        self.counts
            .iter()
            .map(|&c| F::from(c).unwrap() / total)
            .collect()
    }
}

/// 1-Wasserstein distance between two normalized histograms on identical
/// edges, computed as sequential earth-moving over bin midpoints: surplus
/// carried from bin k to k+1 costs |carry| times the midpoint gap.
pub fn wasserstein_1d<F: Float>(h1: &Histogram<F>, h2: &Histogram<F>) -> Result<F, PplError> {
    if h1.edges.len() != h2.edges.len()
        || h1
            .edges
            .iter()
            .zip(&h2.edges)
            .any(|(a, b)| *a != *b)
    {
        return Err(PplError::EdgeMismatch);
    }
    if h1.total == 0 || h2.total == 0 {
        return Err(PplError::EmptyHistogram);
    }
    let p = h1.normalized();
    let q = h2.normalized();
    let mids = h1.midpoints();
    let mut carry = F::zero();
    let mut cost = F::zero();
    for k in 0..p.len() - 1 {
        carry = carry + p[k] - q[k];
        cost = cost + carry.abs() * (mids[k + 1] - mids[k]);
    }
    Ok(cost)
}

/// One sample's perplexity over its label tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplRecord {
    pub id: String,
    pub ppl: Scalar,
    pub token_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PplStats {
    /// Samples whose backend returned an empty token list.
    pub flagged_empty: Vec<String>,
    /// Samples whose logprob request failed terminally.
    pub failed: Vec<String>,
}

/// Compute per-sample perplexity for the whole dataset via the batch
/// scheduler. Samples with empty token lists or failed requests are excluded
/// from the records and reported in the stats.
pub async fn compute_ppl(
    dataset: &Dataset,
    backend: Arc<dyn ModelBackend>,
    templates: &PromptTemplates,
    concurrency: usize,
    cache: &InferenceCache,
) -> Result<(Vec<PplRecord>, PplStats), Error> {
    if !backend.supports_logprobs() {
        return Err(crate::backend::BackendError::Unsupported(format!(
            "backend {:?} does not support logprobs",
            backend.name()
        ))
        .into());
    }
    let requests: Vec<InferenceRequest> = dataset
        .samples()
        .iter()
        .map(|s| {
            InferenceRequest::Logprobs(LogprobRequest {
                sample: s.clone(),
                system_prompt: templates.system.clone(),
            })
        })
        .collect();
    let digests: Vec<String> = requests
        .iter()
        .map(|r| crate::backend::request_digest(backend.name(), templates, r))
        .collect();
    let outcome = run_batch(backend, templates, requests, concurrency, cache).await;

    let mut records = Vec::new();
    let mut stats = PplStats::default();
    for (sample, digest) in dataset.samples().iter().zip(&digests) {
        match outcome.results.get(digest).and_then(|r| r.as_logprobs()) {
            Some(lp) if !lp.token_logprobs.is_empty() => {
                records.push(PplRecord {
                    id: sample.id.clone(),
                    ppl: perplexity(&lp.token_logprobs),
                    token_count: lp.token_logprobs.len(),
                });
            }
            Some(_) => stats.flagged_empty.push(sample.id.clone()),
            None => stats.failed.push(sample.id.clone()),
        }
    }
    Ok((records, stats))
}

/// Histogram of the records restricted to `subset_ids`, over log-spaced bins
/// spanning the FULL record set so subsets share axes.
pub fn histogram(
    records: &[PplRecord],
    subset_ids: &BTreeSet<String>,
    bins: usize,
    subset_name: &str,
) -> Result<Histogram<Scalar>, PplError> {
    if records.is_empty() {
        return Err(PplError::NoRecords);
    }
    let lo = records.iter().map(|r| r.ppl).fold(Scalar::INFINITY, Scalar::min);
    let hi = records
        .iter()
        .map(|r| r.ppl)
        .fold(Scalar::NEG_INFINITY, Scalar::max);
    let edges = log_spaced_edges(lo, hi, bins);
    let values: Vec<Scalar> = records
        .iter()
        .filter(|r| subset_ids.contains(&r.id))
        .map(|r| r.ppl)
        .collect();
    if values.is_empty() {
        return Err(PplError::EmptySubset(subset_name.to_string()));
    }
    Ok(Histogram::from_values(edges, &values))
}

/// 1-Wasserstein distance between two histograms on identical edges.
pub fn distribution_distance(
    h1: &Histogram<Scalar>,
    h2: &Histogram<Scalar>,
) -> Result<Scalar, PplError> {
    wasserstein_1d(h1, h2)
}

/// The n ids centered on the median of the perplexity ordering: sort by
/// (ppl, id) ascending and take indices [(N-n)/2, (N-n)/2 + n).
pub fn select_mid_ppl(records: &[PplRecord], n: usize) -> Result<Vec<String>, PplError> {
    let total = records.len();
    if n > total {
        return Err(PplError::NotEnoughRecords { n, available: total });
    }
    let mut sorted: Vec<&PplRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.ppl.total_cmp(&b.ppl).then_with(|| a.id.cmp(&b.id)));
    let start = (total - n) / 2;
    Ok(sorted[start..start + n]
        .iter()
        .map(|r| r.id.clone())
        .collect())
}

/// Write records as CSV with header `id,ppl,token_count`.
pub fn write_ppl_csv(records: &[PplRecord], path: impl AsRef<Path>) -> Result<(), Error> {
    let path = path.as_ref();
    let mut out = String::from("id,ppl,token_count\n");
    for r in records {
        let id = if r.id.contains([',', '"', '\n']) {
            format!("\"{}\"", r.id.replace('"', "\"\""))
        } else {
            r.id.clone()
        };
        out.push_str(&format!("{},{},{}\n", id, r.ppl, r.token_count));
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Read back a CSV written by [`write_ppl_csv`].
pub fn read_ppl_csv(path: impl AsRef<Path>) -> Result<Vec<PplRecord>, Error> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parse = || -> Option<PplRecord> {
            let (id, rest) = if let Some(stripped) = line.strip_prefix('"') {
                let end = stripped.find("\",")?;
                (
                    stripped[..end].replace("\"\"", "\""),
                    &stripped[end + 2..],
                )
            } else {
                let comma = line.find(',')?;
                (line[..comma].to_string(), &line[comma + 1..])
            };
            let mut parts = rest.split(',');
            let ppl: Scalar = parts.next()?.parse().ok()?;
            let token_count: usize = parts.next()?.parse().ok()?;
            Some(PplRecord {
                id,
                ppl,
                token_count,
            })
        };
        let record = parse().ok_or_else(|| {
            Error::Other(format!("{} line {}: malformed ppl row", path.display(), i + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}
