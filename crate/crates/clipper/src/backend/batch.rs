//! Bounded-concurrency batch dispatch over a [`ModelBackend`].
//!
//! Requests are deduplicated by digest before dispatch: cached digests are
//! served without touching the backend, and a digest appearing several times
//! in one batch is fetched at most once. Results are keyed by digest so the
//! aggregation downstream is independent of completion order. Fresh results
//! are appended to the cache as they complete, which is what makes an
//! interrupted run resumable.

use std::collections::HashMap;
use std::sync::Arc;

use futures::stream::{self, StreamExt};

use super::{
    request_digest, InferenceRequest, InferenceResponse, ModelBackend, PromptTemplates,
};

/// Counts are per input request, not per unique digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BatchSummary {
    /// Requests answered by a fresh backend call made by this batch.
    pub ok: usize,
    /// Requests whose digest terminally failed.
    pub failed: usize,
    /// Requests served from the cache (including duplicates within the batch).
    pub cached: usize,
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub results: HashMap<String, InferenceResponse>,
    /// Terminal failures, keyed by digest, with the error message.
    pub failures: HashMap<String, String>,
    pub summary: BatchSummary,
}

impl BatchOutcome {
    pub fn get(&self, digest: &str) -> Option<&InferenceResponse> {
        self.results.get(digest)
    }
}

/// Resolve every request, keeping at most `concurrency` in flight.
///
/// Per-request terminal errors are collected in the outcome, never thrown;
/// callers decide whether a failure aborts the run.
pub async fn run_batch(
    backend: Arc<dyn ModelBackend>,
    templates: &PromptTemplates,
    requests: Vec<InferenceRequest>,
    concurrency: usize,
    cache: &super::InferenceCache,
) -> BatchOutcome {
    assert!(concurrency >= 1, "concurrency must be >= 1");

    let mut outcome = BatchOutcome::default();
    // first occurrence of each digest in request order
    let mut unique: Vec<(String, InferenceRequest)> = Vec::new();
    let mut occurrences: HashMap<String, usize> = HashMap::new();
    for request in requests {
        let digest = request_digest(backend.name(), templates, &request);
        *occurrences.entry(digest.clone()).or_insert(0) += 1;
        if occurrences[&digest] == 1 {
            unique.push((digest, request));
        }
    }

    // serve warm digests without network
    let mut to_fetch: Vec<(String, InferenceRequest)> = Vec::new();
    for (digest, request) in unique {
        if let Some(value) = cache.get(&digest) {
            outcome.summary.cached += occurrences[&digest];
            outcome.results.insert(digest, value);
        } else {
            to_fetch.push((digest, request));
        }
    }

    let fetched: Vec<(String, Result<InferenceResponse, super::BackendError>)> =
        stream::iter(to_fetch.into_iter().map(|(digest, request)| {
            let backend = backend.clone();
            async move {
                let result = backend.execute(&request).await;
                if let Ok(value) = &result {
                    // flush as results arrive so partial progress is durable
                    cache.insert(&digest, value.clone());
                }
                (digest, result)
            }
        }))
        .buffer_unordered(concurrency)
        .collect()
        .await;

    for (digest, result) in fetched {
        let n = occurrences[&digest];
        match result {
            Ok(value) => {
                outcome.results.insert(digest, value);
                // the first occurrence was fetched; duplicates ride the cache
                outcome.summary.ok += 1;
                outcome.summary.cached += n - 1;
            }
            Err(e) => {
                outcome.failures.insert(digest, e.to_string());
                outcome.summary.failed += n;
            }
        }
    }
    outcome
}
