//! Seedable mock backends.
//!
//! Mocks are first-class: every selection rule is a pure function of sample
//! identity, so tests and independent re-implementations can predict exactly
//! which answers a mock run produces. A mock replies with the ground-truth
//! label when its rule deems the answer correct and with `"UNKNOWN"`
//! otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    BackendError, BackendResult, InferenceRequest, InferenceResponse, LogprobResult,
    ModelBackend,
};
use crate::corpus::Sample;

pub const WRONG_ANSWER: &str = "UNKNOWN";

/// Trailing decimal digits of an id ("d#4" -> 4). Ids without a numeric
/// suffix behave as odd.
pub fn numeric_suffix(id: &str) -> u64 {
    let digits: String = id
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().unwrap_or(1)
}

fn stable_hash(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Pure decision rule of a mock backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockRule {
    /// Always answers with the ground-truth label.
    Oracle,
    /// Never answers correctly.
    Never,
    /// Correct iff the numeric suffix of the (query) sample id is even.
    Parity,
    /// Zero-shot correct iff the suffix is even; one-shot correct iff
    /// demo suffix + query suffix is even.
    ContextualParity,
    /// Pseudorandom but deterministic: decisions derive from a salted hash
    /// of the ids involved.
    Salted { salt: u64 },
    /// Text completions always reply with this string (judge mocks).
    JudgeFixed { reply: String },
    /// Text completions parse the frozen judge prompt and grade the
    /// candidate against the gold label by normalized comparison.
    JudgeEquality,
}

impl MockRule {
    pub fn zero_shot_correct(&self, sample: &Sample) -> bool {
        match self {
            MockRule::Oracle => true,
            MockRule::Never => false,
            MockRule::Parity | MockRule::ContextualParity => {
                numeric_suffix(&sample.id).is_multiple_of(2)
            }
            MockRule::Salted { salt } => {
                stable_hash(&[&salt.to_string(), "zero", &sample.id]).is_multiple_of(2)
            }
            MockRule::JudgeFixed { .. } | MockRule::JudgeEquality => true,
        }
    }

    pub fn one_shot_correct(&self, demo: &Sample, query: &Sample) -> bool {
        match self {
            MockRule::Oracle => true,
            MockRule::Never => false,
            MockRule::Parity => numeric_suffix(&query.id).is_multiple_of(2),
            MockRule::ContextualParity => {
                (numeric_suffix(&demo.id) + numeric_suffix(&query.id)).is_multiple_of(2)
            }
            MockRule::Salted { salt } => {
                stable_hash(&[&salt.to_string(), "one", &demo.id, &query.id]).is_multiple_of(2)
            }
            MockRule::JudgeFixed { .. } | MockRule::JudgeEquality => true,
        }
    }

    /// Parse a rule name from config: `oracle`, `never`, `parity`,
    /// `contextual`, `salted:<u64>`, `judge:<reply>`, `judge-equality`.
    pub fn parse(s: &str) -> Option<MockRule> {
        match s {
            "oracle" => Some(MockRule::Oracle),
            "never" => Some(MockRule::Never),
            "parity" => Some(MockRule::Parity),
            "contextual" => Some(MockRule::ContextualParity),
            "judge-equality" => Some(MockRule::JudgeEquality),
            _ => {
                if let Some(salt) = s.strip_prefix("salted:") {
                    salt.parse().ok().map(|salt| MockRule::Salted { salt })
                } else {
                    s.strip_prefix("judge:").map(|reply| MockRule::JudgeFixed {
                        reply: reply.to_string(),
                    })
                }
            }
        }
    }
}

/// How a mock produces label log-probabilities.
#[derive(Debug, Clone)]
pub enum LogprobRule {
    /// Every label costs `count` tokens at a constant logprob each.
    Constant { logprob: f64, count: usize },
    /// Explicit per-id logprob vectors; ids not in the map get an empty
    /// result (which the perplexity stage flags).
    Scripted(BTreeMap<String, Vec<f64>>),
    /// Deterministic pseudo-random logprobs derived from (salt, id).
    Salted { salt: u64 },
}

impl Default for LogprobRule {
    fn default() -> Self {
        LogprobRule::Salted { salt: 0 }
    }
}

impl LogprobRule {
    pub fn logprobs_for(&self, sample: &Sample) -> Vec<f64> {
        match self {
            LogprobRule::Constant { logprob, count } => vec![*logprob; *count],
            LogprobRule::Scripted(map) => map.get(&sample.id).cloned().unwrap_or_default(),
            LogprobRule::Salted { salt } => {
                let n = sample.label.split_whitespace().count().clamp(1, 8);
                (0..n)
                    .map(|k| {
                        let h = stable_hash(&[
                            &salt.to_string(),
                            "lp",
                            &sample.id,
                            &k.to_string(),
                        ]);
                        -((h % 4000) as f64) / 1000.0
                    })
                    .collect()
            }
        }
    }
}

/// In-process model stand-in with call counting and in-flight tracking.
pub struct MockBackend {
    name: String,
    rule: MockRule,
    logprob_rule: LogprobRule,
    supports_logprobs: bool,
    failing_ids: BTreeSet<String>,
    fixed_delay_ms: u64,
    random_delay: Option<(RangeInclusive<u64>, Mutex<ChaCha8Rng>)>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(name: impl Into<String>, rule: MockRule) -> Self {
        MockBackend {
            name: name.into(),
            rule,
            logprob_rule: LogprobRule::default(),
            supports_logprobs: true,
            failing_ids: BTreeSet::new(),
            fixed_delay_ms: 0,
            random_delay: None,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn with_logprob_rule(mut self, rule: LogprobRule) -> Self {
        self.logprob_rule = rule;
        self
    }

    pub fn without_logprobs(mut self) -> Self {
        self.supports_logprobs = false;
        self
    }

    /// Requests for these sample ids fail terminally.
    pub fn with_failing_ids<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.failing_ids = ids.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_fixed_delay(mut self, ms: u64) -> Self {
        self.fixed_delay_ms = ms;
        self
    }

    /// Seeded per-call delay, for exercising completion-order independence.
    pub fn with_random_delay(mut self, ms: RangeInclusive<u64>, seed: u64) -> Self {
        self.random_delay = Some((ms, Mutex::new(ChaCha8Rng::seed_from_u64(seed))));
        self
    }

    pub fn rule(&self) -> &MockRule {
        &self.rule
    }

    /// Total backend calls made (cache hits never reach the backend).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn answer(&self, correct: bool, label: &str) -> String {
        if correct {
            label.to_string()
        } else {
            WRONG_ANSWER.to_string()
        }
    }

    fn check_failure(&self, id: &str) -> BackendResult<()> {
        if self.failing_ids.contains(id) {
            Err(BackendError::Protocol {
                status: 500,
                body_excerpt: format!("mock terminal failure for {id}"),
            })
        } else {
            Ok(())
        }
    }

    fn judge_text_reply(&self, user_prompt: &str) -> String {
        match &self.rule {
            MockRule::JudgeFixed { reply } => reply.clone(),
            MockRule::JudgeEquality => {
                let label = extract_between(user_prompt, "Gold label:\n", "\n\nCandidate answer:");
                let candidate =
                    extract_between(user_prompt, "Candidate answer:\n", "\n\nDoes the candidate");
                match (label, candidate) {
                    (Some(label), Some(candidate))
                        if crate::judge::answers_match(candidate, label) =>
                    {
                        "YES".to_string()
                    }
                    _ => "NO".to_string(),
                }
            }
            _ => "YES".to_string(),
        }
    }
}

fn extract_between<'a>(haystack: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = haystack.find(start)? + start.len();
    let len = haystack[from..].find(end)?;
    Some(&haystack[from..from + len])
}

#[async_trait]
impl ModelBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_logprobs(&self) -> bool {
        self.supports_logprobs
    }

    async fn execute(&self, request: &InferenceRequest) -> BackendResult<InferenceResponse> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);

        let delay = self.fixed_delay_ms
            + self
                .random_delay
                .as_ref()
                .map(|(range, rng)| rng.lock().unwrap().gen_range(range.clone()))
                .unwrap_or(0);
        if delay > 0 {
            tokio::time::sleep(std::time::Duration::from_millis(delay)).await;
        } else {
            tokio::task::yield_now().await;
        }

        let result = match request {
            InferenceRequest::ZeroShot(req) => self.check_failure(&req.sample.id).map(|_| {
                let correct = self.rule.zero_shot_correct(&req.sample);
                InferenceResponse::Text {
                    text: self.answer(correct, &req.sample.label),
                }
            }),
            InferenceRequest::OneShot(req) => {
                self.check_failure(&req.demonstration.id)
                    .and_then(|_| self.check_failure(&req.query_sample.id))
                    .map(|_| {
                        let correct = self
                            .rule
                            .one_shot_correct(&req.demonstration, &req.query_sample);
                        InferenceResponse::Text {
                            text: self.answer(correct, &req.query_sample.label),
                        }
                    })
            }
            InferenceRequest::Logprobs(req) => self.check_failure(&req.sample.id).map(|_| {
                let token_logprobs = self.logprob_rule.logprobs_for(&req.sample);
                let tokens = (0..token_logprobs.len())
                    .map(|k| format!("t{k}"))
                    .collect();
                InferenceResponse::Logprobs(LogprobResult {
                    tokens,
                    token_logprobs,
                })
            }),
            InferenceRequest::Text(req) => Ok(InferenceResponse::Text {
                text: self.judge_text_reply(&req.user_prompt),
            }),
        };

        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}
