//! Semantic-equivalence grading of a model response against the gold label:
//! the predicate behind every "correct answer" decision in the pipeline.
//!
//! Two methods: a deterministic normalized comparison (default) and an
//! opt-in LLM judge that asks a configured endpoint for a YES/NO decision
//! using a frozen prompt. Unparseable judge replies count as non-match and
//! are surfaced in run statistics, never dropped.

use std::sync::Arc;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{
    run_batch, BackendResult, Decoding, InferenceCache, InferenceRequest, ModelBackend,
    PromptTemplates, TextRequest,
};
use crate::backend::prompt::{render_judge_user_prompt, JUDGE_SYSTEM_PROMPT};

/// Short replies expected; generous headroom for chatty judges.
pub const JUDGE_DECODING: Decoding = Decoding { max_new_tokens: 16 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeMethod {
    #[serde(rename = "exact-normalized")]
    ExactNormalized,
    #[serde(rename = "llm-judge")]
    LlmJudge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    #[serde(rename = "match")]
    pub matched: bool,
    pub method: JudgeMethod,
    /// Present iff method is llm-judge.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_judge_reply: Option<String>,
}

/// Lowercase, trim, collapse internal whitespace, strip terminal punctuation.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', ',', '!', '?', ';', ':'])
        .trim()
        .to_string()
}

fn is_choice_letter(s: &str) -> bool {
    s.len() == 1 && matches!(s.as_bytes()[0], b'a'..=b'e')
}

/// First standalone choice letter A-E in the text, lowercased.
pub fn extract_choice_letter(text: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)\b([A-Ea-e])\b").unwrap());
    re.captures(text)
        .map(|c| c.get(1).unwrap().as_str().to_lowercase())
}

/// Normalized equality, with choice-letter extraction when either side is a
/// single multiple-choice letter A-E (so "(B) because ..." matches label "B").
/// Symmetric by construction.
pub fn answers_match(response: &str, label: &str) -> bool {
    let norm_response = normalize(response);
    let norm_label = normalize(label);
    if norm_response == norm_label {
        return true;
    }
    if is_choice_letter(&norm_label) && extract_choice_letter(response).as_deref() == Some(&norm_label) {
        return true;
    }
    if is_choice_letter(&norm_response) && extract_choice_letter(label).as_deref() == Some(&norm_response) {
        return true;
    }
    false
}

pub fn judge_exact(response: &str, label: &str) -> Verdict {
    Verdict {
        matched: answers_match(response, label),
        method: JudgeMethod::ExactNormalized,
        raw_judge_reply: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LlmParse {
    pub matched: bool,
    /// Neither YES nor NO appeared anywhere in the reply.
    pub unparseable: bool,
}

/// Decide from a judge reply: the first standalone YES or NO token wins;
/// a reply containing neither is unparseable and counts as non-match.
pub fn parse_llm_reply(reply: &str) -> LlmParse {
    for token in reply.split(|c: char| !c.is_alphanumeric()) {
        if token.eq_ignore_ascii_case("yes") {
            return LlmParse {
                matched: true,
                unparseable: false,
            };
        }
        if token.eq_ignore_ascii_case("no") {
            return LlmParse {
                matched: false,
                unparseable: false,
            };
        }
    }
    LlmParse {
        matched: false,
        unparseable: true,
    }
}

fn judge_request(question: &str, response: &str, label: &str) -> TextRequest {
    TextRequest {
        system_prompt: JUDGE_SYSTEM_PROMPT.to_string(),
        user_prompt: render_judge_user_prompt(question, label, response),
        decoding: JUDGE_DECODING,
    }
}

/// Single-shot LLM judgement. Returns the verdict plus the unparseable flag.
pub async fn judge_llm(
    backend: &dyn ModelBackend,
    question: &str,
    response: &str,
    label: &str,
) -> BackendResult<(Verdict, bool)> {
    let req = judge_request(question, response, label);
    let resp = backend.execute(&InferenceRequest::Text(req)).await?;
    let reply = resp.as_text().unwrap_or_default().to_string();
    let parse = parse_llm_reply(&reply);
    Ok((
        Verdict {
            matched: parse.matched,
            method: JudgeMethod::LlmJudge,
            raw_judge_reply: Some(reply),
        },
        parse.unparseable,
    ))
}

/// One (question, response, label) triple to grade.
#[derive(Debug, Clone)]
pub struct JudgeItem {
    pub question: String,
    pub response: String,
    pub label: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JudgeStats {
    pub unparseable: u64,
    /// Judge backend calls that failed terminally (graded as non-match).
    pub failures: u64,
}

/// The configured judge for a run. One judge serves both pipeline stages.
#[derive(Clone)]
pub enum Judge {
    Exact,
    Llm { backend: Arc<dyn ModelBackend> },
}

impl Judge {
    pub fn method(&self) -> JudgeMethod {
        match self {
            Judge::Exact => JudgeMethod::ExactNormalized,
            Judge::Llm { .. } => JudgeMethod::LlmJudge,
        }
    }

    /// Grade a batch of items. LLM judging goes through the batch scheduler
    /// so verdicts are cached and bounded by `concurrency` like any other
    /// inference; failures grade as non-match (conservative: the sample stays
    /// on the world-knowledge side, which only adds training data).
    pub async fn judge_many(
        &self,
        items: &[JudgeItem],
        templates: &PromptTemplates,
        concurrency: usize,
        cache: &InferenceCache,
    ) -> (Vec<Verdict>, JudgeStats) {
        let mut stats = JudgeStats::default();
        match self {
            Judge::Exact => (
                items
                    .iter()
                    .map(|it| judge_exact(&it.response, &it.label))
                    .collect(),
                stats,
            ),
            Judge::Llm { backend } => {
                let requests: Vec<InferenceRequest> = items
                    .iter()
                    .map(|it| {
                        InferenceRequest::Text(judge_request(
                            &it.question,
                            &it.response,
                            &it.label,
                        ))
                    })
                    .collect();
                let digests: Vec<String> = requests
                    .iter()
                    .map(|r| crate::backend::request_digest(backend.name(), templates, r))
                    .collect();
                let outcome =
                    run_batch(backend.clone(), templates, requests, concurrency, cache).await;
                let verdicts = digests
                    .iter()
                    .map(|digest| match outcome.results.get(digest) {
                        Some(resp) => {
                            let reply = resp.as_text().unwrap_or_default().to_string();
                            let parse = parse_llm_reply(&reply);
                            if parse.unparseable {
                                stats.unparseable += 1;
                            }
                            Verdict {
                                matched: parse.matched,
                                method: JudgeMethod::LlmJudge,
                                raw_judge_reply: Some(reply),
                            }
                        }
                        None => {
                            stats.failures += 1;
                            Verdict {
                                matched: false,
                                method: JudgeMethod::LlmJudge,
                                raw_judge_reply: None,
                            }
                        }
                    })
                    .collect();
                (verdicts, stats)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{MockBackend, MockRule};
    use proptest::prelude::*;

    #[test]
    fn normalization_handles_case_whitespace_and_punctuation() {
        let v = judge_exact("  The Answer. ", "the answer");
        assert!(v.matched);
        assert_eq!(v.method, JudgeMethod::ExactNormalized);
        assert!(v.raw_judge_reply.is_none());
    }

    #[test]
    fn choice_letter_is_extracted_when_label_is_single_letter() {
        assert!(judge_exact("(B) because the sky is blue", "B").matched);
        assert!(judge_exact("the answer is C.", "c").matched);
        assert!(!judge_exact("crabs", "c").matched);
    }

    #[test]
    fn different_answers_do_not_match() {
        assert!(!judge_exact("river", "lake").matched);
    }

    #[test]
    fn exact_is_reflexive_after_normalization() {
        for s in ["x", "  Mixed Case!  ", "déjà vu", "B"] {
            assert!(judge_exact(s, s).matched, "{s:?}");
        }
    }

    #[test]
    fn llm_reply_parsing() {
        assert_eq!(
            parse_llm_reply("YES"),
            LlmParse { matched: true, unparseable: false }
        );
        assert_eq!(
            parse_llm_reply("No, they differ"),
            LlmParse { matched: false, unparseable: false }
        );
        assert_eq!(
            parse_llm_reply("maybe"),
            LlmParse { matched: false, unparseable: true }
        );
        assert_eq!(
            parse_llm_reply("  yes."),
            LlmParse { matched: true, unparseable: false }
        );
    }

    #[tokio::test]
    async fn judge_llm_uses_the_backend_reply() {
        let yes = MockBackend::new("judge", MockRule::JudgeFixed { reply: "YES".into() });
        let (v, unparseable) = judge_llm(&yes, "q", "a", "b").await.unwrap();
        assert!(v.matched && !unparseable);
        assert_eq!(v.raw_judge_reply.as_deref(), Some("YES"));

        let no = MockBackend::new("judge", MockRule::JudgeFixed { reply: "No, they differ".into() });
        let (v, unparseable) = judge_llm(&no, "q", "a", "b").await.unwrap();
        assert!(!v.matched && !unparseable);

        let shrug = MockBackend::new("judge", MockRule::JudgeFixed { reply: "maybe".into() });
        let (v, unparseable) = judge_llm(&shrug, "q", "a", "b").await.unwrap();
        assert!(!v.matched && unparseable);
    }

    #[tokio::test]
    async fn judge_many_counts_unparseable_replies() {
        let backend = Arc::new(MockBackend::new(
            "judge",
            MockRule::JudgeFixed { reply: "maybe".into() },
        ));
        let judge = Judge::Llm { backend };
        let items = vec![
            JudgeItem { question: "q".into(), response: "a".into(), label: "a".into() },
            JudgeItem { question: "q".into(), response: "b".into(), label: "c".into() },
        ];
        let cache = InferenceCache::in_memory();
        let (verdicts, stats) = judge
            .judge_many(&items, &PromptTemplates::default(), 2, &cache)
            .await;
        assert_eq!(verdicts.len(), 2);
        assert!(verdicts.iter().all(|v| !v.matched));
        assert_eq!(stats.unparseable, 2);
    }

    #[tokio::test]
    async fn judge_equality_mock_grades_by_normalized_equality() {
        let backend = MockBackend::new("judge", MockRule::JudgeEquality);
        let (v, _) = judge_llm(&backend, "q", "  The Lake. ", "the lake").await.unwrap();
        assert!(v.matched);
        let (v, _) = judge_llm(&backend, "q", "river", "lake").await.unwrap();
        assert!(!v.matched);
    }

    proptest! {
        #[test]
        fn answers_match_is_symmetric(a in "[ -~]{0,20}", b in "[ -~]{0,20}") {
            prop_assert_eq!(answers_match(&a, &b), answers_match(&b, &a));
        }

        #[test]
        fn exact_judge_matches_itself(s in "[ -~]{1,30}") {
            prop_assume!(!normalize(&s).is_empty());
            prop_assert!(judge_exact(&s, &s).matched);
        }
    }
}
