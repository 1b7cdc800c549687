//! Chat message rendering for zero-shot, one-shot, logprob, and judge
//! requests. Template texts are part of the request digest and are hashed
//! into the run manifest, so any change invalidates cached responses.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{IclRequest, LogprobRequest, TextRequest, ZeroShotRequest};

/// How the one-shot demonstration is laid out in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IclLayout {
    /// Demonstration as a completed user/assistant exchange before the query.
    #[default]
    MultiTurn,
    /// Demonstration inlined into a single user message ahead of the query.
    SingleMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    /// System prompt for zero-shot, one-shot, and logprob requests.
    pub system: String,
    pub icl_layout: IclLayout,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            system: "Answer the question about the image. Reply with the answer only."
                .to_string(),
            icl_layout: IclLayout::MultiTurn,
        }
    }
}

/// Frozen judge prompt. The text is fixed so judge verdicts stay comparable
/// across runs; its hash is recorded in the manifest.
pub const JUDGE_SYSTEM_PROMPT: &str = "You are a strict grader.";

pub fn render_judge_user_prompt(question: &str, label: &str, response: &str) -> String {
    format!(
        "Question:\n{question}\n\nGold label:\n{label}\n\nCandidate answer:\n{response}\n\n\
         Does the candidate answer mean the same thing as the gold label? \
         Reply with exactly YES or NO."
    )
}

impl PromptTemplates {
    /// SHA-256 hashes of every template text, keyed by template name.
    pub fn hashes(&self) -> std::collections::BTreeMap<String, String> {
        let hash = |text: &str| {
            let mut h = Sha256::new();
            h.update(text.as_bytes());
            hex::encode(h.finalize())
        };
        let layout = match self.icl_layout {
            IclLayout::MultiTurn => "multi_turn",
            IclLayout::SingleMessage => "single_message",
        };
        [
            ("system".to_string(), hash(&self.system)),
            ("icl_layout".to_string(), hash(layout)),
            ("judge_system".to_string(), hash(JUDGE_SYSTEM_PROMPT)),
            (
                "judge_user".to_string(),
                hash(&render_judge_user_prompt("{question}", "{label}", "{response}")),
            ),
        ]
        .into_iter()
        .collect()
    }
}

/// One content part of a chat message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessagePart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

impl MessagePart {
    pub fn text(text: impl Into<String>) -> Self {
        MessagePart::Text { text: text.into() }
    }

    pub fn image(url: impl Into<String>) -> Self {
        MessagePart::ImageUrl {
            image_url: ImageUrl { url: url.into() },
        }
    }
}

/// A chat message in the wire format of common inference servers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: Vec<MessagePart>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message {
            role: "system".into(),
            content: vec![MessagePart::text(text)],
        }
    }

    pub fn user(parts: Vec<MessagePart>) -> Self {
        Message {
            role: "user".into(),
            content: parts,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message {
            role: "assistant".into(),
            content: vec![MessagePart::text(text)],
        }
    }

    /// Concatenated text parts.
    pub fn text_content(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                MessagePart::Text { text } => Some(text.as_str()),
                MessagePart::ImageUrl { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn render_zero_shot(req: &ZeroShotRequest) -> Vec<Message> {
    vec![
        Message::system(&req.system_prompt),
        Message::user(vec![
            MessagePart::image(req.sample.image.as_url()),
            MessagePart::text(&req.sample.query),
        ]),
    ]
}

pub fn render_one_shot(req: &IclRequest, layout: IclLayout) -> Vec<Message> {
    let demo = &req.demonstration;
    let query = &req.query_sample;
    match layout {
        IclLayout::MultiTurn => vec![
            Message::system(&req.system_prompt),
            Message::user(vec![
                MessagePart::image(demo.image.as_url()),
                MessagePart::text(&demo.query),
            ]),
            Message::assistant(&demo.label),
            Message::user(vec![
                MessagePart::image(query.image.as_url()),
                MessagePart::text(&query.query),
            ]),
        ],
        IclLayout::SingleMessage => vec![
            Message::system(&req.system_prompt),
            Message::user(vec![
                MessagePart::image(demo.image.as_url()),
                MessagePart::text(format!("{}\nAnswer: {}", demo.query, demo.label)),
                MessagePart::image(query.image.as_url()),
                MessagePart::text(format!("{}\nAnswer:", query.query)),
            ]),
        ],
    }
}

/// Logprob requests present the label as a completed assistant turn so the
/// server can score its tokens.
pub fn render_logprobs(req: &LogprobRequest) -> Vec<Message> {
    vec![
        Message::system(&req.system_prompt),
        Message::user(vec![
            MessagePart::image(req.sample.image.as_url()),
            MessagePart::text(&req.sample.query),
        ]),
        Message::assistant(&req.sample.label),
    ]
}

pub fn render_text(req: &TextRequest) -> Vec<Message> {
    vec![
        Message::system(&req.system_prompt),
        Message::user(vec![MessagePart::text(&req.user_prompt)]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Decoding;
    use crate::corpus::{ImageRef, Sample};
    use std::collections::BTreeMap;

    fn sample(id: &str) -> Sample {
        Sample {
            id: id.into(),
            image: ImageRef::Uri {
                uri: format!("img/{id}"),
            },
            query: format!("query {id}"),
            label: format!("label {id}"),
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn one_shot_multi_turn_has_completed_assistant_exchange() {
        let req = IclRequest {
            demonstration: sample("d"),
            query_sample: sample("q"),
            system_prompt: "sys".into(),
            decoding: Decoding::default(),
        };
        let msgs = render_one_shot(&req, IclLayout::MultiTurn);
        let roles: Vec<_> = msgs.iter().map(|m| m.role.as_str()).collect();
        assert_eq!(roles, vec!["system", "user", "assistant", "user"]);
        assert_eq!(msgs[2].text_content(), "label d");
        // the query's label must never appear
        assert!(!msgs.iter().any(|m| m.text_content().contains("label q")));
    }

    #[test]
    fn single_message_layout_inlines_demo() {
        let req = IclRequest {
            demonstration: sample("d"),
            query_sample: sample("q"),
            system_prompt: "sys".into(),
            decoding: Decoding::default(),
        };
        let msgs = render_one_shot(&req, IclLayout::SingleMessage);
        assert_eq!(msgs.len(), 2);
        let body = msgs[1].text_content();
        assert!(body.contains("label d") && body.contains("query q"));
    }

    #[test]
    fn template_hashes_cover_all_templates_and_react_to_changes() {
        let t = PromptTemplates::default();
        let h = t.hashes();
        assert!(h.contains_key("system") && h.contains_key("judge_user"));
        let mut t2 = t.clone();
        t2.system.push('!');
        assert_ne!(h["system"], t2.hashes()["system"]);
        assert_eq!(h["judge_user"], t2.hashes()["judge_user"]);
    }
}
