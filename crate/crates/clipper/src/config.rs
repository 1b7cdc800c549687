//! Run configuration: a TOML file of flat keys and sections, every key
//! overridable by a command-line flag (flags win). Validation reports every
//! violated constraint at once.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::http::HttpConfig;
use crate::backend::mock::{LogprobRule, MockBackend, MockRule};
use crate::backend::{HttpBackend, IclLayout, ModelBackend, PromptTemplates};
use crate::judge::Judge;
use crate::selector::{CoresetSpec, SampleMode};

#[derive(Debug, Error)]
#[error("configuration invalid:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
pub struct ConfigError(pub Vec<String>);

fn default_seed() -> u64 {
    42
}
fn default_r() -> u32 {
    5
}
fn default_taus() -> Vec<u32> {
    vec![1]
}
fn default_concurrency() -> usize {
    8
}
fn default_out() -> PathBuf {
    PathBuf::from("clipper-out")
}
fn default_max_new_tokens() -> u32 {
    256
}
fn default_timeout_s() -> u64 {
    60
}
fn default_retry_base_ms() -> u64 {
    1000
}
fn default_model() -> String {
    "default-model".to_string()
}
fn default_mock_rule() -> String {
    "oracle".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default)]
    pub supports_logprobs: Option<bool>,
    /// Mock rule name (mock backends only); see `MockRule::parse`.
    #[serde(default = "default_mock_rule")]
    pub mock_rule: String,
    #[serde(default)]
    pub mock_delay_ms: u64,
    #[serde(default)]
    pub mock_logprob_salt: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            base_url: None,
            model: default_model(),
            api_key_env: None,
            timeout_s: default_timeout_s(),
            retry_base_ms: default_retry_base_ms(),
            supports_logprobs: None,
            mock_rule: default_mock_rule(),
            mock_delay_ms: 0,
            mock_logprob_salt: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMethodConfig {
    #[default]
    Exact,
    Llm,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct JudgeConfig {
    #[serde(default)]
    pub method: JudgeMethodConfig,
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Mock rule for the judge backend (mock judges only).
    #[serde(default)]
    pub mock_rule: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptsConfig {
    #[serde(default)]
    pub system: Option<String>,
    #[serde(default)]
    pub icl_layout: IclLayout,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
}

impl Default for PromptsConfig {
    fn default() -> Self {
        PromptsConfig {
            system: None,
            icl_layout: IclLayout::MultiTurn,
            max_new_tokens: default_max_new_tokens(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_r")]
    pub r: u32,
    #[serde(default = "default_taus")]
    pub taus: Vec<u32>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub allow_partial: bool,
    #[serde(default)]
    pub strict_iid: bool,
    #[serde(default)]
    pub strict_probes: bool,
    #[serde(default)]
    pub coverage_mode: bool,
    /// Coreset specs emitted by `select`-less runs; see `CoresetSpec::parse`.
    #[serde(default)]
    pub combos: Vec<String>,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default)]
    pub prompts: PromptsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            out: default_out(),
            seed: default_seed(),
            r: default_r(),
            taus: default_taus(),
            concurrency: default_concurrency(),
            allow_partial: false,
            strict_iid: false,
            strict_probes: false,
            coverage_mode: false,
            combos: Vec::new(),
            backend: BackendConfig::default(),
            judge: JudgeConfig::default(),
            prompts: PromptsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(vec![format!("read {}: {e}", path.display())]))?;
        toml::from_str(&text)
            .map_err(|e| ConfigError(vec![format!("parse {}: {e}", path.display())]))
    }

    /// Collect every constraint violation at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.r < 1 {
            problems.push(format!("R must be >= 1 (got {})", self.r));
        }
        for &tau in &self.taus {
            if tau > self.r {
                problems.push(format!("tau {} exceeds R={}", tau, self.r));
            }
        }
        if self.taus.is_empty() {
            problems.push("at least one tau is required".to_string());
        }
        if self.concurrency < 1 {
            problems.push(format!(
                "concurrency must be >= 1 (got {})",
                self.concurrency
            ));
        }
        if self.dataset.as_os_str().is_empty() {
            problems.push("dataset path is required".to_string());
        }
        for combo in &self.combos {
            if let Err(e) = CoresetSpec::parse(combo) {
                problems.push(e.to_string());
            }
        }
        match self.backend.kind {
            BackendKind::Http => {
                if self.backend.base_url.is_none() {
                    problems.push("backend.base_url is required for the http backend".into());
                }
                if let Some(env_name) = &self.backend.api_key_env {
                    if std::env::var(env_name).is_err() {
                        problems.push(format!(
                            "backend.api_key_env names {env_name:?} but it is not set"
                        ));
                    }
                }
            }
            BackendKind::Mock => {
                if MockRule::parse(&self.backend.mock_rule).is_none() {
                    problems.push(format!(
                        "unknown backend.mock_rule {:?}",
                        self.backend.mock_rule
                    ));
                }
            }
        }
        if self.judge.method == JudgeMethodConfig::Llm {
            match self.judge.kind {
                BackendKind::Http => {
                    if self.judge.base_url.is_none() {
                        problems.push("judge.base_url is required for an http llm judge".into());
                    }
                    if let Some(env_name) = &self.judge.api_key_env {
                        if std::env::var(env_name).is_err() {
                            problems.push(format!(
                                "judge.api_key_env names {env_name:?} but it is not set"
                            ));
                        }
                    }
                }
                BackendKind::Mock => {
                    let rule = self.judge.mock_rule.as_deref().unwrap_or("judge-equality");
                    if MockRule::parse(rule).is_none() {
                        problems.push(format!("unknown judge.mock_rule {rule:?}"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(problems))
        }
    }

    pub fn templates(&self) -> PromptTemplates {
        let mut t = PromptTemplates::default();
        if let Some(system) = &self.prompts.system {
            t.system = system.clone();
        }
        t.icl_layout = self.prompts.icl_layout;
        t
    }

    pub fn decoding(&self) -> crate::backend::Decoding {
        crate::backend::Decoding {
            max_new_tokens: self.prompts.max_new_tokens,
        }
    }

    pub fn sample_mode(&self) -> SampleMode {
        if self.strict_iid {
            SampleMode::StrictIid
        } else {
            SampleMode::WithoutReplacement
        }
    }

    /// SHA-256 over the canonical JSON form of the whole config (template
    /// texts included via the prompts section).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("canonical json");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        hex::encode(h.finalize())
    }

    /// Construct the target-model backend described by this config.
    pub fn build_backend(&self) -> Result<Arc<dyn ModelBackend>, ConfigError> {
        build_backend_from(
            &self.backend,
            self.templates(),
            &format!("mock:{}", self.backend.mock_rule),
        )
    }

    /// Construct the judge. An LLM judge gets its own backend, which may
    /// point at a different server than the target model.
    pub fn build_judge(&self) -> Result<Judge, ConfigError> {
        match self.judge.method {
            JudgeMethodConfig::Exact => Ok(Judge::Exact),
            JudgeMethodConfig::Llm => {
                let backend_cfg = BackendConfig {
                    kind: self.judge.kind,
                    base_url: self.judge.base_url.clone(),
                    model: self
                        .judge
                        .model
                        .clone()
                        .unwrap_or_else(|| "judge-model".to_string()),
                    api_key_env: self.judge.api_key_env.clone(),
                    timeout_s: self.backend.timeout_s,
                    retry_base_ms: self.backend.retry_base_ms,
                    supports_logprobs: Some(false),
                    mock_rule: self
                        .judge
                        .mock_rule
                        .clone()
                        .unwrap_or_else(|| "judge-equality".to_string()),
                    mock_delay_ms: 0,
                    mock_logprob_salt: 0,
                };
                let name = format!("judge-mock:{}", backend_cfg.mock_rule);
                let backend = build_backend_from(&backend_cfg, self.templates(), &name)?;
                Ok(Judge::Llm { backend })
            }
        }
    }
}

fn build_backend_from(
    cfg: &BackendConfig,
    templates: PromptTemplates,
    mock_name: &str,
) -> Result<Arc<dyn ModelBackend>, ConfigError> {
    match cfg.kind {
        BackendKind::Mock => {
            let rule = MockRule::parse(&cfg.mock_rule)
                .ok_or_else(|| ConfigError(vec![format!("unknown mock_rule {:?}", cfg.mock_rule)]))?;
            let mut mock = MockBackend::new(mock_name, rule).with_logprob_rule(
                LogprobRule::Salted {
                    salt: cfg.mock_logprob_salt,
                },
            );
            if cfg.mock_delay_ms > 0 {
                mock = mock.with_fixed_delay(cfg.mock_delay_ms);
            }
            if cfg.supports_logprobs == Some(false) {
                mock = mock.without_logprobs();
            }
            Ok(Arc::new(mock))
        }
        BackendKind::Http => {
            let base_url = cfg.base_url.clone().ok_or_else(|| {
                ConfigError(vec!["backend.base_url required for http".to_string()])
            })?;
            let api_key = match &cfg.api_key_env {
                Some(env_name) => Some(std::env::var(env_name).map_err(|_| {
                    ConfigError(vec![format!("environment variable {env_name:?} not set")])
                })?),
                None => None,
            };
            let http = HttpBackend::new(HttpConfig {
                base_url,
                model: cfg.model.clone(),
                api_key,
                timeout_s: cfg.timeout_s,
                retry_base_ms: cfg.retry_base_ms,
                max_attempts: crate::backend::http::DEFAULT_MAX_ATTEMPTS,
                supports_logprobs: cfg.supports_logprobs.unwrap_or(false),
                templates,
            })
            .map_err(|e| ConfigError(vec![e.to_string()]))?;
            Ok(Arc::new(http))
        }
    }
}
