//! Run configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AnswerKind, Question};

pub const DEFAULT_SYSTEM_PROMPT: &str =
    "You are a helpful and harmless assistant. You should think step-by-step.";
pub const DEFAULT_MATH_INSTRUCTION: &str =
    "Answer the question and enclose the final answer in boxed{}";
pub const DEFAULT_CHOICE_INSTRUCTION: &str = "Select the best answer from the following options. Output only the letter corresponding to the correct answer, enclosed in boxed{}.";

/// Sampling and revision parameters. Serialized as a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub temperature: f64,
    /// Token budget per generation request.
    pub max_tokens: u32,
    pub samples_per_question: u32,
    pub revision_steps: u32,
    pub seed: u64,
    /// `http(s)://host/v1` for a live endpoint, `replay:<run dir>` for replay.
    pub provider_endpoint: String,
    pub model_name: String,
    pub system_prompt: String,
    /// Instruction for free-form math questions.
    pub instruction: String,
    /// Instruction for multiple-choice questions.
    pub choice_instruction: String,
    pub revision_candidates: Vec<String>,
    pub concurrency_limit: u32,
    /// Cap on a chain's cumulative generated tokens; `None` means 4 × `max_tokens`.
    pub chain_token_ceiling: Option<u64>,
    pub max_retries: u32,
    pub request_timeout_secs: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 32768,
            samples_per_question: 5,
            revision_steps: 0,
            seed: 0,
            provider_endpoint: "http://localhost:30000/v1".into(),
            model_name: "default".into(),
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
            instruction: DEFAULT_MATH_INSTRUCTION.into(),
            choice_instruction: DEFAULT_CHOICE_INSTRUCTION.into(),
            revision_candidates: vec!["Wait".into(), "Alternatively".into()],
            concurrency_limit: 8,
            chain_token_ceiling: None,
            max_retries: 3,
            request_timeout_secs: 600,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
}

impl RunConfig {
    /// Every violated invariant, each naming its field. Empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=2.0).contains(&self.temperature) {
            out.push("temperature must be in [0, 2]".to_string());
        }
        if self.max_tokens < 1 {
            out.push("max_tokens must be ≥ 1".to_string());
        }
        if self.samples_per_question < 1 {
            out.push("samples_per_question must be ≥ 1".to_string());
        }
        if i64::try_from(self.seed).is_err() {
            out.push("seed must be ≤ 9223372036854775807".to_string());
        }
        if self.concurrency_limit < 1 {
            out.push("concurrency_limit must be ≥ 1".to_string());
        }
        if self.revision_candidates.is_empty() {
            out.push("revision_candidates must be non-empty".to_string());
        } else if self.revision_candidates.iter().any(|c| c.trim().is_empty()) {
            out.push("revision_candidates must not contain blank strings".to_string());
        }
        out
    }

    pub fn chain_ceiling(&self) -> u64 {
        self.chain_token_ceiling
            .unwrap_or(4 * u64::from(self.max_tokens))
    }

    pub fn instruction_for(&self, question: &Question) -> &str {
        match question.kind {
            AnswerKind::MathFreeform => &self.instruction,
            AnswerKind::MultipleChoice => &self.choice_instruction,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_settings_are_valid() {
        let cfg = RunConfig {
            temperature: 0.7,
            max_tokens: 32768,
            samples_per_question: 5,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_empty());
    }

    #[test]
    fn violations_name_fields() {
        let cfg = RunConfig {
            samples_per_question: 0,
            ..RunConfig::default()
        };
        assert_eq!(cfg.validate(), vec!["samples_per_question must be ≥ 1"]);
        let cfg = RunConfig {
            revision_candidates: vec![],
            ..RunConfig::default()
        };
        assert_eq!(
            cfg.validate(),
            vec!["revision_candidates must be non-empty"]
        );
        let cfg = RunConfig {
            temperature: f64::NAN,
            max_tokens: 0,
            concurrency_limit: 0,
            ..RunConfig::default()
        };
        let v = cfg.validate();
        assert_eq!(v.len(), 3);
        assert!(v[0].starts_with("temperature"));
        assert!(v[1].starts_with("max_tokens"));
        assert!(v[2].starts_with("concurrency_limit"));
    }

    #[test]
    fn ceiling_defaults_to_four_budgets() {
        let cfg = RunConfig {
            max_tokens: 100,
            ..RunConfig::default()
        };
        assert_eq!(cfg.chain_ceiling(), 400);
    }

    #[test]
    fn partial_file_fills_defaults_and_rejects_unknown_keys() {
        let cfg = RunConfig::from_toml("samples_per_question = 16\n").unwrap();
        assert_eq!(cfg.samples_per_question, 16);
        assert_eq!(cfg.system_prompt, DEFAULT_SYSTEM_PROMPT);
        assert!(RunConfig::from_toml("k = 3").is_err());
    }

    proptest! {
        #[test]
        fn toml_round_trip(
            temperature in 0.0f64..2.0,
            max_tokens in 1u32..100_000,
            k in 1u32..64,
            seed in 0u64..=i64::MAX as u64,
            ceiling in proptest::option::of(1u64..1_000_000),
            prompt in "[ -~\n\t]{0,40}",
            candidates in proptest::collection::vec("[A-Za-z]{1,12}", 1..4),
        ) {
            let cfg = RunConfig {
                temperature,
                max_tokens,
                samples_per_question: k,
                seed,
                chain_token_ceiling: ceiling,
                system_prompt: prompt,
                revision_candidates: candidates,
                ..RunConfig::default()
            };
            let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
