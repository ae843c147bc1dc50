//! Generation backends.
//!
//! A [`Provider`] turns a chat transcript into one [`Completion`] and can
//! report first-token log-probabilities for a set of candidate
//! continuations. Two implementations ship: [`OpenAiProvider`] speaks the
//! OpenAI-compatible chat-completions protocol, [`ReplayProvider`] serves
//! generations stored in an existing run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;

mod openai;
mod replay;

pub use openai::{OpenAiProvider, RetryPolicy, API_KEY_ENV};
pub use replay::ReplayProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Identifies a generation within a run: step 0 is the parallel sample,
/// later steps are revisions of it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestKey {
    pub question_id: String,
    pub sample_index: u32,
    pub step: u32,
}

impl fmt::Display for RequestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}#{}@{}",
            self.question_id, self.sample_index, self.step
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub key: RequestKey,
    /// A trailing assistant message is continued rather than answered.
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl CompletionRequest {
    pub fn continues_assistant(&self) -> bool {
        self.messages
            .last()
            .is_some_and(|m| m.role == Role::Assistant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    /// The request's token budget was exhausted.
    Length,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub completion_tokens: u64,
    /// `completion_tokens` came from the backend rather than an estimate.
    pub tokens_reported: bool,
    pub finish_reason: FinishReason,
    pub top_logprobs_first_token: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("{key}: endpoint unreachable after {attempts} attempts: {message}")]
    Unreachable {
        key: RequestKey,
        attempts: u32,
        message: String,
    },
    #[error("{key}: malformed response: {message}")]
    Malformed { key: RequestKey, message: String },
    #[error("{key}: authentication failed (HTTP {status})")]
    Authentication { key: RequestKey, status: u16 },
    #[error("{key}: request rejected (HTTP {status}): {body}")]
    Rejected {
        key: RequestKey,
        status: u16,
        body: String,
    },
    #[error("{key}: no recorded generation")]
    NoRecording { key: RequestKey },
    #[error("{key}: provider does not report log-probabilities")]
    LogprobsUnsupported { key: RequestKey },
    #[error("unsupported provider endpoint {0:?}")]
    UnsupportedEndpoint(String),
    #[error("cannot open replay source: {0}")]
    ReplaySource(String),
}

impl ProviderError {
    pub fn is_capability(&self) -> bool {
        matches!(self, ProviderError::LogprobsUnsupported { .. })
    }
}

pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError>;

    /// Log-probability that the next token begins each candidate. Candidates
    /// missing from the backend's top set map to negative infinity.
    fn next_token_logprobs(
        &self,
        request: &CompletionRequest,
        candidates: &[String],
    ) -> Result<BTreeMap<String, f64>, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        (**self).complete(request)
    }

    fn next_token_logprobs(
        &self,
        request: &CompletionRequest,
        candidates: &[String],
    ) -> Result<BTreeMap<String, f64>, ProviderError> {
        (**self).next_token_logprobs(request, candidates)
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        (**self).complete(request)
    }

    fn next_token_logprobs(
        &self,
        request: &CompletionRequest,
        candidates: &[String],
    ) -> Result<BTreeMap<String, f64>, ProviderError> {
        (**self).next_token_logprobs(request, candidates)
    }
}

/// Maps first-token log-probabilities onto whole candidate words.
///
/// A returned token (leading whitespace ignored) counts for a candidate when
/// it is a prefix of the candidate, so `"Alter"` stands in for
/// `"Alternatively"`. With several matching tokens the most likely one wins.
pub fn match_candidates(
    top: &BTreeMap<String, f64>,
    candidates: &[String],
) -> BTreeMap<String, f64> {
    candidates
        .iter()
        .map(|candidate| {
            let best = top
                .iter()
                .filter(|(token, _)| {
                    let token = token.trim_start();
                    !token.is_empty() && candidate.starts_with(token)
                })
                .map(|(_, lp)| *lp)
                .fold(f64::NEG_INFINITY, f64::max);
            (candidate.clone(), best)
        })
        .collect()
}

/// Counting semaphore capping in-flight requests.
#[derive(Debug)]
pub struct AdmissionGate {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    gate: &'a AdmissionGate,
}

impl AdmissionGate {
    pub fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("gate poisoned");
        while *available == 0 {
            available = self.freed.wait(available).expect("gate poisoned");
        }
        *available -= 1;
        Permit { gate: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.gate.available.lock().expect("gate poisoned") += 1;
        self.gate.freed.notify_one();
    }
}

/// Builds the provider named by `config.provider_endpoint`.
pub fn from_config(config: &RunConfig) -> Result<Box<dyn Provider>, ProviderError> {
    let endpoint = config.provider_endpoint.trim();
    if let Some(path) = endpoint.strip_prefix("replay:") {
        Ok(Box::new(ReplayProvider::open(Path::new(path))?))
    } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        Ok(Box::new(OpenAiProvider::from_config(config)))
    } else {
        Err(ProviderError::UnsupportedEndpoint(endpoint.to_string()))
    }
}
