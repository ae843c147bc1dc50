//! OpenAI-compatible chat-completions client.

use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    match_candidates, AdmissionGate, Completion, CompletionRequest, FinishReason, Provider,
    ProviderError, RequestKey,
};
use crate::config::RunConfig;
use crate::types::approximate_tokens;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "TTS_API_KEY";

/// How many alternatives to ask for when probing the next token.
const TOP_LOGPROBS: u32 = 20;

/// Waits `base * factor^i` before retry `i`; only transport failures and
/// HTTP 5xx are retried.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            factor: 4,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(retry)
    }
}

pub struct OpenAiProvider {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    gate: AdmissionGate,
}

enum Attempt {
    Retry(String),
    Fail(ProviderError),
}

impl OpenAiProvider {
    pub fn new(
        endpoint: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
        concurrency_limit: usize,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        let endpoint = endpoint.trim_end_matches('/');
        let url = if endpoint.ends_with("/chat/completions") {
            endpoint.to_string()
        } else {
            format!("{endpoint}/chat/completions")
        };
        Self {
            agent: ureq::Agent::new_with_config(config),
            url,
            model: model.to_string(),
            api_key,
            retry,
            gate: AdmissionGate::new(concurrency_limit),
        }
    }

    pub fn from_config(config: &RunConfig) -> Self {
        Self::new(
            &config.provider_endpoint,
            &config.model_name,
            std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            Duration::from_secs(config.request_timeout_secs),
            RetryPolicy {
                max_retries: config.max_retries,
                ..RetryPolicy::default()
            },
            config.concurrency_limit as usize,
        )
    }

    fn body(&self, request: &CompletionRequest, max_tokens: u32, logprobs: bool) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": max_tokens,
            "seed": request.seed,
        });
        if request.continues_assistant() {
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        if logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(TOP_LOGPROBS);
        }
        body
    }

    fn post(&self, key: &RequestKey, body: &Value) -> Result<ChatResponse, ProviderError> {
        let _permit = self.gate.acquire();
        let mut retries = 0;
        loop {
            match self.attempt(key, body) {
                Ok(response) => return Ok(response),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(message)) => {
                    if retries >= self.retry.max_retries {
                        return Err(ProviderError::Unreachable {
                            key: key.clone(),
                            attempts: retries + 1,
                            message,
                        });
                    }
                    let wait = self.retry.delay(retries);
                    log::warn!("{key}: {message}; retrying in {wait:?}");
                    thread::sleep(wait);
                    retries += 1;
                }
            }
        }
    }

    fn attempt(&self, key: &RequestKey, body: &Value) -> Result<ChatResponse, Attempt> {
        let mut req = self.agent.post(&self.url);
        if let Some(api_key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {api_key}"));
        }
        let mut response = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| {
                Attempt::Fail(ProviderError::Malformed {
                    key: key.clone(),
                    message: e.to_string(),
                })
            }),
            401 | 403 => Err(Attempt::Fail(ProviderError::Authentication {
                key: key.clone(),
                status,
            })),
            500..=599 => Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Attempt::Fail(ProviderError::Rejected {
                key: key.clone(),
                status,
                body: text.chars().take(500).collect(),
            })),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    completion_tokens: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

impl ChatResponse {
    fn into_completion(
        self,
        key: &RequestKey,
        max_tokens: u32,
    ) -> Result<Completion, ProviderError> {
        let malformed = |message: String| ProviderError::Malformed {
            key: key.clone(),
            message,
        };
        let reported = self.usage.and_then(|u| u.completion_tokens);
        let choice = self
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| malformed("no choices".into()))?;
        let text = choice.message.content.unwrap_or_default();
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop" | "eos" | "stop_sequence" | "end_turn") | None => FinishReason::Stop,
            Some(other) => return Err(malformed(format!("unknown finish_reason {other:?}"))),
        };
        let budget = u64::from(max_tokens);
        let (completion_tokens, tokens_reported) = match (reported, finish_reason) {
            (Some(n), _) if n > budget => {
                return Err(malformed(format!(
                    "completion_tokens {n} exceeds max_tokens {budget}"
                )))
            }
            (Some(n), FinishReason::Length) if n != budget => {
                return Err(malformed(format!(
                    "finish_reason length with {n} of {budget} tokens"
                )))
            }
            (Some(n), _) => (n, true),
            (None, FinishReason::Length) => (budget, true),
            (None, FinishReason::Stop) => (
                approximate_tokens(text.chars().count() as u64).min(budget),
                false,
            ),
        };
        let top_logprobs_first_token = match choice.logprobs.and_then(|l| l.content) {
            Some(tokens) => {
                let mut top = BTreeMap::new();
                if let Some(first) = tokens.into_iter().next() {
                    for entry in first.top_logprobs {
                        if entry.logprob.is_nan() || entry.logprob > 0.0 {
                            return Err(malformed(format!(
                                "log-probability {} for {:?} is not at most zero",
                                entry.logprob, entry.token
                            )));
                        }
                        let slot = top.entry(entry.token).or_insert(f64::NEG_INFINITY);
                        *slot = f64::max(*slot, entry.logprob);
                    }
                }
                Some(top)
            }
            None => None,
        };
        Ok(Completion {
            text,
            completion_tokens,
            tokens_reported,
            finish_reason,
            top_logprobs_first_token,
        })
    }
}

impl Provider for OpenAiProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        let body = self.body(request, request.max_tokens, false);
        self.post(&request.key, &body)?
            .into_completion(&request.key, request.max_tokens)
    }

    fn next_token_logprobs(
        &self,
        request: &CompletionRequest,
        candidates: &[String],
    ) -> Result<BTreeMap<String, f64>, ProviderError> {
        let body = self.body(request, 1, true);
        let completion = self
            .post(&request.key, &body)?
            .into_completion(&request.key, 1)?;
        let top = completion.top_logprobs_first_token.ok_or_else(|| {
            ProviderError::LogprobsUnsupported {
                key: request.key.clone(),
            }
        })?;
        Ok(match_candidates(&top, candidates))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> RequestKey {
        RequestKey {
            question_id: "q".into(),
            sample_index: 0,
            step: 0,
        }
    }

    fn parse(v: Value, max_tokens: u32) -> Result<Completion, ProviderError> {
        serde_json::from_value::<ChatResponse>(v)
            .unwrap()
            .into_completion(&key(), max_tokens)
    }

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(0), Duration::from_secs(1));
        assert_eq!(p.delay(1), Duration::from_secs(4));
        assert_eq!(p.delay(2), Duration::from_secs(16));
    }

    #[test]
    fn truncated_response() {
        let c = parse(
            json!({"choices":[{"message":{"content":"abc"},"finish_reason":"length"}],
                   "usage":{"completion_tokens":4096}}),
            4096,
        )
        .unwrap();
        assert_eq!(c.finish_reason, FinishReason::Length);
        assert_eq!(c.completion_tokens, 4096);
        let c = parse(
            json!({"choices":[{"message":{"content":"abc"},"finish_reason":"length"}]}),
            64,
        )
        .unwrap();
        assert_eq!(c.completion_tokens, 64);
    }

    #[test]
    fn malformed_payloads_are_errors() {
        let over = json!({"choices":[{"message":{"content":"a"},"finish_reason":"stop"}],
                          "usage":{"completion_tokens":10}});
        assert!(matches!(
            parse(over, 5),
            Err(ProviderError::Malformed { .. })
        ));
        let none = json!({"choices":[]});
        assert!(matches!(
            parse(none, 5),
            Err(ProviderError::Malformed { .. })
        ));
        let positive = json!({"choices":[{"message":{"content":"a"},"finish_reason":"length",
            "logprobs":{"content":[{"top_logprobs":[{"token":"W","logprob":0.5}]}]}}]});
        assert!(matches!(
            parse(positive, 1),
            Err(ProviderError::Malformed { .. })
        ));
        let odd = json!({"choices":[{"message":{"content":"a"},"finish_reason":"tool_calls"}]});
        assert!(matches!(
            parse(odd, 5),
            Err(ProviderError::Malformed { .. })
        ));
    }

    #[test]
    fn missing_usage_is_approximated() {
        let c = parse(
            json!({"choices":[{"message":{"content":"abcdefghi"},"finish_reason":"stop"}]}),
            100,
        )
        .unwrap();
        assert_eq!(c.completion_tokens, 3);
        assert!(!c.tokens_reported);
    }

    #[test]
    fn continuation_flags_in_body() {
        let p = OpenAiProvider::new(
            "http://x/v1/",
            "m",
            None,
            Duration::from_secs(1),
            RetryPolicy::default(),
            1,
        );
        assert_eq!(p.url, "http://x/v1/chat/completions");
        let mut req = CompletionRequest {
            key: key(),
            messages: vec![super::super::Message::user("hi")],
            temperature: 0.7,
            max_tokens: 10,
            seed: 3,
        };
        let body = p.body(&req, 10, false);
        assert!(body.get("continue_final_message").is_none());
        req.messages.push(super::super::Message::assistant("so"));
        let body = p.body(&req, 1, true);
        assert_eq!(body["continue_final_message"], json!(true));
        assert_eq!(body["top_logprobs"], json!(TOP_LOGPROBS));
        assert_eq!(body["messages"][1]["role"], json!("assistant"));
    }
}
