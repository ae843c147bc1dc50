use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::{Completion, CompletionRequest, FinishReason, Provider, ProviderError, RequestKey};
use crate::store::RunStore;

#[derive(Debug, Clone)]
struct Recorded {
    text: String,
    tokens: u64,
    tokens_reported: bool,
    truncated: bool,
    prompt: Option<(String, bool)>,
}

/// Serves the generations of a stored run, keyed by question, sample and
/// step. Revision-marker probes report the recorded choice with certainty,
/// or no log-probabilities when the recorded choice was a fallback.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    entries: HashMap<(String, u32, u32), Recorded>,
}

impl ReplayProvider {
    pub fn open(run_dir: &Path) -> Result<Self, ProviderError> {
        let fail = |m: String| ProviderError::ReplaySource(format!("{}: {m}", run_dir.display()));
        let run_id = run_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| fail("not a run directory".into()))?;
        let root = run_dir.parent().unwrap_or_else(|| Path::new("."));
        let run = RunStore::new(root)
            .load(run_id)
            .map_err(|e| fail(e.to_string()))?;

        let mut entries = HashMap::new();
        for r in run.records {
            entries.insert(
                (r.question_id, r.sample_index, 0),
                Recorded {
                    text: r.text,
                    tokens: r.token_count,
                    tokens_reported: !r.token_count_approximated,
                    truncated: r.truncated,
                    prompt: None,
                },
            );
        }
        for chain in run.chains {
            for pair in chain.steps.windows(2) {
                let (prev, step) = (&pair[0], &pair[1]);
                entries.insert(
                    (
                        chain.question_id.clone(),
                        chain.sample_index,
                        step.step_index,
                    ),
                    Recorded {
                        text: step.appended_text.clone(),
                        tokens: step.cumulative_token_count - prev.cumulative_token_count,
                        tokens_reported: true,
                        truncated: false,
                        prompt: Some((step.chosen_prompt.clone(), step.prompt_fallback)),
                    },
                );
            }
        }
        Ok(Self { entries })
    }

    fn lookup(&self, key: &RequestKey) -> Result<&Recorded, ProviderError> {
        self.entries
            .get(&(key.question_id.clone(), key.sample_index, key.step))
            .ok_or_else(|| ProviderError::NoRecording { key: key.clone() })
    }
}

impl Provider for ReplayProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, ProviderError> {
        let rec = self.lookup(&request.key)?;
        let hit_budget = rec.truncated || rec.tokens >= u64::from(request.max_tokens);
        Ok(Completion {
            text: rec.text.clone(),
            completion_tokens: rec.tokens,
            tokens_reported: rec.tokens_reported,
            finish_reason: if hit_budget {
                FinishReason::Length
            } else {
                FinishReason::Stop
            },
            top_logprobs_first_token: None,
        })
    }

    fn next_token_logprobs(
        &self,
        request: &CompletionRequest,
        candidates: &[String],
    ) -> Result<BTreeMap<String, f64>, ProviderError> {
        let rec = self.lookup(&request.key)?;
        match &rec.prompt {
            Some((chosen, false)) => Ok(candidates
                .iter()
                .map(|c| {
                    let lp = if c == chosen { 0.0 } else { f64::NEG_INFINITY };
                    (c.clone(), lp)
                })
                .collect()),
            _ => Err(ProviderError::LogprobsUnsupported {
                key: request.key.clone(),
            }),
        }
    }
}
