//! Parallel sampling, sequential self-revision and the resumable run driver.
//!
//! A revision step strips the final-answer portion of the accumulated
//! solution, appends the chosen continuation marker to the assistant's own
//! text and asks the provider to continue. Only the new continuation is
//! graded.
//!
//! [`run_benchmark`] schedules one unit per (question, sample): sample if
//! the record is missing, then extend its chain when revising. Workers run
//! under `concurrency_limit`; a single writer appends results in unit order,
//! so a run's files do not depend on thread timing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{self, last_boxed_span};
use crate::config::RunConfig;
use crate::provider::{
    CompletionRequest, FinishReason, Message, Provider, ProviderError, RequestKey,
};
use crate::seed::{sample_seed, step_seed};
use crate::store::{ChainStepLine, FailureEntry, Manifest, RunSource, RunStore, StoreError};
use crate::types::{
    approximate_tokens, dataset_to_jsonl, GenerationRecord, Question, RevisionChain, RevisionStep,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// `samples_per_question` independent samples.
    Parallel,
    /// Sample 0 only, revised `revision_steps` times.
    Sequential,
    /// Every sample, each revised.
    Both,
}

impl Mode {
    fn samples(self, config: &RunConfig) -> u32 {
        match self {
            Mode::Sequential => 1,
            Mode::Parallel | Mode::Both => config.samples_per_question,
        }
    }

    fn revises(self) -> bool {
        !matches!(self, Mode::Parallel)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Parallel => "parallel",
            Mode::Sequential => "sequential",
            Mode::Both => "both",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parallel" => Ok(Mode::Parallel),
            "sequential" => Ok(Mode::Sequential),
            "both" => Ok(Mode::Both),
            other => Err(format!(
                "unknown mode {other:?} (expected parallel, sequential or both)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("run {0:?} was created from a different dataset")]
    DatasetMismatch(String),
    #[error("run {run_id:?} was sampled with a different {field}")]
    ConfigMismatch { run_id: String, field: &'static str },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Chat transcript that opens every generation for `question`.
pub fn initial_messages(question: &Question, config: &RunConfig) -> Vec<Message> {
    let mut messages = Vec::with_capacity(3);
    if !config.system_prompt.is_empty() {
        messages.push(Message::system(config.system_prompt.clone()));
    }
    messages.push(Message::user(
        question.user_message(config.instruction_for(question)),
    ));
    messages
}

/// Draws and grades one sample.
pub fn sample_one<P: Provider + ?Sized>(
    provider: &P,
    question: &Question,
    sample_index: u32,
    config: &RunConfig,
) -> Result<GenerationRecord, ProviderError> {
    let seed = sample_seed(config.seed, &question.id, sample_index);
    let request = CompletionRequest {
        key: RequestKey {
            question_id: question.id.clone(),
            sample_index,
            step: 0,
        },
        messages: initial_messages(question, config),
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        seed,
    };
    let completion = provider.complete(&request)?;
    let reported = completion
        .tokens_reported
        .then_some(completion.completion_tokens);
    Ok(GenerationRecord::new(
        question,
        sample_index,
        completion.text,
        reported,
        completion.finish_reason == FinishReason::Length,
        seed,
    ))
}

/// Draws `samples_per_question` samples; failed samples are returned
/// alongside the successful records.
pub fn sample_parallel<P: Provider + ?Sized>(
    provider: &P,
    question: &Question,
    config: &RunConfig,
) -> (Vec<GenerationRecord>, Vec<(u32, ProviderError)>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for i in 0..config.samples_per_question {
        match sample_one(provider, question, i, config) {
            Ok(r) => records.push(r),
            Err(e) => failures.push((i, e)),
        }
    }
    (records, failures)
}

const THINK_END: &str = "</think>";

fn find_ascii_ci(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    let (h, n) = (haystack.as_bytes(), needle.as_bytes());
    (from..=h.len().checked_sub(n.len())?).find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

fn rfind_ascii_ci(haystack: &str, needle: &str) -> Option<usize> {
    let (h, n) = (haystack.as_bytes(), needle.as_bytes());
    (0..=h.len().checked_sub(n.len())?)
        .rev()
        .find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

/// Start of the sentence containing byte `pos`: just past the nearest
/// preceding newline, `</think>`, or `. ! ? …` followed by whitespace, with
/// leading whitespace skipped.
fn sentence_start(text: &str, pos: usize) -> usize {
    let head = &text[..pos];
    let mut start = head.rfind(THINK_END).map_or(0, |p| p + THINK_END.len());
    for (i, c) in head[start..].char_indices().rev() {
        let after = start + i + c.len_utf8();
        let boundary = match c {
            '\n' => true,
            '.' | '!' | '?' | '…' => head[after..].starts_with(char::is_whitespace),
            _ => false,
        };
        if boundary {
            start = after;
            break;
        }
    }
    start + head[start..].len() - head[start..].trim_start().len()
}

/// Removes the final-answer portion of a solution.
///
/// Cuts at the earliest of: the "final answer" phrase on the last line that
/// has it (case-insensitive), the first `</think>`, and the start of the
/// sentence holding the last balanced `\boxed{}`. Text without any of these
/// is returned whole.
pub fn strip_final_answer(text: &str) -> &str {
    let phrase = rfind_ascii_ci(text, "final answer").map(|last| {
        let line_start = text[..last].rfind('\n').map_or(0, |p| p + 1);
        find_ascii_ci(text, "final answer", line_start).unwrap_or(last)
    });
    let think = text.find(THINK_END);
    let boxed = last_boxed_span(text).map(|(start, _)| sentence_start(text, start));
    match [phrase, think, boxed].into_iter().flatten().min() {
        Some(cut) => &text[..cut],
        None => text,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptChoice {
    pub prompt: String,
    /// No unique most-likely candidate was available.
    pub fallback: bool,
}

/// Picks the continuation marker the model most likely produces next.
///
/// Ties, all-`-inf` scores and providers without log-probabilities fall back
/// to the first candidate. Other provider errors are returned.
pub fn choose_revision_prompt<P: Provider + ?Sized>(
    provider: &P,
    context: &CompletionRequest,
    candidates: &[String],
) -> Result<PromptChoice, ProviderError> {
    let fallback = PromptChoice {
        prompt: candidates[0].clone(),
        fallback: true,
    };
    if candidates.len() == 1 {
        return Ok(PromptChoice {
            fallback: false,
            ..fallback
        });
    }
    let scores = match provider.next_token_logprobs(context, candidates) {
        Ok(s) => s,
        Err(e) if e.is_capability() => {
            log::debug!("{e}; using {:?}", candidates[0]);
            return Ok(fallback);
        }
        Err(e) => return Err(e),
    };
    let score = |c: &String| scores.get(c).copied().unwrap_or(f64::NEG_INFINITY);
    let best = candidates
        .iter()
        .map(score)
        .fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<&String> = candidates.iter().filter(|c| score(c) == best).collect();
    if best == f64::NEG_INFINITY || winners.len() != 1 {
        return Ok(fallback);
    }
    Ok(PromptChoice {
        prompt: winners[0].clone(),
        fallback: false,
    })
}

/// Full assistant text after the chain's last step.
pub fn accumulated_text(chain: &RevisionChain) -> String {
    let mut acc = chain.initial().appended_text.clone();
    for step in &chain.steps[1..] {
        acc = format!(
            "{}\n\n{}{}",
            strip_final_answer(&acc).trim_end(),
            step.chosen_prompt,
            step.appended_text
        );
    }
    acc
}

/// Chain holding only the unrevised solution.
pub fn initial_chain(record: &GenerationRecord) -> RevisionChain {
    RevisionChain {
        question_id: record.question_id.clone(),
        sample_index: record.sample_index,
        steps: vec![RevisionStep::initial(record)],
        truncated: false,
    }
}

/// Extends `chain` until it has `steps` revisions.
///
/// Stops early, marking the chain truncated, once its cumulative tokens
/// reach the configured ceiling. On a provider error the chain keeps every
/// completed step.
pub fn revise<P: Provider + ?Sized>(
    provider: &P,
    question: &Question,
    chain: &mut RevisionChain,
    steps: u32,
    config: &RunConfig,
) -> Result<(), ProviderError> {
    let ceiling = config.chain_ceiling();
    let mut acc = accumulated_text(chain);
    while chain.revisions() < steps {
        let step = chain.revisions() + 1;
        let cumulative = chain.last().cumulative_token_count;
        let remaining = ceiling.saturating_sub(cumulative);
        if remaining == 0 {
            chain.truncated = true;
            break;
        }
        let base = format!("{}\n\n", strip_final_answer(&acc).trim_end());
        let mut messages = initial_messages(question, config);
        messages.push(Message::assistant(base.clone()));
        let mut request = CompletionRequest {
            key: RequestKey {
                question_id: question.id.clone(),
                sample_index: chain.sample_index,
                step,
            },
            messages,
            temperature: config.temperature,
            max_tokens: 1,
            seed: step_seed(config.seed, &question.id, chain.sample_index, step),
        };
        let choice = choose_revision_prompt(provider, &request, &config.revision_candidates)?;
        let prefix = base + &choice.prompt;
        if let Some(last) = request.messages.last_mut() {
            last.content = prefix.clone();
        }
        request.max_tokens = remaining.min(u64::from(config.max_tokens)) as u32;
        let completion = provider.complete(&request)?;
        let tokens = if completion.tokens_reported {
            completion.completion_tokens
        } else {
            approximate_tokens(completion.text.chars().count() as u64)
        };
        let (grade, answer) = answer::grade(&completion.text, question);
        acc = prefix + &completion.text;
        chain.steps.push(RevisionStep {
            step_index: step,
            appended_text: completion.text,
            chosen_prompt: choice.prompt,
            prompt_fallback: choice.fallback,
            cumulative_token_count: cumulative + tokens,
            answer_after_step: answer,
            grade_after_step: grade,
        });
    }
    Ok(())
}

/// Outcome of one [`run_benchmark`] invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub run_id: String,
    pub units: usize,
    pub pending_units: usize,
    pub new_records: usize,
    pub new_chain_steps: usize,
    pub failures: Vec<FailureEntry>,
    pub sealed: bool,
}

struct Unit<'a> {
    question: &'a Question,
    sample_index: u32,
    record: Option<GenerationRecord>,
    chain: Option<RevisionChain>,
}

#[derive(Default)]
struct UnitOutcome {
    record: Option<GenerationRecord>,
    steps: Vec<ChainStepLine>,
    failure: Option<FailureEntry>,
}

fn failure(question: &Question, sample_index: u32, step: u32, e: &ProviderError) -> FailureEntry {
    FailureEntry {
        question_id: question.id.clone(),
        sample_index,
        step,
        message: e.to_string(),
    }
}

fn run_unit<P: Provider + ?Sized>(
    provider: &P,
    unit: &Unit<'_>,
    config: &RunConfig,
    revise_steps: Option<u32>,
) -> UnitOutcome {
    let mut out = UnitOutcome::default();
    let record = match &unit.record {
        Some(r) => r.clone(),
        None => match sample_one(provider, unit.question, unit.sample_index, config) {
            Ok(r) => {
                out.record = Some(r.clone());
                r
            }
            Err(e) => {
                log::warn!("{e}");
                out.failure = Some(failure(unit.question, unit.sample_index, 0, &e));
                return out;
            }
        },
    };
    let Some(steps) = revise_steps else {
        return out;
    };
    let (mut chain, stored) = match &unit.chain {
        Some(c) => (c.clone(), c.steps.len()),
        None => (initial_chain(&record), 0),
    };
    if let Err(e) = revise(provider, unit.question, &mut chain, steps, config) {
        log::warn!("{e}");
        out.failure = Some(failure(
            unit.question,
            unit.sample_index,
            chain.revisions() + 1,
            &e,
        ));
    }
    let last = chain.steps.len();
    out.steps = chain.steps[stored..]
        .iter()
        .enumerate()
        .map(|(i, step)| ChainStepLine {
            question_id: chain.question_id.clone(),
            sample_index: chain.sample_index,
            step: step.clone(),
            chain_truncated: chain.truncated && stored + i + 1 == last,
        })
        .collect();
    out
}

const SAMPLING_FIELDS: &[&str] = &[
    "temperature",
    "max_tokens",
    "seed",
    "model_name",
    "system_prompt",
    "instruction",
    "choice_instruction",
    "revision_candidates",
    "chain_token_ceiling",
];

/// First generation-relevant field that differs between two configs.
fn sampling_mismatch(a: &RunConfig, b: &RunConfig) -> Option<&'static str> {
    let differs = [
        a.temperature != b.temperature,
        a.max_tokens != b.max_tokens,
        a.seed != b.seed,
        a.model_name != b.model_name,
        a.system_prompt != b.system_prompt,
        a.instruction != b.instruction,
        a.choice_instruction != b.choice_instruction,
        a.revision_candidates != b.revision_candidates,
        a.chain_token_ceiling != b.chain_token_ceiling,
    ];
    SAMPLING_FIELDS
        .iter()
        .zip(differs)
        .find_map(|(name, d)| d.then_some(*name))
}

/// Runs `mode` over `dataset` into run `run_id`, creating or resuming it.
///
/// Persisted results are never requested again. Failures are listed in the
/// manifest and leave the run unsealed; a later call retries them. A run
/// with nothing pending is left untouched.
pub fn run_benchmark<P: Provider + ?Sized>(
    store: &RunStore,
    run_id: &str,
    dataset: &[Question],
    config: &RunConfig,
    mode: Mode,
    provider: &P,
) -> Result<RunSummary, OrchestratorError> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(OrchestratorError::InvalidConfig(problems));
    }
    if dataset.is_empty() {
        return Err(OrchestratorError::EmptyDataset);
    }

    let mut records: BTreeMap<(String, u32), GenerationRecord> = BTreeMap::new();
    let mut chains: BTreeMap<(String, u32), RevisionChain> = BTreeMap::new();
    let existing = store.exists(run_id);
    if existing {
        let run = store.load(run_id)?;
        if dataset_to_jsonl(&run.questions) != dataset_to_jsonl(dataset) {
            return Err(OrchestratorError::DatasetMismatch(run_id.to_string()));
        }
        if let Some(field) = sampling_mismatch(&run.manifest.config, config) {
            return Err(OrchestratorError::ConfigMismatch {
                run_id: run_id.to_string(),
                field,
            });
        }
        for r in run.records {
            records.insert((r.question_id.clone(), r.sample_index), r);
        }
        for c in run.chains {
            chains.insert((c.question_id.clone(), c.sample_index), c);
        }
    }

    let steps = mode.revises().then_some(config.revision_steps);
    let mut units = Vec::new();
    for question in dataset {
        for i in 0..mode.samples(config) {
            let key = (question.id.clone(), i);
            units.push(Unit {
                question,
                sample_index: i,
                record: records.remove(&key),
                chain: chains.remove(&key),
            });
        }
    }
    let total_units = units.len();
    let pending: Vec<Unit<'_>> = units
        .into_iter()
        .filter(|u| {
            u.record.is_none()
                || steps.is_some_and(|s| {
                    u.chain
                        .as_ref()
                        .is_none_or(|c| c.revisions() < s && !c.truncated)
                })
        })
        .collect();

    let mut summary = RunSummary {
        run_id: run_id.to_string(),
        units: total_units,
        pending_units: pending.len(),
        new_records: 0,
        new_chain_steps: 0,
        failures: Vec::new(),
        sealed: false,
    };
    if pending.is_empty() && existing {
        summary.sealed = store.manifest(run_id)?.sealed;
        if summary.sealed {
            return Ok(summary);
        }
    }

    let mut writer = if existing {
        let mut w = store.reopen(run_id)?;
        let mut merged = w.manifest().config.clone();
        merged.samples_per_question = merged.samples_per_question.max(config.samples_per_question);
        merged.revision_steps = merged.revision_steps.max(config.revision_steps);
        merged.provider_endpoint = config.provider_endpoint.clone();
        w.set_config(merged)?;
        w
    } else {
        let source = RunSource::Provider {
            endpoint: config.provider_endpoint.clone(),
        };
        store.create(Manifest::new(run_id, config.clone(), source), dataset)?
    };

    let workers = (config.concurrency_limit as usize)
        .min(pending.len())
        .max(1);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, UnitOutcome)>();
    let mut write_result: Result<(), StoreError> = Ok(());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(unit) = pending.get(i) else { break };
                let outcome = run_unit(provider, unit, config, steps);
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffer: BTreeMap<usize, UnitOutcome> = BTreeMap::new();
        let mut expected = 0;
        for (i, outcome) in rx {
            buffer.insert(i, outcome);
            while let Some(outcome) = buffer.remove(&expected) {
                expected += 1;
                if write_result.is_err() {
                    continue;
                }
                write_result = persist(&mut writer, outcome, &mut summary);
                if expected % 100 == 0 {
                    log::info!("{run_id}: {expected}/{} units done", pending.len());
                }
            }
        }
    });
    write_result?;

    writer.sync()?;
    writer.set_failures(summary.failures.clone())?;
    if summary.failures.is_empty() {
        writer.seal()?;
        summary.sealed = true;
    }
    Ok(summary)
}

fn persist(
    writer: &mut crate::store::RunWriter,
    outcome: UnitOutcome,
    summary: &mut RunSummary,
) -> Result<(), StoreError> {
    if let Some(record) = &outcome.record {
        writer.append_record(record)?;
        summary.new_records += 1;
    }
    for line in &outcome.steps {
        writer.append_chain_step(line)?;
        summary.new_chain_steps += 1;
    }
    if let Some(f) = outcome.failure {
        summary.failures.push(f);
    }
    Ok(())
}
