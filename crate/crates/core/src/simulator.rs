//! Two-state Markov model of sampling and revision.
//!
//! Each synthetic question has a gold symbol in `1..=answer_alphabet_size`.
//! A sample is correct with probability `p_initial_correct`; its length is
//! log-normal with the grade's mean, and its text carries `marker_rate`
//! "Wait" lines per token followed by a boxed answer. A revision step repeats
//! the previous answer with probability `stick_bias`, otherwise flips the
//! grade with `p_wrong_to_correct` / `p_correct_to_wrong`; a wrong answer
//! that does not flip is redrawn among the wrong symbols.
//!
//! [`analytic_accuracy`] gives the exact expected accuracy after `s` steps.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::answer;
use crate::config::RunConfig;
use crate::seed;
use crate::store::{ChainStepLine, Manifest, RunSource, RunStore, StoreError};
use crate::types::{GenerationRecord, Question, RevisionChain, RevisionStep};

pub const SIMULATOR_ENDPOINT: &str = "simulator";
const REVISION_PROMPT: &str = "Wait";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub p_initial_correct: f64,
    pub p_wrong_to_correct: f64,
    pub p_correct_to_wrong: f64,
    /// Probability that a revision repeats the previous answer verbatim.
    pub stick_bias: f64,
    pub length_mean_correct: f64,
    pub length_mean_incorrect: f64,
    /// Standard deviation of log length.
    pub length_dispersion: f64,
    pub step_length_increment_mean: f64,
    pub answer_alphabet_size: u32,
    /// Markers per token.
    pub marker_rate: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            p_initial_correct: 0.45,
            p_wrong_to_correct: 0.05,
            p_correct_to_wrong: 0.10,
            stick_bias: 0.0,
            length_mean_correct: 4000.0,
            length_mean_incorrect: 8000.0,
            length_dispersion: 0.03,
            step_length_increment_mean: 300.0,
            answer_alphabet_size: 4,
            marker_rate: 1.0 / 300.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, p) in [
            ("p_initial_correct", self.p_initial_correct),
            ("p_wrong_to_correct", self.p_wrong_to_correct),
            ("p_correct_to_wrong", self.p_correct_to_wrong),
            ("stick_bias", self.stick_bias),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name} must be in [0, 1]"));
            }
        }
        for (name, v) in [
            ("length_mean_correct", self.length_mean_correct),
            ("length_mean_incorrect", self.length_mean_incorrect),
            ("length_dispersion", self.length_dispersion),
            (
                "step_length_increment_mean",
                self.step_length_increment_mean,
            ),
        ] {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.answer_alphabet_size < 2 {
            out.push("answer_alphabet_size must be ≥ 2".to_string());
        }
        if !(self.marker_rate.is_finite() && self.marker_rate >= 0.0) {
            out.push("marker_rate must be ≥ 0".to_string());
        }
        out
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("params serialize")
    }

    fn lengths(&self, mean: f64) -> LogNormal<f64> {
        let sigma = self.length_dispersion;
        LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma).expect("validated parameters")
    }
}

/// Questions and records of a synthetic corpus, in generation order.
#[derive(Debug, Clone)]
pub struct SimCorpus {
    pub questions: Vec<Question>,
    pub records: Vec<GenerationRecord>,
}

pub fn question_id(index: usize) -> String {
    format!("sim-{index:06}")
}

fn wrong_symbol(rng: &mut ChaCha8Rng, gold: u32, alphabet: u32) -> u32 {
    let pick = rng.random_range(1..alphabet);
    if pick >= gold {
        pick + 1
    } else {
        pick
    }
}

fn draw_length(rng: &mut ChaCha8Rng, dist: &LogNormal<f64>) -> u64 {
    (dist.sample(rng).round() as u64).max(1)
}

fn marker_lines(text: &mut String, tokens: u64, rate: f64) {
    let n = (tokens as f64 * rate).round() as u64;
    for i in 1..=n {
        let _ = writeln!(text, "Wait, re-checking part {i}.");
    }
}

fn solution_text(answer: u32, tokens: u64, rate: f64) -> String {
    let mut text = String::from("Let me work through this.\n");
    marker_lines(&mut text, tokens, rate);
    let _ = write!(text, "So the final answer is \\boxed{{{answer}}}.");
    text
}

fn gold_of(question: &Question) -> u32 {
    question
        .gold_answer
        .parse()
        .expect("simulated questions have integer gold answers")
}

/// Generates `n_questions` questions with `k` samples each.
pub fn simulate_corpus(params: &SimParams, n_questions: usize, k: u32, seed: u64) -> SimCorpus {
    let correct_len = params.lengths(params.length_mean_correct);
    let incorrect_len = params.lengths(params.length_mean_incorrect);
    let mut questions = Vec::with_capacity(n_questions);
    let mut records = Vec::with_capacity(n_questions * k as usize);
    for q in 0..n_questions {
        let id = question_id(q);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "sim-question", &[q as u64]));
        let gold = rng.random_range(1..=params.answer_alphabet_size);
        let question = Question::math(&id, &format!("Synthetic question {q}."), &gold.to_string());
        for i in 0..k {
            let correct = rng.random_bool(params.p_initial_correct);
            let (answer, tokens) = if correct {
                (gold, draw_length(&mut rng, &correct_len))
            } else {
                let wrong = wrong_symbol(&mut rng, gold, params.answer_alphabet_size);
                (wrong, draw_length(&mut rng, &incorrect_len))
            };
            let text = solution_text(answer, tokens, params.marker_rate);
            records.push(GenerationRecord::new(
                &question,
                i,
                text,
                Some(tokens),
                false,
                seed::sample_seed(seed, &id, i),
            ));
        }
        questions.push(question);
    }
    SimCorpus { questions, records }
}

/// Seed of the revision chain grown from one sample.
pub fn chain_seed(run_seed: u64, question_id: &str, sample_index: u32) -> u64 {
    seed::derive(
        run_seed,
        &format!("sim-chain:{question_id}"),
        &[u64::from(sample_index)],
    )
}

/// Grows a revision chain of `steps` steps from `initial`.
pub fn simulate_chain(
    params: &SimParams,
    steps: u32,
    question: &Question,
    initial: &GenerationRecord,
    seed: u64,
) -> RevisionChain {
    let mut chain = RevisionChain {
        question_id: initial.question_id.clone(),
        sample_index: initial.sample_index,
        steps: vec![RevisionStep::initial(initial)],
        truncated: false,
    };
    extend_chain(params, &mut chain, steps, question, seed);
    chain
}

/// Appends steps until the chain has `steps` revisions. Each step draws
/// from its own seed, so extending a chain matches growing it in one go.
pub fn extend_chain(
    params: &SimParams,
    chain: &mut RevisionChain,
    steps: u32,
    question: &Question,
    seed: u64,
) {
    let gold = gold_of(question);
    let increments = params.lengths(params.step_length_increment_mean);
    let mut current = chain
        .last()
        .answer_after_step
        .as_ref()
        .and_then(|a| a.raw.parse::<u32>().ok())
        .unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "sim-start", &[]));
            wrong_symbol(&mut rng, gold, params.answer_alphabet_size)
        });
    for s in chain.revisions() + 1..=steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "sim-step", &[u64::from(s)]));
        if !rng.random_bool(params.stick_bias) {
            let correct = current == gold;
            current = if correct {
                if rng.random_bool(params.p_correct_to_wrong) {
                    wrong_symbol(&mut rng, gold, params.answer_alphabet_size)
                } else {
                    gold
                }
            } else if rng.random_bool(params.p_wrong_to_correct) {
                gold
            } else {
                wrong_symbol(&mut rng, gold, params.answer_alphabet_size)
            };
        }
        let tokens = draw_length(&mut rng, &increments);
        let mut text = String::from(", let me reconsider.\n");
        marker_lines(&mut text, tokens, params.marker_rate);
        let _ = write!(text, "The answer is \\boxed{{{current}}}.");
        let (grade, answer) = answer::grade(&text, question);
        let cumulative = chain.last().cumulative_token_count + tokens;
        chain.steps.push(RevisionStep {
            step_index: s,
            appended_text: text,
            chosen_prompt: REVISION_PROMPT.to_string(),
            prompt_fallback: false,
            cumulative_token_count: cumulative,
            answer_after_step: answer,
            grade_after_step: grade,
        });
    }
}

/// Expected accuracy after `steps` revisions, starting from
/// `p_initial_correct`.
pub fn analytic_accuracy(params: &SimParams, steps: u32) -> f64 {
    analytic_accuracy_from(params, params.p_initial_correct, steps)
}

/// `a_s = π + (a_0 − π)·λ^s` with `π = p_wc / (p_wc + p_cw)` and per-step
/// contraction `λ = 1 − (1 − stick)(p_wc + p_cw)`.
pub fn analytic_accuracy_from(params: &SimParams, a0: f64, steps: u32) -> f64 {
    let flow = params.p_wrong_to_correct + params.p_correct_to_wrong;
    if flow == 0.0 {
        return a0;
    }
    let pi = params.p_wrong_to_correct / flow;
    let lambda = 1.0 - (1.0 - params.stick_bias) * flow;
    pi + (a0 - pi) * lambda.powi(steps as i32)
}

/// Config recorded in a simulated run's manifest.
pub fn simulated_config(k: u32, steps: u32, seed: u64) -> RunConfig {
    RunConfig {
        samples_per_question: k,
        revision_steps: steps,
        seed,
        provider_endpoint: SIMULATOR_ENDPOINT.to_string(),
        model_name: SIMULATOR_ENDPOINT.to_string(),
        ..RunConfig::default()
    }
}

/// Simulates a corpus (and chains from every sample when `steps > 0`) and
/// writes it as a sealed run.
pub fn write_simulated_run(
    store: &RunStore,
    run_id: &str,
    params: &SimParams,
    n_questions: usize,
    k: u32,
    steps: u32,
    seed: u64,
) -> Result<SimCorpus, StoreError> {
    let corpus = simulate_corpus(params, n_questions, k, seed);
    let manifest = Manifest::new(
        run_id,
        simulated_config(k, steps, seed),
        RunSource::Simulated {
            params: params.clone(),
            seed,
        },
    );
    let mut writer = store.create(manifest, &corpus.questions)?;
    for record in &corpus.records {
        writer.append_record(record)?;
    }
    if steps > 0 {
        let k = k as usize;
        for (q, question) in corpus.questions.iter().enumerate() {
            for record in &corpus.records[q * k..(q + 1) * k] {
                let chain = simulate_chain(
                    params,
                    steps,
                    question,
                    record,
                    chain_seed(seed, &question.id, record.sample_index),
                );
                for step in chain.steps {
                    writer.append_chain_step(&ChainStepLine {
                        question_id: question.id.clone(),
                        sample_index: record.sample_index,
                        step,
                        chain_truncated: false,
                    })?;
                }
            }
        }
    }
    writer.seal()?;
    Ok(corpus)
}

#[derive(Debug, thiserror::Error)]
pub enum SimRunError {
    #[error("run {0:?} was not produced by the simulator")]
    NotSimulated(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Grows (or extends) a chain of `steps` revisions from every sample of a
/// simulated run, using the run's own parameters and seed. Returns the
/// number of chain lines appended, counting step 0 of new chains.
pub fn revise_simulated_run(
    store: &RunStore,
    run_id: &str,
    steps: u32,
) -> Result<usize, SimRunError> {
    let run = store.load(run_id)?;
    let RunSource::Simulated { params, seed } = &run.manifest.source else {
        return Err(SimRunError::NotSimulated(run_id.to_string()));
    };
    let questions = run.question_map();
    let mut existing: std::collections::BTreeMap<(&str, u32), &RevisionChain> = run
        .chains
        .iter()
        .map(|c| ((c.question_id.as_str(), c.sample_index), c))
        .collect();
    let mut lines = Vec::new();
    for record in &run.records {
        let question = questions[record.question_id.as_str()];
        let chain_seed = chain_seed(*seed, &question.id, record.sample_index);
        let (chain, stored) =
            match existing.remove(&(record.question_id.as_str(), record.sample_index)) {
                Some(c) => {
                    let mut c = c.clone();
                    let stored = c.steps.len();
                    extend_chain(params, &mut c, steps, question, chain_seed);
                    (c, stored)
                }
                None => (
                    simulate_chain(params, steps, question, record, chain_seed),
                    0,
                ),
            };
        lines.extend(
            chain
                .steps
                .into_iter()
                .skip(stored)
                .map(|step| ChainStepLine {
                    question_id: record.question_id.clone(),
                    sample_index: record.sample_index,
                    step,
                    chain_truncated: false,
                }),
        );
    }
    if lines.is_empty() && run.manifest.sealed {
        return Ok(0);
    }
    let mut writer = store.reopen(run_id)?;
    for line in &lines {
        writer.append_chain_step(line)?;
    }
    let mut config = writer.manifest().config.clone();
    config.revision_steps = config.revision_steps.max(steps);
    writer.set_config(config)?;
    writer.seal()?;
    Ok(lines.len())
}
