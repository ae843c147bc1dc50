//! Final-answer selection over a set of sampled solutions.
//!
//! Solutions with equivalent answers form an [`AnswerCategory`] holding the
//! member count `c` and mean length `l` in tokens. Selection rules:
//!
//! * **Majority Vote**: largest `c`; ties go to the category seen first.
//! * **Shortest**: the answer of the shortest answered solution.
//! * **Shortest Majority Vote**: largest `c / ln(l)`; ties go to larger `c`,
//!   then smaller `l`, then first appearance.
//! * **Last revision**: the latest answered step of a revision chain.
//!
//! `l` is clamped to at least 2 so the logarithm is positive. The log base
//! only rescales every score by the same factor, so it never changes the
//! winner; [`shortest_majority_vote_in_base`] exists to check that.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{equivalent, NormalizedAnswer};
use crate::types::{GenerationRecord, RevisionChain};

/// Lower clamp on a category's mean length.
pub const MIN_MEAN_LENGTH: f64 = 2.0;

/// Relative window inside which two scores count as tied.
const SCORE_TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("question {question_id:?} has no votable answers")]
    NoVotableAnswers { question_id: String },
}

/// A voting cluster of mutually equivalent answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCategory {
    /// Answer of the first member.
    pub canonical_answer: NormalizedAnswer,
    pub count: usize,
    /// Mean member token count, clamped below at [`MIN_MEAN_LENGTH`].
    pub mean_length: f64,
    pub member_indices: Vec<u32>,
    /// Shortest Majority Vote score `count / ln(mean_length)`.
    pub score: f64,
}

/// Categories of one question plus the samples that had no answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Categories {
    pub categories: Vec<AnswerCategory>,
    pub no_answer: Vec<u32>,
}

/// Partitions the answered records into categories, in order of first
/// appearance. A record joins the first category whose every member is
/// equivalent to it, so members stay mutually equivalent even though the
/// decimal checker is not transitive.
pub fn build_categories(records: &[GenerationRecord]) -> Result<Categories, AggregateError> {
    struct Building<'a> {
        answers: Vec<&'a NormalizedAnswer>,
        indices: Vec<u32>,
        total_tokens: u64,
    }

    let mut building: Vec<Building<'_>> = Vec::new();
    let mut no_answer = Vec::new();
    for record in records {
        let Some(answer) = &record.extracted_answer else {
            no_answer.push(record.sample_index);
            continue;
        };
        let slot = building
            .iter_mut()
            .find(|b| b.answers.iter().all(|member| equivalent(member, answer)));
        match slot {
            Some(b) => {
                b.answers.push(answer);
                b.indices.push(record.sample_index);
                b.total_tokens += record.token_count;
            }
            None => building.push(Building {
                answers: vec![answer],
                indices: vec![record.sample_index],
                total_tokens: record.token_count,
            }),
        }
    }

    if building.is_empty() {
        return Err(AggregateError::NoVotableAnswers {
            question_id: records
                .first()
                .map(|r| r.question_id.clone())
                .unwrap_or_default(),
        });
    }

    let categories = building
        .into_iter()
        .map(|b| {
            let count = b.indices.len();
            let mean_length = (b.total_tokens as f64 / count as f64).max(MIN_MEAN_LENGTH);
            AnswerCategory {
                canonical_answer: b.answers[0].clone(),
                count,
                mean_length,
                member_indices: b.indices,
                score: smv_score(count, mean_length),
            }
        })
        .collect();
    Ok(Categories {
        categories,
        no_answer,
    })
}

/// `c / ln(l)` with `l` clamped to at least 2.
pub fn smv_score(count: usize, mean_length: f64) -> f64 {
    count as f64 / mean_length.max(MIN_MEAN_LENGTH).ln()
}

/// Index of the Majority Vote winner.
pub fn majority_vote_index(categories: &[AnswerCategory]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in categories.iter().enumerate() {
        if best.is_none_or(|b| c.count > categories[b].count) {
            best = Some(i);
        }
    }
    best
}

pub fn majority_vote(categories: &[AnswerCategory]) -> Option<&NormalizedAnswer> {
    majority_vote_index(categories).map(|i| &categories[i].canonical_answer)
}

/// Answer of the shortest answered record; ties go to the lower sample index.
pub fn shortest(records: &[GenerationRecord]) -> Option<&NormalizedAnswer> {
    records
        .iter()
        .filter(|r| r.extracted_answer.is_some())
        .min_by_key(|r| (r.token_count, r.sample_index))
        .and_then(|r| r.extracted_answer.as_ref())
}

/// Index of the Shortest Majority Vote winner, scoring with natural logs.
pub fn shortest_majority_vote_index(categories: &[AnswerCategory]) -> Option<usize> {
    smv_select(categories, |l| l.ln())
}

pub fn shortest_majority_vote(categories: &[AnswerCategory]) -> Option<&NormalizedAnswer> {
    shortest_majority_vote_index(categories).map(|i| &categories[i].canonical_answer)
}

/// Shortest Majority Vote with scores `c / log_base(l)`.
pub fn shortest_majority_vote_in_base(categories: &[AnswerCategory], base: f64) -> Option<usize> {
    assert!(base > 1.0, "log base must exceed 1");
    smv_select(categories, |l| l.log(base))
}

fn smv_select(categories: &[AnswerCategory], log: impl Fn(f64) -> f64) -> Option<usize> {
    let score = |c: &AnswerCategory| c.count as f64 / log(c.mean_length.max(MIN_MEAN_LENGTH));
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in categories.iter().enumerate() {
        let s = score(c);
        let replace = match best {
            None => true,
            Some((b, bs)) => {
                let incumbent = &categories[b];
                if (s - bs).abs() <= SCORE_TIE_EPSILON * s.abs().max(bs.abs()) {
                    c.count > incumbent.count
                        || (c.count == incumbent.count && c.mean_length < incumbent.mean_length)
                } else {
                    s > bs
                }
            }
        };
        if replace {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Answer of the highest step that produced one.
pub fn last_answer(chain: &RevisionChain) -> Option<&NormalizedAnswer> {
    chain
        .steps
        .iter()
        .rev()
        .find_map(|s| s.answer_after_step.as_ref())
}

/// Parallel-sampling selection strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    MajorityVote,
    Shortest,
    ShortestMajorityVote,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [
        Aggregator::MajorityVote,
        Aggregator::Shortest,
        Aggregator::ShortestMajorityVote,
    ];

    /// Short name used on the command line and in CSV output.
    pub fn short_name(self) -> &'static str {
        match self {
            Aggregator::MajorityVote => "mv",
            Aggregator::Shortest => "shortest",
            Aggregator::ShortestMajorityVote => "smv",
        }
    }

    /// Selected answer for one question's records.
    pub fn select(self, records: &[GenerationRecord]) -> Result<NormalizedAnswer, AggregateError> {
        let no_votes = || AggregateError::NoVotableAnswers {
            question_id: records
                .first()
                .map(|r| r.question_id.clone())
                .unwrap_or_default(),
        };
        match self {
            Aggregator::Shortest => shortest(records).cloned().ok_or_else(no_votes),
            Aggregator::MajorityVote => {
                let cats = build_categories(records)?;
                Ok(majority_vote(&cats.categories)
                    .ok_or_else(no_votes)?
                    .clone())
            }
            Aggregator::ShortestMajorityVote => {
                let cats = build_categories(records)?;
                Ok(shortest_majority_vote(&cats.categories)
                    .ok_or_else(no_votes)?
                    .clone())
            }
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Aggregator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mv" | "majority_vote" => Ok(Aggregator::MajorityVote),
            "shortest" => Ok(Aggregator::Shortest),
            "smv" | "shortest_majority_vote" => Ok(Aggregator::ShortestMajorityVote),
            other => Err(format!(
                "unknown aggregator {other:?} (expected mv, shortest, smv)"
            )),
        }
    }
}
