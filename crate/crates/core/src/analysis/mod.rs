//! Analyses over stored records and chains.
//!
//! Every function is pure over its inputs and reduces in a fixed order, so
//! reruns give identical numbers. A `no_answer` grade counts as incorrect
//! everywhere.

mod coverage;
mod lengths;
mod report;
mod revision;

pub use coverage::{
    accuracy_vs_budget, coverage_parallel, last_revision_accuracy, Budget, BudgetPoint, Coverage,
};
pub use lengths::{
    correct_incorrect_lengths, marker_counts, rank_groups, token_distribution, truncate_to_tokens,
    truncation_sweep, LengthContrast, LinearFit, MarkerCount, MarkerReport, RankGroupReport,
    RankGroupStats, TokenShare, TruncationPoint,
};
pub use report::{run_analysis, AnalysisKind, AnalysisOptions, AnalysisOutput};
pub use revision::{
    accuracy_by_step, coverage_sequential, rank_filtered_revision, transition_rates, InitialRank,
    PooledRates, RankRevisionRow, SequentialCoverage, StepAccuracy, TransitionReport,
    TransitionStats,
};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::types::{GenerationRecord, Question};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("no question has {k} records")]
    NoCompleteQuestions { k: usize },
    #[error("no question has both correct and incorrect records")]
    NoQualifyingQuestions,
    #[error("token budget {budget} is below every question's first sample")]
    BudgetTooSmall { budget: u64 },
    #[error("{0} requires revision chains; run `revise` first")]
    NoChains(&'static str),
    #[error("unknown question {0:?}")]
    UnknownQuestion(String),
    #[error("{0}")]
    InvalidOption(String),
}

/// Records per question id, each group in sample-index order.
pub type Groups = BTreeMap<String, Vec<GenerationRecord>>;

/// Question lookup by id.
pub type QuestionMap<'a> = BTreeMap<&'a str, &'a Question>;

pub fn question_map(questions: &[Question]) -> QuestionMap<'_> {
    questions.iter().map(|q| (q.id.as_str(), q)).collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
