use serde::Serialize;

use super::{ratio, AnalysisError, Groups, QuestionMap};
use crate::aggregate::{last_answer, Aggregator};
use crate::answer::{equivalent, NormalizedAnswer};
use crate::types::{GenerationRecord, Question, RevisionChain};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coverage {
    pub k: usize,
    pub coverage: f64,
    pub n_questions: usize,
}

/// Fraction of questions whose first `k` samples include a correct one.
/// Questions with fewer than `k` samples are left out.
pub fn coverage_parallel(groups: &Groups, k: usize) -> Coverage {
    let eligible: Vec<&Vec<GenerationRecord>> = groups.values().filter(|r| r.len() >= k).collect();
    let covered = eligible
        .iter()
        .filter(|r| r[..k].iter().any(|r| r.is_correct()))
        .count();
    Coverage {
        k,
        coverage: ratio(covered, eligible.len()),
        n_questions: eligible.len(),
    }
}

/// How many samples of a question enter the aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "axis", content = "value")]
pub enum Budget {
    /// The first `n` samples.
    Solutions(usize),
    /// Samples in index order while their summed tokens stay within budget.
    Tokens(u64),
}

impl Budget {
    fn admit(self, records: &[GenerationRecord]) -> Option<&[GenerationRecord]> {
        match self {
            Budget::Solutions(n) => (records.len() >= n).then(|| &records[..n]),
            Budget::Tokens(b) => {
                let mut total = 0u64;
                let n = records
                    .iter()
                    .take_while(|r| {
                        total = total.saturating_add(r.token_count);
                        total <= b
                    })
                    .count();
                Some(&records[..n])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetPoint {
    pub method: String,
    #[serde(flatten)]
    pub budget: Budget,
    pub accuracy: f64,
    pub n_questions: usize,
    /// Mean number of samples admitted per question.
    pub mean_samples: f64,
}

fn is_gold(answer: &NormalizedAnswer, question: &Question) -> bool {
    question
        .normalized_gold()
        .is_ok_and(|gold| equivalent(answer, &gold))
}

/// Accuracy of `aggregator` at each budget. A question whose admitted
/// samples hold no answer counts as wrong.
pub fn accuracy_vs_budget(
    groups: &Groups,
    questions: &QuestionMap<'_>,
    aggregator: Aggregator,
    budgets: &[Budget],
) -> Result<Vec<BudgetPoint>, AnalysisError> {
    let mut out = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let (mut correct, mut used, mut admitted, mut any_votes) = (0usize, 0usize, 0usize, false);
        for (id, records) in groups {
            let Some(subset) = budget.admit(records) else {
                continue;
            };
            let question = questions
                .get(id.as_str())
                .ok_or_else(|| AnalysisError::UnknownQuestion(id.clone()))?;
            used += 1;
            admitted += subset.len();
            any_votes |= !subset.is_empty();
            if subset.is_empty() {
                continue;
            }
            if aggregator
                .select(subset)
                .is_ok_and(|a| is_gold(&a, question))
            {
                correct += 1;
            }
        }
        match budget {
            Budget::Tokens(b) if !any_votes => {
                return Err(AnalysisError::BudgetTooSmall { budget: b })
            }
            Budget::Solutions(n) if used == 0 => {
                return Err(AnalysisError::NoCompleteQuestions { k: n })
            }
            _ => {}
        }
        out.push(BudgetPoint {
            method: aggregator.short_name().to_string(),
            budget,
            accuracy: ratio(correct, used),
            n_questions: used,
            mean_samples: ratio(admitted, used),
        });
    }
    Ok(out)
}

/// Fraction of chains whose latest answer is correct.
pub fn last_revision_accuracy(
    chains: &[RevisionChain],
    questions: &QuestionMap<'_>,
) -> Result<f64, AnalysisError> {
    let mut correct = 0;
    for chain in chains {
        let question = questions
            .get(chain.question_id.as_str())
            .ok_or_else(|| AnalysisError::UnknownQuestion(chain.question_id.clone()))?;
        if last_answer(chain).is_some_and(|a| is_gold(a, question)) {
            correct += 1;
        }
    }
    Ok(ratio(correct, chains.len()))
}
