use std::collections::BTreeMap;

use serde::Serialize;

use super::{mean, ratio, Groups};
use crate::answer::equivalent;
use crate::types::{RevisionChain, RevisionStep};

fn correct(step: &RevisionStep) -> bool {
    step.grade_after_step.is_correct()
}

fn max_step(chains: &[RevisionChain]) -> u32 {
    chains.iter().map(|c| c.revisions()).max().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequentialCoverage {
    pub budget: u64,
    pub coverage: f64,
    pub n_chains: usize,
}

/// Fraction of chains with a correct step among those whose cumulative
/// token count is within each budget.
pub fn coverage_sequential(chains: &[RevisionChain], budgets: &[u64]) -> Vec<SequentialCoverage> {
    budgets
        .iter()
        .map(|&budget| {
            let covered = chains
                .iter()
                .filter(|c| {
                    c.steps
                        .iter()
                        .take_while(|s| s.cumulative_token_count <= budget)
                        .any(correct)
                })
                .count();
            SequentialCoverage {
                budget,
                coverage: ratio(covered, chains.len()),
                n_chains: chains.len(),
            }
        })
        .collect()
}

/// Grade movement at one step. Rates are conditioned on the reference
/// grade: step 0 for cumulative stats, step `s - 1` for per-step stats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionStats {
    pub step: u32,
    pub rate_wrong_to_correct: f64,
    pub rate_correct_to_wrong: f64,
    pub rate_stick_wrong: f64,
    pub rate_stick_correct: f64,
    pub n_chains: usize,
    pub n_wrong: usize,
    pub n_correct: usize,
}

/// One-step transition rates pooled over every step of every chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledRates {
    pub wrong_to_correct: f64,
    pub correct_to_wrong: f64,
    pub n_wrong_steps: usize,
    pub n_correct_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionReport {
    pub cumulative: Vec<TransitionStats>,
    pub per_step: Vec<TransitionStats>,
    pub pooled: PooledRates,
    /// Initially wrong chains whose final answer equals the initial one.
    pub stick_rate: Option<f64>,
    pub n_initially_wrong: usize,
    pub n_chains: usize,
}

fn stats(step: u32, pairs: impl Iterator<Item = (bool, bool)>) -> TransitionStats {
    let (mut w, mut wc, mut c, mut cw) = (0, 0, 0, 0);
    for (before, after) in pairs {
        if before {
            c += 1;
            cw += usize::from(!after);
        } else {
            w += 1;
            wc += usize::from(after);
        }
    }
    TransitionStats {
        step,
        rate_wrong_to_correct: ratio(wc, w),
        rate_correct_to_wrong: ratio(cw, c),
        rate_stick_wrong: if w == 0 { 0.0 } else { 1.0 - ratio(wc, w) },
        rate_stick_correct: if c == 0 { 0.0 } else { 1.0 - ratio(cw, c) },
        n_chains: w + c,
        n_wrong: w,
        n_correct: c,
    }
}

/// Cumulative and per-step grade transitions, pooled one-step rates and
/// the stick-with-wrong rate.
pub fn transition_rates(chains: &[RevisionChain]) -> TransitionReport {
    let last = max_step(chains);
    let at = |c: &RevisionChain, s: u32| c.steps.get(s as usize).map(correct);
    let mut cumulative = Vec::with_capacity(last as usize);
    let mut per_step = Vec::with_capacity(last as usize);
    for s in 1..=last {
        cumulative.push(stats(
            s,
            chains
                .iter()
                .filter_map(|c| Some((correct(c.initial()), at(c, s)?))),
        ));
        per_step.push(stats(
            s,
            chains
                .iter()
                .filter_map(|c| Some((at(c, s - 1)?, at(c, s)?))),
        ));
    }
    let pooled = stats(
        0,
        chains
            .iter()
            .flat_map(|c| c.steps.windows(2).map(|w| (correct(&w[0]), correct(&w[1])))),
    );
    let initially_wrong: Vec<&RevisionChain> =
        chains.iter().filter(|c| !correct(c.initial())).collect();
    let stuck = initially_wrong
        .iter()
        .filter(
            |c| match (&c.initial().answer_after_step, &c.last().answer_after_step) {
                (Some(a), Some(b)) => equivalent(a, b),
                (None, None) => true,
                _ => false,
            },
        )
        .count();
    TransitionReport {
        cumulative,
        per_step,
        pooled: PooledRates {
            wrong_to_correct: pooled.rate_wrong_to_correct,
            correct_to_wrong: pooled.rate_correct_to_wrong,
            n_wrong_steps: pooled.n_wrong,
            n_correct_steps: pooled.n_correct,
        },
        stick_rate: (!initially_wrong.is_empty()).then(|| ratio(stuck, initially_wrong.len())),
        n_initially_wrong: initially_wrong.len(),
        n_chains: chains.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepAccuracy {
    pub step: u32,
    pub accuracy: f64,
    pub n_chains: usize,
    pub mean_cumulative_tokens: f64,
}

/// Accuracy and mean cumulative length at every step, over chains that
/// reached it.
pub fn accuracy_by_step(chains: &[RevisionChain]) -> Vec<StepAccuracy> {
    (0..=max_step(chains))
        .map(|s| {
            let steps: Vec<&RevisionStep> = chains
                .iter()
                .filter_map(|c| c.steps.get(s as usize))
                .collect();
            StepAccuracy {
                step: s,
                accuracy: ratio(steps.iter().filter(|s| correct(s)).count(), steps.len()),
                n_chains: steps.len(),
                mean_cumulative_tokens: mean(steps.iter().map(|s| s.cumulative_token_count as f64)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialRank {
    Shortest,
    Longest,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRevisionRow {
    pub group: InitialRank,
    pub step: u32,
    pub accuracy: f64,
    pub rate_wrong_to_correct: f64,
    pub rate_correct_to_wrong: f64,
    pub n_chains: usize,
}

/// Revision curves for chains grown from each question's shortest and
/// longest sample. Questions with a single sample are skipped.
pub fn rank_filtered_revision(chains: &[RevisionChain], groups: &Groups) -> Vec<RankRevisionRow> {
    let mut rank_of: BTreeMap<(&str, u32), InitialRank> = BTreeMap::new();
    for (id, records) in groups {
        if records.len() < 2 {
            continue;
        }
        let mut order: Vec<_> = records.iter().collect();
        order.sort_by_key(|r| r.token_count);
        rank_of.insert((id, order[0].sample_index), InitialRank::Shortest);
        rank_of.insert(
            (id, order[order.len() - 1].sample_index),
            InitialRank::Longest,
        );
    }
    let mut split: BTreeMap<InitialRank, Vec<RevisionChain>> = BTreeMap::new();
    for chain in chains {
        if let Some(rank) = rank_of.get(&(chain.question_id.as_str(), chain.sample_index)) {
            split.entry(*rank).or_default().push(chain.clone());
        }
    }
    let mut rows = Vec::new();
    for (group, members) in split {
        let transitions = transition_rates(&members);
        for acc in accuracy_by_step(&members) {
            let t = (acc.step > 0).then(|| &transitions.cumulative[acc.step as usize - 1]);
            rows.push(RankRevisionRow {
                group,
                step: acc.step,
                accuracy: acc.accuracy,
                rate_wrong_to_correct: t.map_or(0.0, |t| t.rate_wrong_to_correct),
                rate_correct_to_wrong: t.map_or(0.0, |t| t.rate_correct_to_wrong),
                n_chains: acc.n_chains,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::initial_chain;
    use crate::types::{GenerationRecord, Grade, Question};

    fn chain(q: &Question, answers: &[&str], step_tokens: u64) -> RevisionChain {
        let first = GenerationRecord::new(
            q,
            0,
            format!("\\boxed{{{}}}", answers[0]),
            Some(step_tokens),
            false,
            0,
        );
        let mut c = initial_chain(&first);
        for (i, a) in answers.iter().enumerate().skip(1) {
            let (grade, answer) = crate::answer::grade(&format!("\\boxed{{{a}}}"), q);
            c.steps.push(RevisionStep {
                step_index: i as u32,
                appended_text: String::new(),
                chosen_prompt: "Wait".into(),
                prompt_fallback: false,
                cumulative_token_count: step_tokens * (i as u64 + 1),
                answer_after_step: answer,
                grade_after_step: grade,
            });
        }
        c
    }

    #[test]
    fn wrong_to_correct_is_cumulative() {
        let q = Question::math("a", "", "1");
        let chains = vec![chain(&q, &["2", "1", "1"], 10)];
        let r = transition_rates(&chains);
        assert_eq!(r.cumulative[0].rate_wrong_to_correct, 1.0);
        assert_eq!(r.cumulative[1].rate_wrong_to_correct, 1.0);
        assert_eq!(r.per_step[1].n_correct, 1);
        assert_eq!(r.per_step[1].rate_correct_to_wrong, 0.0);
        assert_eq!(r.stick_rate, Some(0.0));
        assert_eq!(r.pooled.wrong_to_correct, 1.0);
        assert_eq!(r.pooled.n_correct_steps, 1);
    }

    #[test]
    fn identical_wrong_answers_stick() {
        let q = Question::math("a", "", "1");
        let r = transition_rates(&[chain(&q, &["2", "2", "2"], 10)]);
        assert_eq!(r.stick_rate, Some(1.0));
        assert_eq!(r.cumulative[1].rate_stick_wrong, 1.0);
    }

    #[test]
    fn sequential_coverage_budgets() {
        let q = Question::math("a", "", "1");
        let chains = vec![chain(&q, &["2", "1"], 10), chain(&q, &["2", "3"], 10)];
        let got: Vec<f64> = coverage_sequential(&chains, &[5, 10, 20, u64::MAX])
            .iter()
            .map(|c| c.coverage)
            .collect();
        assert_eq!(got, vec![0.0, 0.0, 0.5, 0.5]);
        let acc = accuracy_by_step(&chains);
        assert_eq!(acc[1].accuracy, 0.5);
        assert_eq!(acc[1].mean_cumulative_tokens, 20.0);
        assert_eq!(chains[0].steps[1].grade_after_step, Grade::Correct);
    }
}
