use serde::Serialize;

use super::{mean, ratio, AnalysisError, Groups, QuestionMap};
use crate::answer;
use crate::types::GenerationRecord;

/// Statistics of the rank-`rank` solutions across questions, where rank 1
/// is each question's shortest solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankGroupStats {
    pub rank: usize,
    pub mean_length: f64,
    pub accuracy: f64,
    pub n_questions: usize,
    pub correct_solution_count: usize,
    /// Share of all correct-solution tokens that fall in this rank.
    pub correct_token_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankGroupReport {
    pub k: usize,
    pub groups: Vec<RankGroupStats>,
    /// Questions with fewer than `k` records.
    pub excluded: Vec<String>,
}

/// Groups each question's first `k` samples by length rank.
pub fn rank_groups(groups: &Groups, k: usize) -> Result<RankGroupReport, AnalysisError> {
    let mut lengths = vec![0.0; k];
    let mut correct = vec![0usize; k];
    let mut correct_tokens = vec![0u64; k];
    let mut used = 0usize;
    let mut excluded = Vec::new();
    for (id, records) in groups {
        if records.len() < k || k == 0 {
            excluded.push(id.clone());
            continue;
        }
        let mut sorted: Vec<&GenerationRecord> = records[..k].iter().collect();
        sorted.sort_by_key(|r| r.token_count);
        for (rank, r) in sorted.iter().enumerate() {
            lengths[rank] += r.token_count as f64;
            if r.is_correct() {
                correct[rank] += 1;
                correct_tokens[rank] += r.token_count;
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(AnalysisError::NoCompleteQuestions { k });
    }
    let total_correct_tokens: u64 = correct_tokens.iter().sum();
    let groups = (0..k)
        .map(|i| RankGroupStats {
            rank: i + 1,
            mean_length: lengths[i] / used as f64,
            accuracy: ratio(correct[i], used),
            n_questions: used,
            correct_solution_count: correct[i],
            correct_token_share: if total_correct_tokens == 0 {
                0.0
            } else {
                correct_tokens[i] as f64 / total_correct_tokens as f64
            },
        })
        .collect();
    Ok(RankGroupReport {
        k,
        groups,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenShare {
    pub rank: usize,
    pub correct_solution_count: usize,
    pub correct_token_share: f64,
}

/// Per-rank correct-solution counts and token shares.
pub fn token_distribution(report: &RankGroupReport) -> Vec<TokenShare> {
    report
        .groups
        .iter()
        .map(|g| TokenShare {
            rank: g.rank,
            correct_solution_count: g.correct_solution_count,
            correct_token_share: g.correct_token_share,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthContrast {
    pub mean_correct_len: f64,
    pub mean_incorrect_len: f64,
    pub n_questions: usize,
}

/// Mean correct and incorrect lengths, first within each question, then
/// across questions that have both kinds.
pub fn correct_incorrect_lengths(groups: &Groups) -> Result<LengthContrast, AnalysisError> {
    let mut correct_means = Vec::new();
    let mut incorrect_means = Vec::new();
    for records in groups.values() {
        let (good, bad): (Vec<&GenerationRecord>, Vec<&GenerationRecord>) =
            records.iter().partition(|r| r.is_correct());
        if good.is_empty() || bad.is_empty() {
            continue;
        }
        correct_means.push(mean(good.iter().map(|r| r.token_count as f64)));
        incorrect_means.push(mean(bad.iter().map(|r| r.token_count as f64)));
    }
    if correct_means.is_empty() {
        return Err(AnalysisError::NoQualifyingQuestions);
    }
    Ok(LengthContrast {
        mean_correct_len: mean(correct_means.iter().copied()),
        mean_incorrect_len: mean(incorrect_means.iter().copied()),
        n_questions: correct_means.len(),
    })
}

/// Keeps roughly the first `limit` tokens of a record's text, assuming
/// tokens are spread evenly over its characters.
pub fn truncate_to_tokens(record: &GenerationRecord, limit: u64) -> &str {
    if record.token_count <= limit {
        return &record.text;
    }
    let keep = (u128::from(limit) * u128::from(record.char_count) / u128::from(record.token_count))
        as usize;
    match record.text.char_indices().nth(keep) {
        Some((byte, _)) => &record.text[..byte],
        None => &record.text,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationPoint {
    pub limit: u64,
    pub accuracy: f64,
    pub n_records: usize,
}

/// Accuracy when every solution is cut to each token limit and re-graded.
pub fn truncation_sweep(
    records: &[GenerationRecord],
    questions: &QuestionMap<'_>,
    limits: &[u64],
) -> Result<Vec<TruncationPoint>, AnalysisError> {
    let mut resolved = Vec::with_capacity(records.len());
    for r in records {
        let q = questions
            .get(r.question_id.as_str())
            .ok_or_else(|| AnalysisError::UnknownQuestion(r.question_id.clone()))?;
        resolved.push((r, *q));
    }
    Ok(limits
        .iter()
        .map(|&limit| {
            let correct = resolved
                .iter()
                .filter(|(r, q)| {
                    if r.token_count <= limit {
                        r.is_correct()
                    } else {
                        answer::grade(truncate_to_tokens(r, limit), q)
                            .0
                            .is_correct()
                    }
                })
                .count();
            TruncationPoint {
                limit,
                accuracy: ratio(correct, resolved.len()),
                n_records: resolved.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkerCount {
    pub question_id: String,
    pub sample_index: u32,
    pub token_count: u64,
    pub count: usize,
}

/// Ordinary least-squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson correlation; absent when either variable is constant.
    pub r: Option<f64>,
    pub n: usize,
}

impl LinearFit {
    /// Fit of `y` on `x`; absent with fewer than two points or constant `x`.
    pub fn fit(points: &[(f64, f64)]) -> Option<Self> {
        let n = points.len();
        if n < 2 {
            return None;
        }
        let mx = mean(points.iter().map(|p| p.0));
        let my = mean(points.iter().map(|p| p.1));
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for (x, y) in points {
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
            sxy += (x - mx) * (y - my);
        }
        if sxx == 0.0 {
            return None;
        }
        let slope = sxy / sxx;
        Some(Self {
            slope,
            intercept: my - slope * mx,
            r: (syy > 0.0).then(|| sxy / (sxx * syy).sqrt()),
            n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkerReport {
    pub marker: String,
    pub word_boundary: bool,
    pub counts: Vec<MarkerCount>,
    pub fit: Option<LinearFit>,
}

fn count_marker(text: &str, marker: &str, word_boundary: bool) -> usize {
    let text = text.to_lowercase();
    let marker = marker.to_lowercase();
    if marker.is_empty() {
        return 0;
    }
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    text.match_indices(&marker)
        .filter(|(i, m)| {
            !word_boundary
                || (!is_word(text[..*i].chars().next_back())
                    && !is_word(text[i + m.len()..].chars().next()))
        })
        .count()
}

/// Case-insensitive marker occurrences per record and their linear trend
/// against token count.
pub fn marker_counts(
    records: &[GenerationRecord],
    marker: &str,
    word_boundary: bool,
) -> MarkerReport {
    let counts: Vec<MarkerCount> = records
        .iter()
        .map(|r| MarkerCount {
            question_id: r.question_id.clone(),
            sample_index: r.sample_index,
            token_count: r.token_count,
            count: count_marker(&r.text, marker, word_boundary),
        })
        .collect();
    let points: Vec<(f64, f64)> = counts
        .iter()
        .map(|c| (c.token_count as f64, c.count as f64))
        .collect();
    MarkerReport {
        marker: marker.to_string(),
        word_boundary,
        fit: LinearFit::fit(&points),
        counts,
    }
}
