use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde_json::{json, Value};

use super::*;
use crate::aggregate::Aggregator;
use crate::store::LoadedRun;
use crate::types::group_by_question;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisKind {
    RankGroups,
    CorrectVsIncorrect,
    Truncation,
    Markers,
    Coverage,
    Transitions,
    TokenDist,
    BudgetCurves,
    RankRevision,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 9] = [
        AnalysisKind::RankGroups,
        AnalysisKind::CorrectVsIncorrect,
        AnalysisKind::Truncation,
        AnalysisKind::Markers,
        AnalysisKind::Coverage,
        AnalysisKind::Transitions,
        AnalysisKind::TokenDist,
        AnalysisKind::BudgetCurves,
        AnalysisKind::RankRevision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalysisKind::RankGroups => "rank-groups",
            AnalysisKind::CorrectVsIncorrect => "correct-vs-incorrect",
            AnalysisKind::Truncation => "truncation",
            AnalysisKind::Markers => "markers",
            AnalysisKind::Coverage => "coverage",
            AnalysisKind::Transitions => "transitions",
            AnalysisKind::TokenDist => "token-dist",
            AnalysisKind::BudgetCurves => "budget-curves",
            AnalysisKind::RankRevision => "rank-revision",
        }
    }

    pub fn needs_chains(self) -> bool {
        matches!(self, AnalysisKind::Transitions | AnalysisKind::RankRevision)
    }
}

impl fmt::Display for AnalysisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnalysisKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                format!(
                    "unknown analysis {s:?}; valid analyses: {}",
                    names.join(", ")
                )
            })
    }
}

/// Knobs shared by the analyses; empty lists mean "derive from the run".
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOptions {
    pub k: Option<usize>,
    pub limits: Vec<u64>,
    pub marker: String,
    pub word_boundary: bool,
    pub ks: Vec<usize>,
    pub budgets: Vec<u64>,
    pub methods: Vec<Aggregator>,
    /// Budget curves over summed tokens instead of solution counts.
    pub token_axis: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            k: None,
            limits: Vec::new(),
            marker: "wait".to_string(),
            word_boundary: false,
            ks: Vec::new(),
            budgets: Vec::new(),
            methods: Aggregator::ALL.to_vec(),
            token_axis: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutput {
    pub kind: AnalysisKind,
    pub csv: String,
    pub summary: Value,
    /// Short human-readable digest.
    pub display: String,
}

struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header).expect("in-memory write");
        Self { writer }
    }

    fn row(&mut self, fields: &[String]) {
        self.writer.write_record(fields).expect("in-memory write");
    }

    fn finish(self) -> String {
        String::from_utf8(self.writer.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// `1024, 2048, ...` up to the first value at or above `max`.
fn doubling_grid(max: u64) -> Vec<u64> {
    let mut grid = vec![1024u64];
    while *grid.last().expect("non-empty") < max {
        let next = grid.last().expect("non-empty").saturating_mul(2);
        grid.push(next);
    }
    grid
}

pub fn run_analysis(
    kind: AnalysisKind,
    run: &LoadedRun,
    options: &AnalysisOptions,
) -> Result<AnalysisOutput, AnalysisError> {
    let groups = group_by_question(&run.records);
    let questions = question_map(&run.questions);
    let k = options
        .k
        .unwrap_or(run.manifest.config.samples_per_question as usize);
    if kind.needs_chains() && run.chains.is_empty() {
        return Err(AnalysisError::NoChains(kind.name()));
    }
    let (csv, summary, display) = match kind {
        AnalysisKind::RankGroups | AnalysisKind::TokenDist => {
            let report = rank_groups(&groups, k)?;
            let first = report.groups.first().map_or(0.0, |g| g.mean_length);
            let last = report.groups.last().map_or(0.0, |g| g.mean_length);
            let ratio = if first > 0.0 { last / first } else { 0.0 };
            let n = report.groups.first().map_or(0, |g| g.n_questions);
            if kind == AnalysisKind::RankGroups {
                let mut t = Table::new(&[
                    "rank",
                    "mean_length",
                    "accuracy",
                    "n_questions",
                    "correct_solution_count",
                    "correct_token_share",
                ]);
                let mut display = String::new();
                for g in &report.groups {
                    t.row(&[
                        g.rank.to_string(),
                        num(g.mean_length),
                        num(g.accuracy),
                        g.n_questions.to_string(),
                        g.correct_solution_count.to_string(),
                        num(g.correct_token_share),
                    ]);
                    let _ = writeln!(
                        display,
                        "rank {:>3}  mean length {:>10.1}  accuracy {:.4}",
                        g.rank, g.mean_length, g.accuracy
                    );
                }
                let _ = write!(display, "longest/shortest length ratio {ratio:.4}");
                let summary = json!({
                    "analysis": kind.name(),
                    "k": k,
                    "n_questions": n,
                    "excluded_questions": report.excluded.len(),
                    "longest_to_shortest_ratio": ratio,
                });
                (t.finish(), summary, display)
            } else {
                let shares = token_distribution(&report);
                let mut t = Table::new(&["rank", "correct_solution_count", "correct_token_share"]);
                let mut display = String::new();
                for s in &shares {
                    t.row(&[
                        s.rank.to_string(),
                        s.correct_solution_count.to_string(),
                        num(s.correct_token_share),
                    ]);
                    let _ = writeln!(
                        display,
                        "rank {:>3}  correct {:>6}  token share {:.4}",
                        s.rank, s.correct_solution_count, s.correct_token_share
                    );
                }
                let peak_count = shares
                    .iter()
                    .max_by_key(|s| s.correct_solution_count)
                    .map(|s| s.rank);
                let peak_share = shares
                    .iter()
                    .fold(None::<&TokenShare>, |best, s| match best {
                        Some(b) if b.correct_token_share >= s.correct_token_share => Some(b),
                        _ => Some(s),
                    })
                    .map(|s| s.rank);
                let summary = json!({
                    "analysis": kind.name(),
                    "k": k,
                    "n_questions": n,
                    "peak_count_rank": peak_count,
                    "peak_share_rank": peak_share,
                });
                (t.finish(), summary, display.trim_end().to_string())
            }
        }
        AnalysisKind::CorrectVsIncorrect => {
            let c = correct_incorrect_lengths(&groups)?;
            let mut t = Table::new(&["mean_correct_len", "mean_incorrect_len", "n_questions"]);
            t.row(&[
                num(c.mean_correct_len),
                num(c.mean_incorrect_len),
                c.n_questions.to_string(),
            ]);
            let display = format!(
                "mean correct length {:.1}, mean incorrect length {:.1} over {} questions",
                c.mean_correct_len, c.mean_incorrect_len, c.n_questions
            );
            let summary = json!({
                "analysis": kind.name(),
                "mean_correct_len": c.mean_correct_len,
                "mean_incorrect_len": c.mean_incorrect_len,
                "n_questions": c.n_questions,
            });
            (t.finish(), summary, display)
        }
        AnalysisKind::Truncation => {
            let limits = if options.limits.is_empty() {
                doubling_grid(run.records.iter().map(|r| r.token_count).max().unwrap_or(0))
            } else {
                options.limits.clone()
            };
            let sweep = truncation_sweep(&run.records, &questions, &limits)?;
            let mut t = Table::new(&["limit", "accuracy", "n_records"]);
            let mut display = String::new();
            for p in &sweep {
                t.row(&[
                    p.limit.to_string(),
                    num(p.accuracy),
                    p.n_records.to_string(),
                ]);
                let _ = writeln!(display, "limit {:>8}  accuracy {:.4}", p.limit, p.accuracy);
            }
            let summary = json!({
                "analysis": kind.name(),
                "points": sweep.iter().map(|p| json!({"limit": p.limit, "accuracy": p.accuracy})).collect::<Vec<_>>(),
            });
            (t.finish(), summary, display.trim_end().to_string())
        }
        AnalysisKind::Markers => {
            let report = marker_counts(&run.records, &options.marker, options.word_boundary);
            let mut t = Table::new(&["question_id", "sample_index", "token_count", "count"]);
            for c in &report.counts {
                t.row(&[
                    c.question_id.clone(),
                    c.sample_index.to_string(),
                    c.token_count.to_string(),
                    c.count.to_string(),
                ]);
            }
            let display = match &report.fit {
                Some(f) => format!(
                    "{:?}: slope {:.6} per token, intercept {:.4}, r {}",
                    report.marker,
                    f.slope,
                    f.intercept,
                    f.r.map_or("n/a".to_string(), |r| format!("{r:.4}"))
                ),
                None => format!("{:?}: fit unavailable", report.marker),
            };
            let summary = json!({
                "analysis": kind.name(),
                "marker": report.marker,
                "word_boundary": report.word_boundary,
                "n_records": report.counts.len(),
                "fit": report.fit,
            });
            (t.finish(), summary, display)
        }
        AnalysisKind::Coverage => {
            let ks = if options.ks.is_empty() {
                (1..=k).collect()
            } else {
                options.ks.clone()
            };
            let mut t = Table::new(&["kind", "x", "coverage", "n"]);
            let mut display = String::new();
            let mut parallel = Vec::new();
            for &kk in &ks {
                let c = coverage_parallel(&groups, kk);
                t.row(&[
                    "parallel".into(),
                    kk.to_string(),
                    num(c.coverage),
                    c.n_questions.to_string(),
                ]);
                let _ = writeln!(display, "coverage@{kk:<4} {:.4}", c.coverage);
                parallel.push(json!({"k": kk, "coverage": c.coverage}));
            }
            let mut sequential = Vec::new();
            if !run.chains.is_empty() {
                let budgets = if options.budgets.is_empty() {
                    doubling_grid(
                        run.chains
                            .iter()
                            .map(|c| c.last().cumulative_token_count)
                            .max()
                            .unwrap_or(0),
                    )
                } else {
                    options.budgets.clone()
                };
                for c in coverage_sequential(&run.chains, &budgets) {
                    t.row(&[
                        "sequential".into(),
                        c.budget.to_string(),
                        num(c.coverage),
                        c.n_chains.to_string(),
                    ]);
                    let _ = writeln!(
                        display,
                        "sequential coverage @{:>8} tokens {:.4}",
                        c.budget, c.coverage
                    );
                    sequential.push(json!({"budget": c.budget, "coverage": c.coverage}));
                }
            }
            let summary = json!({
                "analysis": kind.name(),
                "parallel": parallel,
                "sequential": sequential,
            });
            (t.finish(), summary, display.trim_end().to_string())
        }
        AnalysisKind::Transitions => {
            let r = transition_rates(&run.chains);
            let mut t = Table::new(&[
                "kind",
                "step",
                "rate_wrong_to_correct",
                "rate_correct_to_wrong",
                "rate_stick_wrong",
                "rate_stick_correct",
                "n_chains",
                "n_wrong",
                "n_correct",
            ]);
            for (label, rows) in [("cumulative", &r.cumulative), ("per_step", &r.per_step)] {
                for s in rows {
                    t.row(&[
                        label.into(),
                        s.step.to_string(),
                        num(s.rate_wrong_to_correct),
                        num(s.rate_correct_to_wrong),
                        num(s.rate_stick_wrong),
                        num(s.rate_stick_correct),
                        s.n_chains.to_string(),
                        s.n_wrong.to_string(),
                        s.n_correct.to_string(),
                    ]);
                }
            }
            let mut display = String::new();
            if let Some(last) = r.cumulative.last() {
                let _ = writeln!(
                    display,
                    "after {} steps: wrong→correct {:.4}, correct→wrong {:.4}",
                    last.step, last.rate_wrong_to_correct, last.rate_correct_to_wrong
                );
            }
            let _ = write!(
                display,
                "one-step rates: wrong→correct {:.4}, correct→wrong {:.4}; stick-with-wrong {}",
                r.pooled.wrong_to_correct,
                r.pooled.correct_to_wrong,
                r.stick_rate
                    .map_or("n/a".to_string(), |s| format!("{s:.4}"))
            );
            let summary = json!({
                "analysis": kind.name(),
                "n_chains": r.n_chains,
                "n_initially_wrong": r.n_initially_wrong,
                "pooled": r.pooled,
                "stick_rate": r.stick_rate,
            });
            (t.finish(), summary, display)
        }
        AnalysisKind::BudgetCurves => {
            let budgets: Vec<Budget> = if options.token_axis {
                let grid = if options.budgets.is_empty() {
                    let max_total = groups
                        .values()
                        .map(|g| g.iter().map(|r| r.token_count).sum::<u64>())
                        .max()
                        .unwrap_or(0);
                    doubling_grid(max_total)
                } else {
                    options.budgets.clone()
                };
                grid.into_iter().map(Budget::Tokens).collect()
            } else {
                (1..=k).map(Budget::Solutions).collect()
            };
            let mut t = Table::new(&[
                "method",
                "axis",
                "budget",
                "accuracy",
                "n_questions",
                "mean_samples",
            ]);
            let mut display = String::new();
            let mut curves = Vec::new();
            for &method in &options.methods {
                let mut points = Vec::new();
                for &b in &budgets {
                    // Token budgets below every first sample have no point.
                    let p = match accuracy_vs_budget(&groups, &questions, method, &[b]) {
                        Ok(mut p) => p.remove(0),
                        Err(AnalysisError::BudgetTooSmall { .. }) => continue,
                        Err(e) => return Err(e),
                    };
                    let (axis, x) = match p.budget {
                        Budget::Solutions(n) => ("solutions", n as u64),
                        Budget::Tokens(b) => ("tokens", b),
                    };
                    t.row(&[
                        p.method.clone(),
                        axis.into(),
                        x.to_string(),
                        num(p.accuracy),
                        p.n_questions.to_string(),
                        num(p.mean_samples),
                    ]);
                    points.push(json!({"axis": axis, "budget": x, "accuracy": p.accuracy}));
                }
                if let Some(last) = points.last() {
                    let _ = writeln!(
                        display,
                        "{:<8} accuracy {:.4} at {} {}",
                        method.short_name(),
                        last["accuracy"].as_f64().unwrap_or(0.0),
                        last["budget"],
                        last["axis"].as_str().unwrap_or("")
                    );
                }
                curves.push(json!({"method": method.short_name(), "points": points}));
            }
            let summary = json!({"analysis": kind.name(), "curves": curves});
            (t.finish(), summary, display.trim_end().to_string())
        }
        AnalysisKind::RankRevision => {
            let rows = rank_filtered_revision(&run.chains, &groups);
            let mut t = Table::new(&[
                "group",
                "step",
                "accuracy",
                "rate_wrong_to_correct",
                "rate_correct_to_wrong",
                "n_chains",
            ]);
            let mut display = String::new();
            for r in &rows {
                let group = match r.group {
                    InitialRank::Shortest => "shortest",
                    InitialRank::Longest => "longest",
                };
                t.row(&[
                    group.into(),
                    r.step.to_string(),
                    num(r.accuracy),
                    num(r.rate_wrong_to_correct),
                    num(r.rate_correct_to_wrong),
                    r.n_chains.to_string(),
                ]);
            }
            for group in [InitialRank::Shortest, InitialRank::Longest] {
                let mine: Vec<&RankRevisionRow> =
                    rows.iter().filter(|r| r.group == group).collect();
                if let (Some(first), Some(last)) = (mine.first(), mine.last()) {
                    let _ = writeln!(
                        display,
                        "{group:?} initials: accuracy {:.4} at step 0, {:.4} at step {}",
                        first.accuracy, last.accuracy, last.step
                    );
                }
            }
            let finals: Vec<Value> = [InitialRank::Shortest, InitialRank::Longest]
                .iter()
                .filter_map(|g| rows.iter().rev().find(|r| r.group == *g))
                .map(|r| json!({"group": r.group, "step": r.step, "accuracy": r.accuracy}))
                .collect();
            let summary = json!({
                "analysis": kind.name(),
                "rows": rows.len(),
                "final": finals,
            });
            (t.finish(), summary, display.trim_end().to_string())
        }
    };
    Ok(AnalysisOutput {
        kind,
        csv,
        summary,
        display,
    })
}
