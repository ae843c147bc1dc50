//! Domain types shared by every module.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{self, equivalent, normalize, NormalizeError, NormalizedAnswer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    MathFreeform,
    MultipleChoice,
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub prompt_text: String,
    pub gold_answer: String,
    pub kind: AnswerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default)]
    pub source_tag: String,
}

impl Question {
    pub fn math(id: &str, prompt: &str, gold: &str) -> Self {
        Self {
            id: id.to_string(),
            prompt_text: prompt.to_string(),
            gold_answer: gold.to_string(),
            kind: AnswerKind::MathFreeform,
            choices: None,
            source_tag: String::new(),
        }
    }

    /// Gold answers are stored raw and normalized on demand.
    pub fn normalized_gold(&self) -> Result<NormalizedAnswer, NormalizeError> {
        normalize(&self.gold_answer, self.kind)
    }

    /// Option letters in order. A choice string that already starts with a
    /// label such as `(B)` or `B.` keeps it; otherwise labels are positional.
    pub fn choice_labels(&self) -> Vec<char> {
        self.choices
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, text)| explicit_label(text).unwrap_or((b'A' + i as u8) as char))
            .collect()
    }

    /// User-turn text: the question, its labeled options, then the instruction.
    pub fn user_message(&self, instruction: &str) -> String {
        let mut out = self.prompt_text.trim_end().to_string();
        if let Some(choices) = &self.choices {
            out.push('\n');
            for (label, text) in self.choice_labels().into_iter().zip(choices) {
                out.push('\n');
                if explicit_label(text).is_some() {
                    out.push_str(text);
                } else {
                    out.push_str(&format!("({label}) {text}"));
                }
            }
        }
        out.push_str("\n\n");
        out.push_str(instruction);
        out
    }

    /// Per-question invariants, excluding dataset-level id uniqueness.
    pub fn check(&self) -> Result<(), DatasetError> {
        let bad = |reason: &str| DatasetError::InvalidQuestion {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        if self.normalized_gold().is_err() {
            return Err(bad("gold answer is empty"));
        }
        if self.kind == AnswerKind::MultipleChoice {
            let labels = self.choice_labels();
            if labels.is_empty() {
                return Err(bad("multiple_choice question without choices"));
            }
            let gold = self.gold_answer.trim();
            let mut chars = gold.chars();
            let is_label = match (chars.next(), chars.next()) {
                (Some(c), None) => labels.contains(&c.to_ascii_uppercase()),
                _ => false,
            };
            if !is_label {
                return Err(bad("gold_answer is not one of the choice labels"));
            }
        }
        Ok(())
    }
}

fn explicit_label(text: &str) -> Option<char> {
    let t = text.trim_start();
    let t = t.strip_prefix('(').unwrap_or(t);
    let mut chars = t.chars();
    let letter = chars.next().filter(char::is_ascii_uppercase)?;
    match (chars.next(), chars.next()) {
        (Some(')' | '.' | ':'), Some(c)) if c.is_whitespace() => Some(letter),
        _ => None,
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate question id {0:?}")]
    DuplicateId(String),
    #[error("question {id:?}: {reason}")]
    InvalidQuestion { id: String, reason: String },
    #[error("dataset is empty")]
    Empty,
}

/// Parses a JSONL dataset (one question per line, blank lines ignored).
pub fn parse_dataset(text: &str) -> Result<Vec<Question>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: Question = serde_json::from_str(line).map_err(|source| DatasetError::Parse {
            line: i + 1,
            source,
        })?;
        q.check()?;
        if !seen.insert(q.id.clone()) {
            return Err(DatasetError::DuplicateId(q.id));
        }
        out.push(q);
    }
    if out.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Question>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

pub fn dataset_to_jsonl(questions: &[Question]) -> String {
    let mut out = String::new();
    for q in questions {
        out.push_str(&serde_json::to_string(q).expect("question serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Correct,
    Incorrect,
    NoAnswer,
}

impl Grade {
    pub fn is_correct(self) -> bool {
        self == Grade::Correct
    }
}

/// Tokens approximated from characters when the provider reports none.
pub fn approximate_tokens(char_count: u64) -> u64 {
    char_count.div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error(
        "{question_id}#{sample_index}: char_count {stored} does not match text length {actual}"
    )]
    CharCount {
        question_id: String,
        sample_index: u32,
        stored: u64,
        actual: u64,
    },
    #[error("{question_id}#{sample_index}: grade {grade:?} inconsistent with extracted answer")]
    GradeAnswer {
        question_id: String,
        sample_index: u32,
        grade: Grade,
    },
    #[error("{question_id}#{sample_index}: malformed canonical answer")]
    Canonical {
        question_id: String,
        sample_index: u32,
    },
    #[error("chain {question_id}#{sample_index}: {reason}")]
    Chain {
        question_id: String,
        sample_index: u32,
        reason: String,
    },
}

/// One sampled solution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub question_id: String,
    pub sample_index: u32,
    pub text: String,
    pub token_count: u64,
    /// `token_count` was derived from `char_count` rather than reported.
    #[serde(default)]
    pub token_count_approximated: bool,
    pub char_count: u64,
    pub extracted_answer: Option<NormalizedAnswer>,
    pub grade: Grade,
    pub truncated: bool,
    pub rng_seed: u64,
}

impl GenerationRecord {
    /// Builds and grades a record.
    pub fn new(
        question: &Question,
        sample_index: u32,
        text: String,
        reported_tokens: Option<u64>,
        truncated: bool,
        rng_seed: u64,
    ) -> Self {
        let char_count = text.chars().count() as u64;
        let (token_count, approximated) = match reported_tokens {
            Some(n) => (n, false),
            None => (approximate_tokens(char_count), true),
        };
        let (grade, extracted_answer) = answer::grade(&text, question);
        let record = Self {
            question_id: question.id.clone(),
            sample_index,
            text,
            token_count,
            token_count_approximated: approximated,
            char_count,
            extracted_answer,
            grade,
            truncated,
            rng_seed,
        };
        debug_assert!(record.validate(Some(question)).is_ok());
        record
    }

    /// Checks the record invariants. With the question at hand, a `correct`
    /// grade is also re-checked against the gold answer.
    pub fn validate(&self, question: Option<&Question>) -> Result<(), RecordError> {
        let actual = self.text.chars().count() as u64;
        if actual != self.char_count {
            return Err(RecordError::CharCount {
                question_id: self.question_id.clone(),
                sample_index: self.sample_index,
                stored: self.char_count,
                actual,
            });
        }
        let inconsistent = || RecordError::GradeAnswer {
            question_id: self.question_id.clone(),
            sample_index: self.sample_index,
            grade: self.grade,
        };
        match (&self.extracted_answer, self.grade) {
            (None, Grade::NoAnswer) => {}
            (None, _) | (Some(_), Grade::NoAnswer) => return Err(inconsistent()),
            (Some(a), grade) => {
                if !a.is_well_formed() {
                    return Err(RecordError::Canonical {
                        question_id: self.question_id.clone(),
                        sample_index: self.sample_index,
                    });
                }
                if let (Grade::Correct, Some(q)) = (grade, question) {
                    let ok = q
                        .normalized_gold()
                        .map(|g| equivalent(a, &g))
                        .unwrap_or(false);
                    if !ok {
                        return Err(inconsistent());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_correct(&self) -> bool {
        self.grade.is_correct()
    }
}

/// One step of a revision chain. Step 0 is the unrevised solution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionStep {
    pub step_index: u32,
    /// Text generated in this step (the full solution for step 0).
    pub appended_text: String,
    /// Continuation marker that opened this step; empty for step 0.
    pub chosen_prompt: String,
    /// The marker came from the fallback rule, not from next-token probabilities.
    #[serde(default)]
    pub prompt_fallback: bool,
    pub cumulative_token_count: u64,
    pub answer_after_step: Option<NormalizedAnswer>,
    pub grade_after_step: Grade,
}

/// Sequential revisions of one initial sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionChain {
    pub question_id: String,
    pub sample_index: u32,
    pub steps: Vec<RevisionStep>,
    /// Stopped before the requested step count because of the token ceiling.
    #[serde(default)]
    pub truncated: bool,
}

impl RevisionChain {
    pub fn validate(&self) -> Result<(), RecordError> {
        let bad = |reason: String| RecordError::Chain {
            question_id: self.question_id.clone(),
            sample_index: self.sample_index,
            reason,
        };
        if self.steps.is_empty() {
            return Err(bad("no steps".into()));
        }
        let mut prev_tokens = 0;
        for (i, step) in self.steps.iter().enumerate() {
            if step.step_index as usize != i {
                return Err(bad(format!("step {} at position {i}", step.step_index)));
            }
            if step.cumulative_token_count < prev_tokens {
                return Err(bad(format!("cumulative tokens decrease at step {i}")));
            }
            if step.answer_after_step.is_none() != (step.grade_after_step == Grade::NoAnswer) {
                return Err(bad(format!("grade inconsistent with answer at step {i}")));
            }
            prev_tokens = step.cumulative_token_count;
        }
        Ok(())
    }

    pub fn initial(&self) -> &RevisionStep {
        &self.steps[0]
    }

    pub fn last(&self) -> &RevisionStep {
        self.steps.last().expect("chains are non-empty")
    }

    /// Number of revision steps after the initial solution.
    pub fn revisions(&self) -> u32 {
        self.steps.len() as u32 - 1
    }
}

impl RevisionStep {
    pub fn initial(record: &GenerationRecord) -> Self {
        Self {
            step_index: 0,
            appended_text: record.text.clone(),
            chosen_prompt: String::new(),
            prompt_fallback: false,
            cumulative_token_count: record.token_count,
            answer_after_step: record.extracted_answer.clone(),
            grade_after_step: record.grade,
        }
    }
}

/// Records grouped per question, each group sorted by sample index.
pub fn group_by_question(records: &[GenerationRecord]) -> BTreeMap<String, Vec<GenerationRecord>> {
    let mut out: BTreeMap<String, Vec<GenerationRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.question_id.clone())
            .or_default()
            .push(r.clone());
    }
    for group in out.values_mut() {
        group.sort_by_key(|r| r.sample_index);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mc() -> Question {
        Question {
            id: "g1".into(),
            prompt_text: "Which?".into(),
            gold_answer: "B".into(),
            kind: AnswerKind::MultipleChoice,
            choices: Some(vec!["red".into(), "blue".into(), "green".into()]),
            source_tag: "gpqa".into(),
        }
    }

    #[test]
    fn token_approximation_rounds_up() {
        assert_eq!(approximate_tokens(0), 0);
        assert_eq!(approximate_tokens(1), 1);
        assert_eq!(approximate_tokens(8), 2);
        assert_eq!(approximate_tokens(9), 3);
    }

    #[test]
    fn record_construction_grades_and_counts() {
        let q = Question::math("q1", "2+2?", "4");
        let r = GenerationRecord::new(&q, 0, "so \\boxed{4}".into(), None, false, 1);
        assert_eq!(r.grade, Grade::Correct);
        assert_eq!(r.char_count, 12);
        assert_eq!(r.token_count, 3);
        assert!(r.token_count_approximated);
        let r = GenerationRecord::new(&q, 1, "é".into(), Some(7), false, 1);
        assert_eq!(r.char_count, 1);
        assert_eq!(r.token_count, 7);
        assert_eq!(r.grade, Grade::NoAnswer);
    }

    #[test]
    fn validation_catches_tampering() {
        let q = Question::math("q1", "2+2?", "4");
        let mut r = GenerationRecord::new(&q, 0, "\\boxed{5}".into(), Some(3), false, 1);
        assert!(r.validate(Some(&q)).is_ok());
        r.grade = Grade::Correct;
        assert!(r.validate(Some(&q)).is_err());
        r.grade = Grade::NoAnswer;
        assert!(r.validate(None).is_err());
        r.grade = Grade::Incorrect;
        r.char_count += 1;
        assert!(r.validate(None).is_err());
    }

    #[test]
    fn multiple_choice_checks() {
        assert!(mc().check().is_ok());
        let mut q = mc();
        q.gold_answer = "E".into();
        assert!(q.check().is_err());
        q.choices = None;
        assert!(q.check().is_err());
        let mut q = mc();
        q.choices = Some(vec!["(A) 1".into(), "(B) 2".into()]);
        assert_eq!(q.choice_labels(), vec!['A', 'B']);
        assert!(q.user_message("pick").contains("(B) 2\n\npick"));
        assert!(mc().user_message("pick").contains("(B) blue"));
    }

    #[test]
    fn dataset_parsing_rejects_duplicates() {
        let line = serde_json::to_string(&Question::math("a", "p", "1")).unwrap();
        let text = format!("{line}\n\n{line}\n");
        assert!(matches!(
            parse_dataset(&text),
            Err(DatasetError::DuplicateId(_))
        ));
        assert!(matches!(parse_dataset(""), Err(DatasetError::Empty)));
        assert_eq!(parse_dataset(&line).unwrap().len(), 1);
    }

    #[test]
    fn chain_validation() {
        let q = Question::math("q1", "p", "4");
        let r = GenerationRecord::new(&q, 0, "\\boxed{4}".into(), Some(10), false, 1);
        let mut chain = RevisionChain {
            question_id: "q1".into(),
            sample_index: 0,
            steps: vec![RevisionStep::initial(&r)],
            truncated: false,
        };
        assert!(chain.validate().is_ok());
        let mut next = RevisionStep::initial(&r);
        next.step_index = 1;
        next.cumulative_token_count = 5;
        chain.steps.push(next);
        assert!(chain.validate().is_err());
        chain.steps[1].cumulative_token_count = 20;
        assert!(chain.validate().is_ok());
        chain.steps[1].step_index = 2;
        assert!(chain.validate().is_err());
    }
}
