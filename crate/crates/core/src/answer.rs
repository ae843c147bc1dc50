//! Final-answer extraction and equivalence.
//!
//! Grading composes three steps: pull the content of the last `\boxed{...}`
//! out of a solution, normalize it into a [`Canonical`] value, and compare it
//! with the normalized gold answer. Two checkers vote and either one
//! accepting is enough:
//!
//! * the strict checker requires identical canonical values;
//! * the numeric checker compares integers, fractions and decimals by value.
//!   Fractions are compared exactly; a decimal matches a fraction when the
//!   fraction rounds to the decimal at the decimal's own number of places.
//!
//! There is no computer algebra: `x+1` and `1+x` are different answers.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AnswerKind, Grade, Question};

const BOXED: &str = "\\boxed{";

/// Canonical value of an extracted answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Canonical {
    Integer(i128),
    /// Always in lowest terms, `denominator > 1`, sign on the numerator.
    Rational {
        numerator: i128,
        denominator: i128,
    },
    /// `mantissa * 10^-scale`; `scale` is the number of written decimal places.
    Decimal {
        mantissa: i128,
        scale: u32,
    },
    /// Single uppercase letter.
    Choice(char),
    /// Whitespace-free cleaned LaTeX.
    Symbolic(String),
}

/// An extracted answer: the exact boxed text plus its canonical value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub raw: String,
    pub canonical: Canonical,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NormalizeError {
    #[error("answer is empty after cleaning: {raw:?}")]
    Empty { raw: String },
}

impl NormalizedAnswer {
    /// Checks the canonical-form invariants. Values built by [`normalize`]
    /// always pass; this guards values read back from disk.
    pub fn is_well_formed(&self) -> bool {
        match &self.canonical {
            Canonical::Integer(_) => true,
            Canonical::Rational {
                numerator,
                denominator,
            } => *denominator > 1 && gcd(numerator.unsigned_abs(), denominator.unsigned_abs()) == 1,
            Canonical::Decimal { .. } => true,
            Canonical::Choice(c) => c.is_ascii_uppercase(),
            Canonical::Symbolic(s) => !s.is_empty() && !s.chars().any(char::is_whitespace),
        }
    }
}

impl fmt::Display for Canonical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Canonical::Integer(v) => write!(f, "{v}"),
            Canonical::Rational {
                numerator,
                denominator,
            } => write!(f, "{numerator}/{denominator}"),
            Canonical::Decimal { mantissa, scale } => {
                let digits = mantissa.unsigned_abs().to_string();
                let scale = *scale as usize;
                let padded = if digits.len() <= scale {
                    format!("{}{}", "0".repeat(scale + 1 - digits.len()), digits)
                } else {
                    digits
                };
                let (int_part, frac_part) = padded.split_at(padded.len() - scale);
                let sign = if *mantissa < 0 { "-" } else { "" };
                if scale == 0 {
                    write!(f, "{sign}{int_part}")
                } else {
                    write!(f, "{sign}{int_part}.{frac_part}")
                }
            }
            Canonical::Choice(c) => write!(f, "{c}"),
            Canonical::Symbolic(s) => f.write_str(s),
        }
    }
}

impl fmt::Display for NormalizedAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.canonical.fmt(f)
    }
}

/// Content of the last balanced `\boxed{...}` in `text`.
///
/// Occurrences are tried from the last one backwards; one whose braces never
/// close is skipped, so `\boxed{1} \boxed{2` yields `"1"`.
pub fn extract_boxed(text: &str) -> Option<&str> {
    last_boxed_span(text).map(|(start, close)| &text[start + BOXED.len()..close])
}

/// Byte range of the last balanced `\boxed{...}`: the index of the
/// backslash and the index of the closing brace.
pub fn last_boxed_span(text: &str) -> Option<(usize, usize)> {
    text.rmatch_indices(BOXED).find_map(|(start, _)| {
        matching_brace(text, start + BOXED.len()).map(|close| (start, close))
    })
}

/// Byte index of the `}` closing a group whose content starts at `from`.
fn matching_brace(text: &str, from: usize) -> Option<usize> {
    let mut depth = 1usize;
    for (offset, byte) in text.as_bytes()[from..].iter().enumerate() {
        match byte {
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(from + offset);
                }
            }
            _ => {}
        }
    }
    None
}

/// Normalizes a raw boxed answer.
pub fn normalize(raw: &str, kind: AnswerKind) -> Result<NormalizedAnswer, NormalizeError> {
    let spaced = clean_to_fixpoint(raw);
    let compact = compact_to_fixpoint(&spaced);
    if compact.is_empty() {
        return Err(NormalizeError::Empty {
            raw: raw.to_string(),
        });
    }

    let canonical = if kind == AnswerKind::MultipleChoice {
        choice_letter(&spaced)
            .or_else(|| choice_letter(&compact))
            .map(Canonical::Choice)
            .unwrap_or_else(|| parse_value(&compact))
    } else {
        parse_value(&compact)
    };
    Ok(NormalizedAnswer {
        raw: raw.to_string(),
        canonical,
    })
}

/// Either checker accepting makes the answers equivalent.
pub fn equivalent(a: &NormalizedAnswer, b: &NormalizedAnswer) -> bool {
    strict_equal(&a.canonical, &b.canonical) || numeric_equal(&a.canonical, &b.canonical)
}

fn strict_equal(a: &Canonical, b: &Canonical) -> bool {
    a == b
}

fn numeric_equal(a: &Canonical, b: &Canonical) -> bool {
    use Canonical::*;
    match (a, b) {
        (
            Decimal {
                mantissa: m1,
                scale: s1,
            },
            Decimal {
                mantissa: m2,
                scale: s2,
            },
        ) => decimals_equal(*m1, *s1, *m2, *s2),
        (Decimal { mantissa, scale }, other) | (other, Decimal { mantissa, scale }) => {
            match as_fraction(other) {
                Some((n, d)) => decimal_matches_fraction(*mantissa, *scale, n, d),
                None => false,
            }
        }
        _ => match (as_fraction(a), as_fraction(b)) {
            // Both sides are already reduced.
            (Some(x), Some(y)) => x == y,
            _ => false,
        },
    }
}

fn as_fraction(value: &Canonical) -> Option<(i128, i128)> {
    match value {
        Canonical::Integer(v) => Some((*v, 1)),
        Canonical::Rational {
            numerator,
            denominator,
        } => Some((*numerator, *denominator)),
        _ => None,
    }
}

fn decimals_equal(m1: i128, s1: u32, m2: i128, s2: u32) -> bool {
    let scale = s1.max(s2);
    let lift = |m: i128, s: u32| pow10(scale - s).and_then(|p| m.checked_mul(p));
    match (lift(m1, s1), lift(m2, s2)) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    }
}

/// `|n/d * 10^s - m| <= 1/2`, in integers: `2 |n 10^s - m d| <= d`.
fn decimal_matches_fraction(mantissa: i128, scale: u32, n: i128, d: i128) -> bool {
    let lhs = pow10(scale).and_then(|p| n.checked_mul(p));
    let rhs = mantissa.checked_mul(d);
    let diff = match (lhs, rhs) {
        (Some(l), Some(r)) => l.checked_sub(r),
        _ => None,
    };
    match diff
        .and_then(|x| x.checked_abs())
        .and_then(|x| x.checked_mul(2))
    {
        Some(twice) => twice <= d,
        None => false,
    }
}

fn pow10(exp: u32) -> Option<i128> {
    10i128.checked_pow(exp)
}

/// Extracts, normalizes and grades the final answer of `text`.
pub fn grade(text: &str, question: &Question) -> (Grade, Option<NormalizedAnswer>) {
    let Some(raw) = extract_boxed(text) else {
        return (Grade::NoAnswer, None);
    };
    let Ok(answer) = normalize(raw, question.kind) else {
        return (Grade::NoAnswer, None);
    };
    let correct = question
        .normalized_gold()
        .map(|gold| equivalent(&answer, &gold))
        .unwrap_or(false);
    let grade = if correct {
        Grade::Correct
    } else {
        Grade::Incorrect
    };
    (grade, Some(answer))
}

// ---------------------------------------------------------------------------
// Cleaning

const WRAPPERS: &[&str] = &[
    "\\text{",
    "\\textbf{",
    "\\mathrm{",
    "\\mathbf{",
    "\\textrm{",
    "\\boxed{",
];

const DROPPED: &[&str] = &[
    "\\!",
    "\\,",
    "\\;",
    "\\:",
    "^{\\circ}",
    "^\\circ",
    "\\displaystyle",
];

fn clean_to_fixpoint(raw: &str) -> String {
    let mut current = raw.to_string();
    loop {
        let next = clean_once(&current);
        if next == current {
            return current;
        }
        current = next;
    }
}

fn compact_to_fixpoint(spaced: &str) -> String {
    let mut current: String = spaced.chars().filter(|c| !c.is_whitespace()).collect();
    loop {
        let next: String = clean_once(&current)
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        if next == current {
            return current;
        }
        current = next;
    }
}

fn clean_once(input: &str) -> String {
    let mut s = input.trim().to_string();

    for token in DROPPED {
        s = s.replace(token, "");
    }
    s = s.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac");
    s = drop_sizing(&s, "\\left");
    s = drop_sizing(&s, "\\right");

    s = strip_delimiters(s.trim());
    s = s
        .trim_end_matches(|c: char| matches!(c, '.' | ',' | ';' | ':') || c.is_whitespace())
        .to_string();
    s = unwrap_whole(&s);
    s = strip_assignment(&s);
    if is_grouped_thousands(&s) {
        s = s.replace(',', "");
    }
    s.trim().to_string()
}

/// Removes `\left` / `\right` unless they are a prefix of a longer command
/// such as `\rightarrow`.
fn drop_sizing(s: &str, command: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find(command) {
        let after = &rest[pos + command.len()..];
        out.push_str(&rest[..pos]);
        if after.starts_with(|c: char| c.is_ascii_alphabetic()) {
            out.push_str(command);
        } else if let Some(stripped) = after.strip_prefix('.') {
            // `\left.` is an invisible delimiter
            rest = stripped;
            continue;
        }
        rest = after;
    }
    out.push_str(rest);
    out
}

fn strip_delimiters(s: &str) -> String {
    for (open, close) in [("$$", "$$"), ("$", "$"), ("\\(", "\\)"), ("\\[", "\\]")] {
        if s.len() >= open.len() + close.len() && s.starts_with(open) && s.ends_with(close) {
            return s[open.len()..s.len() - close.len()].to_string();
        }
    }
    s.to_string()
}

/// `\text{...}` and friends spanning the whole string are replaced by their content.
fn unwrap_whole(s: &str) -> String {
    for wrapper in WRAPPERS {
        if let Some(rest) = s.strip_prefix(wrapper) {
            let open = wrapper.len();
            if matching_brace(s, open) == Some(s.len() - 1) {
                return rest[..rest.len() - 1].to_string();
            }
        }
    }
    s.to_string()
}

/// `x = 5` → `5`, `k=\frac{1}{2}` → `\frac{1}{2}`.
fn strip_assignment(s: &str) -> String {
    let mut parts = s.splitn(2, '=');
    let (Some(lhs), Some(rhs)) = (parts.next(), parts.next()) else {
        return s.to_string();
    };
    let lhs = lhs.trim();
    let is_name = !lhs.is_empty()
        && lhs.len() <= 3
        && lhs.starts_with(|c: char| c.is_ascii_alphabetic())
        && lhs.chars().all(|c| c.is_ascii_alphanumeric());
    if is_name && !rhs.contains('=') && !rhs.trim().is_empty() {
        rhs.trim().to_string()
    } else {
        s.to_string()
    }
}

fn is_grouped_thousands(s: &str) -> bool {
    let body = s.strip_prefix('-').unwrap_or(s);
    let mut groups = body.split(',');
    let Some(head) = groups.next() else {
        return false;
    };
    let mut seen_group = false;
    for g in groups {
        if g.len() != 3 || !g.bytes().all(|b| b.is_ascii_digit()) {
            return false;
        }
        seen_group = true;
    }
    seen_group && (1..=3).contains(&head.len()) && head.bytes().all(|b| b.is_ascii_digit())
}

// ---------------------------------------------------------------------------
// Parsing

fn parse_value(compact: &str) -> Canonical {
    if let Some(v) = parse_integer(compact) {
        return Canonical::Integer(v);
    }
    if let Some((m, s)) = parse_decimal(compact) {
        return Canonical::Decimal {
            mantissa: m,
            scale: s,
        };
    }
    if let Some(value) = parse_fraction(compact) {
        return value;
    }
    Canonical::Symbolic(compact.to_string())
}

fn split_sign(s: &str) -> (bool, &str) {
    if let Some(rest) = s.strip_prefix('-') {
        (true, rest)
    } else if let Some(rest) = s.strip_prefix('+') {
        (false, rest)
    } else {
        (false, s)
    }
}

fn parse_integer(s: &str) -> Option<i128> {
    let (negative, digits) = split_sign(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let magnitude: i128 = digits.parse().ok()?;
    Some(if negative { -magnitude } else { magnitude })
}

fn parse_decimal(s: &str) -> Option<(i128, u32)> {
    let (negative, body) = split_sign(s);
    let (int_part, frac_part) = body.split_once('.')?;
    if frac_part.is_empty()
        || !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    let scale = u32::try_from(frac_part.len()).ok()?;
    let magnitude: i128 = format!("{int_part}{frac_part}").parse().ok()?;
    Some((if negative { -magnitude } else { magnitude }, scale))
}

fn parse_fraction(s: &str) -> Option<Canonical> {
    let (negative, body) = split_sign(s);
    let (num, den) = if let Some(rest) = body.strip_prefix("\\frac") {
        frac_operands(rest)?
    } else {
        let (n, d) = body.split_once('/')?;
        (parse_integer(n)?, parse_integer(d)?)
    };
    let num = if negative { num.checked_neg()? } else { num };
    reduce(num, den)
}

/// Operands of `\frac{a}{b}` or the digit shorthand `\frac12`.
fn frac_operands(rest: &str) -> Option<(i128, i128)> {
    if let Some(after_open) = rest.strip_prefix('{') {
        let close = matching_brace(rest, 1)?;
        let num = parse_integer(&after_open[..close - 1])?;
        let tail = rest[close + 1..].strip_prefix('{')?;
        let close2 = matching_brace(&rest[close + 1..], 1)?;
        if close + 1 + close2 != rest.len() - 1 {
            return None;
        }
        let den = parse_integer(&tail[..close2 - 1])?;
        Some((num, den))
    } else {
        let bytes = rest.as_bytes();
        if bytes.len() == 2 && bytes.iter().all(u8::is_ascii_digit) {
            Some((i128::from(bytes[0] - b'0'), i128::from(bytes[1] - b'0')))
        } else {
            None
        }
    }
}

fn reduce(num: i128, den: i128) -> Option<Canonical> {
    if den == 0 {
        return None;
    }
    let g = gcd(num.unsigned_abs(), den.unsigned_abs());
    let g = i128::try_from(g).ok()?;
    let (mut n, mut d) = (num / g, den / g);
    if d < 0 {
        n = n.checked_neg()?;
        d = d.checked_neg()?;
    }
    Some(if d == 1 {
        Canonical::Integer(n)
    } else {
        Canonical::Rational {
            numerator: n,
            denominator: d,
        }
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// A lone, possibly decorated, option letter: `C`, `(c)`, `C.`, `C) 42`,
/// `Option C`.
fn choice_letter(s: &str) -> Option<char> {
    let s = s.trim();
    let lower = s.to_ascii_lowercase();
    for prefix in ["option", "answer", "choice"] {
        if lower.starts_with(prefix) {
            let rest =
                s[prefix.len()..].trim_start_matches(|c: char| c == ':' || c.is_whitespace());
            if rest.len() < s.len() - prefix.len() {
                return decorated_letter(rest);
            }
        }
    }
    if let Some(letter) = decorated_letter(s) {
        return Some(letter);
    }
    // `C) 42`, `(C) 42`, `C. Paris`
    let split = s.find(char::is_whitespace)?;
    let head = &s[..split];
    if head.ends_with([')', '.', ':']) {
        decorated_letter(head)
    } else {
        None
    }
}

fn decorated_letter(s: &str) -> Option<char> {
    let s = s.strip_prefix(['(', '[']).unwrap_or(s);
    let s = s.strip_suffix(['.', ':']).unwrap_or(s);
    let s = s.strip_suffix([')', ']']).unwrap_or(s);
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}
