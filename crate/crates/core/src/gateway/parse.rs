//! Extracts (rationale, label, confidence) from raw provider text.
//!
//! The confidence is the last `score:`-marked decimal in the output. The
//! label is task-kind specific: the last fenced code block for code tasks,
//! the last `Answer:` line otherwise. The rationale is whatever remains
//! once the label, the score marker, and the optional `factors:` line are
//! removed.

use std::sync::OnceLock;

use regex::Regex;

use crate::model::TaskKind;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("no `score:` marker found")]
    NoScoreMarker,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("no answer block found for {0}")]
    EmptyLabel(TaskKind),
    #[error("output contains an answer and a score but no reasoning text")]
    EmptyRationale,
}

fn score_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)score\s*:\s*([-+]?\d+(?:\.\d+)?)").expect("static regex"))
}

fn factors_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[ \t]*factors\s*:\s*(.+?)[ \t]*$").expect("static regex"))
}

fn code_block_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?s)```[a-zA-Z0-9_+-]*[ \t]*\r?\n(.*?)```").expect("static regex")
    })
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[ \t]*answer\s*:\s*(.+?)[ \t]*$").expect("static regex"))
}

/// A successfully parsed teacher output.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTeacherOutput {
    pub rationale: String,
    pub label: String,
    pub confidence: f64,
    /// Self-reported factor values from an optional `factors:` line.
    pub factor_values: Option<Vec<(String, f64)>>,
}

/// Byte ranges to excise from the raw text when reconstructing the rationale.
fn excise(raw: &str, mut ranges: Vec<(usize, usize)>) -> String {
    ranges.sort();
    let mut out = String::with_capacity(raw.len());
    let mut cursor = 0;
    for (start, end) in ranges {
        if start > cursor {
            out.push_str(&raw[cursor..start]);
        }
        cursor = cursor.max(end);
    }
    out.push_str(&raw[cursor..]);
    out.trim().to_string()
}

fn find_label(raw: &str, task_kind: TaskKind) -> Option<((usize, usize), String)> {
    match task_kind {
        TaskKind::CodeGeneration => code_block_re()
            .captures_iter(raw)
            .last()
            .map(|cap| {
                let whole = cap.get(0).expect("match 0");
                ((whole.start(), whole.end()), cap[1].trim().to_string())
            }),
        _ => answer_re().captures_iter(raw).last().map(|cap| {
            let whole = cap.get(0).expect("match 0");
            ((whole.start(), whole.end()), cap[1].trim().to_string())
        }),
    }
}

/// Parses a teacher completion. The score is checked first, then the answer
/// block, then the remaining rationale; an out-of-range score is rejected,
/// never clamped.
pub fn parse_teacher_output(
    raw: &str,
    task_kind: TaskKind,
) -> Result<ParsedTeacherOutput, ParseError> {
    let score_cap = score_re()
        .captures_iter(raw)
        .last()
        .ok_or(ParseError::NoScoreMarker)?;
    let score_match = score_cap.get(0).expect("match 0");
    let confidence: f64 = score_cap[1].parse().map_err(|_| ParseError::NoScoreMarker)?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(ParseError::ScoreOutOfRange(confidence));
    }

    let ((label_start, label_end), label) =
        find_label(raw, task_kind).ok_or(ParseError::EmptyLabel(task_kind))?;
    if label.is_empty() {
        return Err(ParseError::EmptyLabel(task_kind));
    }

    let mut ranges = vec![
        (score_match.start(), score_match.end()),
        (label_start, label_end),
    ];
    let mut factor_values = None;
    if let Some(cap) = factors_re().captures_iter(raw).last() {
        let whole = cap.get(0).expect("match 0");
        ranges.push((whole.start(), whole.end()));
        factor_values = parse_factor_list(&cap[1]);
    }

    let rationale = excise(raw, ranges);
    if rationale.is_empty() {
        return Err(ParseError::EmptyRationale);
    }

    Ok(ParsedTeacherOutput {
        rationale,
        label,
        confidence,
        factor_values,
    })
}

/// `name=0.98, other=0.95` pairs; `None` if any pair is malformed.
fn parse_factor_list(list: &str) -> Option<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for pair in list.split(',') {
        let (name, value) = pair.split_once('=')?;
        let value: f64 = value.trim().parse().ok()?;
        out.push((name.trim().to_string(), value));
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// Parses a student completion: answer block plus remaining rationale.
/// Students do not self-score, so no score marker is required.
pub fn parse_student_output(
    raw: &str,
    task_kind: TaskKind,
) -> Result<(String, String), ParseError> {
    let ((start, end), label) =
        find_label(raw, task_kind).ok_or(ParseError::EmptyLabel(task_kind))?;
    if label.is_empty() {
        return Err(ParseError::EmptyLabel(task_kind));
    }
    let rationale = excise(raw, vec![(start, end)]);
    if rationale.is_empty() {
        return Err(ParseError::EmptyRationale);
    }
    Ok((rationale, label))
}

/// A refinement completion is the revised reasoning itself; the refinement
/// prompt asks for no answer block and no score.
pub fn parse_refined_rationale(raw: &str) -> Result<String, ParseError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(ParseError::EmptyRationale);
    }
    Ok(trimmed.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CODE_OUTPUT: &str = "\
We need a function that returns its input unchanged.\n\
The identity function satisfies every test case.\n\
\n\
```python\n\
def f(x): return x\n\
```\n\
score: 0.85\n";

    #[test]
    fn parses_code_output_with_score() {
        let parsed = parse_teacher_output(CODE_OUTPUT, TaskKind::CodeGeneration).unwrap();
        assert_eq!(parsed.confidence, 0.85);
        assert_eq!(parsed.label, "def f(x): return x");
        assert!(parsed.rationale.starts_with("We need a function"));
        assert!(!parsed.rationale.contains("score:"));
        assert!(!parsed.rationale.contains("```"));
    }

    #[test]
    fn out_of_range_score_rejected_not_clamped() {
        let raw = "reasoning here\nAnswer: 4\nscore: 1.37";
        assert_eq!(
            parse_teacher_output(raw, TaskKind::Math),
            Err(ParseError::ScoreOutOfRange(1.37))
        );
    }

    #[test]
    fn missing_marker_is_no_score_marker() {
        assert_eq!(
            parse_teacher_output("final answer only", TaskKind::Other),
            Err(ParseError::NoScoreMarker)
        );
    }

    #[test]
    fn last_score_marker_wins() {
        let raw = "the rubric says score: 0.5 matters\nAnswer: B\nscore: 0.97";
        let parsed = parse_teacher_output(raw, TaskKind::MultipleChoice).unwrap();
        assert_eq!(parsed.confidence, 0.97);
        assert_eq!(parsed.label, "B");
        // the earlier rubric mention stays in the rationale
        assert!(parsed.rationale.contains("rubric"));
    }

    #[test]
    fn factors_line_extracted_and_removed() {
        let raw = "reasoning words\nAnswer: 12\nfactors: correctness=0.98, readability=0.9\nscore: 0.96";
        let parsed = parse_teacher_output(raw, TaskKind::Math).unwrap();
        let factors = parsed.factor_values.unwrap();
        assert_eq!(factors[0], ("correctness".to_string(), 0.98));
        assert_eq!(factors[1], ("readability".to_string(), 0.9));
        assert!(!parsed.rationale.contains("factors:"));
    }

    #[test]
    fn empty_label_cases() {
        let no_block = "reasoning only\nscore: 0.9";
        assert_eq!(
            parse_teacher_output(no_block, TaskKind::CodeGeneration),
            Err(ParseError::EmptyLabel(TaskKind::CodeGeneration))
        );
        let empty_block = "reasoning\n```python\n```\nscore: 0.9";
        assert_eq!(
            parse_teacher_output(empty_block, TaskKind::CodeGeneration),
            Err(ParseError::EmptyLabel(TaskKind::CodeGeneration))
        );
    }

    #[test]
    fn empty_rationale_detected() {
        let raw = "Answer: 3\nscore: 0.92";
        assert_eq!(
            parse_teacher_output(raw, TaskKind::Math),
            Err(ParseError::EmptyRationale)
        );
    }

    #[test]
    fn student_output_needs_no_score() {
        let raw = "short reasoning\nAnswer: 7";
        let (rationale, label) = parse_student_output(raw, TaskKind::Math).unwrap();
        assert_eq!(rationale, "short reasoning");
        assert_eq!(label, "7");
    }

    #[test]
    fn code_label_is_last_fenced_block() {
        let raw = "draft:\n```python\ndef a(): pass\n```\nfinal:\n```python\ndef b(): pass\n```\nscore: 0.9";
        let parsed = parse_teacher_output(raw, TaskKind::CodeGeneration).unwrap();
        assert_eq!(parsed.label, "def b(): pass");
        // only the final block is removed from the rationale
        assert!(parsed.rationale.contains("def a()"));
    }
}
