//! Prompt templates and parsers for LLM output.
//!
//! Templates are versioned text assets. Rendering substitutes `{name}`
//! placeholders in a single pass, so placeholder-like text inside inserted
//! articles is left untouched.

use std::sync::OnceLock;

use regex::Regex;

pub const CQG_TEMPLATE: &str = include_str!("../assets/prompts/cqg_v1.txt");
pub const QAEMB_TEMPLATE: &str = include_str!("../assets/prompts/qaemb_v1.txt");
pub const QA_TEMPLATE: &str = include_str!("../assets/prompts/qa_v1.txt");

/// Questions requested per generation prompt.
pub const QUESTIONS_PER_GENERATION: usize = 10;

fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in values {
            let key_len = name.len() + 2;
            if tail.len() >= key_len
                && tail.as_bytes()[key_len - 1] == b'}'
                && &tail[1..key_len - 1] == *name
            {
                out.push_str(value);
                rest = &tail[key_len..];
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

fn enumerate_lines<S: AsRef<str>>(prefix: &str, items: &[S]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{prefix}{}. {}", i + 1, t.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Contrastive generation prompt over positive and negative articles.
pub fn render_cqg_prompt<S: AsRef<str>>(positives: &[S], negatives: &[S]) -> String {
    fill(
        CQG_TEMPLATE,
        &[
            ("positive_examples", &enumerate_lines("Positive ", positives)),
            ("negative_examples", &enumerate_lines("Negative ", negatives)),
        ],
    )
}

/// Example-based generation prompt (the QAEmb-style baseline).
pub fn render_qaemb_prompt<S: AsRef<str>>(references: &[S], examples: &[S]) -> String {
    fill(
        QAEMB_TEMPLATE,
        &[
            ("reference_articles", &enumerate_lines("", references)),
            ("example_questions", &enumerate_lines("", examples)),
        ],
    )
}

/// Yes/no answering prompt for one text and up to 20 questions.
pub fn render_qa_prompt<S: AsRef<str>>(text_chunk: &str, questions: &[S]) -> String {
    fill(
        QA_TEMPLATE,
        &[
            ("text_chunk", text_chunk),
            ("questions", &enumerate_lines("", questions)),
        ],
    )
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\s*[.)]\s+(.*?)\s*$").expect("valid regex"))
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("no numbered questions found in LLM output")]
pub struct ParseError {
    pub raw: String,
}

/// Questions parsed from a generation response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQuestions {
    pub questions: Vec<String>,
    /// Numbered lines dropped because they were not questions.
    pub rejected: usize,
    /// Questions beyond [`QUESTIONS_PER_GENERATION`] that were cut.
    pub truncated: usize,
}

/// Extract `N. question?` lines in order; surrounding prose is ignored.
pub fn parse_questions(output: &str) -> Result<ParsedQuestions, ParseError> {
    let mut questions = Vec::new();
    let mut rejected = 0;
    for line in output.lines() {
        let Some(caps) = numbered_line().captures(line) else {
            continue;
        };
        let text = caps[2].trim_matches('*').trim();
        if text.ends_with('?') && text.len() > 1 {
            questions.push(text.to_owned());
        } else {
            rejected += 1;
        }
    }
    if questions.is_empty() {
        return Err(ParseError {
            raw: output.to_owned(),
        });
    }
    let truncated = questions.len().saturating_sub(QUESTIONS_PER_GENERATION);
    questions.truncate(QUESTIONS_PER_GENERATION);
    Ok(ParsedQuestions {
        questions,
        rejected,
        truncated,
    })
}

/// Parse `N. yes|no` lines for `n` questions. Entries that are missing or
/// not a clear yes/no are `None`.
pub fn parse_answers(output: &str, n: usize) -> Vec<Option<bool>> {
    let mut answers = vec![None; n];
    for line in output.lines() {
        let Some(caps) = numbered_line().captures(line) else {
            continue;
        };
        let Ok(idx) = caps[1].parse::<usize>() else {
            continue;
        };
        if idx == 0 || idx > n {
            continue;
        }
        let word: String = caps[2]
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        answers[idx - 1] = match word.as_str() {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        };
    }
    answers
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        let out = render_qa_prompt("contains {questions} literally", &["Q?"]);
        assert!(out.contains("contains {questions} literally"));
        assert!(out.contains("\n1. Q?\n"));
    }

    #[test]
    fn cqg_enumeration() {
        let pos: Vec<String> = (0..6).map(|i| format!("p{i}")).collect();
        let neg: Vec<String> = (0..36).map(|i| format!("n{i}")).collect();
        let out = render_cqg_prompt(&pos, &neg);
        assert!(out.contains("Positive 1. p0\n"));
        assert!(out.contains("Positive 6. p5\n\n"));
        assert!(!out.contains("Positive 7."));
        assert!(out.contains("Negative 36. n35\n\n"));
        assert!(!out.contains("Negative 37."));
    }

    #[test]
    fn unicode_is_preserved() {
        let out = render_cqg_prompt(&["naïve café — 東京"], &["ß"]);
        assert!(out.contains("Positive 1. naïve café — 東京"));
    }

    #[test]
    fn parses_simple_list() {
        let p = parse_questions("1. Is it about AI?\n2. Is it about sports?").unwrap();
        assert_eq!(p.questions, ["Is it about AI?", "Is it about sports?"]);
    }

    #[test]
    fn prose_is_ignored() {
        let mut out = String::from("Sure! Here are the questions you asked for.\nThey contrast the groups.\n\n");
        for i in 1..=10 {
            out.push_str(&format!("{i}. Question number {i}?  \n"));
        }
        out.push_str("\nLet me know if you need more.");
        let p = parse_questions(&out).unwrap();
        assert_eq!(p.questions.len(), 10);
        assert_eq!(p.questions[9], "Question number 10?");
    }

    #[test]
    fn nothing_numbered_is_an_error() {
        let err = parse_questions("no questions here").unwrap_err();
        assert_eq!(err.raw, "no questions here");
    }

    #[test]
    fn extra_questions_are_truncated() {
        let out: String = (1..=12).map(|i| format!("{i}. Q{i}?\n")).collect();
        let p = parse_questions(&out).unwrap();
        assert_eq!(p.questions.len(), 10);
        assert_eq!(p.truncated, 2);
    }

    #[test]
    fn parses_answers() {
        assert_eq!(parse_answers("1. yes\n2. no", 2), [Some(true), Some(false)]);
        assert_eq!(
            parse_answers("1. Yes.\n3. NO\n2. maybe\n9. yes", 3),
            [Some(true), None, Some(false)]
        );
        assert_eq!(parse_answers("", 1), [None]);
    }
}
