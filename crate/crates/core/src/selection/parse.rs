//! Parsing of raw reasoning generations into (explanation, final label).

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::lexicon::EmotionLexicon;
use crate::pipeline::RawReasoning;

static FINAL_LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:\bthe\s+)?\bfinal\s+emotion\s+label\s+is\b\s*:?\s*").expect("valid regex")
});
static AUTHOR_FEELS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bthe\s+author\s+feels?\s+").expect("valid regex"));
// Connectives that end the label phrase of an "author feels" sentence.
static CLAUSE_BREAK: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\s+(?:because|since|as|when|that|about|at|for|of|after|due|and|but)\b")
        .expect("valid regex")
});

const SENTENCE_END: &[char] = &['.', '!', '?', '\n', ';'];
const MARKUP: &[char] = &[
    '*', '_', '"', '\'', '`', '(', ')', '[', ']', '{', '}', '<', '>', '.', ',', ';', ':', '!', '?',
    '~', '#', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}',
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReasoningSource {
    pub context_index: usize,
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedReasoning {
    pub source: ReasoningSource,
    pub label_raw: String,
    pub label_norm: String,
    pub explanation: String,
    pub complete: bool,
}

impl ParsedReasoning {
    /// Text compared for semantic similarity: the explanation, or the raw
    /// label for label-only outputs.
    pub fn similarity_text(&self) -> &str {
        if self.explanation.is_empty() {
            &self.label_raw
        } else {
            &self.explanation
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Malformed {
    pub source: ReasoningSource,
    pub reason: String,
}

/// Lowercases, strips surrounding punctuation and emphasis markup, collapses
/// whitespace, then applies the lexicon's alias map.
pub fn normalize_label(raw: &str, lexicon: Option<&EmotionLexicon>) -> String {
    let stripped = raw.trim_matches(|c: char| c.is_whitespace() || MARKUP.contains(&c));
    let collapsed = stripped.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    match lexicon {
        Some(lex) => lex.canonical(&collapsed).to_owned(),
        None => collapsed,
    }
}

fn label_phrase(rest: &str) -> &str {
    let end = rest.find(SENTENCE_END).unwrap_or(rest.len());
    rest[..end].trim()
}

/// Extracts the final label and its explanation.
///
/// The last "final emotion label is X" wins; without one, the last
/// "The author feels X" sentence is used. Never panics on any input.
pub fn parse_output(raw: &RawReasoning, lexicon: Option<&EmotionLexicon>) -> Result<ParsedReasoning, Malformed> {
    let source = ReasoningSource { context_index: raw.context_index, sample_index: raw.sample_index };
    parse_text(&raw.text, source, lexicon)
}

pub fn parse_text(
    text: &str,
    source: ReasoningSource,
    lexicon: Option<&EmotionLexicon>,
) -> Result<ParsedReasoning, Malformed> {
    let malformed = |reason: &str| Malformed { source, reason: reason.to_owned() };
    if text.trim().is_empty() {
        return Err(malformed("empty output"));
    }

    if let Some(m) = FINAL_LABEL.find_iter(text).last() {
        let label_raw = label_phrase(&text[m.end()..]);
        let label_norm = normalize_label(label_raw, lexicon);
        if !label_norm.is_empty() {
            let explanation = text[..m.start()].trim().to_owned();
            return Ok(ParsedReasoning {
                source,
                label_raw: label_raw.to_owned(),
                label_norm,
                complete: !explanation.is_empty(),
                explanation,
            });
        }
    }

    if let Some(m) = AUTHOR_FEELS.find_iter(text).last() {
        let sentence_rest = &text[m.end()..];
        let sentence_end = sentence_rest.find(SENTENCE_END).map_or(text.len(), |e| m.end() + e);
        let phrase = label_phrase(sentence_rest);
        let (label_raw, has_clause) = match CLAUSE_BREAK.find(phrase) {
            Some(b) => (phrase[..b.start()].trim(), true),
            None => (phrase, false),
        };
        let label_norm = normalize_label(label_raw, lexicon);
        if !label_norm.is_empty() {
            // a trailing clause ("because ...") is itself the explanation
            let explanation_end = if has_clause { sentence_end } else { m.start() };
            let mut explanation = text[..explanation_end].trim().to_owned();
            if has_clause && text[sentence_end..].starts_with(['.', '!', '?']) {
                explanation.push_str(&text[sentence_end..sentence_end + 1]);
            }
            return Ok(ParsedReasoning {
                source,
                label_raw: label_raw.to_owned(),
                label_norm,
                complete: !explanation.is_empty(),
                explanation,
            });
        }
    }

    Err(malformed("no final-label sentence found"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn parse(text: &str) -> Result<ParsedReasoning, Malformed> {
        parse_text(text, ReasoningSource { context_index: 0, sample_index: 0 }, None)
    }

    #[test]
    fn full_reasoning() {
        let p = parse("The author feels regret because the author realizes that they did not use the short time that they were alive in the most efficient way possible. The final emotion label is regret.").unwrap();
        assert_eq!(p.label_norm, "regret");
        assert_eq!(p.label_raw, "regret");
        assert!(p.explanation.starts_with("The author feels regret because"));
        assert!(p.explanation.ends_with("possible."));
        assert!(p.complete);
    }

    #[test]
    fn label_only() {
        let p = parse("The author feels panicky.").unwrap();
        assert_eq!(p.label_norm, "panicky");
        assert_eq!(p.explanation, "");
        assert!(!p.complete);
    }

    #[test]
    fn author_feels_with_reason_is_complete() {
        let p = parse("The author feels sad because the weather is gloomy.").unwrap();
        assert_eq!(p.label_norm, "sad");
        assert_eq!(p.explanation, "The author feels sad because the weather is gloomy.");
        assert!(p.complete);
    }

    #[test]
    fn malformed() {
        assert!(parse("asdf qwerty").is_err());
        assert!(parse("").is_err());
        assert!(parse("   \n").is_err());
        assert!(parse("The final emotion label is .").is_err());
    }

    #[test]
    fn last_occurrence_wins_and_markup_is_stripped() {
        let p = parse("First guess: the final emotion label is joy. On reflection the final emotion label is **Relief**!").unwrap();
        assert_eq!(p.label_raw, "**Relief**");
        assert_eq!(p.label_norm, "relief");
        assert!(p.explanation.ends_with("On reflection"));
    }

    #[test]
    fn label_without_explanation_via_final_pattern() {
        let p = parse("The final emotion label is fear.").unwrap();
        assert_eq!(p.label_norm, "fear");
        assert!(!p.complete);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_label("**regret**.", None), "regret");
        assert_eq!(normalize_label("Happiness", None), "happiness");
        let lex = EmotionLexicon::new(
            ["sadness".to_string()].into(),
            BTreeMap::from([("sad".to_string(), "sadness".to_string())]),
        )
        .unwrap();
        assert_eq!(normalize_label("sad", Some(&lex)), "sadness");
        assert_eq!(normalize_label("  Deeply   Moved ", None), "deeply moved");
    }

    #[test]
    fn parser_is_total_on_odd_input() {
        for s in ["\u{0}", "final emotion label is", "the author feels", "😀 the author feels 😀.", "FINAL EMOTION LABEL IS é"] {
            let _ = parse(s);
        }
        assert_eq!(parse("FINAL EMOTION LABEL IS é").unwrap().label_norm, "é");
    }
}
