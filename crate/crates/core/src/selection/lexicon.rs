//! Emotion word lexicon.
//!
//! File format: one word per line, `alias -> canonical` (or `alias → canonical`)
//! lines for aliases, `#` comments and blank lines ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::SelectionError;

const SHIPPED: &str = include_str!("../../profiles/emotion_words.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionLexicon {
    words: BTreeSet<String>,
    aliases: BTreeMap<String, String>,
}

impl EmotionLexicon {
    pub fn new(words: BTreeSet<String>, aliases: BTreeMap<String, String>) -> Result<Self, SelectionError> {
        let words: BTreeSet<String> = words.into_iter().map(|w| w.to_lowercase()).collect();
        if words.is_empty() {
            return Err(SelectionError::Lexicon("lexicon has no words".into()));
        }
        let aliases: BTreeMap<String, String> =
            aliases.into_iter().map(|(a, c)| (a.to_lowercase(), c.to_lowercase())).collect();
        if let Some((alias, canonical)) = aliases.iter().find(|(_, c)| !words.contains(*c)) {
            return Err(SelectionError::Lexicon(format!(
                "alias `{alias}` maps to `{canonical}`, which is not a lexicon word"
            )));
        }
        Ok(Self { words, aliases })
    }

    pub fn parse(text: &str) -> Result<Self, SelectionError> {
        let mut words = BTreeSet::new();
        let mut aliases = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let split = line.split_once("->").or_else(|| line.split_once('→'));
            match split {
                Some((alias, canonical)) => {
                    let (alias, canonical) = (alias.trim(), canonical.trim());
                    if alias.is_empty() || canonical.is_empty() {
                        return Err(SelectionError::Lexicon(format!("line {}: incomplete alias", n + 1)));
                    }
                    aliases.insert(alias.to_owned(), canonical.to_owned());
                }
                None => {
                    words.insert(line.to_owned());
                }
            }
        }
        Self::new(words, aliases)
    }

    pub fn from_file(path: &Path) -> Result<Self, SelectionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SelectionError::Lexicon(format!("read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The vendored emotion word list.
    pub fn shipped() -> Self {
        Self::parse(SHIPPED).expect("shipped lexicon is valid")
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn words(&self) -> &BTreeSet<String> {
        &self.words
    }

    /// Canonical form of `word`; unaliased words map to themselves.
    pub fn canonical<'a>(&'a self, word: &'a str) -> &'a str {
        self.aliases.get(word).map_or(word, String::as_str)
    }
}

/// Emotion words found in `texts`, after lowercasing and alias mapping.
pub fn extract_emotion_words<S: AsRef<str>>(texts: &[S], lexicon: &EmotionLexicon) -> BTreeSet<String> {
    texts
        .iter()
        .flat_map(|t| t.as_ref().split(|c: char| !c.is_alphabetic()))
        .filter(|t| !t.is_empty())
        .filter_map(|t| {
            let lower = t.to_lowercase();
            let canonical = lexicon.canonical(&lower).to_owned();
            lexicon.contains(&canonical).then_some(canonical)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(words: &[&str]) -> EmotionLexicon {
        EmotionLexicon::new(words.iter().map(|w| w.to_string()).collect(), BTreeMap::new()).unwrap()
    }

    #[test]
    fn extracts_lexicon_words() {
        let got = extract_emotion_words(&["The author feels relieved because he passed exams"], &lex(&["relieved"]));
        assert_eq!(got, BTreeSet::from(["relieved".to_string()]));
    }

    #[test]
    fn empty_input() {
        assert!(extract_emotion_words(&[""], &lex(&["joy"])).is_empty());
        assert!(extract_emotion_words::<&str>(&[], &lex(&["joy"])).is_empty());
    }

    #[test]
    fn casing_and_punctuation() {
        let l = lex(&["happy", "happiness"]);
        let got = extract_emotion_words(&["HAPPY, happy; happiness!"], &l);
        // brute-force scan over the token list
        let tokens = ["happy", "happy", "happiness"];
        let expected: BTreeSet<String> = tokens.iter().filter(|t| l.contains(t)).map(|t| t.to_string()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn aliases_map_to_canonical() {
        let l = EmotionLexicon::parse("sadness\njoy\nsad -> sadness\nglad → joy\n# comment\n").unwrap();
        assert_eq!(l.canonical("sad"), "sadness");
        assert_eq!(
            extract_emotion_words(&["so sad and glad"], &l),
            BTreeSet::from(["joy".to_string(), "sadness".to_string()])
        );
    }

    #[test]
    fn invalid_lexicons() {
        assert!(EmotionLexicon::parse("# nothing\n").is_err());
        assert!(EmotionLexicon::parse("joy\nsad -> sadness\n").is_err());
        assert!(EmotionLexicon::parse("joy\n -> joy\n").is_err());
    }

    #[test]
    fn shipped_lexicon_covers_generated_labels() {
        let l = EmotionLexicon::shipped();
        for w in [
            "regret", "relieved", "guilt", "nervousness", "disappointment", "happiness", "sad",
            "awful", "surprised", "confused", "panicky", "upset", "embarrassed", "shame", "joy",
        ] {
            assert!(l.contains(w), "{w} missing");
        }
        for w in ["the", "author", "feels", "because", "passed", "exams"] {
            assert!(!l.contains(w), "{w} should not be an emotion word");
        }
    }
}
