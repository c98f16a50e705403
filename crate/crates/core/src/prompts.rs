//! Prompt construction.
//!
//! Four prompt kinds exist: the few-shot context prompt, the emotion QA
//! prompt, and two zero-shot baselines. Templates use literal `{input}` and
//! `{context}` placeholders and are substituted in a single pass, so text
//! inserted for one placeholder is never re-expanded. Every render joins lines
//! with a single `\n`; blocks of the context prompt are separated by one blank
//! line.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INPUT_PLACEHOLDER: &str = "input";
pub const CONTEXT_PLACEHOLDER: &str = "context";

const INPUT_PREFIX: &str = "Input: ";
const CONTEXT_PREFIX: &str = "Context: ";
const CONTEXT_CUE: &str = "Context:";

pub const EMOTION_QA_TEMPLATE: &str = "Q: Given the context, what emotions does the author of the input text feel and why?\nGive me the reason followed by the final emotion label.\nContext: {context}\nInput: {input}\nA: Let's think step-by-step.";
pub const BASELINE_STANDARD_TEMPLATE: &str =
    "This is an emotion classification task.\nText: {input}\nEmotion:";
pub const BASELINE_COT_TEMPLATE: &str = "Q: What emotion is expressed by the author in the input text? Let's think step-by-step\nText: {input}\nEmotion:";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("context is empty; the emotion QA prompt requires a generated context")]
    EmptyContext,
    #[error("{kind} prompts are not rendered by {renderer}")]
    WrongRenderer { kind: PromptKind, renderer: &'static str },
    #[error("template for {kind} references unknown placeholder `{{{name}}}`")]
    UnknownPlaceholder { kind: PromptKind, name: String },
    #[error("template for {kind} is missing placeholder `{{{name}}}`")]
    MissingPlaceholder { kind: PromptKind, name: &'static str },
    #[error("malformed context prompt: {0}")]
    MalformedContextPrompt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    ContextGen,
    EmotionQa,
    BaselineStandard,
    BaselineCot,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [
        PromptKind::ContextGen,
        PromptKind::EmotionQa,
        PromptKind::BaselineStandard,
        PromptKind::BaselineCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::ContextGen => "context_gen",
            PromptKind::EmotionQa => "emotion_qa",
            PromptKind::BaselineStandard => "baseline_standard",
            PromptKind::BaselineCot => "baseline_cot",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub input: String,
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotTemplate {
    pub instruction: String,
    #[serde(default)]
    pub examples: Vec<FewShotExample>,
}

impl FewShotTemplate {
    pub fn k(&self) -> usize {
        self.examples.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub text: String,
    pub substitutions: BTreeMap<String, String>,
}

/// Prompt templates for one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptProfile {
    pub context: FewShotTemplate,
    #[serde(default = "default_emotion_qa")]
    pub emotion_qa: String,
    #[serde(default = "default_baseline_standard")]
    pub baseline_standard: String,
    #[serde(default = "default_baseline_cot")]
    pub baseline_cot: String,
}

fn default_emotion_qa() -> String {
    EMOTION_QA_TEMPLATE.to_owned()
}
fn default_baseline_standard() -> String {
    BASELINE_STANDARD_TEMPLATE.to_owned()
}
fn default_baseline_cot() -> String {
    BASELINE_COT_TEMPLATE.to_owned()
}

impl PromptProfile {
    pub fn with_context(context: FewShotTemplate) -> Self {
        Self {
            context,
            emotion_qa: default_emotion_qa(),
            baseline_standard: default_baseline_standard(),
            baseline_cot: default_baseline_cot(),
        }
    }

    /// Checks every template references only known placeholders and the
    /// ones its kind needs.
    pub fn validate(&self) -> Result<(), PromptError> {
        check_template(PromptKind::EmotionQa, &self.emotion_qa, &[CONTEXT_PLACEHOLDER, INPUT_PLACEHOLDER])?;
        check_template(PromptKind::BaselineStandard, &self.baseline_standard, &[INPUT_PLACEHOLDER])?;
        check_template(PromptKind::BaselineCot, &self.baseline_cot, &[INPUT_PLACEHOLDER])?;
        Ok(())
    }

    pub fn template(&self, kind: PromptKind) -> Option<&str> {
        match kind {
            PromptKind::ContextGen => None,
            PromptKind::EmotionQa => Some(&self.emotion_qa),
            PromptKind::BaselineStandard => Some(&self.baseline_standard),
            PromptKind::BaselineCot => Some(&self.baseline_cot),
        }
    }

    pub fn render_context(&self, input_text: &str) -> Result<RenderedPrompt, PromptError> {
        render_context_prompt(&self.context, input_text)
    }

    pub fn render_emotion(&self, context: &str, input_text: &str) -> Result<RenderedPrompt, PromptError> {
        render_emotion_prompt_with(&self.emotion_qa, context, input_text)
    }

    pub fn render_baseline(&self, kind: PromptKind, input_text: &str) -> Result<RenderedPrompt, PromptError> {
        let template = match kind {
            PromptKind::BaselineStandard | PromptKind::BaselineCot => {
                self.template(kind).expect("baseline kinds have templates")
            }
            _ => return Err(PromptError::WrongRenderer { kind, renderer: "render_baseline_prompt" }),
        };
        if input_text.is_empty() {
            return Err(PromptError::EmptyInput);
        }
        let subs = BTreeMap::from([(INPUT_PLACEHOLDER.to_owned(), input_text.to_owned())]);
        Ok(RenderedPrompt { kind, text: substitute(template, &subs), substitutions: subs })
    }
}

/// Placeholder names (`{name}` with a lowercase identifier) in a template.
fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                out.push(after[..close].to_owned());
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

fn check_template(kind: PromptKind, template: &str, required: &[&'static str]) -> Result<(), PromptError> {
    let found = placeholders(template);
    if let Some(unknown) = found.iter().find(|p| !required.contains(&p.as_str())) {
        return Err(PromptError::UnknownPlaceholder { kind, name: unknown.clone() });
    }
    if let Some(missing) = required.iter().find(|r| !found.iter().any(|f| f == *r)) {
        return Err(PromptError::MissingPlaceholder { kind, name: missing });
    }
    Ok(())
}

/// Single-pass substitution of `{name}` placeholders present in `subs`.
fn substitute(template: &str, subs: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(template.len() + subs.values().map(String::len).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').and_then(|close| subs.get(&after[..close]).map(|v| (close, v))) {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Instruction, then each example as an `Input:`/`Context:` pair, then the
/// new input and a bare `Context:` cue.
pub fn render_context_prompt(template: &FewShotTemplate, input_text: &str) -> Result<RenderedPrompt, PromptError> {
    if input_text.is_empty() {
        return Err(PromptError::EmptyInput);
    }
    let mut blocks: Vec<String> = Vec::with_capacity(template.k() + 2);
    if !template.instruction.is_empty() {
        blocks.push(template.instruction.clone());
    }
    for ex in &template.examples {
        blocks.push(format!("{INPUT_PREFIX}{}\n{CONTEXT_PREFIX}{}", ex.input, ex.context));
    }
    blocks.push(format!("{INPUT_PREFIX}{input_text}\n{CONTEXT_CUE}"));
    Ok(RenderedPrompt {
        kind: PromptKind::ContextGen,
        text: blocks.join("\n\n"),
        substitutions: BTreeMap::from([(INPUT_PLACEHOLDER.to_owned(), input_text.to_owned())]),
    })
}

pub fn render_emotion_prompt(context: &str, input_text: &str) -> Result<RenderedPrompt, PromptError> {
    render_emotion_prompt_with(EMOTION_QA_TEMPLATE, context, input_text)
}

fn render_emotion_prompt_with(template: &str, context: &str, input_text: &str) -> Result<RenderedPrompt, PromptError> {
    if context.trim().is_empty() {
        return Err(PromptError::EmptyContext);
    }
    if input_text.is_empty() {
        return Err(PromptError::EmptyInput);
    }
    let subs = BTreeMap::from([
        (CONTEXT_PLACEHOLDER.to_owned(), context.to_owned()),
        (INPUT_PLACEHOLDER.to_owned(), input_text.to_owned()),
    ]);
    Ok(RenderedPrompt { kind: PromptKind::EmotionQa, text: substitute(template, &subs), substitutions: subs })
}

pub fn render_baseline_prompt(kind: PromptKind, input_text: &str) -> Result<RenderedPrompt, PromptError> {
    PromptProfile::with_context(FewShotTemplate { instruction: String::new(), examples: vec![] })
        .render_baseline(kind, input_text)
}

/// A context prompt split back into its parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPromptBlocks {
    pub instruction: String,
    pub examples: Vec<FewShotExample>,
    pub input: String,
}

impl ContextPromptBlocks {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let malformed = |m: &str| PromptError::MalformedContextPrompt(m.to_owned());
        let mut blocks: Vec<&str> = text.split("\n\n").collect();
        let last = blocks.pop().ok_or_else(|| malformed("empty"))?;
        let input = last
            .strip_prefix(INPUT_PREFIX)
            .and_then(|b| b.strip_suffix(&format!("\n{CONTEXT_CUE}")))
            .ok_or_else(|| malformed("final block is not an input followed by the context cue"))?;
        let mut instruction = String::new();
        if let Some(first) = blocks.first() {
            if !first.starts_with(INPUT_PREFIX) {
                instruction = blocks.remove(0).to_owned();
            }
        }
        let examples = blocks
            .into_iter()
            .map(|b| {
                let (i, c) = b.split_once('\n').ok_or_else(|| malformed("example block has one line"))?;
                Ok(FewShotExample {
                    input: i.strip_prefix(INPUT_PREFIX).ok_or_else(|| malformed("example without input"))?.to_owned(),
                    context: c.strip_prefix(CONTEXT_PREFIX).ok_or_else(|| malformed("example without context"))?.to_owned(),
                })
            })
            .collect::<Result<_, PromptError>>()?;
        Ok(Self { instruction, examples, input: input.to_owned() })
    }
}
