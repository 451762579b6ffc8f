//! Few-shot prompt rendering and answer extraction.
//!
//! Templates live in `templates/*.toml` and are compiled into the binary.
//! Each template has a demonstration block, a test block (question with an
//! empty answer slot) and a reply block (what a perfect model would write
//! after the test block). A demonstration block always equals the test block
//! followed by the reply block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    MathCot,
    MultipleChoiceCot,
    CodeCompletion,
}

impl TemplateKind {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Math => TemplateKind::MathCot,
            TaskKind::MultipleChoice => TemplateKind::MultipleChoiceCot,
            TaskKind::Code => TemplateKind::CodeCompletion,
        }
    }

    pub fn task_kind(self) -> TaskKind {
        match self {
            TemplateKind::MathCot => TaskKind::Math,
            TemplateKind::MultipleChoiceCot => TaskKind::MultipleChoice,
            TemplateKind::CodeCompletion => TaskKind::Code,
        }
    }

    fn source(self) -> &'static str {
        match self {
            TemplateKind::MathCot => include_str!("../templates/math_cot.toml"),
            TemplateKind::MultipleChoiceCot => include_str!("../templates/multiple_choice_cot.toml"),
            TemplateKind::CodeCompletion => include_str!("../templates/code_completion.toml"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::MathCot => "math_cot",
            TemplateKind::MultipleChoiceCot => "multiple_choice_cot",
            TemplateKind::CodeCompletion => "code_completion",
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "math_cot" => Ok(TemplateKind::MathCot),
            "multiple_choice_cot" => Ok(TemplateKind::MultipleChoiceCot),
            "code_completion" => Ok(TemplateKind::CodeCompletion),
            other => Err(format!("unknown template `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub demo_block: String,
    pub test_block: String,
    pub reply_block: String,
}

impl PromptTemplate {
    pub fn builtin(kind: TemplateKind) -> Self {
        let t: PromptTemplate = toml::from_str(kind.source()).expect("bundled template parses");
        debug_assert_eq!(t.kind, kind);
        t
    }

    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        toml::from_str(text).map_err(|e| PromptError::BadTemplate(e.to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {template} cannot render `{id}` of kind {found}")]
    KindMismatch {
        template: TemplateKind,
        id: String,
        found: TaskKind,
    },
    #[error("template placeholder `{{{0}}}` is not recognised")]
    UnknownPlaceholder(String),
    #[error("invalid template: {0}")]
    BadTemplate(String),
    #[error("prompt has {len} characters, limit is {limit}")]
    TooLong { len: usize, limit: usize },
}

/// Strips trailing line breaks so multi-line fields do not leave blank lines.
fn field(s: &str) -> &str {
    s.trim_end_matches(['\n', '\r'])
}

/// Single-pass placeholder substitution; substituted text is never rescanned.
fn fill(pattern: &str, ex: &Example, out: &mut String) -> Result<(), PromptError> {
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            out.push_str(&rest[open..]);
            return Ok(());
        };
        let name = &after[..close];
        let value = match name {
            "question" => field(&ex.question),
            "solution" => field(&ex.solution),
            "answer" => field(&ex.answer),
            "code_prompt" => field(ex.code_prompt().unwrap_or_default()),
            "id" => ex.id.as_str(),
            other => return Err(PromptError::UnknownPlaceholder(other.to_string())),
        };
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(())
}

fn check_kind(template: &PromptTemplate, ex: &Example) -> Result<(), PromptError> {
    if ex.task_kind != template.kind.task_kind() {
        return Err(PromptError::KindMismatch {
            template: template.kind,
            id: ex.id.clone(),
            found: ex.task_kind,
        });
    }
    Ok(())
}

/// Demonstrations in the given order, then the test question with its
/// answer slot left open.
pub fn render_prompt(
    template: &PromptTemplate,
    demos: &[&Example],
    test: &Example,
) -> Result<String, PromptError> {
    let mut out = String::new();
    for demo in demos {
        check_kind(template, demo)?;
        fill(&template.demo_block, demo, &mut out)?;
    }
    check_kind(template, test)?;
    fill(&template.test_block, test, &mut out)?;
    Ok(out)
}

pub fn check_length(prompt: &str, limit: Option<usize>) -> Result<(), PromptError> {
    match limit {
        Some(limit) if prompt.chars().count() > limit => Err(PromptError::TooLong {
            len: prompt.chars().count(),
            limit,
        }),
        _ => Ok(()),
    }
}

/// The continuation a model answering `ex` perfectly would produce.
pub fn render_reply(template: &PromptTemplate, ex: &Example) -> Result<String, PromptError> {
    check_kind(template, ex)?;
    let mut out = String::new();
    fill(&template.reply_block, ex, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    ExtractedAnswerLine,
    Boxed,
    LastLine,
    OptionLetter,
    CodeFence,
    TrailingCode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub raw: String,
    pub answer: Option<String>,
    pub method: Option<ExtractionMethod>,
    /// Extractors tried before the one that succeeded (all of them when
    /// `answer` is absent).
    pub failed: Vec<ExtractionMethod>,
}

const ANSWER_MARKER: &str = "### Extracted Answer:";
const COMPLETION_MARKER: &str = "### Code Completion:";
const QUESTION_MARKER: &str = "### Question:";

/// Comparison normalization: trim, drop trailing periods, strip `$...$`
/// delimiters and unwrap a surrounding `\boxed{...}`, repeated until stable.
/// Line breaks become spaces.
pub fn normalize_answer(s: &str) -> String {
    let mut cur: String = s.replace(['\r', '\n'], " ");
    loop {
        let mut next = cur.trim().trim_end_matches('.').trim().to_string();
        if next.len() >= 2 && next.starts_with('$') && next.ends_with('$') {
            next = next[1..next.len() - 1].to_string();
        }
        if let Some(inner) = whole_boxed(&next) {
            next = inner.to_string();
        }
        if next == cur {
            return next;
        }
        cur = next;
    }
}

/// Content of `\boxed{...}` if it spans the whole string.
fn whole_boxed(s: &str) -> Option<&str> {
    let body = s.strip_prefix("\\boxed{")?;
    let end = matching_brace(body)?;
    (end == body.len() - 1).then(|| &body[..end])
}

/// Byte offset of the `}` closing an already-opened brace.
fn matching_brace(s: &str) -> Option<usize> {
    let mut depth = 1usize;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn last_boxed(s: &str) -> Option<&str> {
    let start = s.rfind("\\boxed{")? + "\\boxed{".len();
    let body = &s[start..];
    matching_brace(body).map(|end| &body[..end])
}

fn answer_line(s: &str) -> Option<&str> {
    let start = s.find(ANSWER_MARKER)? + ANSWER_MARKER.len();
    Some(s[start..].lines().next().unwrap_or_default())
}

fn last_nonempty_line(s: &str) -> Option<&str> {
    s.lines().rev().find(|l| !l.trim().is_empty())
}

/// First standalone option letter A-E (any case, optional parentheses or
/// trailing period/colon), returned upper-cased.
pub fn option_letter(s: &str) -> Option<String> {
    s.split_whitespace().find_map(|tok| {
        let t = tok.trim_start_matches(['(', '[', '*']).trim_end_matches([')', ']', '.', ':', ',', '*', '$']);
        let t = t.trim_start_matches('$');
        let mut chars = t.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if matches!(c.to_ascii_uppercase(), 'A'..='E') => {
                Some(c.to_ascii_uppercase().to_string())
            }
            _ => None,
        }
    })
}

fn non_empty(s: String) -> Option<String> {
    (!s.is_empty()).then_some(s)
}

/// Pulls the final answer out of raw model output. Never fails: an absent
/// answer is a value that scores as incorrect.
pub fn extract_answer(kind: TaskKind, output: &str) -> Extraction {
    let mut failed = Vec::new();
    let done = |answer: Option<String>, method: ExtractionMethod, failed: &mut Vec<_>| {
        if answer.is_none() {
            failed.push(method);
        }
        answer.map(|a| (a, method))
    };

    let found = match kind {
        TaskKind::Math => done(
            answer_line(output).map(normalize_answer).and_then(non_empty),
            ExtractionMethod::ExtractedAnswerLine,
            &mut failed,
        )
        .or_else(|| {
            done(
                last_boxed(output).map(normalize_answer).and_then(non_empty),
                ExtractionMethod::Boxed,
                &mut failed,
            )
        })
        .or_else(|| {
            done(
                last_nonempty_line(output).map(normalize_answer).and_then(non_empty),
                ExtractionMethod::LastLine,
                &mut failed,
            )
        }),
        TaskKind::MultipleChoice => done(
            answer_line(output).and_then(option_letter),
            ExtractionMethod::ExtractedAnswerLine,
            &mut failed,
        )
        .or_else(|| done(last_boxed(output).and_then(option_letter), ExtractionMethod::Boxed, &mut failed))
        .or_else(|| {
            done(
                last_nonempty_line(output).and_then(option_letter),
                ExtractionMethod::OptionLetter,
                &mut failed,
            )
        }),
        TaskKind::Code => {
            let (code, method) = extract_code(output);
            done(code, method, &mut failed)
        }
    };

    let (answer, method) = match found {
        Some((a, m)) => (Some(a), Some(m)),
        None => (None, None),
    };
    Extraction {
        raw: output.to_string(),
        answer,
        method,
        failed,
    }
}

fn trim_code(s: &str) -> &str {
    s.trim_start_matches(['\n', '\r']).trim_end()
}

fn extract_code(output: &str) -> (Option<String>, ExtractionMethod) {
    let mut body = match output.find(COMPLETION_MARKER) {
        Some(i) => &output[i + COMPLETION_MARKER.len()..],
        None => output,
    };
    if let Some(next) = body.find(QUESTION_MARKER) {
        body = &body[..next];
    }
    if let Some(open) = body.find("```") {
        let after = &body[open + 3..];
        // skip the info string (e.g. "python")
        let content = after.find('\n').map_or("", |nl| &after[nl + 1..]);
        let content = match content.find("```") {
            Some(close) => &content[..close],
            None => content,
        };
        return (non_empty(trim_code(content).to_string()), ExtractionMethod::CodeFence);
    }
    (non_empty(trim_code(body).to_string()), ExtractionMethod::TrailingCode)
}

/// Exact match after [`normalize_answer`]; option letters compare
/// case-insensitively.
pub fn answers_match(kind: TaskKind, predicted: Option<&str>, gold: &str) -> bool {
    let Some(p) = predicted else { return false };
    match kind {
        TaskKind::MultipleChoice => match (option_letter(p), option_letter(gold)) {
            (Some(a), Some(b)) => a == b,
            _ => normalize_answer(p) == normalize_answer(gold),
        },
        _ => normalize_answer(p) == normalize_answer(gold),
    }
}
