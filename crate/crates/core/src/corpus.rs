//! Demonstration corpora and test sets.
//!
//! A corpus file holds one JSON record per line (see `docs/corpus-format.md`).
//! Loading is all-or-nothing: either every record parses and validates, or the
//! load fails with an error that points at the offending line.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Math,
    MultipleChoice,
    Code,
}

impl TaskKind {
    /// Ordinal difficulty range used when a corpus does not declare one:
    /// MATH levels 1-5, ARC grades 3-9, Mercury Easy/Medium/Hard as 1-3.
    pub fn default_level_range(self) -> (i64, i64) {
        match self {
            TaskKind::Math => (1, 5),
            TaskKind::MultipleChoice => (3, 9),
            TaskKind::Code => (1, 3),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Math => "math",
            TaskKind::MultipleChoice => "multiple_choice",
            TaskKind::Code => "code",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "math" => Ok(TaskKind::Math),
            "multiple_choice" | "mc" => Ok(TaskKind::MultipleChoice),
            "code" => Ok(TaskKind::Code),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

/// Human-annotated difficulty. `secondary` is a completion rate where higher
/// means easier (e.g. a Leetcode acceptance rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyMeta {
    pub primary_level: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary: Option<f64>,
}

impl DifficultyMeta {
    pub fn level(primary_level: i64) -> Self {
        Self {
            primary_level,
            secondary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub task_kind: TaskKind,
    pub question: String,
    pub solution: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<DifficultyMeta>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl Example {
    pub fn primary_level(&self) -> Option<i64> {
        self.difficulty.map(|d| d.primary_level)
    }

    /// Grouping label used in reports (e.g. the MATH subject).
    pub fn topic(&self) -> Option<&str> {
        self.extra.get("topic").map(String::as_str)
    }

    /// Starter code shown under `### Code Prompt:` for code tasks.
    pub fn code_prompt(&self) -> Option<&str> {
        self.extra.get("code_prompt").map(String::as_str)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: input is not valid UTF-8")]
    NotUtf8 { line: usize },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {field} must be non-empty")]
    EmptyField { line: usize, field: &'static str },
    #[error("duplicate id `{id}` on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("line {line}: record `{id}` has task_kind {found}, expected {expected}")]
    KindMismatch {
        line: usize,
        id: String,
        expected: TaskKind,
        found: TaskKind,
    },
    #[error("line {line}: record `{id}` has no difficulty.primary_level")]
    MissingDifficulty { line: usize, id: String },
    #[error("line {line}: record `{id}` has primary_level {level} outside [{min}, {max}]")]
    LevelOutOfRange {
        line: usize,
        id: String,
        level: i64,
        min: i64,
        max: i64,
    },
    #[error("line {line}: record `{id}` has secondary difficulty {value} outside [0, 1]")]
    SecondaryOutOfRange { line: usize, id: String, value: f64 },
    #[error("corpus is empty")]
    Empty,
}

/// Controls how strictly a corpus file is validated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Training corpora must carry a primary level on every record.
    pub require_difficulty: bool,
    pub level_range: Option<(i64, i64)>,
}

impl LoadOptions {
    pub fn training() -> Self {
        Self {
            require_difficulty: true,
            level_range: None,
        }
    }

    pub fn test_set() -> Self {
        Self {
            require_difficulty: false,
            level_range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub task_kind: TaskKind,
    pub declared_level_range: (i64, i64),
    examples: Vec<Example>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus from already-constructed examples, applying the same
    /// validation as the file loader (line numbers are 1-based positions).
    pub fn from_examples(
        name: impl Into<String>,
        task_kind: TaskKind,
        examples: Vec<Example>,
        options: LoadOptions,
    ) -> Result<Self, CorpusError> {
        let range = options
            .level_range
            .unwrap_or_else(|| task_kind.default_level_range());
        let mut index: HashMap<String, usize> = HashMap::with_capacity(examples.len());
        for (pos, ex) in examples.iter().enumerate() {
            validate_example(ex, pos + 1, task_kind, range, options.require_difficulty)?;
            if let Some(&first) = index.get(&ex.id) {
                return Err(CorpusError::DuplicateId {
                    id: ex.id.clone(),
                    first: first + 1,
                    second: pos + 1,
                });
            }
            index.insert(ex.id.clone(), pos);
        }
        if examples.is_empty() {
            return Err(CorpusError::Empty);
        }
        Ok(Self {
            name: name.into(),
            task_kind,
            declared_level_range: range,
            examples,
            index,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.index.get(id).map(|&i| &self.examples[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    /// Serializes back into the line-delimited file format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }
}

fn validate_example(
    ex: &Example,
    line: usize,
    expected: TaskKind,
    (min, max): (i64, i64),
    require_difficulty: bool,
) -> Result<(), CorpusError> {
    if ex.id.trim().is_empty() {
        return Err(CorpusError::EmptyField { line, field: "id" });
    }
    if ex.task_kind != expected {
        return Err(CorpusError::KindMismatch {
            line,
            id: ex.id.clone(),
            expected,
            found: ex.task_kind,
        });
    }
    if ex.question.trim().is_empty() {
        return Err(CorpusError::EmptyField {
            line,
            field: "question",
        });
    }
    if ex.answer.trim().is_empty() {
        return Err(CorpusError::EmptyField {
            line,
            field: "answer",
        });
    }
    match ex.difficulty {
        None if require_difficulty => {
            return Err(CorpusError::MissingDifficulty {
                line,
                id: ex.id.clone(),
            })
        }
        None => {}
        Some(d) => {
            if d.primary_level < min || d.primary_level > max {
                return Err(CorpusError::LevelOutOfRange {
                    line,
                    id: ex.id.clone(),
                    level: d.primary_level,
                    min,
                    max,
                });
            }
            if let Some(s) = d.secondary {
                if !(0.0..=1.0).contains(&s) {
                    return Err(CorpusError::SecondaryOutOfRange {
                        line,
                        id: ex.id.clone(),
                        value: s,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Parses corpus bytes. Blank lines are skipped but still counted, so
/// reported line numbers match what an editor shows.
pub fn parse_corpus(
    name: &str,
    bytes: &[u8],
    expected_kind: TaskKind,
    options: LoadOptions,
) -> Result<Corpus, CorpusError> {
    let range = options
        .level_range
        .unwrap_or_else(|| expected_kind.default_level_range());
    let mut examples = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut lines_of: Vec<usize> = Vec::new();

    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = i + 1;
        let text = std::str::from_utf8(raw).map_err(|_| CorpusError::NotUtf8 { line })?;
        let text = text.trim_end_matches('\r');
        if text.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        validate_example(&ex, line, expected_kind, range, options.require_difficulty)?;
        if let Some(&first) = index.get(&ex.id) {
            return Err(CorpusError::DuplicateId {
                id: ex.id,
                first: lines_of[first],
                second: line,
            });
        }
        index.insert(ex.id.clone(), examples.len());
        lines_of.push(line);
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(Corpus {
        name: name.to_string(),
        task_kind: expected_kind,
        declared_level_range: range,
        examples,
        index,
    })
}

/// Loads a training corpus: every record must carry a primary level.
pub fn load_corpus(path: impl AsRef<Path>, expected_kind: TaskKind) -> Result<Corpus, CorpusError> {
    load_corpus_with(path, expected_kind, LoadOptions::training())
}

pub fn load_corpus_with(
    path: impl AsRef<Path>,
    expected_kind: TaskKind,
    options: LoadOptions,
) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_corpus(&name, &bytes, expected_kind, options)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Overlap {
    pub train_id: String,
    pub test_id: String,
    pub same_id: bool,
    pub same_question: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OverlapReport {
    pub overlaps: Vec<Overlap>,
}

impl OverlapReport {
    pub fn is_clean(&self) -> bool {
        self.overlaps.is_empty()
    }
}

/// Lists every train/test pair sharing an id or an exact question text.
pub fn split_check(train: &Corpus, test: &Corpus) -> OverlapReport {
    let mut by_question: HashMap<&str, Vec<&str>> = HashMap::new();
    for ex in train.examples() {
        by_question.entry(ex.question.as_str()).or_default().push(&ex.id);
    }
    let mut overlaps = Vec::new();
    for t in test.examples() {
        let mut hits: Vec<&str> = by_question
            .get(t.question.as_str())
            .cloned()
            .unwrap_or_default();
        if train.get(&t.id).is_some() && !hits.contains(&t.id.as_str()) {
            hits.push(&t.id);
        }
        hits.sort_unstable();
        for train_id in hits {
            let train_ex = train.get(train_id).expect("indexed id");
            overlaps.push(Overlap {
                train_id: train_id.to_string(),
                test_id: t.id.clone(),
                same_id: train_id == t.id,
                same_question: train_ex.question == t.question,
            });
        }
    }
    OverlapReport { overlaps }
}
