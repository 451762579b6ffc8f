//! End-to-end experiments: select, order, render, generate, extract, score.
//!
//! Each seed's instance records are appended to `records-seed-<seed>.jsonl`
//! in the output directory as soon as they are produced. A rerun with the
//! same configuration skips every instance already on disk, so an
//! interrupted run resumes where it stopped. Reports are computed from the
//! records sorted by (seed, test order), which makes them independent of
//! worker count and completion order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{load_corpus_with, Corpus, CorpusError, Example, LoadOptions, TaskKind};
use crate::curriculum::{partition, partition_keys, sorted_keys, CurriculumError, PartitionSet};
use crate::embeddings::{load_embeddings, EmbeddingError, EmbeddingStore, Metric};
use crate::evaluation::{
    accuracy, aggregate, beyond_metric, format_cell, load_code_tasks, pass_metric, CodeRunner, CodeTask,
    EvalRecord, GroupValue, MetricError, PythonRunner, SandboxConfig, SeedRun, OVERALL,
};
use crate::inference::{
    generate, DecodingParams, Dialect, Endpoint, GenerationRequest, HttpModel, InferenceError, MockModel,
    ModelClient, RetryPolicy, Secret,
};
use crate::prompting::{
    answers_match, check_length, extract_answer, render_prompt, PromptError, PromptTemplate, TemplateKind,
};
use crate::selection::{
    DemonstrationSet, OrderMode, Retrieval, SelectionConfig, SelectionError, Selector, Strategy,
};

pub const DEFAULT_CONCURRENCY: usize = 4;

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_concurrency() -> usize {
    DEFAULT_CONCURRENCY
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    EchoGold,
    Empty,
    FixedWrong,
}

fn default_base_url_env() -> String {
    "CDS_ENDPOINT".into()
}

fn default_token_env() -> String {
    "CDS_API_TOKEN".into()
}

fn default_timeout_ms() -> u64 {
    120_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mock {
        mode: MockMode,
    },
    Http {
        model: String,
        #[serde(default)]
        dialect: Dialect,
        /// Falls back to the `base_url_env` variable when absent.
        #[serde(default)]
        base_url: Option<String>,
        #[serde(default = "default_base_url_env")]
        base_url_env: String,
        #[serde(default = "default_token_env")]
        token_env: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        /// The endpoint honours a sampling seed, so cached responses stay
        /// valid even with temperature > 0.
        #[serde(default)]
        seed_pinned: bool,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub task_kind: TaskKind,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub code_tasks: Option<PathBuf>,
    pub selection: SelectionConfig,
    #[serde(default)]
    pub template: Option<TemplateKind>,
    #[serde(default)]
    pub decoding: Option<DecodingParams>,
    pub model: ModelConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_true")]
    pub cache: bool,
    #[serde(default)]
    pub max_prompt_chars: Option<usize>,
    #[serde(default)]
    pub sandbox: Option<SandboxConfig>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Io(String),
    #[error("output directory {dir} holds records from a different configuration (fingerprint {found}, expected {expected})")]
    ManifestMismatch {
        dir: String,
        found: String,
        expected: String,
    },
    #[error("reports cover different test sets")]
    MismatchedTestSets,
}

fn io_err(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> RunError {
    move |e| RunError::Io(format!("{context}: {e}"))
}

impl ExperimentConfig {
    /// Parses a TOML config; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train);
        fix(&mut self.test);
        fix(&mut self.output_dir);
        if let Some(p) = self.embeddings.as_mut() {
            fix(p);
        }
        if let Some(p) = self.code_tasks.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        for (what, path) in [("train", Some(&self.train)), ("test", Some(&self.test))]
            .into_iter()
            .chain([("embeddings", self.embeddings.as_ref()), ("code_tasks", self.code_tasks.as_ref())])
        {
            if let Some(p) = path {
                if !p.exists() {
                    return bad(format!("{what} path {} does not exist", p.display()));
                }
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        let distinct: HashSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if self.selection.k == 0 {
            return bad("k must be positive".into());
        }
        if self.selection.needs_embeddings() && self.embeddings.is_none() {
            return bad(format!(
                "strategy {:?} with {:?} retrieval needs an embeddings file",
                self.selection.strategy, self.selection.retrieval
            ));
        }
        if self.task_kind == TaskKind::Code && self.code_tasks.is_none() {
            return bad("code experiments need a code_tasks file".into());
        }
        if let Some(t) = self.template {
            if t.task_kind() != self.task_kind {
                return bad(format!("template {t} does not fit task kind {}", self.task_kind));
            }
        }
        Ok(())
    }

    pub fn template_kind(&self) -> TemplateKind {
        self.template.unwrap_or_else(|| TemplateKind::for_task(self.task_kind))
    }

    pub fn decoding_params(&self) -> DecodingParams {
        self.decoding
            .clone()
            .unwrap_or_else(|| DecodingParams::for_task(self.task_kind))
    }

    /// Hash of every field that influences per-instance records. Worker
    /// count, caching and the output location are excluded.
    pub fn fingerprint(&self) -> String {
        let relevant = serde_json::json!({
            "task_kind": self.task_kind,
            "train": self.train,
            "test": self.test,
            "embeddings": self.embeddings,
            "code_tasks": self.code_tasks,
            "selection": self.selection,
            "template": self.template_kind(),
            "decoding": self.decoding_params(),
            "model": self.model,
            "max_prompt_chars": self.max_prompt_chars,
        });
        hex::encode(Sha256::digest(relevant.to_string().as_bytes()))
    }
}

/// Per-instance outcome persisted to the records file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub seed: u64,
    pub test_id: String,
    pub demonstrations: DemonstrationSet,
    pub prompt_sha256: String,
    pub eval: EvalRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub name: String,
    pub task_kind: TaskKind,
    pub strategy: Strategy,
    pub retrieval: Option<Retrieval>,
    pub ordering: OrderMode,
    pub k: usize,
    pub metric: Metric,
    pub template: TemplateKind,
    pub seeds: Vec<u64>,
    pub model: String,
    pub decoding: DecodingParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    /// `overall`, `topic`, `level` or `bucket`.
    pub grouping: String,
    pub group: String,
    pub count: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub seed: u64,
    pub test_id: String,
    pub demonstrations: Vec<String>,
    pub source_partitions: Vec<Option<usize>>,
    pub answer: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: RunMetadata,
    /// SHA-256 over the sorted test ids.
    pub test_set: String,
    pub rows: Vec<ReportRow>,
    pub errors: usize,
    pub instances: Vec<InstanceSummary>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Io(format!("invalid report: {e}")))
    }

    pub fn label(&self) -> String {
        let m = &self.metadata;
        let mut label = format!("{:?}", m.strategy).to_lowercase();
        if let (Strategy::Cds, Some(r)) = (m.strategy, m.retrieval) {
            label.push_str(&format!("/{r:?}").to_lowercase());
        }
        if m.ordering == OrderMode::E2h {
            label.push_str("/e2h");
        }
        label
    }

    fn metrics(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.metric.as_str()) {
                seen.push(r.metric.as_str());
            }
        }
        seen
    }

    /// Aligned text table: one line per group, one `mean ± std` column per
    /// metric (percent).
    pub fn to_table(&self) -> String {
        let m = &self.metadata;
        let mut out = format!(
            "run: {}  task={}  strategy={}  ordering={:?}  k={}  model={}  seeds={:?}\n",
            if m.name.is_empty() { "-" } else { &m.name },
            m.task_kind,
            self.label(),
            m.ordering,
            m.k,
            m.model,
            m.seeds
        )
        .to_lowercase();
        let metrics = self.metrics();
        let mut keys: Vec<(&str, &str, usize)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|k| k.0 == r.grouping && k.1 == r.group) {
                keys.push((&r.grouping, &r.group, r.count));
            }
        }
        let mut lines = vec![{
            let mut h = vec!["grouping".to_string(), "group".to_string(), "n".to_string()];
            h.extend(metrics.iter().map(|s| s.to_string()));
            h
        }];
        for (grouping, group, count) in keys {
            let mut line = vec![grouping.to_string(), group.to_string(), count.to_string()];
            for metric in &metrics {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.metric == *metric && r.grouping == grouping && r.group == group)
                    .map(|r| format_cell(r.mean, r.std))
                    .unwrap_or_default();
                line.push(cell);
            }
            lines.push(line);
        }
        out.push_str(&align(&lines));
        if self.errors > 0 {
            out.push_str(&format!("errored instances: {}\n", self.errors));
        }
        out
    }
}

fn align(lines: &[Vec<String>]) -> String {
    let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| lines.iter().filter_map(|l| l.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in lines {
        let cells: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{s:<w$}", w = widths[i]))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Side-by-side comparison against the first report, with signed deltas in
/// percentage points. Rows cover overall, topic, level and difficulty-bucket
/// groups present in all reports.
pub fn compare(reports: &[Report]) -> Result<String, RunError> {
    let first = reports.first().ok_or_else(|| RunError::Config("nothing to compare".into()))?;
    if reports.iter().any(|r| r.test_set != first.test_set) {
        return Err(RunError::MismatchedTestSets);
    }
    let mut header = vec!["metric".to_string(), "grouping".to_string(), "group".to_string(), "n".to_string()];
    for (i, r) in reports.iter().enumerate() {
        header.push(format!("[{i}] {}", r.label()));
        if i > 0 {
            header.push(format!("Δ[{i}]-[0]"));
        }
    }
    let mut lines = vec![header];
    for row in &first.rows {
        let mut line = vec![row.metric.clone(), row.grouping.clone(), row.group.clone(), row.count.to_string()];
        for (i, r) in reports.iter().enumerate() {
            let other = r
                .rows
                .iter()
                .find(|o| o.metric == row.metric && o.grouping == row.grouping && o.group == row.group);
            match other {
                Some(o) => {
                    line.push(format_cell(o.mean, o.std));
                    if i > 0 {
                        line.push(format!("{:+.2}", (o.mean - row.mean) * 100.0));
                    }
                }
                None => {
                    line.push("-".into());
                    if i > 0 {
                        line.push("-".into());
                    }
                }
            }
        }
        lines.push(line);
    }
    Ok(align(&lines))
}

/// Loaded inputs for one experiment.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train: Corpus,
    pub test: Corpus,
    pub store: Option<EmbeddingStore<f64>>,
    pub partitions: Option<PartitionSet>,
    pub template: PromptTemplate,
    pub decoding: DecodingParams,
    pub code_tasks: BTreeMap<String, CodeTask>,
    code_runner: Option<Box<dyn CodeRunner>>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the configured worker count.
    pub concurrency: Option<usize>,
    /// Stop after this many newly processed instances (for resumption tests
    /// and partial runs).
    pub stop_after: Option<usize>,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self, RunError> {
        config.validate()?;
        let train = load_corpus_with(&config.train, config.task_kind, LoadOptions::training())?;
        let test = load_corpus_with(&config.test, config.task_kind, LoadOptions::test_set())?;
        let store = match &config.embeddings {
            Some(p) => Some(load_embeddings::<f64>(p)?),
            None => None,
        };
        let partitions = match config.selection.strategy {
            Strategy::Cds => Some(partition(&train, config.selection.k)?),
            _ => None,
        };
        let code_tasks = match &config.code_tasks {
            Some(p) => load_code_tasks(p).map_err(|e| RunError::Config(e.to_string()))?,
            None => BTreeMap::new(),
        };
        let code_runner: Option<Box<dyn CodeRunner>> = (config.task_kind == TaskKind::Code)
            .then(|| Box::new(PythonRunner::new(config.sandbox.clone().unwrap_or_default())) as Box<dyn CodeRunner>);
        let overlap = crate::corpus::split_check(&train, &test);
        if !overlap.is_clean() {
            log::warn!("{} train/test overlaps found", overlap.overlaps.len());
        }
        Ok(Self {
            template: PromptTemplate::builtin(config.template_kind()),
            decoding: config.decoding_params(),
            config,
            train,
            test,
            store,
            partitions,
            code_tasks,
            code_runner,
        })
    }

    pub fn with_code_runner(mut self, runner: Box<dyn CodeRunner>) -> Self {
        self.code_runner = Some(runner);
        self
    }

    pub fn selector(&self) -> Result<Selector<'_, f64, EmbeddingStore<f64>>, RunError> {
        Ok(Selector::new(
            self.config.selection.clone(),
            &self.train,
            self.partitions.as_ref(),
            self.store.as_ref(),
        )?)
    }

    /// Builds the client described by the config.
    pub fn client(&self) -> Result<Box<dyn ModelClient>, RunError> {
        match &self.config.model {
            ModelConfig::Mock { mode } => Ok(Box::new(match mode {
                MockMode::EchoGold => MockModel::echo_gold(&self.test, &self.template),
                MockMode::FixedWrong => MockModel::wrong_answers(&self.test, &self.template),
                MockMode::Empty => MockModel::always_empty(),
            })),
            ModelConfig::Http {
                model,
                dialect,
                base_url,
                base_url_env,
                token_env,
                timeout_ms,
                ..
            } => {
                let base_url = match base_url {
                    Some(u) => u.clone(),
                    None => std::env::var(base_url_env)
                        .map_err(|_| RunError::Config(format!("set {base_url_env} or model.base_url")))?,
                };
                Ok(Box::new(HttpModel::new(Endpoint {
                    base_url,
                    model: model.clone(),
                    dialect: *dialect,
                    token: std::env::var(token_env).ok().map(Secret::new),
                    timeout: Duration::from_millis(*timeout_ms),
                })))
            }
        }
    }

    fn retry_policy(&self) -> RetryPolicy {
        match &self.config.model {
            ModelConfig::Http { retry, .. } => retry.clone(),
            ModelConfig::Mock { .. } => RetryPolicy::immediate(1),
        }
    }

    fn cache_allowed(&self) -> bool {
        let pinned = matches!(self.config.model, ModelConfig::Http { seed_pinned: true, .. });
        self.config.cache && (self.decoding.is_greedy() || pinned)
    }

    /// Renders the prompt for one test instance under `seed`.
    pub fn render(&self, test_id: &str, seed: u64) -> Result<(DemonstrationSet, String), RunError> {
        let selector = self.selector()?;
        let test = self
            .test
            .get(test_id)
            .ok_or_else(|| RunError::Config(format!("unknown test id `{test_id}`")))?;
        self.render_with(&selector, test, seed)
    }

    fn render_with(
        &self,
        selector: &Selector<'_, f64, EmbeddingStore<f64>>,
        test: &Example,
        seed: u64,
    ) -> Result<(DemonstrationSet, String), RunError> {
        let demos = selector.select(&test.id, seed)?;
        let examples: Vec<&Example> = demos
            .items
            .iter()
            .map(|d| self.train.get(&d.id).expect("selected from train"))
            .collect();
        for ex in &examples {
            if ex.question == test.question {
                log::warn!("demonstration `{}` has the same question text as test `{}`", ex.id, test.id);
            }
        }
        let prompt = render_prompt(&self.template, &examples, test)?;
        check_length(&prompt, self.config.max_prompt_chars)?;
        Ok((demos, prompt))
    }

    fn score(&self, test: &Example, output: Option<&str>, record_error: &mut Option<String>) -> EvalRecord {
        let raw = output.unwrap_or_default();
        let prediction = extract_answer(test.task_kind, raw);
        let mut eval = EvalRecord {
            test_id: test.id.clone(),
            gold: test.answer.clone(),
            correct: false,
            runtime_ms: None,
            passed_tests: None,
            prediction,
        };
        if output.is_none() {
            return eval;
        }
        match test.task_kind {
            TaskKind::Math | TaskKind::MultipleChoice => {
                eval.correct = answers_match(test.task_kind, eval.prediction.answer.as_deref(), &test.answer);
            }
            TaskKind::Code => {
                let task_id = test.extra.get("task_id").unwrap_or(&test.id);
                let Some(task) = self.code_tasks.get(task_id) else {
                    *record_error = Some(format!("no code task `{task_id}`"));
                    return eval;
                };
                let total = task.test_cases.len();
                let Some(code) = eval.prediction.answer.clone() else {
                    eval.passed_tests = Some((0, total));
                    return eval;
                };
                let runner = self.code_runner.as_ref().expect("code runner for code tasks");
                match runner.run(&code, task) {
                    Ok(outcome) => {
                        eval.passed_tests = Some((outcome.passed_count(), total));
                        eval.runtime_ms = Some(outcome.runtime_ms);
                        eval.correct = outcome.passed;
                    }
                    Err(e) => *record_error = Some(e.to_string()),
                }
            }
        }
        eval
    }

    fn records_path(&self, seed: u64) -> PathBuf {
        self.config.output_dir.join(format!("records-seed-{seed}.jsonl"))
    }

    fn prepare_output(&self) -> Result<(), RunError> {
        let dir = &self.config.output_dir;
        std::fs::create_dir_all(dir).map_err(io_err(dir.display()))?;
        let manifest = dir.join("run.json");
        let expected = self.config.fingerprint();
        if manifest.exists() {
            let text = std::fs::read_to_string(&manifest).map_err(io_err(manifest.display()))?;
            let found = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v.get("fingerprint").and_then(|f| f.as_str()).map(str::to_string))
                .unwrap_or_default();
            if found != expected {
                return Err(RunError::ManifestMismatch {
                    dir: dir.display().to_string(),
                    found,
                    expected,
                });
            }
        } else {
            let body = serde_json::json!({ "fingerprint": expected, "config": self.config });
            std::fs::write(&manifest, serde_json::to_string_pretty(&body).expect("json"))
                .map_err(io_err(manifest.display()))?;
        }
        Ok(())
    }

    /// Reads persisted records for `seed`, dropping a torn final line and
    /// truncating the file to the last complete record.
    pub fn load_records(&self, seed: u64) -> Result<Vec<InstanceRecord>, RunError> {
        let path = self.records_path(seed);
        let Ok(bytes) = std::fs::read(&path) else {
            return Ok(Vec::new());
        };
        let mut records = Vec::new();
        let mut good_len = 0usize;
        let mut offset = 0usize;
        for chunk in bytes.split_inclusive(|&b| b == b'\n') {
            offset += chunk.len();
            if !chunk.ends_with(b"\n") {
                break;
            }
            match serde_json::from_slice::<InstanceRecord>(chunk) {
                Ok(r) if r.seed == seed => {
                    records.push(r);
                    good_len = offset;
                }
                _ => break,
            }
        }
        if good_len < bytes.len() {
            log::warn!("truncating {} to its last complete record", path.display());
            let f = OpenOptions::new().write(true).open(&path).map_err(io_err(path.display()))?;
            f.set_len(good_len as u64).map_err(io_err(path.display()))?;
        }
        Ok(records)
    }

    /// Runs every pending (seed, test instance) pair through `client`, then
    /// aggregates all persisted records into a report written to the output
    /// directory.
    pub fn run(&self, client: &dyn ModelClient, options: &RunOptions) -> Result<Report, RunError> {
        self.prepare_output()?;
        let selector = self.selector()?;
        let width = options.concurrency.unwrap_or(self.config.concurrency).max(1);
        let cache = ResponseCache::open(&self.config.output_dir.join("cache.jsonl"), self.cache_allowed())?;
        let budget = AtomicUsize::new(options.stop_after.unwrap_or(usize::MAX));
        let params = &self.decoding;
        let policy = self.retry_policy();

        for &seed in &self.config.seeds {
            let done: HashSet<String> = self.load_records(seed)?.into_iter().map(|r| r.test_id).collect();
            let pending: Vec<&Example> = self.test.examples().iter().filter(|e| !done.contains(&e.id)).collect();
            if pending.is_empty() {
                continue;
            }
            let path = self.records_path(seed);
            let sink = Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(io_err(path.display()))?,
            );
            let next = AtomicUsize::new(0);
            let stop = AtomicBool::new(false);
            let failure: Mutex<Option<RunError>> = Mutex::new(None);

            std::thread::scope(|scope| {
                for _ in 0..width.min(pending.len()) {
                    scope.spawn(|| loop {
                        if stop.load(Ordering::SeqCst) {
                            return;
                        }
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(test) = pending.get(i) else { return };
                        if budget
                            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
                            .is_err()
                        {
                            stop.store(true, Ordering::SeqCst);
                            return;
                        }
                        let result = self.process(&selector, client, &cache, &policy, params, test, seed);
                        let written = result.and_then(|record| append_record(&sink, &record));
                        if let Err(e) = written {
                            stop.store(true, Ordering::SeqCst);
                            failure.lock().expect("lock").get_or_insert(e);
                            return;
                        }
                    });
                }
            });
            if let Some(e) = failure.into_inner().expect("lock") {
                return Err(e);
            }
            if stop.load(Ordering::SeqCst) {
                break;
            }
        }
        let report = self.report()?;
        self.write_report(&report)?;
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn process(
        &self,
        selector: &Selector<'_, f64, EmbeddingStore<f64>>,
        client: &dyn ModelClient,
        cache: &ResponseCache,
        policy: &RetryPolicy,
        params: &DecodingParams,
        test: &Example,
        seed: u64,
    ) -> Result<InstanceRecord, RunError> {
        let (demonstrations, prompt) = self.render_with(selector, test, seed)?;
        let key = cache_key(&prompt, params, client.model_name());
        let mut error = None;
        let output = match cache.get(&key) {
            Some(hit) => Some(hit),
            None => {
                let request = GenerationRequest {
                    prompt: &prompt,
                    params,
                    test_id: Some(&test.id),
                };
                match generate(client, &request, policy) {
                    Ok(text) => {
                        cache.put(&key, &text)?;
                        Some(text)
                    }
                    Err(e) => {
                        log::warn!("instance `{}` seed {seed}: {e}", test.id);
                        error = Some(inference_error_text(&e));
                        None
                    }
                }
            }
        };
        let eval = self.score(test, output.as_deref(), &mut error);
        Ok(InstanceRecord {
            seed,
            test_id: test.id.clone(),
            demonstrations,
            prompt_sha256: hex::encode(Sha256::digest(prompt.as_bytes())),
            eval,
            error,
        })
    }

    /// Aggregates all persisted records (no model calls).
    pub fn report(&self) -> Result<Report, RunError> {
        let order: HashMap<&str, usize> = self.test.ids().enumerate().map(|(i, id)| (id, i)).collect();
        let mut per_seed: Vec<(u64, Vec<InstanceRecord>)> = Vec::new();
        for &seed in &self.config.seeds {
            let mut records = self.load_records(seed)?;
            records.retain(|r| order.contains_key(r.test_id.as_str()));
            records.sort_by_key(|r| order[r.test_id.as_str()]);
            records.dedup_by(|a, b| a.test_id == b.test_id);
            per_seed.push((seed, records));
        }
        build_report(self, &per_seed)
    }

    pub fn write_report(&self, report: &Report) -> Result<(), RunError> {
        let dir = &self.config.output_dir;
        let json = dir.join("report.json");
        std::fs::write(&json, report.to_json()).map_err(io_err(json.display()))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, report.to_table()).map_err(io_err(txt.display()))?;
        Ok(())
    }

    /// Test-set groupings used in reports: each maps test id to group name.
    fn groupings(&self) -> Result<Vec<Grouping>, RunError> {
        let mut out = Vec::new();
        let examples = self.test.examples();
        if examples.iter().all(|e| e.topic().is_some()) {
            out.push((
                "topic",
                examples.iter().map(|e| (e.id.clone(), e.topic().unwrap().to_string())).collect(),
            ));
        }
        if examples.iter().all(|e| e.difficulty.is_some()) {
            out.push((
                "level",
                examples
                    .iter()
                    .map(|e| (e.id.clone(), format!("{}", e.primary_level().unwrap())))
                    .collect(),
            ));
            let keys = sorted_keys(&self.test)?;
            let levels: HashSet<i64> = keys.iter().map(|k| k.primary_level).collect();
            let buckets = levels.len().min(3);
            if buckets >= 2 {
                let parts = partition_keys(&keys, buckets)?;
                let names: &[&str] = if buckets == 3 { &["easy", "medium", "hard"] } else { &["easy", "hard"] };
                let mut map = HashMap::new();
                for (i, ids) in parts.partitions.iter().enumerate() {
                    for id in ids {
                        map.insert(id.clone(), names[i].to_string());
                    }
                }
                out.push(("bucket", map));
            }
        }
        Ok(out)
    }
}

/// Grouping name and the group each test id belongs to.
type Grouping = (&'static str, HashMap<String, String>);

fn inference_error_text(e: &InferenceError) -> String {
    format!("inference: {e}")
}

fn append_record(sink: &Mutex<File>, record: &InstanceRecord) -> Result<(), RunError> {
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    let mut f = sink.lock().expect("lock");
    f.write_all(line.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| RunError::Io(format!("writing record: {e}")))
}

/// Hash of prompt, decoding parameters and model name.
pub fn cache_key(prompt: &str, params: &DecodingParams, model: &str) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(params).expect("params serialize"));
    h.update([0]);
    h.update(model.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    output: String,
}

/// Append-only prompt/response cache.
struct ResponseCache {
    enabled: bool,
    entries: Mutex<HashMap<String, String>>,
    file: Option<Mutex<File>>,
}

impl ResponseCache {
    fn open(path: &Path, enabled: bool) -> Result<Self, RunError> {
        if !enabled {
            return Ok(Self {
                enabled,
                entries: Mutex::new(HashMap::new()),
                file: None,
            });
        }
        let mut entries = HashMap::new();
        if let Ok(text) = std::fs::read_to_string(path) {
            for line in text.lines() {
                if let Ok(e) = serde_json::from_str::<CacheEntry>(line) {
                    entries.insert(e.key, e.output);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path.display()))?;
        Ok(Self {
            enabled,
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
        })
    }

    fn get(&self, key: &str) -> Option<String> {
        if !self.enabled {
            return None;
        }
        self.entries.lock().expect("lock").get(key).cloned()
    }

    fn put(&self, key: &str, output: &str) -> Result<(), RunError> {
        let Some(file) = &self.file else { return Ok(()) };
        let mut line = serde_json::to_string(&CacheEntry {
            key: key.to_string(),
            output: output.to_string(),
        })
        .expect("json");
        line.push('\n');
        file.lock()
            .expect("lock")
            .write_all(line.as_bytes())
            .map_err(|e| RunError::Io(format!("writing cache: {e}")))?;
        self.entries.lock().expect("lock").insert(key.to_string(), output.to_string());
        Ok(())
    }
}

fn metric_value(
    name: &str,
    records: &[&EvalRecord],
    tasks: &BTreeMap<String, CodeTask>,
) -> Result<f64, MetricError> {
    let owned: Vec<EvalRecord> = records.iter().map(|r| (*r).clone()).collect();
    match name {
        "accuracy" => accuracy(&owned),
        "pass" => pass_metric(&owned),
        "beyond" => beyond_metric(&owned, tasks),
        other => unreachable!("unknown metric {other}"),
    }
}

fn build_report(exp: &Experiment, per_seed: &[(u64, Vec<InstanceRecord>)]) -> Result<Report, RunError> {
    let metrics: &[&str] = match exp.config.task_kind {
        TaskKind::Code => &["pass", "beyond"],
        _ => &["accuracy"],
    };
    // Beyond looks tasks up by test id.
    let tasks_by_test: BTreeMap<String, CodeTask> = exp
        .test
        .examples()
        .iter()
        .filter_map(|e| {
            let task_id = e.extra.get("task_id").unwrap_or(&e.id);
            exp.code_tasks.get(task_id).map(|t| (e.id.clone(), t.clone()))
        })
        .collect();

    let mut groupings = vec![(
        OVERALL,
        exp.test.ids().map(|id| (id.to_string(), OVERALL.to_string())).collect::<HashMap<_, _>>(),
    )];
    groupings.extend(exp.groupings()?);

    let mut rows = Vec::new();
    let complete = per_seed.iter().all(|(_, r)| !r.is_empty());
    if complete {
        for &metric in metrics {
            for (grouping, assign) in &groupings {
                let mut runs = Vec::new();
                for (seed, records) in per_seed {
                    let mut groups: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
                    for r in records {
                        groups.entry(assign[&r.test_id].clone()).or_default().push(&r.eval);
                    }
                    let mut values = BTreeMap::new();
                    for (g, recs) in groups {
                        values.insert(
                            g,
                            GroupValue {
                                count: recs.len(),
                                value: metric_value(metric, &recs, &tasks_by_test)?,
                            },
                        );
                    }
                    runs.push(SeedRun { seed: *seed, groups: values });
                }
                for summary in aggregate(&runs)? {
                    // every grouping yields the same overall row; keep one
                    if summary.group == OVERALL && *grouping != OVERALL {
                        continue;
                    }
                    rows.push(ReportRow {
                        metric: metric.to_string(),
                        grouping: grouping.to_string(),
                        group: summary.group,
                        count: summary.count,
                        mean: summary.mean,
                        std: summary.std,
                        per_seed: summary.per_seed,
                    });
                }
            }
        }
    }

    let c = &exp.config;
    let mut ids: Vec<&str> = exp.test.ids().collect();
    ids.sort_unstable();
    let test_set = hex::encode(Sha256::digest(ids.join("\n").as_bytes()));
    let model = match &c.model {
        ModelConfig::Mock { mode } => format!("mock-{mode:?}").to_lowercase(),
        ModelConfig::Http { model, .. } => model.clone(),
    };
    Ok(Report {
        metadata: RunMetadata {
            name: c.name.clone(),
            task_kind: c.task_kind,
            strategy: c.selection.strategy,
            retrieval: (c.selection.strategy == Strategy::Cds).then_some(c.selection.retrieval),
            ordering: c.selection.ordering,
            k: c.selection.k,
            metric: c.selection.metric,
            template: c.template_kind(),
            seeds: c.seeds.clone(),
            model,
            decoding: exp.decoding.clone(),
        },
        test_set,
        rows,
        errors: per_seed.iter().flat_map(|(_, r)| r).filter(|r| r.error.is_some()).count(),
        instances: per_seed
            .iter()
            .flat_map(|(_, records)| records)
            .map(|r| InstanceSummary {
                seed: r.seed,
                test_id: r.test_id.clone(),
                demonstrations: r.demonstrations.items.iter().map(|d| d.id.clone()).collect(),
                source_partitions: r.demonstrations.items.iter().map(|d| d.provenance.source_partition).collect(),
                answer: r.eval.prediction.answer.clone(),
                correct: r.eval.correct,
            })
            .collect(),
    })
}

/// Loads, runs with the configured client, and writes the report.
pub fn run_experiment(config: ExperimentConfig, options: &RunOptions) -> Result<Report, RunError> {
    let exp = Experiment::prepare(config)?;
    let client = exp.client()?;
    exp.run(client.as_ref(), options)
}

/// One `select` output line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub seed: u64,
    pub test_id: String,
    pub demonstrations: DemonstrationSet,
}

impl Experiment {
    /// Selections for every (seed, test instance), in seed then test order.
    pub fn selections(&self) -> Result<Vec<SelectionRecord>, RunError> {
        let selector = self.selector()?;
        let mut out = Vec::new();
        for &seed in &self.config.seeds {
            for test in self.test.examples() {
                out.push(SelectionRecord {
                    seed,
                    test_id: test.id.clone(),
                    demonstrations: selector.select(&test.id, seed)?,
                });
            }
        }
        Ok(out)
    }
}
