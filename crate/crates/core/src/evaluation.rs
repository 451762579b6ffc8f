//! Scoring: exact-match accuracy, functional correctness (Pass), runtime
//! percentile (Beyond), and mean/std aggregation across seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::Extraction;
use crate::scalar::Scalar;

pub mod sandbox;

pub use sandbox::{run_code_task, CaseOutcome, CaseStatus, CodeRunOutcome, CodeRunner, PythonRunner, SandboxConfig, SandboxError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no records to score")]
    Empty,
    #[error("historical runtime list is empty")]
    EmptyHistory,
    #[error("runtime must be finite and positive, got {0}")]
    BadRuntime(f64),
    #[error("seed {seed} has groups {found:?}, expected {expected:?}")]
    InconsistentGroups {
        seed: u64,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("no seed runs to aggregate")]
    NoRuns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub test_id: String,
    pub prediction: Extraction,
    pub gold: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
    /// (passed, total) test cases for code tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passed_tests: Option<(usize, usize)>,
}

impl EvalRecord {
    pub fn code_passed(&self) -> bool {
        matches!(self.passed_tests, Some((p, t)) if p == t && t > 0)
    }
}

fn fraction<T: Scalar>(hits: usize, total: usize) -> Result<T, MetricError> {
    if total == 0 {
        return Err(MetricError::Empty);
    }
    Ok(T::from_usize_lossy(hits) / T::from_usize_lossy(total))
}

/// Fraction of records marked correct.
pub fn accuracy<T: Scalar>(records: &[EvalRecord]) -> Result<T, MetricError> {
    fraction(records.iter().filter(|r| r.correct).count(), records.len())
}

/// Fraction of code records whose solution passed every test case.
pub fn pass_metric<T: Scalar>(records: &[EvalRecord]) -> Result<T, MetricError> {
    fraction(records.iter().filter(|r| r.code_passed()).count(), records.len())
}

/// Mid-rank runtime percentile: the share of historical runtimes strictly
/// slower than `runtime`, counting equal runtimes as half.
pub fn beyond_score<T: Scalar>(runtime: T, historical: &[T]) -> Result<T, MetricError> {
    if historical.is_empty() {
        return Err(MetricError::EmptyHistory);
    }
    if !runtime.is_finite() || runtime <= T::zero() {
        return Err(MetricError::BadRuntime(runtime.to_f64_lossy()));
    }
    let slower = historical.iter().filter(|&&h| h > runtime).count();
    let ties = historical.iter().filter(|&&h| h == runtime).count();
    let two = T::from_usize_lossy(2);
    Ok((T::from_usize_lossy(slower) + T::from_usize_lossy(ties) / two) / T::from_usize_lossy(historical.len()))
}

/// Task-level Beyond: failed tasks score 0.
pub fn task_beyond<T: Scalar>(passed: bool, runtime: T, historical: &[T]) -> Result<T, MetricError> {
    if !passed {
        return Ok(T::zero());
    }
    beyond_score(runtime, historical)
}

/// Mean Beyond over code records (records without a runtime count as 0).
pub fn beyond_metric(records: &[EvalRecord], tasks: &BTreeMap<String, CodeTask>) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for r in records {
        let score = match (r.runtime_ms, tasks.get(&r.test_id)) {
            (Some(rt), Some(task)) if r.code_passed() => {
                task_beyond(true, rt.max(f64::MIN_POSITIVE), &task.historical_runtimes_ms)?
            }
            _ => 0.0,
        };
        total += score;
    }
    Ok(total / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    /// Positional arguments for the entry point.
    pub input: Vec<serde_json::Value>,
    pub expected: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeTask {
    pub task_id: String,
    /// Method of `class Solution` (or a top-level function) to call.
    pub entry_point: String,
    pub test_cases: Vec<TestCase>,
    pub historical_runtimes_ms: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum CodeTaskError {
    #[error("failed to read {0}: {1}")]
    Io(String, std::io::Error),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

impl CodeTask {
    pub fn validate(&self) -> Result<(), String> {
        if self.test_cases.is_empty() {
            return Err(format!("task `{}` has no test cases", self.task_id));
        }
        if self.historical_runtimes_ms.is_empty() {
            return Err(format!("task `{}` has no historical runtimes", self.task_id));
        }
        if self.historical_runtimes_ms.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(format!("task `{}` has a non-positive historical runtime", self.task_id));
        }
        if self.historical_runtimes_ms.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("task `{}` historical runtimes are not sorted", self.task_id));
        }
        Ok(())
    }
}

/// Reads a line-delimited code task file, keyed by task id.
pub fn load_code_tasks(path: impl AsRef<Path>) -> Result<BTreeMap<String, CodeTask>, CodeTaskError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CodeTaskError::Io(path.display().to_string(), e))?;
    let mut tasks = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |message: String| CodeTaskError::Invalid { line: i + 1, message };
        let task: CodeTask = serde_json::from_str(line).map_err(|e| invalid(e.to_string()))?;
        task.validate().map_err(invalid)?;
        if tasks.contains_key(&task.task_id) {
            return Err(invalid(format!("duplicate task id `{}`", task.task_id)));
        }
        tasks.insert(task.task_id.clone(), task);
    }
    Ok(tasks)
}

/// A metric value for one group of test instances within one seed run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupValue<T> {
    pub count: usize,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun<T> {
    pub seed: u64,
    /// One grouping that partitions the test set (e.g. by topic).
    pub groups: BTreeMap<String, GroupValue<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary<T> {
    pub group: String,
    pub count: usize,
    pub mean: T,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<T>,
    pub per_seed: Vec<T>,
}

pub const OVERALL: &str = "overall";

/// Arithmetic mean and sample standard deviation.
pub fn mean_std<T: Scalar>(values: &[T]) -> Option<(T, Option<T>)> {
    if values.is_empty() {
        return None;
    }
    let n = T::from_usize_lossy(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    let std = (values.len() >= 2).then(|| {
        let ss: T = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
        (ss / (n - T::one())).sqrt()
    });
    Some((mean, std))
}

/// Aggregates per-seed group values: one summary per group plus an
/// `overall` row whose per-seed value is the count-weighted group average.
pub fn aggregate<T: Scalar>(runs: &[SeedRun<T>]) -> Result<Vec<GroupSummary<T>>, MetricError> {
    let first = runs.first().ok_or(MetricError::NoRuns)?;
    let keys: Vec<String> = first.groups.keys().cloned().collect();
    for run in runs {
        let found: Vec<String> = run.groups.keys().cloned().collect();
        if found != keys {
            return Err(MetricError::InconsistentGroups {
                seed: run.seed,
                expected: keys,
                found,
            });
        }
    }
    let mut out = Vec::with_capacity(keys.len() + 1);
    let mut overall = Vec::with_capacity(runs.len());
    for run in runs {
        let n: usize = run.groups.values().map(|g| g.count).sum();
        let weighted: T = run
            .groups
            .values()
            .map(|g| g.value * T::from_usize_lossy(g.count))
            .sum();
        overall.push(if n == 0 { T::zero() } else { weighted / T::from_usize_lossy(n) });
    }
    for key in &keys {
        let values: Vec<T> = runs.iter().map(|r| r.groups[key].value).collect();
        let (mean, std) = mean_std(&values).expect("non-empty");
        out.push(GroupSummary {
            group: key.clone(),
            count: first.groups[key].count,
            mean,
            std,
            per_seed: values,
        });
    }
    let (mean, std) = mean_std(&overall).expect("non-empty");
    out.push(GroupSummary {
        group: OVERALL.to_string(),
        count: first.groups.values().map(|g| g.count).sum(),
        mean,
        std,
        per_seed: overall,
    });
    Ok(out)
}

/// `mean ± std` in percent with two decimals, as in the result tables.
pub fn format_cell(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{:.2} ± {:.2}", mean * 100.0, s * 100.0),
        None => format!("{:.2}", mean * 100.0),
    }
}
