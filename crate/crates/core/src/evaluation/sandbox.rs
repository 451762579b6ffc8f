//! Subprocess execution of candidate code against a task's test cases.
//!
//! Isolation is best effort: the child runs in a fresh temporary directory
//! with an empty environment, closed stdin, and rlimits on address space,
//! CPU time, file size and open files. There is no network or syscall
//! filtering; run untrusted code inside an OS-level sandbox as well.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::CodeTask;

const HARNESS: &str = include_str!("../../harness/python_harness.py");

#[derive(Debug, Error, PartialEq)]
pub enum SandboxError {
    #[error("failed to prepare sandbox: {0}")]
    Setup(String),
    #[error("failed to spawn interpreter `{interpreter}`: {message}")]
    Spawn { interpreter: String, message: String },
    #[error("harness produced unreadable output: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxConfig {
    pub interpreter: PathBuf,
    /// Wall-clock limit for a single test case, in milliseconds.
    pub per_case_timeout_ms: u64,
    pub memory_limit_mb: u64,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: PathBuf::from("python3"),
            per_case_timeout_ms: 4_000,
            memory_limit_mb: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Passed,
    WrongAnswer,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub index: usize,
    pub status: CaseStatus,
    pub cpu_ms: f64,
    #[serde(default)]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeRunOutcome {
    pub passed: bool,
    /// Sum of per-case CPU time.
    pub runtime_ms: f64,
    pub cases: Vec<CaseOutcome>,
    pub first_failure: Option<usize>,
}

impl CodeRunOutcome {
    pub fn passed_count(&self) -> usize {
        self.cases.iter().filter(|c| c.status == CaseStatus::Passed).count()
    }
}

/// Executes candidate code for one language.
pub trait CodeRunner: Send + Sync {
    fn run(&self, candidate: &str, task: &CodeTask) -> Result<CodeRunOutcome, SandboxError>;
}

#[derive(Debug, Clone, Default)]
pub struct PythonRunner {
    pub config: SandboxConfig,
}

impl PythonRunner {
    pub fn new(config: SandboxConfig) -> Self {
        Self { config }
    }
}

impl CodeRunner for PythonRunner {
    fn run(&self, candidate: &str, task: &CodeTask) -> Result<CodeRunOutcome, SandboxError> {
        run_code_task(candidate, task, &self.config)
    }
}

fn setup_err(e: impl ToString) -> SandboxError {
    SandboxError::Setup(e.to_string())
}

/// Runs every test case of `task` against `candidate` in one child process.
/// A case that errors, crashes or exceeds its time limit counts as failed.
pub fn run_code_task(
    candidate: &str,
    task: &CodeTask,
    config: &SandboxConfig,
) -> Result<CodeRunOutcome, SandboxError> {
    let dir = tempfile::tempdir().map_err(setup_err)?;
    let harness = dir.path().join("harness.py");
    let source = dir.path().join("candidate.py");
    let cases = dir.path().join("cases.json");
    let results = dir.path().join("results.jsonl");
    std::fs::write(&harness, HARNESS).map_err(setup_err)?;
    std::fs::write(&source, candidate).map_err(setup_err)?;
    std::fs::write(&cases, serde_json::to_vec(&task.test_cases).map_err(setup_err)?).map_err(setup_err)?;

    let per_case = Duration::from_millis(config.per_case_timeout_ms.max(1));
    let n = task.test_cases.len();
    let cpu_limit_s = (per_case.as_secs_f64() * n as f64).ceil() as u64 + 5;
    let memory_bytes = config.memory_limit_mb.saturating_mul(1024 * 1024);
    let wall_limit = per_case * n as u32 + Duration::from_secs(10);

    let mut cmd = Command::new(&config.interpreter);
    cmd.arg("-I")
        .arg(&harness)
        .arg(&source)
        .arg(&cases)
        .arg(&results)
        .arg(&task.entry_point)
        .arg(format!("{}", per_case.as_secs_f64()))
        .current_dir(dir.path())
        .env_clear()
        .env("PATH", "/usr/local/bin:/usr/bin:/bin")
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped());
    // SAFETY: only async-signal-safe setrlimit calls between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            limit(libc::RLIMIT_AS, memory_bytes)?;
            limit(libc::RLIMIT_CPU, cpu_limit_s)?;
            limit(libc::RLIMIT_FSIZE, 16 * 1024 * 1024)?;
            limit(libc::RLIMIT_NOFILE, 64)?;
            limit(libc::RLIMIT_CORE, 0)?;
            Ok(())
        });
    }
    let mut child = cmd.spawn().map_err(|e| SandboxError::Spawn {
        interpreter: config.interpreter.display().to_string(),
        message: e.to_string(),
    })?;

    let started = Instant::now();
    let mut killed = false;
    loop {
        match child.try_wait().map_err(setup_err)? {
            Some(_) => break,
            None if started.elapsed() > wall_limit => {
                let _ = child.kill();
                let _ = child.wait();
                killed = true;
                break;
            }
            None => std::thread::sleep(Duration::from_millis(5)),
        }
    }
    let mut stderr = String::new();
    if let Some(mut err) = child.stderr.take() {
        let _ = err.read_to_string(&mut stderr);
    }

    let text = std::fs::read_to_string(&results).unwrap_or_default();
    let mut outcomes: Vec<CaseOutcome> = Vec::with_capacity(n);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<CaseOutcome>(line) {
            Ok(c) => outcomes.push(c),
            // a partial final line means the child died mid-write
            Err(_) => break,
        }
    }
    if outcomes.iter().enumerate().any(|(i, c)| c.index != i) {
        return Err(SandboxError::Protocol(format!("case indices out of order: {text}")));
    }
    // Cases the harness never reported: the process was killed or crashed.
    let crash_detail = if killed {
        "killed after wall-clock limit".to_string()
    } else {
        format!("process exited early: {}", stderr.lines().last().unwrap_or_default())
    };
    for index in outcomes.len()..n {
        outcomes.push(CaseOutcome {
            index,
            status: if killed { CaseStatus::Timeout } else { CaseStatus::Error },
            cpu_ms: if killed { per_case.as_secs_f64() * 1000.0 } else { 0.0 },
            detail: crash_detail.clone(),
        });
    }

    let first_failure = outcomes.iter().position(|c| c.status != CaseStatus::Passed);
    Ok(CodeRunOutcome {
        passed: first_failure.is_none() && n > 0,
        runtime_ms: outcomes.iter().map(|c| c.cpu_ms).sum(),
        cases: outcomes,
        first_failure,
    })
}

fn limit(resource: libc::__rlimit_resource_t, value: u64) -> std::io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: value as libc::rlim_t,
        rlim_max: value as libc::rlim_t,
    };
    // SAFETY: plain syscall on a stack value.
    if unsafe { libc::setrlimit(resource, &lim) } != 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(())
}
