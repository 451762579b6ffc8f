//! Language-model endpoints.
//!
//! [`ModelClient`] makes one completion attempt; [`generate`] wraps it with
//! the retry policy. [`HttpModel`] speaks the wire formats documented in
//! `docs/wire-protocol.md`; [`MockModel`] is a deterministic stand-in for
//! tests and dry runs.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{Corpus, Example, TaskKind};
use crate::prompting::{render_reply, PromptTemplate};

pub const DEFAULT_STOP: &str = "\n### Question:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingParams {
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl DecodingParams {
    /// Greedy decoding with 1024 new tokens for reasoning tasks; temperature
    /// 0.2 with 2048 tokens for code.
    pub fn for_task(kind: TaskKind) -> Self {
        let (temperature, max_new_tokens) = match kind {
            TaskKind::Math | TaskKind::MultipleChoice => (0.0, 1024),
            TaskKind::Code => (0.2, 2048),
        };
        Self {
            temperature,
            max_new_tokens,
            stop_sequences: vec![DEFAULT_STOP.to_string()],
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub prompt: &'a str,
    pub params: &'a DecodingParams,
    /// Lets mocks key canned outputs by test instance; endpoints ignore it.
    pub test_id: Option<&'a str>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no canned output for test id `{0}`")]
    UnknownTestId(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<InferenceError>,
    },
}

impl InferenceError {
    pub fn is_transient(&self) -> bool {
        match self {
            InferenceError::Timeout | InferenceError::Transport(_) => true,
            InferenceError::Status { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

pub trait ModelClient: Send + Sync {
    fn model_name(&self) -> &str;

    /// A single attempt, no retries.
    fn complete(&self, request: &GenerationRequest<'_>) -> Result<String, InferenceError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_backoff: Duration::ZERO,
            multiplier: 1.0,
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// Runs one completion, retrying transient failures per `policy`.
pub fn generate(
    client: &(impl ModelClient + ?Sized),
    request: &GenerationRequest<'_>,
    policy: &RetryPolicy,
) -> Result<String, InferenceError> {
    if request.prompt.is_empty() {
        return Err(InferenceError::EmptyPrompt);
    }
    let attempts = policy.max_attempts.max(1);
    let mut backoff = policy.initial_backoff;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match client.complete(request) {
            Ok(text) => return Ok(text),
            Err(e) if !e.is_transient() => return Err(e),
            Err(e) if attempt >= attempts => {
                return Err(InferenceError::Exhausted {
                    attempts: attempt,
                    last: Box::new(e),
                })
            }
            Err(e) => {
                log::warn!("attempt {attempt}/{attempts} failed: {e}; retrying");
                if !backoff.is_zero() {
                    std::thread::sleep(backoff);
                }
                backoff = backoff.mul_f64(policy.multiplier);
            }
        }
    }
}

/// What a mock does with a test id it has no rule for.
#[derive(Debug, Clone, PartialEq)]
pub enum UnknownPolicy {
    Error,
    Reply(String),
}

/// Deterministic model for tests: canned replies by prompt or by test id,
/// optional injected failures and latency, and in-flight instrumentation.
pub struct MockModel {
    name: String,
    by_prompt: HashMap<String, String>,
    by_test_id: HashMap<String, String>,
    unknown: UnknownPolicy,
    failures_left: AtomicU32,
    failure: InferenceError,
    delay: Option<Duration>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl MockModel {
    fn empty_rules(name: &str, unknown: UnknownPolicy) -> Self {
        Self {
            name: name.to_string(),
            by_prompt: HashMap::new(),
            by_test_id: HashMap::new(),
            unknown,
            failures_left: AtomicU32::new(0),
            failure: InferenceError::Status {
                code: 503,
                body: "injected failure".into(),
            },
            delay: None,
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_prompts(rules: HashMap<String, String>) -> Self {
        Self {
            by_prompt: rules,
            ..Self::empty_rules("mock-prompt-map", UnknownPolicy::Error)
        }
    }

    pub fn from_test_ids(rules: HashMap<String, String>) -> Self {
        Self {
            by_test_id: rules,
            ..Self::empty_rules("mock-rulebook", UnknownPolicy::Error)
        }
    }

    /// Replies to every test instance with its gold answer in the template's
    /// reply format.
    pub fn echo_gold(test: &Corpus, template: &PromptTemplate) -> Self {
        let rules = test
            .examples()
            .iter()
            .map(|ex| {
                let reply = render_reply(template, ex).expect("template matches test set");
                (ex.id.clone(), reply)
            })
            .collect();
        Self {
            by_test_id: rules,
            ..Self::empty_rules("mock-echo-gold", UnknownPolicy::Error)
        }
    }

    /// Well-formed replies whose answers are always wrong.
    pub fn wrong_answers(test: &Corpus, template: &PromptTemplate) -> Self {
        let rules = test
            .examples()
            .iter()
            .map(|ex| {
                let wrong = Example {
                    answer: wrong_answer(ex),
                    ..ex.clone()
                };
                let reply = render_reply(template, &wrong).expect("template matches test set");
                (ex.id.clone(), reply)
            })
            .collect();
        Self {
            by_test_id: rules,
            ..Self::empty_rules("mock-fixed-wrong", UnknownPolicy::Error)
        }
    }

    pub fn always_empty() -> Self {
        Self::empty_rules("mock-empty", UnknownPolicy::Reply(String::new()))
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn on_unknown(mut self, policy: UnknownPolicy) -> Self {
        self.unknown = policy;
        self
    }

    /// The first `n` calls fail with `error`.
    pub fn failing_first(mut self, n: u32, error: InferenceError) -> Self {
        self.failures_left = AtomicU32::new(n);
        self.failure = error;
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of concurrent `complete` calls observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

fn wrong_answer(ex: &Example) -> String {
    match ex.task_kind {
        TaskKind::MultipleChoice => {
            let gold = crate::prompting::option_letter(&ex.answer).unwrap_or_else(|| "A".into());
            let next = match gold.as_str() {
                "A" => "B",
                "B" => "C",
                "C" => "D",
                "D" => "E",
                _ => "A",
            };
            next.to_string()
        }
        TaskKind::Math => format!("{} (wrong)", ex.answer.trim()),
        TaskKind::Code => "raise NotImplementedError()".to_string(),
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl ModelClient for MockModel {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &GenerationRequest<'_>) -> Result<String, InferenceError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.in_flight);
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        let failed = self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failed {
            return Err(self.failure.clone());
        }
        if let Some(reply) = self.by_prompt.get(request.prompt) {
            return Ok(reply.clone());
        }
        if let Some(reply) = request.test_id.and_then(|id| self.by_test_id.get(id)) {
            return Ok(reply.clone());
        }
        match &self.unknown {
            UnknownPolicy::Reply(text) => Ok(text.clone()),
            UnknownPolicy::Error => Err(InferenceError::UnknownTestId(
                request.test_id.unwrap_or("<none>").to_string(),
            )),
        }
    }
}

/// Request/response shape spoken by an endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// `POST {base}/generate` with `{"model","prompt","temperature","max_new_tokens","stop"}`,
    /// answered by `{"text": ...}`.
    #[default]
    Native,
    /// `POST {base}/v1/completions`, OpenAI-compatible completions.
    OpenaiCompletions,
}

/// Bearer token that never appears in `Debug` output or logs.
#[derive(Clone)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone)]
pub struct Endpoint {
    pub base_url: String,
    pub model: String,
    pub dialect: Dialect,
    pub token: Option<Secret>,
    pub timeout: Duration,
}

#[derive(Debug)]
pub struct HttpModel {
    endpoint: Endpoint,
    agent: ureq::Agent,
}

impl HttpModel {
    pub fn new(endpoint: Endpoint) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(endpoint.timeout).build();
        Self { endpoint, agent }
    }

    pub fn request_url(&self) -> String {
        let base = self.endpoint.base_url.trim_end_matches('/');
        match self.endpoint.dialect {
            Dialect::Native => format!("{base}/generate"),
            Dialect::OpenaiCompletions => format!("{base}/v1/completions"),
        }
    }

    pub fn request_body(&self, request: &GenerationRequest<'_>) -> serde_json::Value {
        let p = request.params;
        match self.endpoint.dialect {
            Dialect::Native => json!({
                "model": self.endpoint.model,
                "prompt": request.prompt,
                "temperature": p.temperature,
                "max_new_tokens": p.max_new_tokens,
                "stop": p.stop_sequences,
            }),
            Dialect::OpenaiCompletions => json!({
                "model": self.endpoint.model,
                "prompt": request.prompt,
                "temperature": p.temperature,
                "max_tokens": p.max_new_tokens,
                "stop": p.stop_sequences,
            }),
        }
    }

    fn parse_response(&self, body: &serde_json::Value) -> Result<String, InferenceError> {
        let text = match self.endpoint.dialect {
            Dialect::Native => body.get("text"),
            Dialect::OpenaiCompletions => body.pointer("/choices/0/text"),
        };
        text.and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| InferenceError::Malformed(format!("missing completion text in {body}")))
    }
}

impl ModelClient for HttpModel {
    fn model_name(&self) -> &str {
        &self.endpoint.model
    }

    fn complete(&self, request: &GenerationRequest<'_>) -> Result<String, InferenceError> {
        let mut req = self
            .agent
            .post(&self.request_url())
            .set("Content-Type", "application/json");
        if let Some(token) = &self.endpoint.token {
            req = req.set("Authorization", &format!("Bearer {}", token.expose()));
        }
        match req.send_json(self.request_body(request)) {
            Ok(resp) => {
                let body: serde_json::Value = resp
                    .into_json()
                    .map_err(|e| InferenceError::Malformed(e.to_string()))?;
                self.parse_response(&body)
            }
            Err(ureq::Error::Status(code, resp)) => Err(InferenceError::Status {
                code,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") || msg.contains("Timeout") {
                    Err(InferenceError::Timeout)
                } else {
                    Err(InferenceError::Transport(msg))
                }
            }
        }
    }
}
