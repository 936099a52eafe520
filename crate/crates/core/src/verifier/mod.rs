//! Lean 4 verification: request/result types, backends, and rendering of
//! verifier output into the text the model sees.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::Limiter;

mod backends;
pub mod wire;

pub use backends::{CommandVerifier, MockVerifier, TcpVerifier};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_WORKERS: usize = 8;
pub const SUCCESS_SENTINEL: &str = "Compilation Success!";
pub const FAILURE_SENTINEL: &str = "Compilation failed.";
pub const TRUNCATION_MARKER: &str = "…[truncated]";
const NO_GOALS: &str = "no goals";
const GOAL_MARKER: char = '⊢';

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    /// Connection or spawn failure. Retryable.
    #[error("verifier backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("verifier protocol error: {0}")]
    ProtocolError(String),
    #[error("verification request has empty code")]
    EmptyCode,
    #[error("unrecognized proof state {0:?}")]
    UnrecognizedState(String),
}

impl VerifyError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, VerifyError::BackendUnavailable(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationRequest {
    pub code: String,
    pub timeout: Duration,
}

impl VerificationRequest {
    pub fn new(code: impl Into<String>, timeout: Duration) -> Result<Self, VerifyError> {
        let code = code.into();
        if code.trim().is_empty() {
            return Err(VerifyError::EmptyCode);
        }
        Ok(VerificationRequest { code, timeout })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: u32,
    pub message: String,
    pub severity: Severity,
    /// Set on the synthetic diagnostic emitted when the verifier ran out of time.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub timeout: bool,
}

impl Diagnostic {
    pub fn error(line: u32, message: impl Into<String>) -> Self {
        Diagnostic { line: line.max(1), message: message.into(), severity: Severity::Error, timeout: false }
    }

    pub fn warning(line: u32, message: impl Into<String>) -> Self {
        Diagnostic { line: line.max(1), message: message.into(), severity: Severity::Warning, timeout: false }
    }

    pub fn timeout(limit: Duration) -> Self {
        Diagnostic {
            line: 1,
            message: format!("Timeout: verification exceeded {}s", limit.as_secs_f64()),
            severity: Severity::Error,
            timeout: true,
        }
    }
}

/// One entry of the tactic array in the verifier's AST output. `pos` and
/// `end_pos` are character offsets into the verified source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TacticTrace {
    pub state_before: String,
    pub state_after: String,
    pub pos: usize,
    pub end_pos: usize,
}

impl TacticTrace {
    pub fn span(&self) -> crate::transcript::Span {
        crate::transcript::Span::new(self.pos, self.end_pos.max(self.pos))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ast {
    #[serde(default)]
    pub tactics: Vec<TacticTrace>,
    #[serde(default)]
    pub premises: Vec<i64>,
    #[serde(default)]
    pub declarations: Vec<i64>,
}

impl Ast {
    /// Accepts either a bare AST object or one wrapped as `{"ast": {...}}`.
    pub fn from_json_str(s: &str) -> Result<Ast, serde_json::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Either {
            Wrapped { ast: Ast },
            Bare(Ast),
        }
        Ok(match serde_json::from_str(s)? {
            Either::Wrapped { ast } => ast,
            Either::Bare(ast) => ast,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub passed: bool,
    #[serde(default)]
    pub diagnostics: Vec<Diagnostic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ast: Option<Ast>,
    #[serde(default, with = "duration_secs")]
    pub elapsed: Duration,
}

impl VerificationResult {
    pub fn success() -> Self {
        VerificationResult { passed: true, diagnostics: Vec::new(), ast: None, elapsed: Duration::ZERO }
    }

    pub fn failure(diagnostics: Vec<Diagnostic>) -> Self {
        VerificationResult { passed: false, diagnostics, ast: None, elapsed: Duration::ZERO }
    }

    pub fn timed_out(limit: Duration) -> Self {
        VerificationResult {
            passed: false,
            diagnostics: vec![Diagnostic::timeout(limit)],
            ast: None,
            elapsed: limit,
        }
    }

    pub fn with_ast(mut self, ast: Ast) -> Self {
        self.ast = Some(ast);
        self
    }

    pub fn is_timeout(&self) -> bool {
        self.diagnostics.iter().any(|d| d.timeout)
    }

    /// Enforce `passed ⇒ no error diagnostics` and sort diagnostics by line.
    fn normalized(mut self) -> Self {
        if self.diagnostics.iter().any(|d| d.severity == Severity::Error) {
            self.passed = false;
        }
        self.diagnostics.sort_by_key(|d| d.line);
        self
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// A Lean verifier reachable somehow. Implementations must report
/// verifier-side failures (bad proof, timeout) as values, and reserve `Err`
/// for transport problems.
pub trait VerifierBackend: Send + Sync {
    fn verify(&self, req: &VerificationRequest) -> Result<VerificationResult, VerifyError>;
}

pub fn verify(
    req: &VerificationRequest,
    backend: &dyn VerifierBackend,
) -> Result<VerificationResult, VerifyError> {
    if req.code.trim().is_empty() {
        return Err(VerifyError::EmptyCode);
    }
    backend.verify(req).map(VerificationResult::normalized)
}

/// Shares one backend among many callers with a bounded number of requests
/// in flight.
#[derive(Clone)]
pub struct VerifierGateway {
    backend: Arc<dyn VerifierBackend>,
    limiter: Arc<Limiter>,
    timeout: Duration,
}

impl VerifierGateway {
    pub fn new(backend: Arc<dyn VerifierBackend>) -> Self {
        VerifierGateway { backend, limiter: Arc::new(Limiter::new(DEFAULT_WORKERS)), timeout: DEFAULT_TIMEOUT }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.limiter = Arc::new(Limiter::new(workers));
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn verify_code(&self, code: &str) -> Result<VerificationResult, VerifyError> {
        let req = VerificationRequest::new(code, self.timeout)?;
        self.verify(&req)
    }

    pub fn verify(&self, req: &VerificationRequest) -> Result<VerificationResult, VerifyError> {
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut result = verify(req, self.backend.as_ref())?;
        if result.elapsed.is_zero() {
            result.elapsed = started.elapsed();
        }
        Ok(result)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackStyle {
    /// Upper bound on the rendered text, in bytes.
    pub byte_budget: usize,
}

impl FeedbackStyle {
    pub const MIN_BUDGET: usize = 64;

    pub fn with_budget(byte_budget: usize) -> Self {
        FeedbackStyle { byte_budget: byte_budget.max(Self::MIN_BUDGET) }
    }
}

impl Default for FeedbackStyle {
    fn default() -> Self {
        FeedbackStyle { byte_budget: 2048 }
    }
}

/// Text placed between the interpreter delimiters after a verification.
pub fn render_feedback(v: &VerificationResult, style: &FeedbackStyle) -> String {
    if v.passed {
        return SUCCESS_SENTINEL.to_string();
    }
    let mut diags: Vec<&Diagnostic> = v.diagnostics.iter().collect();
    diags.sort_by_key(|d| d.line);

    let mut out = String::from(FAILURE_SENTINEL);
    for d in diags {
        out.push('\n');
        if d.timeout {
            out.push_str(&d.message);
            continue;
        }
        let what = match d.severity {
            Severity::Error => "an error",
            Severity::Warning => "a warning",
        };
        out.push_str(&format!("Find {what} at line {}\n{}", d.line, d.message));
    }

    let budget = style.byte_budget.max(FeedbackStyle::MIN_BUDGET);
    if out.len() > budget {
        let mut cut = budget - TRUNCATION_MARKER.len();
        while !out.is_char_boundary(cut) {
            cut -= 1;
        }
        out.truncate(cut);
        out.push_str(TRUNCATION_MARKER);
    }
    out
}

/// Number of open goals in a pretty-printed proof state.
pub fn goal_count(state: &str) -> Result<usize, VerifyError> {
    let trimmed = state.trim();
    if trimmed == NO_GOALS {
        return Ok(0);
    }
    match trimmed.chars().filter(|&c| c == GOAL_MARKER).count() {
        0 => Err(VerifyError::UnrecognizedState(state.to_string())),
        n => Ok(n),
    }
}
