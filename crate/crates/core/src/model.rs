//! Text-generation clients: a completions-style HTTP backend and a scripted
//! mock. The gateway moves strings only; it never looks inside transcripts.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::Limiter;
use crate::sha256_hex;

pub const DEFAULT_STOP: &str = "</code>";
pub const DEFAULT_CONCURRENCY: usize = 16;
pub const ENV_URL: &str = "VERIPROVE_MODEL_URL";
pub const ENV_TOKEN: &str = "VERIPROVE_MODEL_TOKEN";
pub const ENV_MODEL: &str = "VERIPROVE_MODEL_NAME";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerateError {
    #[error("model backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("rate limited by model backend")]
    RateLimited { retry_after: Option<Duration> },
    #[error("malformed model response: {0}")]
    MalformedResponse(String),
    #[error("model backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
}

impl GenerateError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GenerateError::BackendUnavailable(_) | GenerateError::RateLimited { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of feedback rounds already in the prompt.
    #[serde(default)]
    pub turn: u32,
    /// Stable identifier of the conversation this request continues, used by
    /// the mock to look up scripted turns independently of prior output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_key: Option<String>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            temperature: 0.6,
            max_tokens: 16_384,
            stop: Some(vec![DEFAULT_STOP.to_string()]),
            seed: None,
            turn: 0,
            thread_key: None,
        }
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.max_tokens == 0 {
            return Err(GenerateError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GenerateError::InvalidRequest(format!("temperature {} is not >= 0", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    #[default]
    Stop,
    #[serde(alias = "max_tokens", alias = "length_limit")]
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
}

impl GenerationResult {
    pub fn stop(text: impl Into<String>) -> Self {
        GenerationResult { text: text.into(), finish_reason: FinishReason::Stop, logprobs: None }
    }

    pub fn error() -> Self {
        GenerationResult { text: String::new(), finish_reason: FinishReason::Error, logprobs: None }
    }
}

pub trait ModelBackend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GenerateError>;
}

pub fn generate(req: &GenerationRequest, backend: &dyn ModelBackend) -> Result<GenerationResult, GenerateError> {
    req.validate()?;
    backend.generate(req)
}

/// One line of a mock script file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub prompt_sha256: String,
    pub turn: u32,
    pub text: String,
    #[serde(default)]
    pub finish_reason: FinishReason,
}

/// Scripted backend keyed by `(prompt hash, turn)`.
///
/// The exact prompt hash is tried first, then the request's `thread_key`.
/// Several entries under one key are variants; the request seed picks one
/// (`seed % variants`, variant 0 without a seed). Unscripted keys produce an
/// `Error` finish with empty text.
#[derive(Debug, Clone, Default)]
pub struct MockModel {
    script: HashMap<(String, u32), Vec<GenerationResult>>,
}

impl MockModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, turn: u32, result: GenerationResult) {
        self.script.entry((key.into().to_ascii_lowercase(), turn)).or_default().push(result);
    }

    /// Script a reply for the given prompt text (or thread key text).
    pub fn push_prompt(&mut self, prompt: &str, turn: u32, text: impl Into<String>) {
        self.push(sha256_hex(prompt), turn, GenerationResult::stop(text));
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut mock = MockModel::new();
        for e in entries {
            mock.push(
                e.prompt_sha256,
                e.turn,
                GenerationResult { text: e.text, finish_reason: e.finish_reason, logprobs: None },
            );
        }
        mock
    }

    pub fn from_jsonl(path: &Path) -> std::io::Result<Self> {
        Ok(Self::from_entries(crate::read_jsonl::<ScriptEntry>(path)?))
    }

    pub fn len(&self) -> usize {
        self.script.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }

    fn lookup(&self, key: &str, turn: u32) -> Option<&Vec<GenerationResult>> {
        self.script.get(&(key.to_string(), turn))
    }
}

impl ModelBackend for MockModel {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GenerateError> {
        let variants = self
            .lookup(&sha256_hex(&req.prompt), req.turn)
            .or_else(|| req.thread_key.as_deref().and_then(|k| self.lookup(k, req.turn)));
        Ok(match variants {
            Some(v) if !v.is_empty() => {
                let idx = req.seed.map_or(0, |s| (s % v.len() as u64) as usize);
                v[idx].clone()
            }
            _ => GenerationResult::error(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpModelConfig {
    pub url: String,
    pub token: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("environment variable {0} is not set")]
pub struct MissingEnv(pub &'static str);

impl HttpModelConfig {
    pub fn new(url: impl Into<String>) -> Self {
        HttpModelConfig { url: url.into(), token: None, model: "default".into(), timeout: Duration::from_secs(600) }
    }

    /// Endpoint from `VERIPROVE_MODEL_URL`, optional bearer token and model name.
    pub fn from_env() -> Result<Self, MissingEnv> {
        let url = std::env::var(ENV_URL).ok().filter(|s| !s.trim().is_empty()).ok_or(MissingEnv(ENV_URL))?;
        let mut cfg = HttpModelConfig::new(url);
        cfg.token = std::env::var(ENV_TOKEN).ok().filter(|s| !s.is_empty());
        if let Ok(name) = std::env::var(ENV_MODEL) {
            if !name.is_empty() {
                cfg.model = name;
            }
        }
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Logprobs {
    Flat(Vec<f64>),
    Nested { token_logprobs: Vec<f64> },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CompletionReply {
    Choices { choices: Vec<Choice> },
    Bare(Choice),
}

fn finish_reason(raw: Option<&str>) -> FinishReason {
    match raw {
        None | Some("stop") | Some("eos") | Some("stop_sequence") => FinishReason::Stop,
        Some("length") | Some("max_tokens") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    }
}

pub fn parse_completion(body: &str) -> Result<GenerationResult, GenerateError> {
    let reply: CompletionReply =
        serde_json::from_str(body).map_err(|e| GenerateError::MalformedResponse(e.to_string()))?;
    let choice = match reply {
        CompletionReply::Bare(c) => c,
        CompletionReply::Choices { choices } => choices
            .into_iter()
            .next()
            .ok_or_else(|| GenerateError::MalformedResponse("empty choices array".into()))?,
    };
    Ok(GenerationResult {
        finish_reason: finish_reason(choice.finish_reason.as_deref()),
        text: choice.text,
        logprobs: choice.logprobs.map(|l| match l {
            Logprobs::Flat(v) => v,
            Logprobs::Nested { token_logprobs } => token_logprobs,
        }),
    })
}

/// Completions-style JSON over HTTP:
/// `{model, prompt, temperature, max_tokens, stop, seed}` in,
/// `{text, finish_reason}` or `{choices: [{text, finish_reason}]}` out.
pub struct HttpModel {
    cfg: HttpModelConfig,
    agent: ureq::Agent,
}

impl HttpModel {
    pub fn new(cfg: HttpModelConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(cfg.timeout)
            .max_idle_connections_per_host(DEFAULT_CONCURRENCY)
            .build();
        HttpModel { cfg, agent }
    }
}

impl ModelBackend for HttpModel {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GenerateError> {
        let body = CompletionBody {
            model: &self.cfg.model,
            prompt: &req.prompt,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            stop: req.stop.as_deref(),
            seed: req.seed,
        };
        let mut call = self.agent.post(&self.cfg.url).set("Content-Type", "application/json");
        if let Some(token) = &self.cfg.token {
            call = call.set("Authorization", &format!("Bearer {token}"));
        }
        let payload = serde_json::to_string(&body).expect("request serializes");
        match call.send_string(&payload) {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| GenerateError::BackendUnavailable(e.to_string()))?;
                parse_completion(&text)
            }
            Err(ureq::Error::Status(429, resp)) => {
                let retry_after = resp.header("retry-after").and_then(|s| s.trim().parse::<u64>().ok());
                Err(GenerateError::RateLimited { retry_after: retry_after.map(Duration::from_secs) })
            }
            Err(ureq::Error::Status(status, resp)) if status >= 500 => {
                Err(GenerateError::BackendUnavailable(format!("status {status}: {}", resp.into_string().unwrap_or_default())))
            }
            Err(ureq::Error::Status(status, resp)) => {
                Err(GenerateError::Rejected { status, body: resp.into_string().unwrap_or_default() })
            }
            Err(ureq::Error::Transport(t)) => Err(GenerateError::BackendUnavailable(t.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { max_retries: 0, ..Self::default() }
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32, err: &GenerateError) -> Duration {
        if let GenerateError::RateLimited { retry_after: Some(d) } = err {
            return (*d).min(self.max_delay);
        }
        self.base_delay.saturating_mul(1u32 << attempt.min(16)).min(self.max_delay)
    }
}

/// Shares a backend across threads with bounded concurrency and retries.
#[derive(Clone)]
pub struct ModelGateway {
    backend: Arc<dyn ModelBackend>,
    limiter: Arc<Limiter>,
    retry: RetryPolicy,
}

impl ModelGateway {
    pub fn new(backend: Arc<dyn ModelBackend>) -> Self {
        ModelGateway { backend, limiter: Arc::new(Limiter::new(DEFAULT_CONCURRENCY)), retry: RetryPolicy::default() }
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.limiter = Arc::new(Limiter::new(n));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GenerateError> {
        req.validate()?;
        let mut attempt = 0;
        loop {
            let outcome = {
                let _permit = self.limiter.acquire();
                self.backend.generate(req)
            };
            match outcome {
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    let wait = self.retry.delay(attempt, &e);
                    log::warn!("model call failed ({e}); retry {} in {:?}", attempt + 1, wait);
                    thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    /// Minimal HTTP/1.1 server answering each connection with the next canned
    /// `(status, body)`; returns the received request bodies.
    fn stub_server(replies: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(1), max_delay: Duration::from_millis(5) }
    }

    #[test]
    fn mock_scripted_and_missing() {
        let mut mock = MockModel::new();
        mock.push_prompt("p", 0, "…<code>bad</code>");
        let hit = generate(&GenerationRequest::new("p"), &mock).unwrap();
        assert_eq!(hit.text, "…<code>bad</code>");
        assert_eq!(hit.finish_reason, FinishReason::Stop);
        let miss = generate(&GenerationRequest::new("q"), &mock).unwrap();
        assert_eq!(miss, GenerationResult::error());
        let mut later = GenerationRequest::new("p");
        later.turn = 1;
        assert_eq!(mock.generate(&later).unwrap().finish_reason, FinishReason::Error);
    }

    #[test]
    fn mock_thread_key_and_variants() {
        let mut mock = MockModel::new();
        let key = sha256_hex("base");
        mock.push(key.clone(), 1, GenerationResult::stop("a"));
        mock.push(key.clone(), 1, GenerationResult::stop("b"));
        let mut req = GenerationRequest::new("base plus whatever came before");
        req.turn = 1;
        req.thread_key = Some(key);
        assert_eq!(mock.generate(&req).unwrap().text, "a");
        req.seed = Some(7);
        assert_eq!(mock.generate(&req).unwrap().text, "b");
        assert_eq!(mock.generate(&req).unwrap().text, "b");
    }

    #[test]
    fn script_file_format() {
        let line = format!(r#"{{"prompt_sha256": "{}", "turn": 0, "text": "x", "finish_reason": "length"}}"#, sha256_hex("p"));
        let entries: Vec<ScriptEntry> = crate::parse_jsonl(line.as_bytes()).unwrap();
        let mock = MockModel::from_entries(entries);
        assert_eq!(mock.generate(&GenerationRequest::new("p")).unwrap().finish_reason, FinishReason::Length);
    }

    #[test]
    fn request_validation() {
        let mut req = GenerationRequest::new("p");
        req.max_tokens = 0;
        assert!(matches!(generate(&req, &MockModel::new()), Err(GenerateError::InvalidRequest(_))));
        let mut req = GenerationRequest::new("p");
        req.temperature = -1.0;
        assert!(req.validate().is_err());
        assert_eq!(GenerationRequest::new("p").stop.unwrap(), vec!["</code>".to_string()]);
    }

    #[test]
    fn completion_parsing() {
        let r = parse_completion(r#"{"text": "hi", "finish_reason": "length"}"#).unwrap();
        assert_eq!((r.text.as_str(), r.finish_reason), ("hi", FinishReason::Length));
        let r = parse_completion(
            r#"{"choices": [{"text": "yo", "finish_reason": "stop", "logprobs": {"token_logprobs": [-0.5]}}]}"#,
        )
        .unwrap();
        assert_eq!(r.logprobs, Some(vec![-0.5]));
        assert!(matches!(parse_completion(r#"{"choices": []}"#), Err(GenerateError::MalformedResponse(_))));
        assert!(matches!(parse_completion("nope"), Err(GenerateError::MalformedResponse(_))));
    }

    #[test]
    fn http_round_trip() {
        let fixture = r#"{"text": "<code>\nexact\n", "finish_reason": "stop"}"#;
        let (url, server) = stub_server(vec![(200, fixture.into())]);
        let mut cfg = HttpModelConfig::new(url);
        cfg.token = Some("secret".into());
        cfg.model = "prover".into();
        let gw = ModelGateway::new(Arc::new(HttpModel::new(cfg)));
        let mut req = GenerationRequest::new("prompt text");
        req.seed = Some(3);
        let out = gw.generate(&req).unwrap();
        assert_eq!(out.text, "<code>\nexact\n");
        let bodies = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "prover");
        assert_eq!(sent["prompt"], "prompt text");
        assert_eq!(sent["stop"], serde_json::json!(["</code>"]));
        assert_eq!(sent["seed"], 3);
        assert_eq!(sent["max_tokens"], 16384);
    }

    #[test]
    fn http_retries_server_errors() {
        let ok = r#"{"text": "fine", "finish_reason": "stop"}"#;
        let (url, server) =
            stub_server(vec![(503, "down".into()), (429, "{}".into()), (200, ok.into())]);
        let gw = ModelGateway::new(Arc::new(HttpModel::new(HttpModelConfig::new(url)))).with_retry(fast_retry());
        assert_eq!(gw.generate(&GenerationRequest::new("p")).unwrap().text, "fine");
        assert_eq!(server.join().unwrap().len(), 3);
    }

    #[test]
    fn http_client_errors_are_not_retried() {
        let (url, server) = stub_server(vec![(400, "bad prompt".into())]);
        let gw = ModelGateway::new(Arc::new(HttpModel::new(HttpModelConfig::new(url)))).with_retry(fast_retry());
        let err = gw.generate(&GenerationRequest::new("p")).unwrap_err();
        assert_eq!(err, GenerateError::Rejected { status: 400, body: "bad prompt".into() });
        server.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_gives_up_after_retries() {
        struct Down(AtomicUsize);
        impl ModelBackend for Down {
            fn generate(&self, _: &GenerationRequest) -> Result<GenerationResult, GenerateError> {
                self.0.fetch_add(1, Ordering::SeqCst);
                Err(GenerateError::BackendUnavailable("refused".into()))
            }
        }
        let down = Arc::new(Down(AtomicUsize::new(0)));
        let gw = ModelGateway::new(down.clone()).with_retry(fast_retry());
        assert!(matches!(gw.generate(&GenerationRequest::new("p")), Err(GenerateError::BackendUnavailable(_))));
        assert_eq!(down.0.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn backoff_is_exponential_and_capped() {
        let p = RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(100), max_delay: Duration::from_millis(300) };
        let e = GenerateError::BackendUnavailable(String::new());
        assert_eq!(p.delay(0, &e), Duration::from_millis(100));
        assert_eq!(p.delay(1, &e), Duration::from_millis(200));
        assert_eq!(p.delay(2, &e), Duration::from_millis(300));
        let limited = GenerateError::RateLimited { retry_after: Some(Duration::from_millis(50)) };
        assert_eq!(p.delay(2, &limited), Duration::from_millis(50));
    }

    #[test]
    fn gateway_bounds_concurrency() {
        struct Slow {
            live: AtomicUsize,
            peak: Mutex<usize>,
        }
        impl ModelBackend for Slow {
            fn generate(&self, _: &GenerationRequest) -> Result<GenerationResult, GenerateError> {
                let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
                {
                    let mut peak = self.peak.lock().unwrap();
                    *peak = (*peak).max(now);
                }
                thread::sleep(Duration::from_millis(10));
                self.live.fetch_sub(1, Ordering::SeqCst);
                Ok(GenerationResult::stop(""))
            }
        }
        let slow = Arc::new(Slow { live: AtomicUsize::new(0), peak: Mutex::new(0) });
        let gw = ModelGateway::new(slow.clone()).with_concurrency(2);
        thread::scope(|s| {
            for _ in 0..8 {
                let gw = gw.clone();
                s.spawn(move || gw.generate(&GenerationRequest::new("p")).unwrap());
            }
        });
        assert!(*slow.peak.lock().unwrap() <= 2);
    }
}
