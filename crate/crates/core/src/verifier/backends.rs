use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

use super::wire::{parse_response, WireRequest};
use super::{Diagnostic, VerificationRequest, VerificationResult, VerifierBackend, VerifyError};
use crate::sha256_hex;

/// Deterministic in-process verifier keyed by the SHA-256 of the submitted
/// source. Unscripted code gets `fallback`.
#[derive(Debug, Clone)]
pub struct MockVerifier {
    scripted: HashMap<String, VerificationResult>,
    fallback: VerificationResult,
}

impl Default for MockVerifier {
    fn default() -> Self {
        MockVerifier {
            scripted: HashMap::new(),
            fallback: VerificationResult::failure(vec![Diagnostic::error(1, "no scripted verdict for this code")]),
        }
    }
}

impl MockVerifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(mut self, fallback: VerificationResult) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn insert(&mut self, code: &str, result: VerificationResult) {
        self.scripted.insert(sha256_hex(code), result);
    }

    pub fn insert_hash(&mut self, hash: impl Into<String>, result: VerificationResult) {
        self.scripted.insert(hash.into().to_ascii_lowercase(), result);
    }

    pub fn len(&self) -> usize {
        self.scripted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scripted.is_empty()
    }

    /// Load a `{sha256(code): VerificationResult}` JSON object.
    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        let scripted: HashMap<String, VerificationResult> = serde_json::from_str(s)?;
        let mut mock = MockVerifier::new();
        for (hash, result) in scripted {
            mock.insert_hash(hash, result);
        }
        Ok(mock)
    }

    pub fn from_json_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

impl VerifierBackend for MockVerifier {
    fn verify(&self, req: &VerificationRequest) -> Result<VerificationResult, VerifyError> {
        Ok(self.scripted.get(&sha256_hex(&req.code)).unwrap_or(&self.fallback).clone())
    }
}

/// Spawns an external program per request, writes the JSON request to its
/// stdin and reads one JSON response from its stdout.
#[derive(Debug, Clone)]
pub struct CommandVerifier {
    program: String,
    args: Vec<String>,
}

impl CommandVerifier {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        CommandVerifier { program: program.into(), args }
    }

    /// Split a whitespace-separated command line (no shell quoting).
    pub fn from_command_line(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(CommandVerifier::new(program, parts.collect()))
    }
}

impl VerifierBackend for CommandVerifier {
    fn verify(&self, req: &VerificationRequest) -> Result<VerificationResult, VerifyError> {
        let started = Instant::now();
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| VerifyError::BackendUnavailable(format!("spawn {}: {e}", self.program)))?;

        let payload = serde_json::to_vec(&WireRequest::from(req)).expect("request serializes");
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = thread::spawn(move || {
            // the child may exit without reading; a broken pipe is not our error to report
            let _ = stdin.write_all(&payload);
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = thread::spawn(move || {
            let mut buf = String::new();
            stdout.read_to_string(&mut buf).map(|_| buf)
        });
        let mut stderr = child.stderr.take().expect("piped stderr");
        let err_reader = thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });

        let status = child
            .wait_timeout(req.timeout)
            .map_err(|e| VerifyError::BackendUnavailable(format!("wait on verifier: {e}")))?;
        let Some(status) = status else {
            let _ = child.kill();
            let _ = child.wait();
            return Ok(VerificationResult::timed_out(req.timeout));
        };
        let _ = writer.join();
        let output = reader
            .join()
            .expect("reader thread")
            .map_err(|e| VerifyError::ProtocolError(format!("read verifier output: {e}")))?;
        let stderr_text = err_reader.join().unwrap_or_default();

        parse_response(&output, started.elapsed()).map_err(|e| match e {
            VerifyError::ProtocolError(msg) if !status.success() => VerifyError::ProtocolError(format!(
                "verifier exited with {status}: {msg}; stderr: {}",
                stderr_text.trim()
            )),
            other => other,
        })
    }
}

/// Talks to a long-running verifier service over TCP, one JSON line per
/// request and response.
#[derive(Debug, Clone)]
pub struct TcpVerifier {
    addr: String,
    connect_timeout: Duration,
}

impl TcpVerifier {
    pub fn new(addr: impl Into<String>) -> Self {
        TcpVerifier { addr: addr.into(), connect_timeout: Duration::from_secs(5) }
    }

    fn connect(&self) -> Result<TcpStream, VerifyError> {
        let unavailable = |e: std::io::Error| VerifyError::BackendUnavailable(format!("{}: {e}", self.addr));
        let mut last = None;
        for addr in self.addr.to_socket_addrs().map_err(unavailable)? {
            match TcpStream::connect_timeout(&addr, self.connect_timeout) {
                Ok(stream) => return Ok(stream),
                Err(e) => last = Some(e),
            }
        }
        Err(unavailable(last.unwrap_or_else(|| std::io::Error::other("address resolved to nothing"))))
    }
}

impl VerifierBackend for TcpVerifier {
    fn verify(&self, req: &VerificationRequest) -> Result<VerificationResult, VerifyError> {
        let started = Instant::now();
        let mut stream = self.connect()?;
        let io_err = |e: std::io::Error| VerifyError::BackendUnavailable(format!("{}: {e}", self.addr));
        stream.set_read_timeout(Some(req.timeout)).map_err(io_err)?;

        let mut line = serde_json::to_string(&WireRequest::from(req)).expect("request serializes");
        line.push('\n');
        stream.write_all(line.as_bytes()).map_err(io_err)?;
        stream.flush().map_err(io_err)?;

        let mut response = String::new();
        match BufReader::new(stream).read_line(&mut response) {
            Ok(_) => parse_response(&response, started.elapsed()),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                Ok(VerificationResult::timed_out(req.timeout))
            }
            Err(e) => Err(io_err(e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    fn req(code: &str, secs: u64) -> VerificationRequest {
        VerificationRequest::new(code, Duration::from_secs(secs)).unwrap()
    }

    #[test]
    fn mock_scripted_and_fallback() {
        let mut mock = MockVerifier::new();
        mock.insert("good", VerificationResult::success());
        assert!(mock.verify(&req("good", 1)).unwrap().passed);
        assert!(!mock.verify(&req("other", 1)).unwrap().passed);
    }

    #[test]
    fn mock_from_json_keys_by_hash() {
        let json = format!(r#"{{"{}": {{"passed": true}}}}"#, sha256_hex("good"));
        let mock = MockVerifier::from_json_str(&json).unwrap();
        assert!(mock.verify(&req("good", 1)).unwrap().passed);
    }

    #[cfg(unix)]
    #[test]
    fn command_backend_round_trip() {
        let v = CommandVerifier::new(
            "sh",
            vec!["-c".into(), r#"cat > /dev/null; echo '{"pass": false, "errors": [{"line": 3, "message": "boom"}]}'"#.into()],
        );
        let r = v.verify(&req("theorem x", 5)).unwrap();
        assert!(!r.passed);
        assert_eq!(r.diagnostics[0].line, 3);
    }

    #[cfg(unix)]
    #[test]
    fn command_backend_timeout_is_a_value() {
        let v = CommandVerifier::new("sh", vec!["-c".into(), "sleep 5".into()]);
        let r = v.verify(&VerificationRequest::new("x", Duration::from_millis(200)).unwrap()).unwrap();
        assert!(r.is_timeout());
        assert!(!r.passed);
    }

    #[test]
    fn command_backend_missing_program() {
        let v = CommandVerifier::new("/nonexistent/lean-repl", vec![]);
        assert!(matches!(v.verify(&req("x", 1)), Err(VerifyError::BackendUnavailable(_))));
    }

    #[cfg(unix)]
    #[test]
    fn command_backend_garbage_output() {
        let v = CommandVerifier::new("sh", vec!["-c".into(), "cat > /dev/null; echo nope".into()]);
        assert!(matches!(v.verify(&req("x", 5)), Err(VerifyError::ProtocolError(_))));
    }

    #[test]
    fn tcp_backend_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let request: WireRequest = serde_json::from_str(&line).unwrap();
            let mut stream = stream;
            let pass = request.cmd.contains("trivial");
            writeln!(stream, r#"{{"pass": {pass}, "errors": []}}"#).unwrap();
        });
        let v = TcpVerifier::new(addr.to_string());
        assert!(v.verify(&req("theorem t : True := trivial", 5)).unwrap().passed);
        server.join().unwrap();
    }

    #[test]
    fn tcp_backend_refused() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let v = TcpVerifier::new(addr.to_string());
        assert!(matches!(v.verify(&req("x", 1)), Err(VerifyError::BackendUnavailable(_))));
    }
}
