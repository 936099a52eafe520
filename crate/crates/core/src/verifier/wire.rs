//! JSON messages exchanged with an external verifier process or service.
//!
//! Request: `{"cmd": "<lean source>", "timeout": 60}`.
//! Response: `{"pass": bool, "errors": [{"line", "pos", "message"}], "ast": {...}}`.
//! Entries in `errors` may carry `"severity": "warning"`; a separate
//! `warnings` array is accepted too.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Ast, Diagnostic, VerificationRequest, VerificationResult, VerifyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub cmd: String,
    pub timeout: u64,
}

impl From<&VerificationRequest> for WireRequest {
    fn from(req: &VerificationRequest) -> Self {
        WireRequest { cmd: req.code.clone(), timeout: req.timeout.as_secs().max(1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDiagnostic {
    pub line: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<u32>,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<String>,
}

impl WireDiagnostic {
    fn into_diagnostic(self, default_warning: bool) -> Diagnostic {
        let warning = match self.severity.as_deref() {
            Some(s) => s.eq_ignore_ascii_case("warning"),
            None => default_warning,
        };
        if warning {
            Diagnostic::warning(self.line, self.message)
        } else {
            Diagnostic::error(self.line, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub pass: bool,
    #[serde(default)]
    pub errors: Vec<WireDiagnostic>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<WireDiagnostic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ast: Option<Ast>,
}

impl WireResponse {
    pub fn into_result(self, elapsed: Duration) -> VerificationResult {
        let mut diagnostics: Vec<Diagnostic> =
            self.errors.into_iter().map(|d| d.into_diagnostic(false)).collect();
        diagnostics.extend(self.warnings.into_iter().map(|d| d.into_diagnostic(true)));
        VerificationResult { passed: self.pass, diagnostics, ast: self.ast, elapsed }
    }
}

pub fn parse_response(text: &str, elapsed: Duration) -> Result<VerificationResult, VerifyError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(VerifyError::ProtocolError("empty response".into()));
    }
    serde_json::from_str::<WireResponse>(text)
        .map(|r| r.into_result(elapsed))
        .map_err(|e| VerifyError::ProtocolError(format!("{e}: {}", preview(text))))
}

fn preview(text: &str) -> &str {
    match text.char_indices().nth(200) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::Severity;

    #[test]
    fn request_shape() {
        let req = VerificationRequest::new("theorem t : True := trivial", Duration::from_secs(60)).unwrap();
        let json = serde_json::to_value(WireRequest::from(&req)).unwrap();
        assert_eq!(json, serde_json::json!({"cmd": "theorem t : True := trivial", "timeout": 60}));
    }

    #[test]
    fn response_mapping() {
        let text = r#"{"pass": false,
            "errors": [{"line": 24, "pos": 4, "message": "application type mismatch"},
                       {"line": 3, "message": "unused", "severity": "warning"}],
            "warnings": [{"line": 5, "message": "deprecated"}]}"#;
        let r = parse_response(text, Duration::ZERO).unwrap();
        assert!(!r.passed);
        assert_eq!(r.diagnostics.len(), 3);
        assert_eq!(r.diagnostics[0].severity, Severity::Error);
        assert_eq!(r.diagnostics[1].severity, Severity::Warning);
        assert_eq!(r.diagnostics[2].severity, Severity::Warning);
    }

    #[test]
    fn garbage_is_protocol_error() {
        assert!(matches!(parse_response("not json", Duration::ZERO), Err(VerifyError::ProtocolError(_))));
        assert!(matches!(parse_response("", Duration::ZERO), Err(VerifyError::ProtocolError(_))));
    }
}
