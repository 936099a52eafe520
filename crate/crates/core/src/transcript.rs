//! The delimited multi-turn transcript exchanged between the prover model and
//! the proving loop.
//!
//! A transcript is plain text in which model-written Lean code sits between
//! `<code>` and `</code>` and verifier output sits between `<interpreter>` and
//! `</interpreter>` (`<compiler_results>` is accepted as a legacy synonym).
//! Everything else is free-form reasoning ("thought") text, including any
//! `<think>`/`</think>` markers.
//!
//! All offsets in this module are character offsets (Unicode scalar values),
//! never byte offsets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::verifier::{render_feedback, FeedbackStyle, VerificationResult};

/// Half-open character interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains_offset(&self, offset: usize) -> bool {
        self.start <= offset && offset < self.end
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Span { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Thought,
    CodeBlock,
    VerifierFeedback,
}

/// The tag pair that delimits a non-thought segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Delimiter {
    Code,
    Interpreter,
    /// Legacy spelling of the verifier-feedback region.
    CompilerResults,
}

impl Delimiter {
    const ALL: [Delimiter; 3] = [Delimiter::Code, Delimiter::Interpreter, Delimiter::CompilerResults];

    pub fn open(self) -> &'static str {
        match self {
            Delimiter::Code => "<code>",
            Delimiter::Interpreter => "<interpreter>",
            Delimiter::CompilerResults => "<compiler_results>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            Delimiter::Code => "</code>",
            Delimiter::Interpreter => "</interpreter>",
            Delimiter::CompilerResults => "</compiler_results>",
        }
    }

    pub fn kind(self) -> SegmentKind {
        match self {
            Delimiter::Code => SegmentKind::CodeBlock,
            Delimiter::Interpreter | Delimiter::CompilerResults => SegmentKind::VerifierFeedback,
        }
    }
}

/// One typed region of a transcript.
///
/// `text` is the region content without delimiters; `span` covers the whole
/// region including its delimiters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    pub span: Span,
    pub delimiter: Option<Delimiter>,
}

impl Segment {
    fn render_into(&self, out: &mut String) {
        match self.delimiter {
            None => out.push_str(&self.text),
            Some(d) => {
                out.push_str(d.open());
                out.push_str(&self.text);
                out.push_str(d.close());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error("unclosed {kind:?} delimiter opened at offset {offset}")]
    UnclosedDelimiter { kind: SegmentKind, offset: usize },
    #[error("nested delimiter at offset {offset}")]
    NestedDelimiter { offset: usize },
    #[error("closing delimiter without a matching opener at offset {offset}")]
    UnmatchedClose { offset: usize },
    #[error("transcript has no code block to attach feedback to")]
    NoCodeBlock,
    #[error("stored segments do not match the transcript text")]
    SegmentMismatch,
}

/// A parsed transcript. `raw` is the exact text; `segments` tile it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "TranscriptRepr", try_from = "TranscriptRepr")]
pub struct Transcript {
    pub statement: String,
    pub segments: Vec<Segment>,
    pub raw: String,
}

/// Sorted, disjoint character spans excluded from the learning signal.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskSpanSet {
    pub spans: Vec<Span>,
}

impl MaskSpanSet {
    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn masked_len(&self) -> usize {
        self.spans.iter().map(Span::len).sum()
    }

    pub fn contains_offset(&self, offset: usize) -> bool {
        // spans are sorted: binary search on start
        let idx = self.spans.partition_point(|s| s.start <= offset);
        idx > 0 && self.spans[idx - 1].contains_offset(offset)
    }

    /// Shift every span right by `by` characters.
    pub fn shifted(&self, by: usize) -> MaskSpanSet {
        MaskSpanSet {
            spans: self.spans.iter().map(|s| Span::new(s.start + by, s.end + by)).collect(),
        }
    }
}

/// Tracks the character offset of a monotonically advancing byte cursor.
struct CharCursor<'a> {
    text: &'a str,
    byte: usize,
    chars: usize,
}

impl<'a> CharCursor<'a> {
    fn new(text: &'a str) -> Self {
        CharCursor { text, byte: 0, chars: 0 }
    }

    fn char_at(&mut self, byte: usize) -> usize {
        debug_assert!(byte >= self.byte);
        self.chars += self.text[self.byte..byte].chars().count();
        self.byte = byte;
        self.chars
    }
}

enum Tag {
    Open(Delimiter),
    Close(Delimiter),
}

fn tag_at(rest: &str) -> Option<Tag> {
    Delimiter::ALL.iter().find_map(|&d| {
        if rest.starts_with(d.open()) {
            Some(Tag::Open(d))
        } else if rest.starts_with(d.close()) {
            Some(Tag::Close(d))
        } else {
            None
        }
    })
}

/// Parse raw model/transcript text into typed segments.
pub fn parse_transcript(raw: &str) -> Result<Transcript, TranscriptError> {
    let mut segments = Vec::new();
    let mut cursor = CharCursor::new(raw);
    // start of the pending thought, in bytes and chars
    let mut thought_start = (0usize, 0usize);
    let mut pos = 0usize;

    while let Some(rel) = raw[pos..].find('<') {
        let at = pos + rel;
        let tag = match tag_at(&raw[at..]) {
            Some(tag) => tag,
            None => {
                pos = at + 1;
                continue;
            }
        };
        let at_char = cursor.char_at(at);
        let delim = match tag {
            Tag::Close(_) => return Err(TranscriptError::UnmatchedClose { offset: at_char }),
            Tag::Open(d) => d,
        };

        let body_start = at + delim.open().len();
        let close_at = match delim {
            Delimiter::Code => find_code_close(raw, body_start, &mut cursor)?,
            _ => raw[body_start..].find(delim.close()).map(|r| body_start + r),
        };
        let Some(close_at) = close_at else {
            return Err(TranscriptError::UnclosedDelimiter { kind: delim.kind(), offset: at_char });
        };
        let region_end = close_at + delim.close().len();

        if thought_start.0 < at {
            segments.push(Segment {
                kind: SegmentKind::Thought,
                text: raw[thought_start.0..at].to_string(),
                span: Span::new(thought_start.1, at_char),
                delimiter: None,
            });
        }
        let end_char = cursor.char_at(region_end);
        segments.push(Segment {
            kind: delim.kind(),
            text: raw[body_start..close_at].to_string(),
            span: Span::new(at_char, end_char),
            delimiter: Some(delim),
        });
        thought_start = (region_end, end_char);
        pos = region_end;
    }

    if thought_start.0 < raw.len() {
        let end_char = cursor.char_at(raw.len());
        segments.push(Segment {
            kind: SegmentKind::Thought,
            text: raw[thought_start.0..].to_string(),
            span: Span::new(thought_start.1, end_char),
            delimiter: None,
        });
    }

    Ok(Transcript { statement: String::new(), segments, raw: raw.to_string() })
}

/// Find `</code>` after `from`, failing on any opener seen first.
fn find_code_close(
    raw: &str,
    from: usize,
    cursor: &mut CharCursor<'_>,
) -> Result<Option<usize>, TranscriptError> {
    let mut pos = from;
    while let Some(rel) = raw[pos..].find('<') {
        let at = pos + rel;
        match tag_at(&raw[at..]) {
            Some(Tag::Close(Delimiter::Code)) => return Ok(Some(at)),
            Some(Tag::Open(_)) => {
                return Err(TranscriptError::NestedDelimiter { offset: cursor.char_at(at) })
            }
            _ => pos = at + 1,
        }
    }
    Ok(None)
}

impl Transcript {
    pub fn with_statement(mut self, statement: impl Into<String>) -> Self {
        self.statement = statement.into();
        self
    }

    /// Rebuild the raw text from the segments.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.raw.len());
        for seg in &self.segments {
            seg.render_into(&mut out);
        }
        out
    }

    pub fn char_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.span.end)
    }

    pub fn code_blocks(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind == SegmentKind::CodeBlock)
    }

    pub fn has_code(&self) -> bool {
        self.code_blocks().next().is_some()
    }

    pub fn feedback_count(&self) -> usize {
        self.segments.iter().filter(|s| s.kind == SegmentKind::VerifierFeedback).count()
    }
}

/// Source of the last code block, fence stripped. Later blocks supersede
/// earlier ones.
pub fn extract_latest_code(t: &Transcript) -> Option<String> {
    t.code_blocks().last().map(|seg| strip_code_fence(&seg.text))
}

/// Strip a surrounding ```` ```lean4 ```` / ```` ``` ```` fence, if any.
pub fn strip_code_fence(block: &str) -> String {
    let trimmed = block.trim();
    if !trimmed.starts_with("```") {
        return trimmed.to_string();
    }
    let Some(newline) = trimmed.find('\n') else {
        return String::new();
    };
    let body = &trimmed[newline + 1..];
    let body = body.strip_suffix("```").unwrap_or(body);
    body.trim_end_matches(['\n', '\r']).to_string()
}

/// Append a rendered verifier result as a new feedback segment.
pub fn append_feedback(t: &Transcript, v: &VerificationResult) -> Result<Transcript, TranscriptError> {
    append_feedback_text(t, &render_feedback(v, &FeedbackStyle::default()))
}

/// Append pre-rendered feedback text inside `<interpreter>` delimiters.
pub fn append_feedback_text(t: &Transcript, feedback: &str) -> Result<Transcript, TranscriptError> {
    if !t.has_code() {
        return Err(TranscriptError::NoCodeBlock);
    }
    let mut raw = t.raw.clone();
    if !raw.is_empty() && !raw.ends_with('\n') {
        raw.push('\n');
    }
    raw.push_str(Delimiter::Interpreter.open());
    // a literal closer inside verifier output would end the region early
    raw.push_str(&feedback.replace(Delimiter::Interpreter.close(), "</ interpreter>"));
    raw.push_str(Delimiter::Interpreter.close());
    Ok(parse_transcript(&raw)?.with_statement(t.statement.clone()))
}

/// Spans of every verifier-feedback region, delimiters included.
pub fn compute_mask_spans(t: &Transcript) -> MaskSpanSet {
    MaskSpanSet {
        spans: t
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::VerifierFeedback)
            .map(|s| s.span)
            .collect(),
    }
}

/// Token-level mask: a token is masked when it overlaps any masked span.
pub fn token_mask(tokens: &[Span], mask: &MaskSpanSet) -> Vec<bool> {
    tokens
        .iter()
        .map(|tok| {
            let idx = mask.spans.partition_point(|s| s.end <= tok.start);
            mask.spans.get(idx).is_some_and(|s| s.overlaps(tok))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SegmentRepr {
    kind: SegmentKind,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TranscriptRepr {
    #[serde(default)]
    statement: String,
    raw: String,
    #[serde(default)]
    segments: Option<Vec<SegmentRepr>>,
    #[serde(default)]
    mask_spans: Option<Vec<Span>>,
}

impl From<Transcript> for TranscriptRepr {
    fn from(t: Transcript) -> Self {
        let mask = compute_mask_spans(&t);
        TranscriptRepr {
            segments: Some(
                t.segments
                    .iter()
                    .map(|s| SegmentRepr { kind: s.kind, start: s.span.start, end: s.span.end })
                    .collect(),
            ),
            mask_spans: Some(mask.spans),
            statement: t.statement,
            raw: t.raw,
        }
    }
}

impl TryFrom<TranscriptRepr> for Transcript {
    type Error = TranscriptError;

    fn try_from(repr: TranscriptRepr) -> Result<Self, Self::Error> {
        let t = parse_transcript(&repr.raw)?.with_statement(repr.statement);
        if let Some(segments) = repr.segments {
            let ok = segments.len() == t.segments.len()
                && segments
                    .iter()
                    .zip(&t.segments)
                    .all(|(r, s)| r.kind == s.kind && r.start == s.span.start && r.end == s.span.end);
            if !ok {
                return Err(TranscriptError::SegmentMismatch);
            }
        }
        if let Some(mask) = repr.mask_spans {
            if mask != compute_mask_spans(&t).spans {
                return Err(TranscriptError::SegmentMismatch);
            }
        }
        Ok(t)
    }
}

/// One line of a transcript JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub id: String,
    #[serde(flatten)]
    pub transcript: Transcript,
}
