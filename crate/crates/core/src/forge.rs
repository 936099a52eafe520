//! Cold-start SFT data: turns verified (attempt, feedback, rewrite) tuples
//! into the four training scenarios, and selects RL prompts by pass rate.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::{compute_mask_spans, parse_transcript, Delimiter, MaskSpanSet, SegmentKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ForgeError {
    #[error("invalid tuple: {0}")]
    InvalidTuple(String),
    #[error("pass-rate filter needs at least one outcome")]
    EmptyOutcomes,
    #[error("pass-rate window {lo}..={hi} is empty or outside [0, 1]")]
    InvalidWindow { lo: Ratio<u64>, hi: Ratio<u64> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionTuple {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub statement: String,
    pub cot: String,
    pub proof: String,
    #[serde(default)]
    pub feedback: Option<String>,
    #[serde(default)]
    pub rewrite_analysis: Option<String>,
    #[serde(default)]
    pub rewrite: Option<String>,
    pub proof_passed: bool,
    #[serde(default)]
    pub rewrite_passed: Option<bool>,
}

impl CorrectionTuple {
    pub fn validate(&self) -> Result<(), ForgeError> {
        let bad = |m: &str| Err(ForgeError::InvalidTuple(m.to_string()));
        if !self.proof_passed && self.feedback.is_none() {
            return bad("failed proof without verifier feedback");
        }
        if self.rewrite.is_some() && self.rewrite_passed.is_none() {
            return bad("rewrite present but never re-verified");
        }
        if self.rewrite.is_none() && self.rewrite_passed.is_some() {
            return bad("re-verification result without a rewrite");
        }
        if self.proof.trim().is_empty() {
            return bad("empty proof");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::S1, Scenario::S2, Scenario::S3, Scenario::S4];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub scenario: Scenario,
    pub input_text: String,
    pub output_text: String,
    /// Character spans over `input_text + output_text`.
    pub mask_spans: MaskSpanSet,
}

impl ScenarioSample {
    pub fn record_text(&self) -> String {
        format!("{}{}", self.input_text, self.output_text)
    }

    pub fn input_len(&self) -> usize {
        self.input_text.chars().count()
    }
}

pub fn code_block(proof: &str) -> String {
    format!("{}\n```lean4\n{}\n```\n{}", Delimiter::Code.open(), proof.trim_end(), Delimiter::Code.close())
}

pub fn feedback_block(feedback: &str) -> String {
    let close = Delimiter::Interpreter.close();
    format!("{}{}{close}", Delimiter::Interpreter.open(), feedback.replace(close, "</ interpreter>"))
}

fn join(parts: &[&str]) -> String {
    parts.iter().filter(|p| !p.is_empty()).copied().collect::<Vec<_>>().join("\n")
}

fn sample(t: &CorrectionTuple, scenario: Scenario, input: String, output: String) -> Result<ScenarioSample, ForgeError> {
    let full = format!("{input}{output}");
    let parsed = parse_transcript(&full).map_err(|e| ForgeError::InvalidTuple(format!("{scenario:?} does not parse: {e}")))?;
    // feedback delimiters can only come from the feedback field
    let expected = usize::from(matches!(scenario, Scenario::S1 | Scenario::S2));
    let found = parsed.segments.iter().filter(|s| s.kind == SegmentKind::VerifierFeedback).count();
    if found != expected {
        return Err(ForgeError::InvalidTuple(format!("{scenario:?} has {found} feedback regions, expected {expected}")));
    }
    Ok(ScenarioSample { id: t.id.clone(), scenario, input_text: input, output_text: output, mask_spans: compute_mask_spans(&parsed) })
}

/// Every scenario the tuple qualifies for: S1 and S2 for a failed proof
/// whose rewrite re-verified, S3 and S4 for a proof that passed, nothing
/// otherwise.
pub fn build_scenarios(t: &CorrectionTuple) -> Result<Vec<ScenarioSample>, ForgeError> {
    t.validate()?;
    let proof = code_block(&t.proof);
    if t.proof_passed {
        return Ok(vec![
            sample(t, Scenario::S3, t.statement.clone(), join(&[&t.cot, &proof]))?,
            sample(t, Scenario::S4, join(&[&t.statement, &t.cot]), proof)?,
        ]);
    }
    let (Some(rewrite), Some(true)) = (&t.rewrite, t.rewrite_passed) else {
        return Ok(Vec::new());
    };
    let feedback = feedback_block(t.feedback.as_deref().unwrap_or_default());
    let analysis = t.rewrite_analysis.as_deref().unwrap_or_default();
    let rewrite = code_block(rewrite);
    Ok(vec![
        sample(t, Scenario::S1, t.statement.clone(), join(&[&t.cot, &proof, &feedback, analysis, &rewrite]))?,
        // the trailing newline keeps the feedback block off the analysis line
        sample(t, Scenario::S2, format!("{}\n", join(&[&t.statement, &t.cot, &proof, &feedback])), join(&[analysis, &rewrite]))?,
    ])
}

/// Per-scenario sample caps; `None` keeps everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioQuotas {
    pub s1: Option<usize>,
    pub s2: Option<usize>,
    pub s3: Option<usize>,
    pub s4: Option<usize>,
}

impl ScenarioQuotas {
    pub fn limit(&self, s: Scenario) -> Option<usize> {
        match s {
            Scenario::S1 => self.s1,
            Scenario::S2 => self.s2,
            Scenario::S3 => self.s3,
            Scenario::S4 => self.s4,
        }
    }

    /// Keep the first samples of each scenario up to its quota, preserving order.
    pub fn apply(&self, samples: Vec<ScenarioSample>) -> Vec<ScenarioSample> {
        let mut taken = [0usize; 4];
        samples
            .into_iter()
            .filter(|s| {
                let slot = &mut taken[s.scenario as usize];
                *slot += 1;
                self.limit(s.scenario).is_none_or(|q| *slot <= q)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassRateVerdict {
    Keep,
    Drop,
}

/// Default window: keep statements solved by 1/8 to 1/2 of probe attempts.
pub fn default_window() -> (Ratio<u64>, Ratio<u64>) {
    (Ratio::new(1, 8), Ratio::new(1, 2))
}

pub fn pass_rate_filter(outcomes: &[bool], lo: Ratio<u64>, hi: Ratio<u64>) -> Result<PassRateVerdict, ForgeError> {
    if lo > hi || hi > Ratio::from_integer(1) {
        return Err(ForgeError::InvalidWindow { lo, hi });
    }
    if outcomes.is_empty() {
        return Err(ForgeError::EmptyOutcomes);
    }
    let rate = Ratio::new(outcomes.iter().filter(|o| **o).count() as u64, outcomes.len() as u64);
    Ok(if lo <= rate && rate <= hi { PassRateVerdict::Keep } else { PassRateVerdict::Drop })
}

/// Parse `"1/8"`, `"0.125"` or `"1"` into a ratio.
pub fn parse_ratio(s: &str) -> Option<Ratio<u64>> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let d: u64 = d.trim().parse().ok()?;
        let n: u64 = n.trim().parse().ok()?;
        return (d != 0).then(|| Ratio::new(n, d));
    }
    if let Ok(n) = s.parse::<u64>() {
        return Some(Ratio::from_integer(n));
    }
    let x: f64 = s.parse().ok()?;
    if !(x.is_finite() && x >= 0.0) {
        return None;
    }
    Ratio::<i64>::approximate_float(x).and_then(|r| Some(Ratio::new(u64::try_from(*r.numer()).ok()?, u64::try_from(*r.denom()).ok()?)))
}

/// One line of the probe-outcomes file fed to the pass-rate filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOutcomes {
    pub id: String,
    pub outcomes: Vec<bool>,
}
