//! Clipped policy-gradient objective values for one group of rollouts.
//!
//! Advantages are group-standardised rewards, shared by every token of a
//! sequence. Per token the surrogate is
//! `min(r·A, clip(r, 1-ε_low, 1+ε_high)·A)` with `r = exp(logp_new - logp_old)`.
//! Verifier-injected tokens are masked out entirely.
//!
//! Two aggregations are provided: the token-level mean used by DAPO (every
//! unmasked token in the group weighs the same) and the sample-level mean of
//! GRPO (average within each sequence first, then across sequences).
//!
//! Only values are computed here; gradients belong to the training stack.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::{MaskSpanSet, Span};

pub const STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("reward standard deviation {std} is below {STD_EPSILON}; the group should have been filtered")]
    DegenerateGroup { std: f64 },
    #[error("every token is masked")]
    EmptyAfterMask,
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("invalid clip config: {0}")]
    InvalidClip(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { eps_low: 0.2, eps_high: 0.28 }
    }
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self, ObjectiveError> {
        let cfg = ClipConfig { eps_low, eps_high };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0 < self.eps_low && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return Err(ObjectiveError::InvalidClip(format!(
                "need 0 < eps_low <= eps_high < 1, got {} and {}",
                self.eps_low, self.eps_high
            )));
        }
        Ok(())
    }

    pub fn clip(&self, ratio: f64) -> f64 {
        ratio.clamp(1.0 - self.eps_low, 1.0 + self.eps_high)
    }
}

/// Per-token log-probabilities and mask flags for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub logprob_old: Vec<f64>,
    pub logprob_new: Vec<f64>,
    pub masked: Vec<bool>,
}

impl TokenBatch {
    pub fn new(logprob_old: Vec<f64>, logprob_new: Vec<f64>, masked: Vec<bool>) -> Result<Self, ObjectiveError> {
        if logprob_old.len() != masked.len() || logprob_new.len() != masked.len() {
            return Err(ObjectiveError::InvalidGroup(format!(
                "token arrays differ in length: {} / {} / {}",
                logprob_old.len(),
                logprob_new.len(),
                masked.len()
            )));
        }
        Ok(TokenBatch { logprob_old, logprob_new, masked })
    }

    /// A sequence whose current and old policies agree (ratio 1 everywhere).
    pub fn on_policy(masked: Vec<bool>) -> Self {
        let n = masked.len();
        TokenBatch { logprob_old: vec![0.0; n], logprob_new: vec![0.0; n], masked }
    }

    /// Character-granular sequence of `len` tokens masked by `mask`.
    pub fn from_char_mask(len: usize, mask: &MaskSpanSet) -> Self {
        let mut masked = vec![false; len];
        for span in &mask.spans {
            for flag in masked.iter_mut().take(span.end.min(len)).skip(span.start) {
                *flag = true;
            }
        }
        Self::on_policy(masked)
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn unmasked_len(&self) -> usize {
        self.masked.iter().filter(|m| !**m).count()
    }

    pub fn masked_len(&self) -> usize {
        self.len() - self.unmasked_len()
    }

    pub fn mask_spans(&self) -> MaskSpanSet {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, &m) in self.masked.iter().chain(std::iter::once(&false)).enumerate() {
            match (m, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    spans.push(Span::new(s, i));
                    start = None;
                }
                _ => {}
            }
        }
        MaskSpanSet { spans }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub sequences: Vec<TokenBatch>,
    pub rewards: Vec<f64>,
    pub valid_flags: Vec<bool>,
}

impl RolloutGroup {
    pub fn new(sequences: Vec<TokenBatch>, rewards: Vec<f64>, valid_flags: Vec<bool>) -> Result<Self, ObjectiveError> {
        let g = sequences.len();
        if g < 2 || rewards.len() != g || valid_flags.len() != g {
            return Err(ObjectiveError::InvalidGroup(format!(
                "need G >= 2 matching sequences/rewards/flags, got {g}/{}/{}",
                rewards.len(),
                valid_flags.len()
            )));
        }
        Ok(RolloutGroup { sequences, rewards, valid_flags })
    }

    pub fn size(&self) -> usize {
        self.sequences.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_flags.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    SolvedNone,
    SolvedAll,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::SolvedNone => "solved-none",
            DropReason::SolvedAll => "solved-all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupVerdict {
    Keep,
    Drop(DropReason),
}

/// Keep a group only if some but not all of its rollouts verified.
pub fn filter_group(g: &RolloutGroup) -> GroupVerdict {
    match g.valid_count() {
        0 => GroupVerdict::Drop(DropReason::SolvedNone),
        n if n == g.size() => GroupVerdict::Drop(DropReason::SolvedAll),
        _ => GroupVerdict::Keep,
    }
}

/// `(R_i - mean) / std` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
    if rewards.len() < 2 {
        return Err(ObjectiveError::InvalidGroup(format!("need at least 2 rewards, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= STD_EPSILON) {
        return Err(ObjectiveError::DegenerateGroup { std });
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(r·A, clip(r)·A)` for a single token.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    (ratio * advantage).min(clip.clip(ratio) * advantage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Surrogate per token; masked positions hold 0.
    pub per_token_terms: Vec<Vec<f64>>,
    pub unmasked_tokens: usize,
}

fn per_token_terms(g: &RolloutGroup, clip: &ClipConfig) -> Result<Vec<Vec<f64>>, ObjectiveError> {
    clip.validate()?;
    let advantages = group_advantages(&g.rewards)?;
    Ok(g.sequences
        .iter()
        .zip(&advantages)
        .map(|(seq, &adv)| {
            (0..seq.len())
                .map(|t| {
                    if seq.masked[t] {
                        // masked log-probs are never read
                        0.0
                    } else {
                        let ratio = (seq.logprob_new[t] - seq.logprob_old[t]).exp();
                        clipped_surrogate(ratio, adv, clip)
                    }
                })
                .collect()
        })
        .collect())
}

/// Token-level aggregation: sum of unmasked terms over the unmasked token count.
pub fn dapo_objective(g: &RolloutGroup, clip: &ClipConfig) -> Result<ObjectiveValue, ObjectiveError> {
    let terms = per_token_terms(g, clip)?;
    let unmasked: usize = g.sequences.iter().map(TokenBatch::unmasked_len).sum();
    if unmasked == 0 {
        return Err(ObjectiveError::EmptyAfterMask);
    }
    let total: f64 = g
        .sequences
        .iter()
        .zip(&terms)
        .flat_map(|(seq, row)| row.iter().zip(&seq.masked).filter(|(_, m)| !**m).map(|(x, _)| *x))
        .sum();
    Ok(ObjectiveValue { value: total / unmasked as f64, per_token_terms: terms, unmasked_tokens: unmasked })
}

/// Sample-level aggregation: mean over sequences of each sequence's mean term.
pub fn grpo_objective(g: &RolloutGroup, clip: &ClipConfig) -> Result<f64, ObjectiveError> {
    let terms = per_token_terms(g, clip)?;
    let mut total = 0.0;
    for (seq, row) in g.sequences.iter().zip(&terms) {
        let n = seq.unmasked_len();
        if n == 0 {
            return Err(ObjectiveError::EmptyAfterMask);
        }
        let sum: f64 = row.iter().zip(&seq.masked).filter(|(_, m)| !**m).map(|(x, _)| *x).sum();
        total += sum / n as f64;
    }
    Ok(total / g.size() as f64)
}

/// One line of a groups JSONL file.
///
/// Sequences are given by length and masked spans; log-probabilities are
/// optional and default to zeros (ratio 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub statement_id: String,
    pub rewards: Vec<f64>,
    pub valid: Vec<bool>,
    pub sequences: Vec<SequenceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_reason: Option<DropReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub len: usize,
    #[serde(default)]
    pub mask_spans: Vec<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_old: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_new: Option<Vec<f64>>,
}

impl SequenceRecord {
    pub fn from_batch(b: &TokenBatch, with_logprobs: bool) -> Self {
        SequenceRecord {
            len: b.len(),
            mask_spans: b.mask_spans().spans,
            logprob_old: with_logprobs.then(|| b.logprob_old.clone()),
            logprob_new: with_logprobs.then(|| b.logprob_new.clone()),
        }
    }

    pub fn to_batch(&self) -> Result<TokenBatch, ObjectiveError> {
        if self.mask_spans.iter().any(|s| s.start > s.end || s.end > self.len) {
            return Err(ObjectiveError::InvalidGroup(format!("mask span outside sequence of length {}", self.len)));
        }
        let base = TokenBatch::from_char_mask(self.len, &MaskSpanSet { spans: self.mask_spans.clone() });
        TokenBatch::new(
            self.logprob_old.clone().unwrap_or(base.logprob_old),
            self.logprob_new.clone().unwrap_or(base.logprob_new),
            base.masked,
        )
    }
}

impl GroupRecord {
    pub fn to_group(&self) -> Result<RolloutGroup, ObjectiveError> {
        let sequences = self.sequences.iter().map(SequenceRecord::to_batch).collect::<Result<Vec<_>, _>>()?;
        RolloutGroup::new(sequences, self.rewards.clone(), self.valid.clone())
    }
}

/// One line of the objectives JSONL emitted per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveRecord {
    pub statement_id: String,
    #[serde(rename = "G")]
    pub group_size: usize,
    pub rewards: Vec<f64>,
    pub token_counts: Vec<usize>,
    pub masked_counts: Vec<usize>,
    pub objective_dapo: Option<f64>,
    pub objective_grpo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ObjectiveRecord {
    pub fn evaluate(statement_id: &str, g: &RolloutGroup, clip: &ClipConfig) -> Self {
        let dapo = dapo_objective(g, clip).map(|v| v.value);
        let grpo = grpo_objective(g, clip);
        let error = match (&dapo, &grpo) {
            (Err(e), _) | (_, Err(e)) => Some(e.to_string()),
            _ => None,
        };
        ObjectiveRecord {
            statement_id: statement_id.to_string(),
            group_size: g.size(),
            rewards: g.rewards.clone(),
            token_counts: g.sequences.iter().map(TokenBatch::len).collect(),
            masked_counts: g.sequences.iter().map(TokenBatch::masked_len).collect(),
            objective_dapo: dapo.ok(),
            objective_grpo: grpo.ok(),
            error,
        }
    }
}
