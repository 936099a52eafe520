//! Multi-turn rollout loop: generate, verify the latest code block, append
//! the verifier's feedback and branch into continuations until something
//! passes or the iteration budget runs out.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FinishReason, GenerationRequest, ModelGateway, DEFAULT_STOP};
use crate::objective::{filter_group, GroupRecord, GroupVerdict, RolloutGroup, SequenceRecord, TokenBatch};
use crate::prompts::Statement;
use crate::reward::{combine, RewardBreakdown, RewardConfig};
use crate::sha256_hex;
use crate::transcript::{
    append_feedback_text, compute_mask_spans, extract_latest_code, parse_transcript, Delimiter, MaskSpanSet,
    SegmentKind, Transcript, TranscriptError,
};
use crate::verifier::{render_feedback, FeedbackStyle, VerificationRequest, VerificationResult, VerifierGateway};

pub const MAX_ITERATIONS_LIMIT: u32 = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("statement {statement_id} has {have} scored transcripts, group needs {need}")]
    InsufficientRollouts { statement_id: String, have: usize, need: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { temperature: 0.6, max_tokens: 16_384, stop: vec![DEFAULT_STOP.to_string()] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub first_round_rollouts: usize,
    /// Continuations drawn from each failed attempt.
    pub branch_per_iteration: usize,
    /// Feedback rounds after the first attempt; 0 is single-shot.
    pub max_iterations: u32,
    pub verify_timeout_secs: f64,
    pub feedback_byte_budget: usize,
    pub seed: u64,
    /// Stop a statement's remaining work once any branch passes.
    pub early_stop: bool,
    pub generation: GenerationParams,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            first_round_rollouts: 32,
            branch_per_iteration: 1,
            max_iterations: 1,
            verify_timeout_secs: 60.0,
            feedback_byte_budget: FeedbackStyle::default().byte_budget,
            seed: 0,
            early_stop: false,
            generation: GenerationParams::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::InvalidConfig(m));
        if self.first_round_rollouts == 0 {
            return bad("first_round_rollouts must be positive".into());
        }
        if self.max_iterations > MAX_ITERATIONS_LIMIT {
            return bad(format!("max_iterations {} exceeds {MAX_ITERATIONS_LIMIT}", self.max_iterations));
        }
        if self.max_iterations >= 1 && self.branch_per_iteration == 0 {
            return bad("branch_per_iteration must be at least 1 when max_iterations >= 1".into());
        }
        if !(self.verify_timeout_secs.is_finite() && self.verify_timeout_secs > 0.0) {
            return bad(format!("verify_timeout_secs {} must be positive", self.verify_timeout_secs));
        }
        if self.generation.max_tokens == 0 {
            return bad("generation.max_tokens must be at least 1".into());
        }
        if !(self.generation.temperature.is_finite() && self.generation.temperature >= 0.0) {
            return bad(format!("generation.temperature {} must be >= 0", self.generation.temperature));
        }
        Ok(())
    }

    /// Generations made when nothing passes: `N · Σ_{d=0..D} B^d`.
    pub fn generation_budget(&self) -> usize {
        let mut level = self.first_round_rollouts;
        let mut total = level;
        for _ in 0..self.max_iterations {
            level = level.saturating_mul(self.branch_per_iteration);
            total = total.saturating_add(level);
        }
        total
    }
}

/// One leaf of the rollout tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTranscript {
    /// Model output for this branch, with all feedback appended so far.
    pub raw: String,
    pub mask_spans: MaskSpanSet,
    pub reward: RewardBreakdown,
    pub passed: bool,
    pub iteration_depth: u32,
    pub root_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScoredTranscript {
    pub fn char_len(&self) -> usize {
        self.raw.chars().count()
    }

    pub fn unmasked_len(&self) -> usize {
        self.char_len() - self.mask_spans.masked_len()
    }

    /// Parsed form; `None` for malformed model output.
    pub fn transcript(&self) -> Option<Transcript> {
        parse_transcript(&self.raw).ok()
    }

    pub fn token_batch(&self) -> TokenBatch {
        TokenBatch::from_char_mask(self.char_len(), &self.mask_spans)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub statement_id: String,
    pub first_round_rollouts: usize,
    pub max_iterations: u32,
    pub solved: bool,
    pub verifier_calls: usize,
    pub generations: usize,
    pub used_verifier_feedback: bool,
    pub transcripts: Vec<ScoredTranscript>,
}

impl EpisodeResult {
    /// For each first-round rollout, the shallowest depth at which one of its
    /// branches passed.
    pub fn root_solve_depths(&self) -> Vec<Option<u32>> {
        let mut depths = vec![None; self.first_round_rollouts];
        for t in self.transcripts.iter().filter(|t| t.passed) {
            if let Some(slot) = depths.get_mut(t.root_index) {
                *slot = Some(slot.map_or(t.iteration_depth, |d: u32| d.min(t.iteration_depth)));
            }
        }
        depths
    }

    pub fn solved_roots(&self) -> usize {
        self.root_solve_depths().iter().filter(|d| d.is_some()).count()
    }
}

/// Model, verifier and reward settings shared by every episode of a run.
#[derive(Clone)]
pub struct Prover {
    pub model: ModelGateway,
    pub verifier: VerifierGateway,
    pub rewards: RewardConfig,
}

struct Counters {
    verifier_calls: AtomicUsize,
    generations: AtomicUsize,
    used_feedback: AtomicBool,
    solved: AtomicBool,
}

struct Episode<'a> {
    prover: &'a Prover,
    cfg: &'a EpisodeConfig,
    statement: &'a Statement,
    base_prompt: String,
    thread_key: String,
    feedback: FeedbackStyle,
    counters: Counters,
}

pub fn run_episode(
    statement: &Statement,
    cfg: &EpisodeConfig,
    model: &ModelGateway,
    verifier: &VerifierGateway,
    rewards: &RewardConfig,
) -> Result<EpisodeResult, OrchestratorError> {
    let prover = Prover { model: model.clone(), verifier: verifier.clone(), rewards: rewards.clone() };
    prover.run_episode(statement, cfg)
}

impl Prover {
    pub fn new(model: ModelGateway, verifier: VerifierGateway, rewards: RewardConfig) -> Self {
        Prover { model, verifier, rewards }
    }

    pub fn run_episode(&self, statement: &Statement, cfg: &EpisodeConfig) -> Result<EpisodeResult, OrchestratorError> {
        cfg.validate()?;
        let base_prompt = statement.proving_prompt();
        let ep = Episode {
            prover: self,
            cfg,
            statement,
            thread_key: sha256_hex(&base_prompt),
            base_prompt,
            feedback: FeedbackStyle::with_budget(cfg.feedback_byte_budget),
            counters: Counters {
                verifier_calls: AtomicUsize::new(0),
                generations: AtomicUsize::new(0),
                used_feedback: AtomicBool::new(false),
                solved: AtomicBool::new(false),
            },
        };
        let roots = 0..cfg.first_round_rollouts;
        let run_root = |i: usize| {
            if ep.stopped() {
                return Vec::new();
            }
            ep.expand(None, 0, cfg.seed.wrapping_add(i as u64), i)
        };
        let leaves: Vec<Vec<ScoredTranscript>> = if cfg.early_stop {
            roots.map(run_root).collect()
        } else {
            roots.into_par_iter().map(run_root).collect()
        };
        let transcripts: Vec<ScoredTranscript> = leaves.into_iter().flatten().collect();
        Ok(EpisodeResult {
            statement_id: statement.id.clone(),
            first_round_rollouts: cfg.first_round_rollouts,
            max_iterations: cfg.max_iterations,
            solved: transcripts.iter().any(|t| t.passed),
            verifier_calls: ep.counters.verifier_calls.into_inner(),
            generations: ep.counters.generations.into_inner(),
            used_verifier_feedback: ep.counters.used_feedback.into_inner(),
            transcripts,
        })
    }

    /// Episodes for many statements, run concurrently, in input order.
    pub fn run_all(&self, statements: &[Statement], cfg: &EpisodeConfig) -> Result<Vec<EpisodeResult>, OrchestratorError> {
        cfg.validate()?;
        statements.par_iter().map(|s| self.run_episode(s, cfg)).collect()
    }
}

impl Episode<'_> {
    fn stopped(&self) -> bool {
        self.cfg.early_stop && self.counters.solved.load(Ordering::SeqCst)
    }

    fn leaf(&self, t: &Transcript, reward: RewardBreakdown, depth: u32, root: usize, error: Option<String>) -> ScoredTranscript {
        ScoredTranscript {
            raw: t.raw.clone(),
            mask_spans: compute_mask_spans(t),
            passed: reward.passed,
            reward,
            iteration_depth: depth,
            root_index: root,
            error,
        }
    }

    fn failed_leaf(&self, raw: String, mask: MaskSpanSet, format_ok: bool, depth: u32, root: usize, error: String) -> ScoredTranscript {
        ScoredTranscript {
            raw,
            mask_spans: mask,
            reward: RewardBreakdown::unverified(&self.prover.rewards, format_ok),
            passed: false,
            iteration_depth: depth,
            root_index: root,
            error: Some(error),
        }
    }

    /// Generate one continuation of `prefix` and recurse on failure.
    fn expand(&self, prefix: Option<&Transcript>, depth: u32, seed: u64, root: usize) -> Vec<ScoredTranscript> {
        let prefix_raw = prefix.map_or("", |t| t.raw.as_str());
        let prefix_mask = prefix.map(compute_mask_spans).unwrap_or_default();
        let gen = &self.cfg.generation;
        let req = GenerationRequest {
            prompt: format!("{}{}", self.base_prompt, prefix_raw),
            temperature: gen.temperature,
            max_tokens: gen.max_tokens,
            stop: (!gen.stop.is_empty()).then(|| gen.stop.clone()),
            seed: Some(seed),
            turn: depth,
            thread_key: Some(self.thread_key.clone()),
        };
        self.counters.generations.fetch_add(1, Ordering::SeqCst);
        let out = match self.prover.model.generate(&req) {
            Ok(out) if out.finish_reason != FinishReason::Error => out,
            Ok(_) => {
                let raw = prefix_raw.to_string();
                return vec![self.failed_leaf(raw, prefix_mask, false, depth, root, "generation error".into())];
            }
            Err(e) => {
                log::warn!("{}: generation failed: {e}", self.statement.id);
                return vec![self.failed_leaf(prefix_raw.to_string(), prefix_mask, false, depth, root, e.to_string())];
            }
        };

        let mut raw = format!("{prefix_raw}{}", out.text);
        let mut parsed = parse_transcript(&raw);
        // servers drop the stop string itself
        if out.finish_reason == FinishReason::Stop
            && matches!(parsed, Err(TranscriptError::UnclosedDelimiter { kind: SegmentKind::CodeBlock, .. }))
        {
            raw.push_str(Delimiter::Code.close());
            parsed = parse_transcript(&raw);
        }
        let transcript = match parsed {
            Ok(t) if extract_latest_code(&t).is_some_and(|c| !c.trim().is_empty()) && t.code_blocks().count() > prefix.map_or(0, |p| p.code_blocks().count()) => {
                t.with_statement(self.statement.id.clone())
            }
            Ok(_) => {
                return vec![self.failed_leaf(raw, prefix_mask, false, depth, root, "no new code block".into())];
            }
            Err(e) => return vec![self.failed_leaf(raw, prefix_mask, false, depth, root, e.to_string())],
        };

        let code = extract_latest_code(&transcript).expect("checked above");
        let source = self.statement.assemble_source(&code);
        self.counters.verifier_calls.fetch_add(1, Ordering::SeqCst);
        let timeout = Duration::from_secs_f64(self.cfg.verify_timeout_secs);
        let verified = VerificationRequest::new(source.as_str(), timeout).and_then(|req| self.prover.verifier.verify(&req));
        let result = match verified {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{}: verification failed: {e}", self.statement.id);
                let mask = compute_mask_spans(&transcript);
                return vec![self.failed_leaf(transcript.raw, mask, true, depth, root, e.to_string())];
            }
        };
        let reward = combine(&self.prover.rewards, true, &result, &source);
        let with_feedback = match self.append(&transcript, &result) {
            Ok(t) => t,
            Err(e) => return vec![self.leaf(&transcript, reward, depth, root, Some(e.to_string()))],
        };

        if result.passed {
            self.counters.solved.store(true, Ordering::SeqCst);
            return vec![self.leaf(&with_feedback, reward, depth, root, None)];
        }
        if depth >= self.cfg.max_iterations || self.stopped() {
            return vec![self.leaf(&with_feedback, reward, depth, root, None)];
        }

        self.counters.used_feedback.store(true, Ordering::SeqCst);
        let child = |b: usize| {
            if self.stopped() {
                return Vec::new();
            }
            self.expand(Some(&with_feedback), depth + 1, seed.wrapping_add(b as u64), root)
        };
        let branches = 0..self.cfg.branch_per_iteration;
        let children: Vec<Vec<ScoredTranscript>> = if self.cfg.early_stop {
            branches.map(child).collect()
        } else {
            branches.into_par_iter().map(child).collect()
        };
        children.into_iter().flatten().collect()
    }

    fn append(&self, t: &Transcript, v: &VerificationResult) -> Result<Transcript, TranscriptError> {
        append_feedback_text(t, &render_feedback(v, &self.feedback))
    }
}

/// One RL group assembled from an episode, with its keep/drop verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGroup {
    pub statement_id: String,
    pub group: RolloutGroup,
    pub verdict: GroupVerdict,
}

impl BatchGroup {
    pub fn kept(&self) -> bool {
        self.verdict == GroupVerdict::Keep
    }

    pub fn record(&self) -> GroupRecord {
        GroupRecord {
            statement_id: self.statement_id.clone(),
            rewards: self.group.rewards.clone(),
            valid: self.group.valid_flags.clone(),
            sequences: self.group.sequences.iter().map(|b| SequenceRecord::from_batch(b, false)).collect(),
            kept: Some(self.kept()),
            drop_reason: match self.verdict {
                GroupVerdict::Keep => None,
                GroupVerdict::Drop(r) => Some(r),
            },
        }
    }
}

/// Take the first `g` scored transcripts of every episode as a group and
/// apply the group filter. Dropped groups are returned with their reason.
pub fn build_rl_batch(episodes: &[EpisodeResult], g: usize) -> Result<Vec<BatchGroup>, OrchestratorError> {
    if g < 2 {
        return Err(OrchestratorError::InvalidConfig(format!("group size {g} must be at least 2")));
    }
    episodes
        .iter()
        .map(|ep| {
            if ep.transcripts.len() < g {
                return Err(OrchestratorError::InsufficientRollouts {
                    statement_id: ep.statement_id.clone(),
                    have: ep.transcripts.len(),
                    need: g,
                });
            }
            let picked = &ep.transcripts[..g];
            let group = RolloutGroup::new(
                picked.iter().map(ScoredTranscript::token_batch).collect(),
                picked.iter().map(|t| t.reward.final_reward).collect(),
                picked.iter().map(|t| t.passed).collect(),
            )
            .expect("shape checked");
            let verdict = filter_group(&group);
            Ok(BatchGroup { statement_id: ep.statement_id.clone(), group, verdict })
        })
        .collect()
}
