//! Rollout rewards: format bonus, compilation outcome, and the optional
//! structured terms computed from the verifier's tactic AST.
//!
//! ```text
//! failed:  r_failed  (+ r_format if well formatted)
//! passed:  r_success (+ r_format if well formatted)
//!          + λ_tc · tactic_count + λ_at · automation + λ_sc · state_change
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::TACTIC_POWER_TOML;
use crate::verifier::{goal_count, Ast, TacticTrace, VerificationResult};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("verification result carries no AST")]
    MissingAst,
    #[error("tactic span [{pos}, {end_pos}) exceeds code length {len}")]
    SpanOutOfRange { pos: usize, end_pos: usize, len: usize },
    #[error("unrecognized proof state {0:?}")]
    UnrecognizedState(String),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub r_format: f64,
    pub r_success: f64,
    pub r_failed: f64,
    pub lambda_tc: f64,
    pub lambda_at: f64,
    pub lambda_sc: f64,
    pub tactic_power: BTreeMap<String, f64>,
    /// Power assigned to keywords missing from `tactic_power`.
    pub unknown_tactic_power: f64,
    /// When false, tactics whose span lies inside another tactic's span are ignored.
    pub count_nested_tactics: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            r_format: 0.2,
            r_success: 1.0,
            r_failed: 0.0,
            lambda_tc: 0.0,
            lambda_at: 0.0,
            lambda_sc: 0.0,
            tactic_power: default_tactic_power(),
            unknown_tactic_power: 0.5,
            count_nested_tactics: true,
        }
    }
}

#[derive(Deserialize)]
struct PowerTable {
    tactic_power: BTreeMap<String, f64>,
}

/// The sample table shipped in `assets/tactic_power.toml`.
pub fn default_tactic_power() -> BTreeMap<String, f64> {
    toml::from_str::<PowerTable>(TACTIC_POWER_TOML).expect("bundled tactic power table parses").tactic_power
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.r_format >= self.r_success {
            return Err(RewardError::InvalidConfig(format!(
                "r_format ({}) must be smaller than r_success ({})",
                self.r_format, self.r_success
            )));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if let Some((k, v)) = self.tactic_power.iter().find(|(_, v)| !in_unit(**v)) {
            return Err(RewardError::InvalidConfig(format!("tactic power for {k:?} is {v}, outside [0, 1]")));
        }
        if !in_unit(self.unknown_tactic_power) {
            return Err(RewardError::InvalidConfig("unknown_tactic_power outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn any_structured(&self) -> bool {
        self.lambda_tc != 0.0 || self.lambda_at != 0.0 || self.lambda_sc != 0.0
    }

    pub fn power(&self) -> TacticPower<'_> {
        TacticPower { table: &self.tactic_power, unknown: self.unknown_tactic_power }
    }

    /// Load from a `.toml` or `.json` file; the format follows the extension.
    pub fn from_path(path: &Path) -> Result<Self, RewardError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RewardError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let cfg: RewardConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| RewardError::InvalidConfig(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| RewardError::InvalidConfig(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Tactic keyword → automation level lookup.
#[derive(Debug, Clone, Copy)]
pub struct TacticPower<'a> {
    pub table: &'a BTreeMap<String, f64>,
    pub unknown: f64,
}

impl TacticPower<'_> {
    pub fn lookup(&self, keyword: &str) -> f64 {
        let bare = keyword.trim_end_matches(['?', '!']);
        match self.table.get(keyword).or_else(|| self.table.get(bare)) {
            Some(&v) => v,
            None => {
                log::debug!("no tactic power for {keyword:?}, using {}", self.unknown);
                self.unknown
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_ok: bool,
    pub passed: bool,
    pub r_tactic_count: f64,
    pub r_automation: f64,
    pub r_state_change: f64,
    #[serde(rename = "final")]
    pub final_reward: f64,
    /// Structured terms were requested but could not be computed and were zeroed.
    #[serde(default)]
    pub structured_fallback: bool,
}

impl RewardBreakdown {
    /// Reward for a rollout that never reached the verifier (malformed output,
    /// no code block, or a backend error).
    pub fn unverified(cfg: &RewardConfig, format_ok: bool) -> Self {
        RewardBreakdown {
            format_ok,
            passed: false,
            r_tactic_count: 0.0,
            r_automation: 0.0,
            r_state_change: 0.0,
            final_reward: cfg.r_failed + if format_ok { cfg.r_format } else { 0.0 },
            structured_fallback: false,
        }
    }
}

/// Tactics that participate in the structured rewards.
///
/// With `count_nested` off, a tactic whose span lies inside another tactic's
/// span is dropped; of several identical spans only the first is kept.
pub fn counted_tactics(ast: &Ast, count_nested: bool) -> Vec<&TacticTrace> {
    if count_nested {
        return ast.tactics.iter().collect();
    }
    ast.tactics
        .iter()
        .enumerate()
        .filter(|&(i, t)| {
            let span = t.span();
            !ast.tactics.iter().enumerate().any(|(j, other)| {
                let outer = other.span();
                j != i && outer.contains(&span) && (outer != span || j < i)
            })
        })
        .map(|(_, t)| t)
        .collect()
}

pub fn tactic_count_reward(ast: Option<&Ast>, count_nested: bool) -> Result<f64, RewardError> {
    let ast = ast.ok_or(RewardError::MissingAst)?;
    Ok(counted_tactics(ast, count_nested).len() as f64)
}

/// Mean power of the counted tactics' leading keywords.
pub fn automation_reward(
    ast: Option<&Ast>,
    code: &str,
    power: TacticPower<'_>,
    count_nested: bool,
) -> Result<f64, RewardError> {
    let ast = ast.ok_or(RewardError::MissingAst)?;
    let tactics = counted_tactics(ast, count_nested);
    if tactics.is_empty() {
        return Ok(0.0);
    }
    let boundaries: Vec<usize> = code.char_indices().map(|(b, _)| b).chain(std::iter::once(code.len())).collect();
    let char_len = boundaries.len() - 1;
    let mut total = 0.0;
    for t in &tactics {
        if t.pos > t.end_pos || t.end_pos > char_len {
            return Err(RewardError::SpanOutOfRange { pos: t.pos, end_pos: t.end_pos, len: char_len });
        }
        // recorded end positions can stop short of the keyword, so read on from `pos`
        total += power.lookup(leading_keyword(&code[boundaries[t.pos]..]));
    }
    Ok(total / tactics.len() as f64)
}

/// First identifier-like token of a tactic's source text.
pub fn leading_keyword(text: &str) -> &str {
    let text = text.trim_start();
    let end = text
        .char_indices()
        .find(|&(_, c)| !(c.is_alphanumeric() || matches!(c, '_' | '?' | '!' | '\'')))
        .map_or(text.len(), |(i, _)| i);
    &text[..end]
}

/// Mean per-tactic goal reduction `max(0, 1 - after/before)` over tactics
/// that start with at least one goal.
pub fn state_change_reward(ast: Option<&Ast>, count_nested: bool) -> Result<f64, RewardError> {
    let ast = ast.ok_or(RewardError::MissingAst)?;
    let goals = |s: &str| goal_count(s).map_err(|_| RewardError::UnrecognizedState(s.to_string()));
    let mut sum = 0.0;
    let mut included = 0usize;
    for t in counted_tactics(ast, count_nested) {
        let before = goals(&t.state_before)?;
        if before == 0 {
            continue;
        }
        let after = goals(&t.state_after)?;
        sum += (1.0 - after as f64 / before as f64).max(0.0);
        included += 1;
    }
    Ok(if included == 0 { 0.0 } else { sum / included as f64 })
}

/// Final scalar reward for one verified rollout. `code` is the source that
/// was verified; tactic positions index into it.
pub fn combine(cfg: &RewardConfig, format_ok: bool, v: &VerificationResult, code: &str) -> RewardBreakdown {
    let mut out = RewardBreakdown::unverified(cfg, format_ok);
    if !v.passed {
        return out;
    }
    out.passed = true;
    let format = if format_ok { cfg.r_format } else { 0.0 };

    let ast = v.ast.as_ref();
    let nested = cfg.count_nested_tactics;
    let mut fallback = false;
    let mut term = |r: Result<f64, RewardError>, weight: f64| match r {
        Ok(x) => x,
        Err(e) => {
            if weight != 0.0 {
                log::warn!("structured reward term zeroed: {e}");
                fallback = true;
            }
            0.0
        }
    };
    out.r_tactic_count = term(tactic_count_reward(ast, nested), cfg.lambda_tc);
    out.r_automation = term(automation_reward(ast, code, cfg.power(), nested), cfg.lambda_at);
    out.r_state_change = term(state_change_reward(ast, nested), cfg.lambda_sc);
    out.structured_fallback = fallback;

    out.final_reward = cfg.r_success
        + format
        + cfg.lambda_tc * out.r_tactic_count
        + cfg.lambda_at * out.r_automation
        + cfg.lambda_sc * out.r_state_change;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::Diagnostic;

    const FIG8_CODE: &str = include_str!("../fixtures/fig8_code.lean");

    fn fig8_ast() -> Ast {
        Ast::from_json_str(include_str!("../fixtures/fig8_ast.json")).unwrap()
    }

    fn trace(before: &str, after: &str, pos: usize, end_pos: usize) -> TacticTrace {
        TacticTrace { state_before: before.into(), state_after: after.into(), pos, end_pos }
    }

    fn sample_power() -> BTreeMap<String, f64> {
        [("intro", 0.1), ("rw", 0.3), ("ring", 0.9)].into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn figure_eight_tactic_count() {
        let ast = fig8_ast();
        assert_eq!(tactic_count_reward(Some(&ast), true).unwrap(), 4.0);
        assert_eq!(tactic_count_reward(Some(&ast), false).unwrap(), 3.0);
        assert_eq!(tactic_count_reward(Some(&Ast::default()), true).unwrap(), 0.0);
        assert_eq!(tactic_count_reward(None, true), Err(RewardError::MissingAst));
    }

    #[test]
    fn figure_eight_keywords_at_offsets() {
        let chars: Vec<char> = FIG8_CODE.chars().collect();
        let words: Vec<String> = fig8_ast()
            .tactics
            .iter()
            .map(|t| chars[t.pos..].iter().collect::<String>())
            .map(|rest| leading_keyword(&rest).to_string())
            .collect();
        assert_eq!(words, ["intro", "rw", "h", "ring"]);
        let last = &fig8_ast().tactics[3];
        assert_eq!(chars[last.pos..last.end_pos].iter().collect::<String>(), "rin");
    }

    #[test]
    fn figure_eight_automation() {
        let ast = fig8_ast();
        let table = sample_power();
        let power = TacticPower { table: &table, unknown: 0.5 };
        let deduped = automation_reward(Some(&ast), FIG8_CODE, power, false).unwrap();
        assert!((deduped - (0.1 + 0.3 + 0.9) / 3.0).abs() < 1e-12);
        // nested "h" is not a tactic keyword and falls back to the neutral value
        let nested = automation_reward(Some(&ast), FIG8_CODE, power, true).unwrap();
        assert!((nested - (0.1 + 0.3 + 0.5 + 0.9) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn automation_constant_power_and_empty() {
        let table: BTreeMap<String, f64> = [("simp".to_string(), 0.7)].into();
        let power = TacticPower { table: &table, unknown: 0.5 };
        let code = "simp\nsimp\nsimp";
        let ast = Ast {
            tactics: vec![trace("⊢ a", "⊢ a", 0, 4), trace("⊢ a", "⊢ a", 5, 9), trace("⊢ a", "no goals", 10, 14)],
            ..Ast::default()
        };
        assert!((automation_reward(Some(&ast), code, power, true).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(automation_reward(Some(&Ast::default()), code, power, true).unwrap(), 0.0);
    }

    #[test]
    fn automation_span_out_of_range() {
        let ast = Ast { tactics: vec![trace("⊢ a", "no goals", 2, 99)], ..Ast::default() };
        let table = sample_power();
        let power = TacticPower { table: &table, unknown: 0.5 };
        assert!(matches!(
            automation_reward(Some(&ast), "short", power, true),
            Err(RewardError::SpanOutOfRange { len: 5, .. })
        ));
    }

    #[test]
    fn keyword_variants() {
        assert_eq!(leading_keyword("  exact_mod_cast h"), "exact_mod_cast");
        assert_eq!(leading_keyword("simp? [foo]"), "simp?");
        assert_eq!(leading_keyword("· ring"), "");
        let table = sample_power();
        let power = TacticPower { table: &table, unknown: 0.5 };
        assert_eq!(power.lookup("ring!"), 0.9);
    }

    #[test]
    fn state_change_cases() {
        let one = |after: &str| Ast { tactics: vec![trace("⊢ P", after, 0, 1)], ..Ast::default() };
        assert_eq!(state_change_reward(Some(&one("no goals")), true).unwrap(), 1.0);
        assert_eq!(state_change_reward(Some(&one("case a ⊢ P\ncase b ⊢ Q")), true).unwrap(), 0.0);
        assert_eq!(state_change_reward(Some(&Ast::default()), true).unwrap(), 0.0);
        // zero-goal starts are excluded from the mean
        let ast = Ast {
            tactics: vec![trace("no goals", "no goals", 0, 1), trace("⊢ P", "no goals", 1, 2)],
            ..Ast::default()
        };
        assert_eq!(state_change_reward(Some(&ast), true).unwrap(), 1.0);
    }

    #[test]
    fn figure_eight_state_change() {
        let ast = fig8_ast();
        assert!((state_change_reward(Some(&ast), true).unwrap() - 0.25).abs() < 1e-12);
        assert!((state_change_reward(Some(&ast), false).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn combine_defaults() {
        let cfg = RewardConfig::default();
        let failed = VerificationResult::failure(vec![Diagnostic::error(1, "x")]);
        assert!((combine(&cfg, true, &failed, "").final_reward - 0.2).abs() < 1e-12);
        assert_eq!(combine(&cfg, false, &failed, "").final_reward, 0.0);
        let passed = VerificationResult::success();
        assert!((combine(&cfg, true, &passed, "").final_reward - 1.2).abs() < 1e-12);
    }

    #[test]
    fn combine_with_tactic_count_weight() {
        let cfg = RewardConfig { lambda_tc: 1.0, ..RewardConfig::default() };
        let v = VerificationResult::success().with_ast(fig8_ast());
        let b = combine(&cfg, false, &v, FIG8_CODE);
        assert_eq!(b.r_tactic_count, 4.0);
        assert!((b.final_reward - 5.0).abs() < 1e-12);
        assert!(!b.structured_fallback);
    }

    #[test]
    fn combine_missing_ast_flags_fallback() {
        let cfg = RewardConfig { lambda_sc: 1.0, ..RewardConfig::default() };
        let b = combine(&cfg, true, &VerificationResult::success(), "");
        assert!(b.structured_fallback);
        assert!((b.final_reward - 1.2).abs() < 1e-12);
        // no weight requested, no flag
        let b = combine(&RewardConfig::default(), true, &VerificationResult::success(), "");
        assert!(!b.structured_fallback);
    }

    #[test]
    fn config_validation_and_loading() {
        assert!(RewardConfig::default().validate().is_ok());
        let bad = RewardConfig { r_format: 2.0, ..RewardConfig::default() };
        assert!(bad.validate().is_err());
        let mut bad = RewardConfig::default();
        bad.tactic_power.insert("magic".into(), 1.5);
        assert!(bad.validate().is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reward.toml");
        std::fs::write(&path, "lambda_tc = 1.0\n[tactic_power]\nintro = 0.1\n").unwrap();
        let cfg = RewardConfig::from_path(&path).unwrap();
        assert_eq!(cfg.lambda_tc, 1.0);
        assert_eq!(cfg.tactic_power.len(), 1);
        assert_eq!(cfg.r_format, 0.2);
        let path = dir.path().join("reward.json");
        std::fs::write(&path, r#"{"r_success": 2.0, "count_nested_tactics": false}"#).unwrap();
        let cfg = RewardConfig::from_path(&path).unwrap();
        assert_eq!(cfg.r_success, 2.0);
        assert!(!cfg.count_nested_tactics);
    }

    #[test]
    fn shipped_power_table_is_valid() {
        let table = default_tactic_power();
        assert_eq!(table["intro"], 0.1);
        assert_eq!(table["rw"], 0.3);
        assert_eq!(table["ring"], 0.9);
        assert!(RewardConfig::default().validate().is_ok());
    }
}
