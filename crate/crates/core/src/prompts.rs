//! Prompt templates shipped as text assets, and the benchmark statement
//! record they are filled from.

use std::path::Path;

use serde::{Deserialize, Serialize};

/// Proving prompt asking for code in `<code>` and announcing `<interpreter>` feedback.
pub const PROVING_TEMPLATE: &str = include_str!("../assets/prompt_verifier_integrated.txt");
/// Rewrite prompt given to the external correction model.
pub const CORRECTION_TEMPLATE: &str = include_str!("../assets/prompt_correction.txt");
/// Long-CoT synthesis prompt (uses the legacy `<compiler_results>` tags).
pub const SYNTHESIS_TEMPLATE: &str = include_str!("../assets/prompt_longcot_synthesis.txt");
/// Sample tactic power table.
pub const TACTIC_POWER_TOML: &str = include_str!("../assets/tactic_power.toml");

/// One benchmark or training statement, as read from statements JSONL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub id: String,
    #[serde(default)]
    pub informal: String,
    pub formal_statement: String,
    /// Imports/options prepended to the statement, e.g. `import Mathlib\n...`.
    #[serde(default)]
    pub header: String,
}

impl Statement {
    pub fn new(id: impl Into<String>, formal_statement: impl Into<String>) -> Self {
        Statement { id: id.into(), informal: String::new(), formal_statement: formal_statement.into(), header: String::new() }
    }

    /// The first-turn prompt for this statement.
    pub fn proving_prompt(&self) -> String {
        let formal = format!("{}{}", self.header, self.formal_statement);
        fill(PROVING_TEMPLATE, &[("informal", &self.informal), ("formal_statement", &formal)])
    }

    /// Full source to submit for `code`: the header is prepended unless the
    /// code already carries its own imports.
    pub fn assemble_source(&self, code: &str) -> String {
        let has_imports = code.lines().any(|l| l.trim_start().starts_with("import "));
        if has_imports || self.header.is_empty() {
            code.to_string()
        } else {
            format!("{}{}", self.header, code)
        }
    }
}

pub fn correction_prompt(question: &str, original_response: &str) -> String {
    fill(CORRECTION_TEMPLATE, &[("question", question), ("original_response", original_response)])
}

pub fn synthesis_prompt(question: &str, original_response: &str) -> String {
    fill(SYNTHESIS_TEMPLATE, &[("question", question), ("original_response", original_response)])
}

/// Substitute `{key}` placeholders in one pass; unknown braces are left alone.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = vars.iter().find(|(k, _)| after.starts_with(k) && after[k.len()..].starts_with('}'));
        match hit {
            Some((k, v)) => {
                out.push_str(v);
                rest = &after[k.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn read_statements(path: &Path) -> std::io::Result<Vec<Statement>> {
    crate::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(fill("a {x} {y} {z}", &[("x", "{y}"), ("y", "2")]), "a {y} 2 {z}");
    }

    #[test]
    fn proving_prompt_contains_statement() {
        let mut s = Statement::new("t", "theorem t : True := by");
        s.informal = "Show truth.".into();
        s.header = "import Mathlib\n\n".into();
        let p = s.proving_prompt();
        assert!(p.starts_with("Think step by step"));
        assert!(p.contains("# Problem: Show truth.\n"));
        assert!(p.contains("```lean4\nimport Mathlib\n\ntheorem t : True := by\n```"));
    }

    #[test]
    fn source_assembly() {
        let mut s = Statement::new("t", "theorem t");
        s.header = "import Mathlib\n\n".into();
        assert_eq!(s.assemble_source("theorem t := x"), "import Mathlib\n\ntheorem t := x");
        assert_eq!(s.assemble_source("import Aesop\ntheorem t := x"), "import Aesop\ntheorem t := x");
    }

    #[test]
    fn correction_template_keeps_literal_braces() {
        let p = correction_prompt("Q?", "R!");
        assert!(p.contains("{Your analysis result}</think>"));
        assert!(p.contains("User Question:\nQ?\n"));
        assert!(p.contains("<original_thinking_process> R! </original_thinking_process>"));
    }

    #[test]
    fn fixture_statement_parses() {
        let s: Statement =
            serde_json::from_str(include_str!("../fixtures/exercise_1_1b.jsonl").trim()).unwrap();
        assert_eq!(s.id, "exercise_1_1b");
        assert!(s.header.starts_with("import Mathlib"));
    }
}
