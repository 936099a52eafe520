//! pass@k and run-level metrics over episode results, rendered as JSON, an
//! aligned text table or CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::EpisodeResult;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("bad pass@k arguments n={n} c={c} k={k}: need 0 <= c <= n and 1 <= k <= n")]
    BadArguments { n: u64, c: u64, k: u64 },
    #[error("no episodes to aggregate")]
    NoEpisodes,
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // exact at every step: acc * (n - i) is divisible by (i + 1)
        acc = acc.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(acc)
}

/// Unbiased estimator `1 - C(n-c, k) / C(n, k)`.
///
/// Small cases are evaluated as one division of exact integer counts; when
/// the binomials overflow, the equivalent product `Π (1 - k/i)` over
/// `i = n-c+1..=n` is used.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, EvalError> {
    if c > n || k == 0 || k > n {
        return Err(EvalError::BadArguments { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(total), Some(miss)) = (binomial(n, k), binomial(n - c, k)) {
        return Ok((total - miss) as f64 / total as f64);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatementStats {
    pub statement_id: String,
    /// First-round rollouts.
    pub n: u64,
    /// First-round rollouts with a passing branch at any depth.
    pub c: u64,
    /// Entry `d`: rollouts solved at depth ≤ d.
    pub solved_by_iteration: Vec<u64>,
    pub verifier_used: bool,
    pub verifier_calls: u64,
    pub generations: u64,
}

impl StatementStats {
    pub fn from_episode(ep: &EpisodeResult) -> Self {
        let depths = ep.root_solve_depths();
        let solved_by_iteration = (0..=ep.max_iterations)
            .map(|d| depths.iter().filter(|x| x.is_some_and(|x| x <= d)).count() as u64)
            .collect();
        StatementStats {
            statement_id: ep.statement_id.clone(),
            n: ep.first_round_rollouts as u64,
            c: depths.iter().filter(|d| d.is_some()).count() as u64,
            solved_by_iteration,
            verifier_used: ep.used_verifier_feedback,
            verifier_calls: ep.verifier_calls as u64,
            generations: ep.generations as u64,
        }
    }

    /// Successes counted within `d` feedback rounds (saturates past the last).
    pub fn solved_within(&self, d: usize) -> u64 {
        self.solved_by_iteration.get(d).or(self.solved_by_iteration.last()).copied().unwrap_or(self.c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: u32,
    /// Statements with at least one rollout solved within this many rounds.
    pub solved_statements: u64,
    pub solve_rate: f64,
    /// Rollouts solved within this many rounds, summed over statements.
    pub solved_rollouts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub label: String,
    pub statements: usize,
    /// Keyed by k.
    pub pass_at_k: BTreeMap<u64, f64>,
    pub solve_all_ratio: f64,
    pub verifier_use_rate: f64,
    /// Mean count of model-written (unmasked) characters per scored transcript.
    pub mean_response_length: f64,
    pub iterations: Vec<IterationRow>,
    pub first_round_rollouts: u64,
    pub total_verifier_calls: u64,
    pub total_generations: u64,
    pub per_statement: Vec<StatementStats>,
}

fn default_label(episodes: &[EpisodeResult]) -> String {
    let n = episodes.iter().map(|e| e.first_round_rollouts).max().unwrap_or(0);
    match episodes.iter().map(|e| e.max_iterations).max().unwrap_or(0) {
        0 => format!("vanilla-{n}"),
        d => format!("{n}x{d}"),
    }
}

/// Metrics over a run. pass@k is averaged over statements and reported only
/// for `k` no larger than every statement's rollout count.
pub fn aggregate(episodes: &[EpisodeResult], ks: &[u64]) -> Result<BenchmarkReport, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::NoEpisodes);
    }
    let stats: Vec<StatementStats> = episodes.iter().map(StatementStats::from_episode).collect();
    let m = stats.len() as f64;
    let min_n = stats.iter().map(|s| s.n).min().unwrap_or(0);

    let mut pass = BTreeMap::new();
    for &k in ks {
        if k == 0 || k > min_n {
            log::warn!("skipping pass@{k}: needs 1 <= k <= {min_n}");
            continue;
        }
        let sum: f64 = stats.iter().map(|s| pass_at_k(s.n, s.c, k)).sum::<Result<f64, _>>()?;
        pass.insert(k, sum / m);
    }

    let depth = episodes.iter().map(|e| e.max_iterations).max().unwrap_or(0);
    let iterations = (0..=depth)
        .map(|d| {
            let solved = stats.iter().filter(|s| s.solved_within(d as usize) > 0).count() as u64;
            IterationRow {
                iteration: d,
                solved_statements: solved,
                solve_rate: solved as f64 / m,
                solved_rollouts: stats.iter().map(|s| s.solved_within(d as usize)).sum(),
            }
        })
        .collect();

    let leaves: Vec<usize> = episodes.iter().flat_map(|e| e.transcripts.iter().map(|t| t.unmasked_len())).collect();
    let mean_response_length =
        if leaves.is_empty() { 0.0 } else { leaves.iter().sum::<usize>() as f64 / leaves.len() as f64 };

    Ok(BenchmarkReport {
        label: default_label(episodes),
        statements: stats.len(),
        pass_at_k: pass,
        solve_all_ratio: stats.iter().filter(|s| s.n > 0 && s.c == s.n).count() as f64 / m,
        verifier_use_rate: stats.iter().filter(|s| s.verifier_used).count() as f64 / m,
        mean_response_length,
        iterations,
        first_round_rollouts: stats.iter().map(|s| s.n).sum(),
        total_verifier_calls: stats.iter().map(|s| s.verifier_calls).sum(),
        total_generations: stats.iter().map(|s| s.generations).sum(),
        per_statement: stats,
    })
}

impl BenchmarkReport {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

/// One row per report, one column per feedback round with the cumulative
/// solve rate, then both budget counters.
pub fn render_table(reports: &[BenchmarkReport]) -> String {
    let depth = reports.iter().map(|r| r.iterations.len()).max().unwrap_or(0);
    let mut header = vec!["Setting".to_string()];
    header.extend((0..depth).map(|d| format!("Iter {d}")));
    header.extend(["Rollouts", "Verifier calls", "Generations"].map(String::from));

    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend((0..depth).map(|d| r.iterations.get(d).map_or("-".to_string(), |it| pct(it.solve_rate))));
            row.push(r.first_round_rollouts.to_string());
            row.push(r.total_verifier_calls.to_string());
            row.push(r.total_generations.to_string());
            row
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|i| std::iter::once(&header).chain(&rows).map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule);
    for row in &rows {
        line(&mut out, row);
    }
    out
}

/// Summary lines (pass@k and rates) for one report.
pub fn render_summary(r: &BenchmarkReport) -> String {
    let mut out = format!("{} ({} statements)\n", r.label, r.statements);
    for (k, v) in &r.pass_at_k {
        let _ = writeln!(out, "  pass@{k}: {}", pct(*v));
    }
    let _ = writeln!(out, "  solve-all ratio: {}", pct(r.solve_all_ratio));
    let _ = writeln!(out, "  verifier use rate: {}", pct(r.verifier_use_rate));
    let _ = writeln!(out, "  mean response length: {:.1}", r.mean_response_length);
    out
}

#[derive(Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    metric: String,
    value: f64,
}

/// Long-format CSV: `label,metric,value`.
pub fn write_csv<W: std::io::Write>(w: W, reports: &[BenchmarkReport]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in reports {
        let mut row = |metric: String, value: f64| out.serialize(CsvRow { label: &r.label, metric, value });
        for (k, v) in &r.pass_at_k {
            row(format!("pass@{k}"), *v)?;
        }
        row("solve_all_ratio".into(), r.solve_all_ratio)?;
        row("verifier_use_rate".into(), r.verifier_use_rate)?;
        row("mean_response_length".into(), r.mean_response_length)?;
        for it in &r.iterations {
            row(format!("solve_rate_iter_{}", it.iteration), it.solve_rate)?;
        }
        row("first_round_rollouts".into(), r.first_round_rollouts as f64)?;
        row("verifier_calls".into(), r.total_verifier_calls as f64)?;
        row("generations".into(), r.total_generations as f64)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::ScoredTranscript;
    use crate::reward::{RewardBreakdown, RewardConfig};
    use crate::transcript::{MaskSpanSet, Span};
    use proptest::prelude::*;
    use rand::seq::index::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Count k-subsets of n items, c of them good, that contain a good item.
    fn brute_force(n: u64, c: u64, k: u64) -> f64 {
        let (mut hit, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if u64::from(mask.count_ones()) == k {
                total += 1;
                // items 0..c are the good ones
                if mask & ((1u32 << c) - 1) != 0 {
                    hit += 1;
                }
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn estimator_examples() {
        assert_eq!(pass_at_k(8, 0, 3).unwrap(), 0.0);
        assert_eq!(pass_at_k(8, 8, 1).unwrap(), 1.0);
        assert!((pass_at_k(10, 3, 5).unwrap() - (1.0 - 21.0 / 252.0)).abs() < 1e-15);
        assert!(pass_at_k(4, 5, 1).is_err());
        assert!(pass_at_k(4, 1, 0).is_err());
        assert!(pass_at_k(4, 1, 5).is_err());
    }

    #[test]
    fn estimator_matches_enumeration_exactly() {
        for n in 1..=12 {
            for c in 0..=n {
                for k in 1..=n {
                    assert_eq!(pass_at_k(n, c, k).unwrap(), brute_force(n, c, k), "n={n} c={c} k={k}");
                }
            }
        }
    }

    #[test]
    fn large_n_uses_stable_product() {
        let v = pass_at_k(1024, 3, 512).unwrap();
        let exact = 1.0 - (512.0 * 511.0 * 510.0) / (1024.0 * 1023.0 * 1022.0);
        assert!((v - exact).abs() < 1e-12);
        assert!(binomial(1024, 512).is_none());
    }

    #[test]
    fn estimator_agrees_with_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let trials = 4000;
        for (n, c, k) in [(5, 1, 1), (10, 3, 5), (16, 2, 4), (21, 18, 1), (32, 4, 8), (40, 1, 20), (64, 10, 3), (12, 6, 2)] {
            let p = pass_at_k(n, c, k).unwrap();
            let hits = (0..trials)
                .filter(|_| sample(&mut rng, n as usize, k as usize).iter().any(|i| (i as u64) < c))
                .count();
            let est = hits as f64 / trials as f64;
            let sigma = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((est - p).abs() <= 3.0 * sigma, "n={n} c={c} k={k} p={p} est={est}");
        }
    }

    proptest! {
        #[test]
        fn estimator_monotone_in_k(n in 1u64..60, c_frac in 0.0f64..=1.0) {
            let c = (c_frac * n as f64).round() as u64;
            let vals: Vec<f64> = (1..=n).map(|k| pass_at_k(n, c, k).unwrap()).collect();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        }
    }

    fn leaf(root: usize, depth: u32, passed: bool, len: usize, masked: usize) -> ScoredTranscript {
        ScoredTranscript {
            raw: "x".repeat(len),
            mask_spans: MaskSpanSet { spans: if masked > 0 { vec![Span::new(0, masked)] } else { vec![] } },
            reward: RewardBreakdown { passed, ..RewardBreakdown::unverified(&RewardConfig::default(), true) },
            passed,
            iteration_depth: depth,
            root_index: root,
            error: None,
        }
    }

    fn episode(id: &str, n: usize, solved: &[(usize, u32)], max_iterations: u32) -> EpisodeResult {
        let transcripts = (0..n)
            .map(|i| match solved.iter().find(|(r, _)| *r == i) {
                Some(&(_, d)) => leaf(i, d, true, 10, 2),
                None => leaf(i, max_iterations, false, 10, 2),
            })
            .collect();
        EpisodeResult {
            statement_id: id.into(),
            first_round_rollouts: n,
            max_iterations,
            solved: !solved.is_empty(),
            verifier_calls: n,
            generations: n,
            used_verifier_feedback: solved.iter().any(|(_, d)| *d > 0),
            transcripts,
        }
    }

    #[test]
    fn aggregate_three_statements() {
        let eps = [
            episode("a", 4, &[], 0),
            episode("b", 4, &[(0, 0), (2, 0)], 0),
            episode("c", 4, &[(0, 0), (1, 0), (2, 0), (3, 0)], 0),
        ];
        let r = aggregate(&eps, &[1, 2, 8]).unwrap();
        assert!((r.pass_at_k[&2] - (0.0 + 5.0 / 6.0 + 1.0) / 3.0).abs() < 1e-12);
        assert!(!r.pass_at_k.contains_key(&8));
        assert!((r.solve_all_ratio - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.verifier_use_rate, 0.0);
        assert_eq!(r.mean_response_length, 8.0);
        assert_eq!(r.total_verifier_calls, 12);
    }

    #[test]
    fn all_solved() {
        let eps = [episode("a", 2, &[(0, 0), (1, 0)], 0), episode("b", 2, &[(0, 0), (1, 0)], 0)];
        let r = aggregate(&eps, &[1]).unwrap();
        assert_eq!(r.solve_all_ratio, 1.0);
        assert_eq!(r.pass_at_k[&1], 1.0);
    }

    #[test]
    fn iteration_columns_are_cumulative() {
        let eps = [
            episode("a", 2, &[(0, 0)], 2),
            episode("b", 2, &[(1, 1)], 2),
            episode("c", 2, &[(0, 2), (1, 1)], 2),
            episode("d", 2, &[], 2),
        ];
        let r = aggregate(&eps, &[1]).unwrap();
        let solved: Vec<u64> = r.iterations.iter().map(|i| i.solved_statements).collect();
        assert_eq!(solved, [1, 3, 3]);
        let rollouts: Vec<u64> = r.iterations.iter().map(|i| i.solved_rollouts).collect();
        assert_eq!(rollouts, [1, 3, 4]);
        assert_eq!(r.verifier_use_rate, 0.5);
    }

    #[test]
    fn renders() {
        let r = aggregate(&[episode("a", 4, &[(0, 1)], 1)], &[1, 4]).unwrap().with_label("4-2");
        let table = render_table(std::slice::from_ref(&r));
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("Setting"));
        assert!(lines[0].contains("Iter 0") && lines[0].contains("Iter 1") && lines[0].contains("Verifier calls"));
        assert!(lines[2].starts_with("4-2"));
        assert!(lines[2].contains("0.0%") && lines[2].contains("100.0%"));
        assert!(render_summary(&r).contains("pass@4: 100.0%"));
        let mut buf = Vec::new();
        write_csv(&mut buf, std::slice::from_ref(&r)).unwrap();
        let csv = String::from_utf8(buf).unwrap();
        assert!(csv.starts_with("label,metric,value\n4-2,pass@1,0.25\n"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["pass_at_k"]["4"], 1.0);
        assert_eq!(aggregate(&[], &[1]), Err(EvalError::NoEpisodes));
    }
}
