mod manifest;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use veriprove::eval::{aggregate, render_summary, render_table, write_csv};
use veriprove::forge::{build_scenarios, parse_ratio, pass_rate_filter, CorrectionTuple, PassRateVerdict, ProbeOutcomes};
use veriprove::model::ModelGateway;
use veriprove::objective::{GroupRecord, ObjectiveRecord};
use veriprove::orchestrator::{build_rl_batch, EpisodeResult, Prover};
use veriprove::prompts::read_statements;
use veriprove::reward::{combine, RewardConfig};
use veriprove::verifier::{Ast, VerificationResult, VerifierGateway};
use veriprove::{read_jsonl, write_jsonl};

use manifest::{parse_model_flag, parse_verifier_flag, ModelSpec, RunManifest, VerifierSpec};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "veriprove", version, about = "Verifier-integrated Lean 4 proving pipeline")]
struct Cli {
    /// Run manifest (TOML or JSON); flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the generate/verify/feedback loop over a statements file.
    Prove(ProveArgs),
    /// Build cold-start SFT samples from correction tuples.
    Forge(ForgeArgs),
    /// Keep statements whose probe pass rate lies in a window.
    Filter(FilterArgs),
    /// Score one verified proof.
    Score(ScoreArgs),
    /// Evaluate token- and sample-level objectives for RL groups.
    ObjectiveCheck(ObjectiveArgs),
    /// Aggregate episode files into pass@k and per-iteration tables.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ProveArgs {
    /// Statements JSONL: {id, informal, formal_statement, header}.
    #[arg(long)]
    statements: PathBuf,
    /// Directory for episodes.jsonl and groups.jsonl; stdout when absent.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// `http` (endpoint from the environment) or `mock:SCRIPT.jsonl`.
    #[arg(long, value_parser = parse_model_flag)]
    model: Option<ModelSpec>,
    /// `command:CMD ARGS`, `tcp:HOST:PORT` or `mock:SCRIPT.json`.
    #[arg(long, value_parser = parse_verifier_flag)]
    verifier: Option<VerifierSpec>,
    /// Reward config file replacing the manifest's [rewards] table.
    #[arg(long)]
    rewards: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    first_round_rollouts: Option<usize>,
    #[arg(long)]
    branch_per_iteration: Option<usize>,
    #[arg(long)]
    max_iterations: Option<u32>,
    #[arg(long)]
    verify_timeout_secs: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    early_stop: Option<bool>,
    /// Also write RL groups of this size to groups.jsonl.
    #[arg(long)]
    group_size: Option<usize>,
}

#[derive(Args)]
struct ForgeArgs {
    #[arg(long)]
    tuples: PathBuf,
    /// Samples JSONL; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quota_s1: Option<usize>,
    #[arg(long)]
    quota_s2: Option<usize>,
    #[arg(long)]
    quota_s3: Option<usize>,
    #[arg(long)]
    quota_s4: Option<usize>,
    /// Fail on the first invalid tuple instead of skipping it.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct FilterArgs {
    /// Probe outcomes JSONL: {id, outcomes: [bool]}.
    #[arg(long)]
    outcomes: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Lower bound, e.g. `1/8` or `0.125`.
    #[arg(long)]
    lo: Option<String>,
    #[arg(long)]
    hi: Option<String>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Tactic trace JSON ({"ast": {...}} or the bare object).
    #[arg(long)]
    ast: Option<PathBuf>,
    /// Source the trace positions refer to.
    #[arg(long)]
    code: Option<PathBuf>,
    #[arg(long)]
    rewards: Option<PathBuf>,
    #[arg(long)]
    lambda_tc: Option<f64>,
    #[arg(long)]
    lambda_at: Option<f64>,
    #[arg(long)]
    lambda_sc: Option<f64>,
    #[arg(long)]
    count_nested_tactics: Option<bool>,
    /// Score as a failed verification.
    #[arg(long)]
    failed: bool,
    /// Score as output that broke the transcript format.
    #[arg(long)]
    malformed: bool,
}

#[derive(Args)]
struct ObjectiveArgs {
    /// Groups JSONL as written by `prove --group-size`.
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    eps_low: Option<f64>,
    #[arg(long)]
    eps_high: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Episodes JSONL; repeat for one table row per file.
    #[arg(long, required = true)]
    episodes: Vec<PathBuf>,
    /// Row labels, one per episodes file.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 8, 32])]
    ks: Vec<u64>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_at(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_records<T: Serialize>(path: Option<&Path>, items: &[T]) -> Result<(), CliError> {
    write_jsonl(output(path)?, items).map_err(runtime)
}

fn prove(m: &mut RunManifest, a: ProveArgs) -> Result<(), CliError> {
    let ep = &mut m.episode;
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {$( if let Some(v) = a.$flag { $field = v; } )*};
    }
    set!(
        first_round_rollouts => ep.first_round_rollouts,
        branch_per_iteration => ep.branch_per_iteration,
        max_iterations => ep.max_iterations,
        verify_timeout_secs => ep.verify_timeout_secs,
        early_stop => ep.early_stop,
        temperature => ep.generation.temperature,
        max_tokens => ep.generation.max_tokens,
    );
    if let Some(seed) = a.seed.or(m.seed) {
        ep.seed = seed;
    }
    if let Some(model) = a.model {
        m.model = model;
    }
    if let Some(verifier) = a.verifier {
        m.verifier = verifier;
    }
    if let Some(path) = &a.rewards {
        m.rewards = RewardConfig::from_path(path).map_err(|e| CliError::Config(e.to_string()))?;
    }
    m.rewards.validate().map_err(|e| CliError::Config(e.to_string()))?;
    m.episode.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let output_dir = a.output_dir.or(m.output_dir.clone());
    if a.group_size.is_some() && output_dir.is_none() {
        return Err(CliError::Config("--group-size needs --output-dir".into()));
    }

    let (model, model_conc) = m.model_backend()?;
    let (verifier, workers) = m.verifier_backend()?;
    let mut model = ModelGateway::new(model);
    let mut verifier = VerifierGateway::new(verifier);
    if let Some(n) = model_conc.or(m.jobs) {
        model = model.with_concurrency(n);
    }
    if let Some(n) = workers.or(m.jobs) {
        verifier = verifier.with_workers(n);
    }
    let statements = read_statements(&a.statements).map_err(io_at(&a.statements))?;
    log::info!("proving {} statements", statements.len());

    let prover = Prover::new(model, verifier, m.rewards.clone());
    let episodes = prover.run_all(&statements, &m.episode).map_err(runtime)?;
    let solved = episodes.iter().filter(|e| e.solved).count();
    log::info!("solved {solved}/{} statements", episodes.len());

    match &output_dir {
        None => write_records(None, &episodes)?,
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_at(dir))?;
            write_records(Some(&dir.join("episodes.jsonl")), &episodes)?;
            if let Some(g) = a.group_size {
                let groups = build_rl_batch(&episodes, g).map_err(runtime)?;
                let kept = groups.iter().filter(|b| b.kept()).count();
                log::info!("{kept}/{} groups kept", groups.len());
                let records: Vec<GroupRecord> = groups.iter().map(|b| b.record()).collect();
                write_records(Some(&dir.join("groups.jsonl")), &records)?;
            }
        }
    }
    Ok(())
}

fn forge(m: &mut RunManifest, a: ForgeArgs) -> Result<(), CliError> {
    let q = &mut m.quotas;
    for (flag, slot) in [(a.quota_s1, &mut q.s1), (a.quota_s2, &mut q.s2), (a.quota_s3, &mut q.s3), (a.quota_s4, &mut q.s4)] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    let tuples: Vec<CorrectionTuple> = read_jsonl(&a.tuples).map_err(io_at(&a.tuples))?;
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (i, t) in tuples.iter().enumerate() {
        match build_scenarios(t) {
            Ok(s) => samples.extend(s),
            Err(e) if !a.strict => {
                log::warn!("tuple {} ({}): {e}", i + 1, t.id.as_deref().unwrap_or("-"));
                skipped += 1;
            }
            Err(e) => return Err(CliError::Runtime(format!("tuple {}: {e}", i + 1))),
        }
    }
    let samples = m.quotas.apply(samples);
    log::info!("{} samples from {} tuples ({skipped} skipped)", samples.len(), tuples.len());
    write_records(a.out.as_deref(), &samples)
}

#[derive(Serialize)]
struct FilterRecord<'a> {
    id: &'a str,
    successes: usize,
    attempts: usize,
    kept: bool,
}

fn filter(m: &mut RunManifest, a: FilterArgs) -> Result<(), CliError> {
    let ratio = |s: &str| parse_ratio(s).ok_or_else(|| CliError::Config(format!("not a ratio: {s:?}")));
    let lo = ratio(a.lo.as_deref().unwrap_or(&m.filter.lo))?;
    let hi = ratio(a.hi.as_deref().unwrap_or(&m.filter.hi))?;
    let probes: Vec<ProbeOutcomes> = read_jsonl(&a.outcomes).map_err(io_at(&a.outcomes))?;
    let mut records = Vec::with_capacity(probes.len());
    for p in &probes {
        let verdict = pass_rate_filter(&p.outcomes, lo, hi).map_err(|e| CliError::Runtime(format!("{}: {e}", p.id)))?;
        records.push(FilterRecord {
            id: &p.id,
            successes: p.outcomes.iter().filter(|o| **o).count(),
            attempts: p.outcomes.len(),
            kept: verdict == PassRateVerdict::Keep,
        });
    }
    log::info!("kept {}/{}", records.iter().filter(|r| r.kept).count(), records.len());
    write_records(a.out.as_deref(), &records)
}

fn score(m: &mut RunManifest, a: ScoreArgs) -> Result<(), CliError> {
    if let Some(path) = &a.rewards {
        m.rewards = RewardConfig::from_path(path).map_err(|e| CliError::Config(e.to_string()))?;
    }
    let r = &mut m.rewards;
    for (flag, slot) in [(a.lambda_tc, &mut r.lambda_tc), (a.lambda_at, &mut r.lambda_at), (a.lambda_sc, &mut r.lambda_sc)] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(v) = a.count_nested_tactics {
        r.count_nested_tactics = v;
    }
    m.rewards.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let code = match &a.code {
        Some(p) => std::fs::read_to_string(p).map_err(io_at(p))?,
        None => String::new(),
    };
    let mut result = if a.failed { VerificationResult::failure(Vec::new()) } else { VerificationResult::success() };
    if let Some(p) = &a.ast {
        let text = std::fs::read_to_string(p).map_err(io_at(p))?;
        result.ast = Some(Ast::from_json_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?);
    }
    let breakdown = combine(&m.rewards, !a.malformed, &result, &code);
    let mut out = output(None)?;
    serde_json::to_writer_pretty(&mut out, &breakdown).map_err(runtime)?;
    writeln!(out).map_err(runtime)?;
    out.flush().map_err(runtime)
}

fn objective_check(m: &mut RunManifest, a: ObjectiveArgs) -> Result<(), CliError> {
    if let Some(v) = a.eps_low {
        m.clip.eps_low = v;
    }
    if let Some(v) = a.eps_high {
        m.clip.eps_high = v;
    }
    m.clip.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let groups: Vec<GroupRecord> = read_jsonl(&a.groups).map_err(io_at(&a.groups))?;
    let mut records = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        if g.kept == Some(false) {
            log::debug!("skipping dropped group {}", g.statement_id);
            continue;
        }
        let group = g.to_group().map_err(|e| CliError::Runtime(format!("group {}: {e}", i + 1)))?;
        let rec = ObjectiveRecord::evaluate(&g.statement_id, &group, &m.clip);
        if let Some(e) = &rec.error {
            log::warn!("{}: {e}", g.statement_id);
        }
        records.push(rec);
    }
    write_records(a.out.as_deref(), &records)
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    if !a.labels.is_empty() && a.labels.len() != a.episodes.len() {
        return Err(CliError::Config(format!("{} labels for {} episode files", a.labels.len(), a.episodes.len())));
    }
    let mut reports = Vec::new();
    for (i, path) in a.episodes.iter().enumerate() {
        let episodes: Vec<EpisodeResult> = read_jsonl(path).map_err(io_at(path))?;
        let mut report = aggregate(&episodes, &a.ks).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if let Some(label) = a.labels.get(i) {
            report = report.with_label(label.clone());
        }
        reports.push(report);
    }
    let mut out = output(None)?;
    write!(out, "{}", render_table(&reports)).map_err(runtime)?;
    for r in &reports {
        write!(out, "\n{}", render_summary(r)).map_err(runtime)?;
    }
    out.flush().map_err(runtime)?;
    if let Some(p) = &a.json {
        let file = File::create(p).map_err(io_at(p))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &reports).map_err(runtime)?;
    }
    if let Some(p) = &a.csv {
        write_csv(File::create(p).map_err(io_at(p))?, &reports).map_err(runtime)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut m = RunManifest::load(cli.config.as_deref())?;
    if cli.jobs.is_some() {
        m.jobs = cli.jobs;
    }
    if let Some(jobs) = m.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().map_err(runtime)?;
    }
    match cli.command {
        Command::Prove(a) => prove(&mut m, a),
        Command::Forge(a) => forge(&mut m, a),
        Command::Filter(a) => filter(&mut m, a),
        Command::Score(a) => score(&mut m, a),
        Command::ObjectiveCheck(a) => objective_check(&mut m, a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("veriprove: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
