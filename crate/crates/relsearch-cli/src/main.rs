//! Command-line entry point: sampling, validation, encoding, evaluation,
//! predictor training, ranking, the full search, and the predictor
//! ablation, all reproducible from a single JSON config file.
//!
//! Exit codes: 0 success, 1 validation failure, 2 IO/config error,
//! 3 numerical failure.

use std::collections::HashMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use relsearch::encoding::{decode, encode, EncodedConfig};
use relsearch::net_builder::{build_network, BuildOptions};
use relsearch::predictor::{
    sidecar_path, train_relation_predictor, PairExample, PredictorConfig, RelationPredictor,
    TrainHyper, RELATION_TAG,
};
use relsearch::rng::{derive_seed, stream_rng};
use relsearch::search::{
    evaluate_candidates, rank_candidates, rank_correlation, ranks_by_descending, ranks_from_report,
    records_from_candidates, run_ablation, run_search, sample_candidate, write_json, write_jsonl,
    AblationOptions, CachedRelationPredictor, CandidateRecord, CandidateStatus, Evaluate,
    PredictorMeta, RankingReport, SearchBudgets, SearchConfig, SurrogateEvaluator,
    SurrogateOraclePredictor, ToyTrainEvaluator, ABLATION_FILE, CANDIDATES_FILE,
    STREAM_EVAL_BASE, STREAM_MODEL_INIT, STREAM_TRAIN_SEED,
};
use relsearch::search_space::{reachable_blocks, validate_configuration, Configuration};
use relsearch::train_eval::{make_synthetic_dataset, SurrogateParams, ToyTrainOptions};
use relsearch::Error;

type Result<T> = std::result::Result<T, Error>;

/// Env var capping worker threads regardless of config.
const THREADS_ENV: &str = "RELSEARCH_THREADS";
/// Resolved configuration echoed into the run directory.
const CONFIG_ECHO_FILE: &str = "config.resolved.json";
/// Lock file marking exclusive ownership of a run directory.
const LOCK_FILE: &str = ".lock";

// ---------------------------------------------------------------------------
// Run configuration file

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EvaluatorChoice {
    Surrogate,
    Toytrain,
}

/// Union of the knobs of both evaluators; each reads only its half.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvaluatorParams {
    experiment_seed: u64,
    tau: f64,
    dataset_count: usize,
    dataset_size: usize,
    num_classes: usize,
    dataset_seed: u64,
    budget: usize,
    eval_every: usize,
    patch: usize,
    c1: usize,
}

impl Default for EvaluatorParams {
    fn default() -> Self {
        EvaluatorParams {
            experiment_seed: 0,
            tau: 0.02,
            dataset_count: 8,
            dataset_size: 16,
            num_classes: 3,
            dataset_seed: 20,
            budget: 200,
            eval_every: 50,
            patch: 16,
            c1: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PathsSection {
    run_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

/// On-disk run configuration.  Unknown keys are rejected; omitted
/// sections fall back to defaults, and the fully resolved document is
/// echoed into the run directory next to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfigFile {
    seed: u64,
    /// Candidate budgets; omitted means evaluator-scaled defaults.
    budgets: Option<SearchBudgets>,
    evaluator: EvaluatorChoice,
    evaluator_params: EvaluatorParams,
    predictor: PredictorConfig,
    predictor_hyper: TrainHyper,
    ablation_seeds: Vec<u64>,
    threads: usize,
    paths: PathsSection,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            seed: 0,
            budgets: None,
            evaluator: EvaluatorChoice::Surrogate,
            evaluator_params: EvaluatorParams::default(),
            predictor: PredictorConfig::default(),
            predictor_hyper: TrainHyper::default(),
            ablation_seeds: vec![0, 1, 2, 3, 4],
            threads: 1,
            paths: PathsSection::default(),
        }
    }
}

impl RunConfigFile {
    fn check(&self) -> Result<()> {
        if self.evaluator == EvaluatorChoice::Toytrain {
            let p = &self.evaluator_params;
            if !(2..=3).contains(&p.num_classes) {
                return Err(Error::Config("num_classes must be 2 or 3".into()));
            }
            if p.dataset_count == 0 {
                return Err(Error::Config("dataset_count must be positive".into()));
            }
            if p.patch > p.dataset_size {
                return Err(Error::Config(format!(
                    "patch {} exceeds dataset_size {}",
                    p.patch, p.dataset_size
                )));
            }
        }
        Ok(())
    }

    /// Explicit budgets win; otherwise the surrogate runs the full desk
    /// scale and the toy trainer a reduced one to bound runtime.
    fn resolved_budgets(&self) -> SearchBudgets {
        self.budgets.unwrap_or(match self.evaluator {
            EvaluatorChoice::Surrogate => SearchBudgets::default(),
            EvaluatorChoice::Toytrain => SearchBudgets {
                n_initial: 20,
                n_train: 15,
                n_fresh: 20,
            },
        })
    }

    fn build_evaluator(&self) -> Box<dyn Evaluate> {
        let p = self.evaluator_params;
        match self.evaluator {
            EvaluatorChoice::Surrogate => Box::new(SurrogateEvaluator(SurrogateParams {
                experiment_seed: p.experiment_seed,
                tau: p.tau,
            })),
            EvaluatorChoice::Toytrain => Box::new(ToyTrainEvaluator {
                dataset: make_synthetic_dataset(
                    p.dataset_count,
                    p.dataset_size,
                    p.num_classes,
                    p.dataset_seed,
                ),
                options: ToyTrainOptions {
                    budget: p.budget,
                    eval_every: p.eval_every,
                    patch: p.patch,
                    c1: p.c1,
                    seed: 0,
                },
            }),
        }
    }

    fn surrogate_params(&self) -> SurrogateParams {
        SurrogateParams {
            experiment_seed: self.evaluator_params.experiment_seed,
            tau: self.evaluator_params.tau,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfigFile> {
    match path {
        None => Ok(RunConfigFile::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Worker count after applying the environment cap.
fn effective_threads(requested: usize) -> usize {
    let requested = requested.max(1);
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(cap) if cap >= 1 => requested.min(cap),
        _ => requested,
    }
}

// ---------------------------------------------------------------------------
// Run directory lock

/// Exclusive ownership of a run directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<RunLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is locked; remove {} if no other process owns it",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// JSONL plumbing

/// One encoded candidate; `id` is carried through for joins.
#[derive(Debug, Serialize, Deserialize)]
struct EncodedLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    tokens: Vec<i64>,
}

/// One decoded candidate.
#[derive(Debug, Serialize, Deserialize)]
struct ConfigLine {
    id: usize,
    config: Configuration,
}

/// A candidate parsed from any accepted line shape: a full
/// `CandidateRecord`, an `{id, config}` document, or a bare
/// configuration.
struct ParsedCandidate {
    id: usize,
    config: Configuration,
    encoded: Option<EncodedConfig>,
    score: Option<relsearch::train_eval::EvalScore>,
    status: Option<CandidateStatus>,
    seed: Option<u64>,
}

impl ParsedCandidate {
    /// Fill the optional fields: missing encodings are recomputed and a
    /// missing evaluation seed is derived from `seed_base` and the id.
    fn into_record(self, seed_base: u64) -> Result<CandidateRecord> {
        let ParsedCandidate {
            id,
            config,
            encoded,
            score,
            status,
            seed,
        } = self;
        let encoded = match encoded {
            Some(e) => e,
            None => encode(&config)?,
        };
        Ok(CandidateRecord {
            id,
            config,
            encoded,
            score,
            status: status.unwrap_or(CandidateStatus::Sampled),
            seed: seed.unwrap_or_else(|| derive_seed(seed_base, STREAM_EVAL_BASE + id as u64)),
        })
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn parse_line<T: DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line)
        .map_err(|e| Error::Config(format!("{}:{line_no}: {e}", path.display())))
}

fn parse_candidate(
    path: &Path,
    line_no: usize,
    line: &str,
    fallback_id: usize,
) -> Result<ParsedCandidate> {
    if let Ok(rec) = serde_json::from_str::<CandidateRecord>(line) {
        return Ok(ParsedCandidate {
            id: rec.id,
            config: rec.config,
            encoded: Some(rec.encoded),
            score: rec.score,
            status: Some(rec.status),
            seed: Some(rec.seed),
        });
    }
    if let Ok(cl) = serde_json::from_str::<ConfigLine>(line) {
        return Ok(ParsedCandidate {
            id: cl.id,
            config: cl.config,
            encoded: None,
            score: None,
            status: None,
            seed: None,
        });
    }
    match serde_json::from_str::<Configuration>(line) {
        Ok(config) => Ok(ParsedCandidate {
            id: fallback_id,
            config,
            encoded: None,
            score: None,
            status: None,
            seed: None,
        }),
        Err(e) => Err(Error::Config(format!("{}:{line_no}: {e}", path.display()))),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CLI definition

#[derive(Parser)]
#[command(
    name = "relsearch",
    version,
    about = "Configuration search driven by a pairwise relation predictor"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample candidate configurations into a JSONL file.
    Sample {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate candidates line by line; any violation exits nonzero.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Encode configurations into integer token vectors.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode token vectors back into configurations.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidates with the configured evaluator.
    Evaluate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Train the relation predictor on a pair dataset.
    TrainPredictor {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rank candidates with a trained predictor checkpoint.
    Rank {
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full predictor-guided search into a run directory.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config file's run directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Override the config file's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Retrain all predictor variants over seeds and compare rank
    /// correlations on the validation split.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Rank with exact surrogate comparisons instead of training.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Export a candidate's built network as a DOT graph.
    ExportGraph {
        #[arg(long)]
        candidate: PathBuf,
        /// Candidate id when the input file holds several.
        #[arg(long)]
        id: Option<usize>,
        #[arg(long)]
        dot: PathBuf,
        #[arg(long, default_value_t = 4)]
        c1: usize,
        #[arg(long, default_value_t = 3)]
        num_classes: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

/// Exit codes: 1 validation failure, 2 IO/config, 3 numerical.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::MalformedLength { .. } | Error::TokenOutOfRange { .. } => {
            1
        }
        Error::NanGradient { .. } | Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Sample { seed, count, out } => cmd_sample(seed, count, &out),
        Command::Validate { input } => cmd_validate(&input),
        Command::Encode { input, out } => cmd_encode(&input, &out),
        Command::Decode { input, out } => cmd_decode(&input, &out),
        Command::Evaluate {
            input,
            out,
            config,
            threads,
        } => cmd_evaluate(&input, &out, config.as_deref(), threads),
        Command::TrainPredictor { pairs, out, config } => {
            cmd_train_predictor(&pairs, &out, config.as_deref())
        }
        Command::Rank {
            predictor,
            candidates,
            out,
        } => cmd_rank(&predictor, &candidates, out.as_deref()),
        Command::Search {
            config,
            run_dir,
            seed,
            threads,
        } => cmd_search(config.as_deref(), run_dir, seed, threads),
        Command::Ablation {
            config,
            run_dir,
            oracle,
            threads,
        } => cmd_ablation(config.as_deref(), run_dir, oracle, threads),
        Command::ExportGraph {
            candidate,
            id,
            dot,
            c1,
            num_classes,
        } => cmd_export_graph(&candidate, id, &dot, c1, num_classes),
    }
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_sample(seed: u64, count: usize, out: &Path) -> Result<i32> {
    let candidates: Vec<CandidateRecord> =
        (0..count).map(|id| sample_candidate(seed, id)).collect();
    ensure_parent(out)?;
    write_jsonl(out, &candidates)?;
    println!("wrote {} candidates to {}", candidates.len(), out.display());
    Ok(0)
}

fn cmd_validate(input: &Path) -> Result<i32> {
    let lines = read_lines(input)?;
    if lines.is_empty() {
        println!("warning: {} holds no candidates", input.display());
        return Ok(0);
    }
    let mut bad = 0usize;
    for (pos, (line_no, line)) in lines.iter().enumerate() {
        let parsed = parse_candidate(input, *line_no, line, pos)?;
        let mut problems: Vec<String> = Vec::new();
        let report = validate_configuration(&parsed.config);
        for v in &report.violations {
            problems.push(match v.block {
                Some(b) => format!("block {b}: {}", v.detail),
                None => v.detail.clone(),
            });
        }
        if report.is_ok() {
            match encode(&parsed.config) {
                Ok(fresh) => {
                    if let Some(stored) = &parsed.encoded {
                        if stored.tokens != fresh.tokens {
                            problems
                                .push("stored encoding disagrees with the configuration".into());
                        }
                    }
                }
                Err(e) => problems.push(format!("encoding failed: {e}")),
            }
        }
        if problems.is_empty() {
            println!("candidate {}: ok", parsed.id);
        } else {
            bad += 1;
            for p in &problems {
                println!("candidate {}: {p}", parsed.id);
            }
        }
    }
    if bad > 0 {
        eprintln!("{bad} of {} candidates failed validation", lines.len());
        return Ok(1);
    }
    println!("all {} candidates valid", lines.len());
    Ok(0)
}

fn cmd_encode(input: &Path, out: &Path) -> Result<i32> {
    let lines = read_lines(input)?;
    let mut encoded = Vec::with_capacity(lines.len());
    for (pos, (line_no, line)) in lines.iter().enumerate() {
        let parsed = parse_candidate(input, *line_no, line, pos)?;
        let tokens = encode(&parsed.config)?;
        encoded.push(EncodedLine {
            id: Some(parsed.id),
            tokens: tokens.tokens,
        });
    }
    ensure_parent(out)?;
    write_jsonl(out, &encoded)?;
    println!(
        "encoded {} configurations to {}",
        encoded.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_decode(input: &Path, out: &Path) -> Result<i32> {
    let lines = read_lines(input)?;
    let mut decoded = Vec::with_capacity(lines.len());
    for (pos, (line_no, line)) in lines.iter().enumerate() {
        let parsed: EncodedLine = parse_line(input, *line_no, line)?;
        let config = decode(&EncodedConfig {
            tokens: parsed.tokens,
        })?;
        decoded.push(ConfigLine {
            id: parsed.id.unwrap_or(pos),
            config,
        });
    }
    ensure_parent(out)?;
    write_jsonl(out, &decoded)?;
    println!(
        "decoded {} configurations to {}",
        decoded.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_evaluate(
    input: &Path,
    out: &Path,
    config_path: Option<&Path>,
    threads_flag: Option<usize>,
) -> Result<i32> {
    let cfg = load_config(config_path)?;
    cfg.check()?;
    let evaluator = cfg.build_evaluator();
    let threads = effective_threads(threads_flag.unwrap_or(cfg.threads));
    let lines = read_lines(input)?;
    let mut candidates = Vec::with_capacity(lines.len());
    for (pos, (line_no, line)) in lines.iter().enumerate() {
        let parsed = parse_candidate(input, *line_no, line, pos)?;
        candidates.push(parsed.into_record(cfg.seed)?);
    }
    evaluate_candidates(&mut candidates, evaluator.as_ref(), threads);
    let evaluated = candidates
        .iter()
        .filter(|c| c.status == CandidateStatus::Evaluated)
        .count();
    ensure_parent(out)?;
    write_jsonl(out, &candidates)?;
    println!(
        "evaluated {evaluated} of {} candidates with {} into {}",
        candidates.len(),
        evaluator.name(),
        out.display()
    );
    Ok(0)
}

fn cmd_train_predictor(pairs_path: &Path, out: &Path, config_path: Option<&Path>) -> Result<i32> {
    let cfg = load_config(config_path)?;
    let lines = read_lines(pairs_path)?;
    let mut pairs: Vec<PairExample> = Vec::with_capacity(lines.len());
    for (line_no, line) in &lines {
        pairs.push(parse_line(pairs_path, *line_no, line)?);
    }
    let mut model =
        RelationPredictor::new(cfg.predictor, &mut stream_rng(cfg.seed, STREAM_MODEL_INIT))?;
    let mut hyper = cfg.predictor_hyper;
    hyper.seed = derive_seed(
        cfg.seed,
        STREAM_TRAIN_SEED.wrapping_add(cfg.predictor_hyper.seed),
    );
    let report = train_relation_predictor(&mut model, &pairs, &hyper)?;
    let final_loss = report.losses.last().copied();
    ensure_parent(out)?;
    model.save(out)?;
    write_json(
        &sidecar_path(out),
        &PredictorMeta {
            schema_version: relsearch::SCHEMA_VERSION,
            model: RELATION_TAG.to_string(),
            config: cfg.predictor,
            hyper,
            final_loss,
        },
    )?;
    println!(
        "trained on {} pairs for {} iterations; final loss {:.6}; saved {}",
        pairs.len(),
        hyper.iterations,
        final_loss.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(0)
}

fn cmd_rank(predictor_path: &Path, candidates_path: &Path, out: Option<&Path>) -> Result<i32> {
    let model = RelationPredictor::load(predictor_path)?;
    let lines = read_lines(candidates_path)?;
    let mut candidates = Vec::with_capacity(lines.len());
    for (pos, (line_no, line)) in lines.iter().enumerate() {
        let parsed = parse_candidate(candidates_path, *line_no, line, pos)?;
        candidates.push(parsed.into_record(0)?);
    }
    let mut cached = CachedRelationPredictor::new(&model);
    let report = rank_candidates(&mut cached, &candidates)?;
    if let Some(path) = out {
        ensure_parent(path)?;
        write_json(path, &report)?;
        println!("wrote ranking to {}", path.display());
    }
    print_top(&report, &candidates, 5);
    Ok(0)
}

fn cmd_search(
    config_path: Option<&Path>,
    run_dir: Option<PathBuf>,
    seed: Option<u64>,
    threads_flag: Option<usize>,
) -> Result<i32> {
    let mut cfg = load_config(config_path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(dir) = run_dir {
        cfg.paths.run_dir = dir;
    }
    if let Some(t) = threads_flag {
        cfg.threads = t;
    }
    cfg.check()?;
    let budgets = cfg.resolved_budgets();
    let threads = effective_threads(cfg.threads);
    let evaluator = cfg.build_evaluator();
    let dir = cfg.paths.run_dir.clone();
    let _lock = RunLock::acquire(&dir)?;

    let search_config = SearchConfig {
        seed: cfg.seed,
        budgets,
        predictor: cfg.predictor,
        hyper: cfg.predictor_hyper,
        threads,
    };
    let outcome = run_search(&search_config, evaluator.as_ref(), Some(&dir))?;
    write_resolved(&dir, &cfg, budgets, threads)?;

    println!(
        "best candidate {} (val-split rank correlation {:.3})",
        outcome.best.id, outcome.val_correlation
    );
    print_top(&outcome.ranking, &outcome.candidates, 5);
    println!("artifacts in {}", dir.display());
    Ok(0)
}

/// Result document of `ablation --oracle`.
#[derive(Debug, Serialize, Deserialize)]
struct OracleAblation {
    schema_version: u32,
    predictor: String,
    correlation: f64,
}

fn cmd_ablation(
    config_path: Option<&Path>,
    run_dir: Option<PathBuf>,
    oracle: bool,
    threads_flag: Option<usize>,
) -> Result<i32> {
    let mut cfg = load_config(config_path)?;
    if let Some(dir) = run_dir {
        cfg.paths.run_dir = dir;
    }
    if let Some(t) = threads_flag {
        cfg.threads = t;
    }
    cfg.check()?;
    if oracle && cfg.evaluator != EvaluatorChoice::Surrogate {
        return Err(Error::Config(
            "oracle mode requires the surrogate evaluator".into(),
        ));
    }
    let budgets = cfg.resolved_budgets();
    budgets.validate()?;
    let threads = effective_threads(cfg.threads);
    let evaluator = cfg.build_evaluator();
    let dir = cfg.paths.run_dir.clone();
    let _lock = RunLock::acquire(&dir)?;

    let mut candidates: Vec<CandidateRecord> = (0..budgets.n_initial)
        .map(|id| sample_candidate(cfg.seed, id))
        .collect();
    evaluate_candidates(&mut candidates, evaluator.as_ref(), threads);
    write_jsonl(&dir.join(CANDIDATES_FILE), &candidates)?;
    write_resolved(&dir, &cfg, budgets, threads)?;

    if oracle {
        // Rank the val split with exact surrogate comparisons; the
        // correlation against true scores is 1 by construction.
        let val = &candidates[budgets.n_train..];
        let mut predictor = SurrogateOraclePredictor::new(cfg.surrogate_params());
        let report = rank_candidates(&mut predictor, val)?;
        let truth: Vec<f64> = val
            .iter()
            .map(|c| c.score.map(|s| s.dice).unwrap_or(0.0))
            .collect();
        let correlation =
            rank_correlation(&ranks_from_report(&report, val), &ranks_by_descending(&truth))?;
        write_json(
            &dir.join(ABLATION_FILE),
            &OracleAblation {
                schema_version: relsearch::SCHEMA_VERSION,
                predictor: report.predictor.clone(),
                correlation,
            },
        )?;
        println!(
            "oracle correlation over {} val candidates: {correlation:.6}",
            val.len()
        );
        return Ok(0);
    }

    let records = records_from_candidates(&candidates, budgets.n_train);
    let options = AblationOptions {
        seeds: cfg.ablation_seeds.clone(),
        predictor: cfg.predictor,
        hyper: cfg.predictor_hyper,
        ..AblationOptions::default()
    };
    let report = run_ablation(&records, &options, Some(&dir))?;
    println!("median correlations over {} seeds:", report.per_seed.len());
    println!("  transformer-relation: {:.4}", report.median.transformer);
    println!("  mlp-relation:         {:.4}", report.median.mlp);
    println!("  accuracy-regressor:   {:.4}", report.median.regressor);
    println!("artifacts in {}", dir.display());
    Ok(0)
}

fn cmd_export_graph(
    candidate_path: &Path,
    id: Option<usize>,
    dot_out: &Path,
    c1: usize,
    num_classes: usize,
) -> Result<i32> {
    if num_classes < 2 {
        return Err(Error::Config("num_classes must be at least 2".into()));
    }
    if c1 == 0 {
        return Err(Error::Config("c1 must be positive".into()));
    }
    let config = load_candidate_config(candidate_path, id)?;
    let report = validate_configuration(&config);
    if !report.is_ok() {
        return Err(Error::InvalidConfig(report));
    }
    let opts = BuildOptions {
        in_channels: 1,
        num_classes,
        c1,
        max_attn_len: 64,
    };
    let graph = build_network(&config.arch, &opts, &mut stream_rng(0, 0))?;
    ensure_parent(dot_out)?;
    fs::write(dot_out, graph.to_dot())?;
    let kept = reachable_blocks(&config.arch)?.len();
    println!(
        "wrote {}: {} solid nodes ({} reachable blocks + stem + head), {} dangling",
        dot_out.display(),
        kept + 2,
        kept,
        config.arch.blocks.len() - kept
    );
    Ok(0)
}

fn load_candidate_config(path: &Path, id: Option<usize>) -> Result<Configuration> {
    let text = fs::read_to_string(path)?;
    if let Some(target) = id {
        for (pos, (line_no, line)) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i, (i + 1, l)))
        {
            let parsed = parse_candidate(path, line_no, line, pos)?;
            if parsed.id == target {
                return Ok(parsed.config);
            }
        }
        return Err(Error::Config(format!(
            "no candidate with id {target} in {}",
            path.display()
        )));
    }
    let trimmed = text.trim();
    if let Ok(rec) = serde_json::from_str::<CandidateRecord>(trimmed) {
        return Ok(rec.config);
    }
    if let Ok(cl) = serde_json::from_str::<ConfigLine>(trimmed) {
        return Ok(cl.config);
    }
    if let Ok(config) = serde_json::from_str::<Configuration>(trimmed) {
        return Ok(config);
    }
    match text.lines().find(|l| !l.trim().is_empty()) {
        Some(line) => Ok(parse_candidate(path, 1, line, 0)?.config),
        None => Err(Error::Config(format!(
            "{} holds no candidate",
            path.display()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Output helpers

/// Echo the fully resolved configuration next to the manifest.
fn write_resolved(
    dir: &Path,
    cfg: &RunConfigFile,
    budgets: SearchBudgets,
    threads: usize,
) -> Result<()> {
    let resolved = RunConfigFile {
        budgets: Some(budgets),
        threads,
        ..cfg.clone()
    };
    write_json(&dir.join(CONFIG_ECHO_FILE), &resolved)
}

fn print_top(report: &RankingReport, candidates: &[CandidateRecord], n: usize) {
    let by_id: HashMap<usize, &CandidateRecord> =
        candidates.iter().map(|c| (c.id, c)).collect();
    println!("rank    id  wins  score");
    for (pos, (id, wins)) in report
        .order
        .iter()
        .zip(report.win_counts.iter())
        .take(n)
        .enumerate()
    {
        let score = by_id
            .get(id)
            .and_then(|c| c.score.as_ref())
            .map(|s| format!("{:.4}", s.dice))
            .unwrap_or_else(|| "-".to_string());
        println!("{:>4}  {:>4}  {:>4}  {}", pos + 1, id, wins, score);
    }
}
