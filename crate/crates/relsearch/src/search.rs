//! Search orchestration: sample candidates, evaluate them, train the
//! relation predictor, rank the candidate pool by pairwise wins, and
//! select the top configuration; plus the predictor ablation that
//! compares the three predictor types by validation rank correlation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::encoding::{decode, encode, EncodedConfig};
use crate::error::{Error, Result};
use crate::predictor::{
    build_pair_dataset, regression_examples, train_accuracy_regressor, train_mlp_baseline,
    train_relation_predictor, AccuracyRegressor, MlpBaseline, MlpConfig, PredictorConfig,
    RelationPredictor, ScoredRecord, SplitTag, TrainHyper, TrainReport, TrainedRecordSet,
    RELATION_TAG,
};
use crate::rng::{derive_seed, stream_rng};
use crate::search_space::{sample_configuration, Configuration};
use crate::train_eval::{
    surrogate_evaluate, toy_train_evaluate, EvalScore, SurrogateParams, SyntheticDataset,
    ToyTrainOptions,
};

// Run directory layout.
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const TRAIN_PAIRS_FILE: &str = "pairs.train.jsonl";
pub const VAL_PAIRS_FILE: &str = "pairs.val.jsonl";
pub const PREDICTOR_BIN_FILE: &str = "predictor.bin";
pub const PREDICTOR_META_FILE: &str = "predictor.json";
pub const RANKING_FILE: &str = "ranking.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const FIGURES_DIR: &str = "figures";

// Derivation streams for per-run randomness; candidate ids stay below
// 2^32 so the offsets cannot collide.
/// Stream offset of candidate evaluation seeds (plus candidate id).
pub const STREAM_EVAL_BASE: u64 = 1 << 32;
/// Stream id of predictor weight initialization.
pub const STREAM_MODEL_INIT: u64 = 1 << 33;
/// Stream offset mixed with the configured training seed.
pub const STREAM_TRAIN_SEED: u64 = (1 << 33) + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Sampled,
    Evaluated,
    Failed,
}

/// One candidate configuration tracked through a run; `score` is
/// present exactly when `status` is `Evaluated`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: usize,
    pub config: Configuration,
    pub encoded: EncodedConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<EvalScore>,
    pub status: CandidateStatus,
    pub seed: u64,
}

/// A candidate evaluator; implementations must be deterministic in
/// (config, seed) so concurrent evaluation cannot change results.
pub trait Evaluate: Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, config: &Configuration, seed: u64) -> Result<EvalScore>;
    /// Effective parameters, echoed into the run manifest.
    fn params_json(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

/// The closed-form surrogate; its noise keys on the configuration, so
/// the per-candidate seed is unused.
pub struct SurrogateEvaluator(pub SurrogateParams);

impl Evaluate for SurrogateEvaluator {
    fn name(&self) -> &'static str {
        "surrogate"
    }

    fn evaluate(&self, config: &Configuration, _seed: u64) -> Result<EvalScore> {
        surrogate_evaluate(config, &self.0)
    }

    fn params_json(&self) -> serde_json::Value {
        serde_json::to_value(self.0).unwrap_or(serde_json::Value::Null)
    }
}

/// The trainable toy evaluator over a shared synthetic dataset.
pub struct ToyTrainEvaluator {
    pub dataset: SyntheticDataset,
    pub options: ToyTrainOptions,
}

impl Evaluate for ToyTrainEvaluator {
    fn name(&self) -> &'static str {
        "toytrain"
    }

    fn evaluate(&self, config: &Configuration, seed: u64) -> Result<EvalScore> {
        let mut options = self.options;
        options.seed = seed;
        toy_train_evaluate(config, &self.dataset, &options)
    }

    fn params_json(&self) -> serde_json::Value {
        serde_json::json!({
            "dataset": {
                "count": self.dataset.volumes.len(),
                "size": self.dataset.size,
                "num_classes": self.dataset.num_classes,
                "seed": self.dataset.seed,
            },
            "options": serde_json::to_value(self.options).unwrap_or(serde_json::Value::Null),
        })
    }
}

/// Pairwise comparison source for ranking.  `prepare` sees the whole
/// candidate list first so models can cache per-candidate work.
pub trait PairPredictor {
    fn id(&self) -> String;
    /// True when p(i,j) + p(j,i) = 1 exactly, halving the calls needed.
    fn antisymmetric(&self) -> bool {
        false
    }
    fn prepare(&mut self, vecs: &[&EncodedConfig]) -> Result<()>;
    /// p(a_i >= a_j) for prepared candidates by list position.
    fn predict_prepared(&mut self, i: usize, j: usize) -> Result<f64>;
}

/// Relation predictor with pooled embeddings cached at prepare time,
/// so ranking costs one encoder pass per candidate plus cheap head
/// evaluations per pair.
pub struct CachedRelationPredictor<'a> {
    model: &'a RelationPredictor,
    embeddings: Vec<Array1<f64>>,
}

impl<'a> CachedRelationPredictor<'a> {
    pub fn new(model: &'a RelationPredictor) -> Self {
        CachedRelationPredictor {
            model,
            embeddings: Vec::new(),
        }
    }
}

impl PairPredictor for CachedRelationPredictor<'_> {
    fn id(&self) -> String {
        if self.model.config.antisymmetric {
            format!("{RELATION_TAG}-antisymmetric")
        } else {
            RELATION_TAG.to_string()
        }
    }

    fn antisymmetric(&self) -> bool {
        self.model.config.antisymmetric
    }

    fn prepare(&mut self, vecs: &[&EncodedConfig]) -> Result<()> {
        let emb = self.model.pooled_embeddings(vecs)?;
        self.embeddings = (0..vecs.len()).map(|i| emb.row(i).to_owned()).collect();
        Ok(())
    }

    fn predict_prepared(&mut self, i: usize, j: usize) -> Result<f64> {
        Ok(self
            .model
            .head_probability(&self.embeddings[i], &self.embeddings[j]))
    }
}

/// MLP baseline as a pair predictor; forwards are cheap enough to run
/// per pair without caching.
pub struct MlpPairPredictor<'a> {
    model: &'a MlpBaseline,
    vecs: Vec<EncodedConfig>,
}

impl<'a> MlpPairPredictor<'a> {
    pub fn new(model: &'a MlpBaseline) -> Self {
        MlpPairPredictor {
            model,
            vecs: Vec::new(),
        }
    }
}

impl PairPredictor for MlpPairPredictor<'_> {
    fn id(&self) -> String {
        crate::predictor::MLP_TAG.to_string()
    }

    fn prepare(&mut self, vecs: &[&EncodedConfig]) -> Result<()> {
        self.vecs = vecs.iter().map(|v| (*v).clone()).collect();
        Ok(())
    }

    fn predict_prepared(&mut self, i: usize, j: usize) -> Result<f64> {
        self.model.predict_relation(&self.vecs[i], &self.vecs[j])
    }
}

/// Oracle predictor answering from true surrogate scores; ranking with
/// it must reproduce the brute-force score sort.
pub struct SurrogateOraclePredictor {
    params: SurrogateParams,
    scores: Vec<f64>,
}

impl SurrogateOraclePredictor {
    pub fn new(params: SurrogateParams) -> Self {
        SurrogateOraclePredictor {
            params,
            scores: Vec::new(),
        }
    }
}

impl PairPredictor for SurrogateOraclePredictor {
    fn id(&self) -> String {
        "surrogate-oracle".to_string()
    }

    fn prepare(&mut self, vecs: &[&EncodedConfig]) -> Result<()> {
        self.scores = vecs
            .iter()
            .map(|v| Ok(surrogate_evaluate(&decode(v)?, &self.params)?.dice))
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn predict_prepared(&mut self, i: usize, j: usize) -> Result<f64> {
        Ok(if self.scores[i] >= self.scores[j] { 1.0 } else { 0.0 })
    }
}

/// Outcome of ranking one candidate pool; `order` holds candidate ids
/// best-first and `win_counts` aligns with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub schema_version: u32,
    pub order: Vec<usize>,
    pub win_counts: Vec<usize>,
    pub predictor: String,
    pub tie_break: String,
}

/// Rank candidates by pairwise win counts: candidate i beats j when
/// p(i,j) > 0.5.  Ties in win count break by ascending candidate id.
pub fn rank_candidates(
    predictor: &mut dyn PairPredictor,
    candidates: &[CandidateRecord],
) -> Result<RankingReport> {
    let k = candidates.len();
    if k < 2 {
        return Err(Error::Config("ranking needs at least two candidates".into()));
    }
    let mut ids: Vec<usize> = candidates.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("candidate ids must be unique".into()));
    }

    let vecs: Vec<&EncodedConfig> = candidates.iter().map(|c| &c.encoded).collect();
    predictor.prepare(&vecs)?;

    let mut wins = vec![0usize; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let p_ij = predictor.predict_prepared(i, j)?;
            let p_ji = if predictor.antisymmetric() {
                1.0 - p_ij
            } else {
                predictor.predict_prepared(j, i)?
            };
            if p_ij > 0.5 {
                wins[i] += 1;
            }
            if p_ji > 0.5 {
                wins[j] += 1;
            }
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        wins[b]
            .cmp(&wins[a])
            .then(candidates[a].id.cmp(&candidates[b].id))
    });
    Ok(RankingReport {
        schema_version: crate::SCHEMA_VERSION,
        order: order.iter().map(|&x| candidates[x].id).collect(),
        win_counts: order.iter().map(|&x| wins[x]).collect(),
        predictor: predictor.id(),
        tie_break: "ascending-id".to_string(),
    })
}

/// Spearman rank correlation: Pearson over two aligned rank vectors.
pub fn rank_correlation(rank_a: &[f64], rank_b: &[f64]) -> Result<f64> {
    if rank_a.len() != rank_b.len() {
        return Err(Error::LengthMismatch(format!(
            "rank vectors have lengths {} and {}",
            rank_a.len(),
            rank_b.len()
        )));
    }
    let n = rank_a.len();
    if n < 2 {
        return Err(Error::Config("need at least two ranks".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(rank_a), mean(rank_b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..n {
        let (da, db) = (rank_a[i] - ma, rank_b[i] - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Config("rank vector has zero variance".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// 1-based ranks by descending score; equal scores break by ascending
/// index so the assignment is deterministic.
pub fn ranks_by_descending(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; scores.len()];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = (pos + 1) as f64;
    }
    ranks
}

/// Candidate counts of one search run; val size is
/// `n_initial - n_train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchBudgets {
    pub n_initial: usize,
    pub n_train: usize,
    pub n_fresh: usize,
}

impl Default for SearchBudgets {
    fn default() -> Self {
        SearchBudgets {
            n_initial: 100,
            n_train: 75,
            n_fresh: 100,
        }
    }
}

impl SearchBudgets {
    pub fn validate(&self) -> Result<()> {
        if self.n_initial < 2 || self.n_train == 0 || self.n_train >= self.n_initial {
            return Err(Error::Config(format!(
                "budgets need 1 <= n_train < n_initial and n_initial >= 2, got {}/{}",
                self.n_train, self.n_initial
            )));
        }
        Ok(())
    }
}

/// Full search configuration.  The effective training seed is derived
/// from both `seed` and `hyper.seed`, so two runs agree exactly when
/// the whole document agrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub seed: u64,
    pub budgets: SearchBudgets,
    pub predictor: PredictorConfig,
    pub hyper: TrainHyper,
    pub threads: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            seed: 0,
            budgets: SearchBudgets::default(),
            predictor: PredictorConfig::default(),
            hyper: TrainHyper::default(),
            threads: 1,
        }
    }
}

/// Everything a finished run produced.
pub struct SearchOutcome {
    pub best: CandidateRecord,
    pub ranking: RankingReport,
    pub candidates: Vec<CandidateRecord>,
    /// Spearman correlation of predicted vs true ranks on the val split.
    pub val_correlation: f64,
    pub train_report: TrainReport,
}

/// Run manifest persisted with every search; id ranges are half-open.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub budgets: SearchBudgets,
    pub evaluator: String,
    pub evaluator_params: serde_json::Value,
    pub predictor_config: PredictorConfig,
    pub train_hyper: TrainHyper,
    pub threads: usize,
    pub initial_ids: (usize, usize),
    pub fresh_ids: (usize, usize),
    pub train_ids: (usize, usize),
    pub val_ids: (usize, usize),
    pub files: Vec<String>,
}

/// Checkpoint sidecar: hyperparameters and seed alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorMeta {
    pub schema_version: u32,
    pub model: String,
    pub config: PredictorConfig,
    pub hyper: TrainHyper,
    pub final_loss: Option<f64>,
}

/// Sample candidate `id` for a run; the config stream and the
/// evaluation seed are independent derivations of (run seed, id).
pub fn sample_candidate(run_seed: u64, id: usize) -> CandidateRecord {
    let config = sample_configuration(&mut stream_rng(run_seed, id as u64));
    let encoded = encode(&config).expect("sampled configurations always encode");
    CandidateRecord {
        id,
        config,
        encoded,
        score: None,
        status: CandidateStatus::Sampled,
        seed: derive_seed(run_seed, STREAM_EVAL_BASE + id as u64),
    }
}

/// Evaluate candidates in place with up to `threads` workers.  Slot
/// assignment makes the result independent of scheduling; failures
/// mark the candidate and never abort the run.
pub fn evaluate_candidates(
    candidates: &mut [CandidateRecord],
    evaluator: &dyn Evaluate,
    threads: usize,
) {
    let n = candidates.len();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<EvalScore>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let shared: &[CandidateRecord] = candidates;
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = evaluator.evaluate(&shared[i].config, shared[i].seed);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    for (c, r) in candidates.iter_mut().zip(results.into_inner().unwrap()) {
        match r.expect("every slot evaluated") {
            Ok(score) => {
                c.score = Some(score);
                c.status = CandidateStatus::Evaluated;
            }
            Err(_) => {
                c.score = None;
                c.status = CandidateStatus::Failed;
            }
        }
    }
}

/// Failed candidates occupy rank positions with score 0.
fn effective_score(c: &CandidateRecord) -> EvalScore {
    c.score.unwrap_or(EvalScore {
        dice: 0.0,
        iterations_used: 0,
        diverged: true,
    })
}

/// Convert evaluated candidates into scored records, tagging the first
/// `n_train` ids as the train split and the rest as validation.
pub fn records_from_candidates(candidates: &[CandidateRecord], n_train: usize) -> TrainedRecordSet {
    candidates
        .iter()
        .map(|c| ScoredRecord {
            config: c.config.clone(),
            encoded: c.encoded.clone(),
            score: effective_score(c),
            split: if c.id < n_train {
                SplitTag::Train
            } else {
                SplitTag::Val
            },
        })
        .collect()
}

/// 1-based predicted rank per candidate, aligned with `candidates`.
pub fn ranks_from_report(report: &RankingReport, candidates: &[CandidateRecord]) -> Vec<f64> {
    let pos: HashMap<usize, usize> = report
        .order
        .iter()
        .enumerate()
        .map(|(p, &id)| (id, p))
        .collect();
    candidates.iter().map(|c| (pos[&c.id] + 1) as f64).collect()
}

/// Write a pretty-printed JSON document with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Write one compact JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_scatter_csv(path: &Path, rows: &[(usize, f64, f64)]) -> Result<()> {
    let mut out = String::from("candidate_id,true_rank,predicted_rank\n");
    for (id, t, p) in rows {
        out.push_str(&format!("{id},{t},{p}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// The full search loop.  Samples `n_initial` candidates, evaluates
/// them, trains the relation predictor on the train split's pairs,
/// ranks the union of evaluated and fresh candidates, and returns the
/// top pick.  With `out_dir` set, every intermediate artifact is
/// persisted; file contents depend only on the config document.
pub fn run_search(
    config: &SearchConfig,
    evaluator: &dyn Evaluate,
    out_dir: Option<&Path>,
) -> Result<SearchOutcome> {
    config.budgets.validate()?;
    let budgets = config.budgets;
    let n_total = budgets.n_initial + budgets.n_fresh;
    if n_total < 2 {
        return Err(Error::Config("need at least two candidates to rank".into()));
    }

    let mut candidates: Vec<CandidateRecord> = (0..budgets.n_initial)
        .map(|id| sample_candidate(config.seed, id))
        .collect();
    evaluate_candidates(&mut candidates, evaluator, config.threads);

    let records = records_from_candidates(&candidates, budgets.n_train);
    let train_pairs = build_pair_dataset(&records, SplitTag::Train)?;
    let val_pairs = build_pair_dataset(&records, SplitTag::Val)?;

    let mut hyper = config.hyper;
    hyper.seed = derive_seed(config.seed, STREAM_TRAIN_SEED.wrapping_add(config.hyper.seed));
    let mut model = RelationPredictor::new(
        config.predictor,
        &mut stream_rng(config.seed, STREAM_MODEL_INIT),
    )?;
    let train_report = train_relation_predictor(&mut model, &train_pairs, &hyper)?;

    // Validation ranking quality: predicted vs true ranks on the val
    // split.
    let (val_correlation, val_scatter) = {
        let val_slice = &candidates[budgets.n_train..budgets.n_initial];
        let val_report = {
            let mut cached = CachedRelationPredictor::new(&model);
            rank_candidates(&mut cached, val_slice)?
        };
        let val_true = ranks_by_descending(
            &val_slice
                .iter()
                .map(|c| effective_score(c).dice)
                .collect::<Vec<_>>(),
        );
        let val_pred = ranks_from_report(&val_report, val_slice);
        let scatter: Vec<(usize, f64, f64)> = val_slice
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, val_true[i], val_pred[i]))
            .collect();
        (rank_correlation(&val_true, &val_pred)?, scatter)
    };

    for id in budgets.n_initial..n_total {
        candidates.push(sample_candidate(config.seed, id));
    }

    let ranking = {
        let mut cached = CachedRelationPredictor::new(&model);
        rank_candidates(&mut cached, &candidates)?
    };
    let best = candidates
        .iter()
        .find(|c| c.id == ranking.order[0])
        .expect("top id comes from the candidate list")
        .clone();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join(FIGURES_DIR))?;
        let manifest = RunManifest {
            schema_version: crate::SCHEMA_VERSION,
            seed: config.seed,
            budgets,
            evaluator: evaluator.name().to_string(),
            evaluator_params: evaluator.params_json(),
            predictor_config: config.predictor,
            train_hyper: hyper,
            threads: config.threads,
            initial_ids: (0, budgets.n_initial),
            fresh_ids: (budgets.n_initial, n_total),
            train_ids: (0, budgets.n_train),
            val_ids: (budgets.n_train, budgets.n_initial),
            files: vec![
                CANDIDATES_FILE.to_string(),
                TRAIN_PAIRS_FILE.to_string(),
                VAL_PAIRS_FILE.to_string(),
                PREDICTOR_BIN_FILE.to_string(),
                PREDICTOR_META_FILE.to_string(),
                RANKING_FILE.to_string(),
            ],
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        write_jsonl(&dir.join(CANDIDATES_FILE), &candidates)?;
        write_jsonl(&dir.join(TRAIN_PAIRS_FILE), &train_pairs)?;
        write_jsonl(&dir.join(VAL_PAIRS_FILE), &val_pairs)?;
        model.save(&dir.join(PREDICTOR_BIN_FILE))?;
        write_json(
            &dir.join(PREDICTOR_META_FILE),
            &PredictorMeta {
                schema_version: crate::SCHEMA_VERSION,
                model: RELATION_TAG.to_string(),
                config: config.predictor,
                hyper,
                final_loss: train_report.losses.last().copied(),
            },
        )?;
        write_json(&dir.join(RANKING_FILE), &ranking)?;
        write_scatter_csv(
            &dir.join(FIGURES_DIR).join("validation_scatter.csv"),
            &val_scatter,
        )?;
    }

    Ok(SearchOutcome {
        best,
        ranking,
        candidates,
        val_correlation,
        train_report,
    })
}

/// Validation rank correlations of the three predictor types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTriple {
    pub transformer: f64,
    pub mlp: f64,
    pub regressor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSeedRow {
    pub seed: u64,
    pub correlations: CorrelationTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub per_seed: Vec<AblationSeedRow>,
    pub median: CorrelationTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    pub predictor: PredictorConfig,
    pub mlp: MlpConfig,
    pub hyper: TrainHyper,
}

impl Default for AblationOptions {
    fn default() -> Self {
        AblationOptions {
            seeds: vec![0, 1, 2, 3, 4],
            predictor: PredictorConfig::default(),
            mlp: MlpConfig::default(),
            hyper: TrainHyper::default(),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rank the val split with each of the three predictors, per seed, and
/// report Spearman correlations against true ranks plus their medians.
/// With `out_dir` set, writes `ablation.json` and one scatter CSV per
/// predictor (first seed) under `figures/`.
pub fn run_ablation(
    records: &TrainedRecordSet,
    options: &AblationOptions,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    if options.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let train_pairs = build_pair_dataset(records, SplitTag::Train)?;
    let train_regression = regression_examples(records, SplitTag::Train)?;

    let val_candidates: Vec<CandidateRecord> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == SplitTag::Val)
        .map(|(i, r)| CandidateRecord {
            id: i,
            config: r.config.clone(),
            encoded: r.encoded.clone(),
            score: Some(r.score),
            status: CandidateStatus::Evaluated,
            seed: 0,
        })
        .collect();
    if val_candidates.len() < 2 {
        return Err(Error::EmptySplit("ablation needs at least two val records".into()));
    }
    let val_true = ranks_by_descending(
        &val_candidates
            .iter()
            .map(|c| c.score.unwrap().dice)
            .collect::<Vec<_>>(),
    );

    let mut per_seed = Vec::with_capacity(options.seeds.len());
    let mut first_scatter: Option<[Vec<(usize, f64, f64)>; 3]> = None;
    for &seed in &options.seeds {
        let mut hyper = options.hyper;
        hyper.seed = derive_seed(seed, STREAM_TRAIN_SEED.wrapping_add(options.hyper.seed));

        let mut transformer =
            RelationPredictor::new(options.predictor, &mut stream_rng(seed, 10))?;
        train_relation_predictor(&mut transformer, &train_pairs, &hyper)?;
        let t_report = {
            let mut cached = CachedRelationPredictor::new(&transformer);
            rank_candidates(&mut cached, &val_candidates)?
        };
        let t_pred = ranks_from_report(&t_report, &val_candidates);

        let mut mlp = MlpBaseline::new(options.mlp, &mut stream_rng(seed, 12))?;
        train_mlp_baseline(&mut mlp, &train_pairs, &hyper)?;
        let m_report = {
            let mut pair = MlpPairPredictor::new(&mlp);
            rank_candidates(&mut pair, &val_candidates)?
        };
        let m_pred = ranks_from_report(&m_report, &val_candidates);

        let mut regressor =
            AccuracyRegressor::new(options.predictor, &mut stream_rng(seed, 14))?;
        train_accuracy_regressor(&mut regressor, &train_regression, &hyper)?;
        let r_scores: Vec<f64> = val_candidates
            .iter()
            .map(|c| regressor.predict_accuracy(&c.encoded))
            .collect::<Result<_>>()?;
        let r_pred = ranks_by_descending(&r_scores);

        per_seed.push(AblationSeedRow {
            seed,
            correlations: CorrelationTriple {
                transformer: rank_correlation(&val_true, &t_pred)?,
                mlp: rank_correlation(&val_true, &m_pred)?,
                regressor: rank_correlation(&val_true, &r_pred)?,
            },
        });
        if first_scatter.is_none() {
            let rows = |pred: &[f64]| {
                val_candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (c.id, val_true[i], pred[i]))
                    .collect::<Vec<_>>()
            };
            first_scatter = Some([rows(&t_pred), rows(&m_pred), rows(&r_pred)]);
        }
    }

    let report = AblationReport {
        schema_version: crate::SCHEMA_VERSION,
        median: CorrelationTriple {
            transformer: median(per_seed.iter().map(|r| r.correlations.transformer).collect()),
            mlp: median(per_seed.iter().map(|r| r.correlations.mlp).collect()),
            regressor: median(per_seed.iter().map(|r| r.correlations.regressor).collect()),
        },
        per_seed,
    };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join(FIGURES_DIR))?;
        write_json(&dir.join(ABLATION_FILE), &report)?;
        let scatter = first_scatter.expect("at least one seed ran");
        for (name, rows) in ["transformer", "mlp", "regressor"].iter().zip(&scatter) {
            write_scatter_csv(
                &dir.join(FIGURES_DIR).join(format!("ablation_{name}.csv")),
                rows,
            )?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::sigmoid;

    fn surrogate_candidates(count: usize, seed: u64) -> Vec<CandidateRecord> {
        let mut cands: Vec<CandidateRecord> =
            (0..count).map(|id| sample_candidate(seed, id)).collect();
        evaluate_candidates(&mut cands, &SurrogateEvaluator(SurrogateParams::default()), 1);
        cands
    }

    fn tiny_predictor() -> PredictorConfig {
        PredictorConfig {
            d_model: 16,
            num_layers: 1,
            num_heads: 1,
            d_ff: 32,
            head_hidden: 16,
            ..PredictorConfig::default()
        }
    }

    /// Mock predictor scoring from a fixed table, optionally counting
    /// calls and applying a monotone probability transform.
    struct TablePredictor {
        scores: Vec<f64>,
        calls: usize,
        sharpen: bool,
        antisym: bool,
    }

    impl TablePredictor {
        fn new(scores: Vec<f64>) -> Self {
            TablePredictor {
                scores,
                calls: 0,
                sharpen: false,
                antisym: false,
            }
        }
    }

    impl PairPredictor for TablePredictor {
        fn id(&self) -> String {
            "table".to_string()
        }

        fn antisymmetric(&self) -> bool {
            self.antisym
        }

        fn prepare(&mut self, vecs: &[&EncodedConfig]) -> Result<()> {
            assert_eq!(vecs.len(), self.scores.len());
            Ok(())
        }

        fn predict_prepared(&mut self, i: usize, j: usize) -> Result<f64> {
            self.calls += 1;
            let p = sigmoid(self.scores[i] - self.scores[j]);
            Ok(if self.sharpen {
                0.5 + 0.4 * (8.0 * (p - 0.5)).tanh()
            } else {
                p
            })
        }
    }

    struct ConstantPredictor(f64);

    impl PairPredictor for ConstantPredictor {
        fn id(&self) -> String {
            "constant".to_string()
        }

        fn prepare(&mut self, _vecs: &[&EncodedConfig]) -> Result<()> {
            Ok(())
        }

        fn predict_prepared(&mut self, _i: usize, _j: usize) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn two_candidates_rank_by_the_single_comparison() {
        let cands = surrogate_candidates(2, 0);
        let mut p = TablePredictor::new(vec![2.0, 0.0]);
        let report = rank_candidates(&mut p, &cands).unwrap();
        assert_eq!(report.order, vec![0, 1]);
        assert_eq!(report.win_counts, vec![1, 0]);
        assert_eq!(report.tie_break, "ascending-id");
    }

    #[test]
    fn indifferent_predictor_orders_by_id() {
        let cands = surrogate_candidates(6, 1);
        let mut p = ConstantPredictor(0.5);
        let report = rank_candidates(&mut p, &cands).unwrap();
        assert_eq!(report.order, vec![0, 1, 2, 3, 4, 5]);
        assert!(report.win_counts.iter().all(|&w| w == 0));
    }

    #[test]
    fn call_count_matches_the_contract() {
        let cands = surrogate_candidates(7, 2);
        let k = cands.len();
        let mut p = TablePredictor::new((0..k).map(|i| i as f64).collect());
        rank_candidates(&mut p, &cands).unwrap();
        assert_eq!(p.calls, k * (k - 1));

        let mut p = TablePredictor::new((0..k).map(|i| i as f64).collect());
        p.antisym = true;
        rank_candidates(&mut p, &cands).unwrap();
        assert_eq!(p.calls, k * (k - 1) / 2);
    }

    #[test]
    fn ranking_ignores_monotone_probability_transforms() {
        let cands = surrogate_candidates(9, 3);
        let scores: Vec<f64> = (0..9).map(|i| ((i * 7) % 9) as f64 * 0.3).collect();
        let mut plain = TablePredictor::new(scores.clone());
        let r1 = rank_candidates(&mut plain, &cands).unwrap();
        let mut sharp = TablePredictor::new(scores);
        sharp.sharpen = true;
        let r2 = rank_candidates(&mut sharp, &cands).unwrap();
        assert_eq!(r1.order, r2.order);
        assert_eq!(r1.win_counts, r2.win_counts);
    }

    #[test]
    fn oracle_ranking_equals_the_brute_force_sort() {
        let cands = surrogate_candidates(30, 4);
        let mut oracle = SurrogateOraclePredictor::new(SurrogateParams::default());
        let report = rank_candidates(&mut oracle, &cands).unwrap();

        let mut expect: Vec<usize> = (0..cands.len()).collect();
        expect.sort_by(|&a, &b| {
            let (sa, sb) = (cands[a].score.unwrap().dice, cands[b].score.unwrap().dice);
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        assert_eq!(report.order, expect);
        // Win counts are the number of strictly worse candidates.
        for (pos, &w) in report.win_counts.iter().enumerate() {
            assert_eq!(w, cands.len() - 1 - pos);
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut cands = surrogate_candidates(3, 5);
        cands[2].id = 0;
        let mut p = ConstantPredictor(0.5);
        assert!(matches!(
            rank_candidates(&mut p, &cands),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            rank_candidates(&mut ConstantPredictor(0.5), &cands[..1]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn spearman_matches_hand_computations() {
        assert_eq!(
            rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
            1.0
        );
        assert_eq!(
            rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap(),
            -1.0
        );
        let r = rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.6).abs() < 1e-12);
        assert!(matches!(
            rank_correlation(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn descending_ranks_break_ties_by_index() {
        assert_eq!(
            ranks_by_descending(&[0.3, 0.9, 0.3, 0.1]),
            vec![2.0, 1.0, 3.0, 4.0]
        );
    }

    struct FlakyEvaluator;

    impl Evaluate for FlakyEvaluator {
        fn name(&self) -> &'static str {
            "flaky"
        }

        fn evaluate(&self, config: &Configuration, _seed: u64) -> Result<EvalScore> {
            if config.arch.blocks.len() % 3 == 0 {
                Err(Error::Config("synthetic failure".into()))
            } else {
                surrogate_evaluate(config, &SurrogateParams::default())
            }
        }
    }

    #[test]
    fn failures_mark_candidates_without_aborting() {
        let mut cands: Vec<CandidateRecord> =
            (0..10).map(|id| sample_candidate(6, id)).collect();
        evaluate_candidates(&mut cands, &FlakyEvaluator, 2);
        let failed: Vec<bool> = cands
            .iter()
            .map(|c| c.status == CandidateStatus::Failed)
            .collect();
        assert!(failed.iter().any(|&f| f), "expected at least one failure");
        assert!(!failed.iter().all(|&f| f), "expected at least one success");
        for c in &cands {
            assert_eq!(c.score.is_some(), c.status == CandidateStatus::Evaluated);
        }
        // Failed candidates enter the record set with score 0.
        let records = records_from_candidates(&cands, 7);
        for (c, r) in cands.iter().zip(&records) {
            if c.status == CandidateStatus::Failed {
                assert_eq!(r.score.dice, 0.0);
                assert!(r.score.diverged);
            }
        }
    }

    #[test]
    fn evaluation_results_do_not_depend_on_worker_count() {
        let mut seq: Vec<CandidateRecord> = (0..8).map(|id| sample_candidate(7, id)).collect();
        let mut par = seq.clone();
        let eval = SurrogateEvaluator(SurrogateParams::default());
        evaluate_candidates(&mut seq, &eval, 1);
        evaluate_candidates(&mut par, &eval, 4);
        assert_eq!(seq, par);
    }

    fn smoke_config(seed: u64) -> SearchConfig {
        SearchConfig {
            seed,
            budgets: SearchBudgets {
                n_initial: 10,
                n_train: 7,
                n_fresh: 10,
            },
            predictor: tiny_predictor(),
            hyper: TrainHyper {
                iterations: 60,
                batch_size: 16,
                ..TrainHyper::default()
            },
            threads: 2,
        }
    }

    #[test]
    fn smoke_search_emits_every_artifact() {
        let dir = std::env::temp_dir().join(format!("relsearch-run-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let eval = SurrogateEvaluator(SurrogateParams::default());
        let outcome = run_search(&smoke_config(8), &eval, Some(&dir)).unwrap();

        assert_eq!(outcome.candidates.len(), 20);
        assert_eq!(outcome.ranking.order.len(), 20);
        assert_eq!(outcome.best.id, outcome.ranking.order[0]);
        assert!(outcome.val_correlation.is_finite());
        assert_eq!(outcome.train_report.losses.len(), 60);
        // Win counts are within bounds and non-increasing.
        assert!(outcome.ranking.win_counts.iter().all(|&w| w < 20));
        assert!(outcome
            .ranking
            .win_counts
            .windows(2)
            .all(|w| w[0] >= w[1]));

        let lines = |name: &str| {
            fs::read_to_string(dir.join(name))
                .unwrap()
                .lines()
                .count()
        };
        assert_eq!(lines(CANDIDATES_FILE), 20);
        assert_eq!(lines(TRAIN_PAIRS_FILE), 49);
        assert_eq!(lines(VAL_PAIRS_FILE), 9);
        assert!(dir.join(MANIFEST_FILE).exists());
        assert!(dir.join(PREDICTOR_BIN_FILE).exists());
        assert!(dir.join(PREDICTOR_META_FILE).exists());
        assert!(dir.join(RANKING_FILE).exists());
        assert_eq!(
            lines(&format!("{FIGURES_DIR}/validation_scatter.csv")),
            1 + 3
        );

        // The manifest round-trips and echoes the budgets.
        let manifest: RunManifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest.budgets.n_initial, 10);
        assert_eq!(manifest.val_ids, (7, 10));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn identical_configs_reproduce_identical_artifacts() {
        let base = std::env::temp_dir().join(format!("relsearch-rep-{}", std::process::id()));
        let _ = fs::remove_dir_all(&base);
        let eval = SurrogateEvaluator(SurrogateParams::default());
        run_search(&smoke_config(9), &eval, Some(&base.join("a"))).unwrap();
        run_search(&smoke_config(9), &eval, Some(&base.join("b"))).unwrap();
        for name in [CANDIDATES_FILE, RANKING_FILE, MANIFEST_FILE, TRAIN_PAIRS_FILE] {
            let a = fs::read(base.join("a").join(name)).unwrap();
            let b = fs::read(base.join("b").join(name)).unwrap();
            assert_eq!(a, b, "artifact {name} differs between identical runs");
        }
        fs::remove_dir_all(&base).unwrap();
    }

    #[test]
    fn thread_count_does_not_change_the_outcome() {
        let eval = SurrogateEvaluator(SurrogateParams::default());
        let mut cfg = smoke_config(10);
        cfg.threads = 1;
        let a = run_search(&cfg, &eval, None).unwrap();
        cfg.threads = 4;
        let b = run_search(&cfg, &eval, None).unwrap();
        assert_eq!(a.ranking, b.ranking);
        assert_eq!(a.candidates, b.candidates);
    }

    #[test]
    fn bad_budgets_are_rejected() {
        let eval = SurrogateEvaluator(SurrogateParams::default());
        let mut cfg = smoke_config(11);
        cfg.budgets.n_train = 10;
        assert!(matches!(
            run_search(&cfg, &eval, None),
            Err(Error::Config(_))
        ));
    }

    fn ablation_records(count: usize, n_train: usize, seed: u64) -> TrainedRecordSet {
        let cands = surrogate_candidates(count, seed);
        records_from_candidates(&cands, n_train)
    }

    #[test]
    fn ablation_reports_per_seed_and_median_correlations() {
        let dir = std::env::temp_dir().join(format!("relsearch-abl-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let records = ablation_records(16, 12, 12);
        let options = AblationOptions {
            seeds: vec![0, 1],
            predictor: tiny_predictor(),
            hyper: TrainHyper {
                iterations: 100,
                batch_size: 16,
                ..TrainHyper::default()
            },
            ..AblationOptions::default()
        };
        let report = run_ablation(&records, &options, Some(&dir)).unwrap();
        assert_eq!(report.per_seed.len(), 2);
        for row in &report.per_seed {
            for c in [
                row.correlations.transformer,
                row.correlations.mlp,
                row.correlations.regressor,
            ] {
                assert!((-1.0..=1.0).contains(&c));
            }
        }
        let m = median(vec![
            report.per_seed[0].correlations.transformer,
            report.per_seed[1].correlations.transformer,
        ]);
        assert_eq!(report.median.transformer, m);

        for name in ["transformer", "mlp", "regressor"] {
            let csv = fs::read_to_string(
                dir.join(FIGURES_DIR).join(format!("ablation_{name}.csv")),
            )
            .unwrap();
            // Header plus one row per val record.
            assert_eq!(csv.lines().count(), 1 + 4);
        }
        assert!(dir.join(ABLATION_FILE).exists());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn reversed_labels_flip_the_correlation_sign() {
        let records = ablation_records(20, 15, 13);
        let train_pairs = build_pair_dataset(&records, SplitTag::Train).unwrap();
        let flipped: Vec<_> = train_pairs
            .iter()
            .map(|p| crate::predictor::PairExample {
                v_i: p.v_i.clone(),
                v_j: p.v_j.clone(),
                gt: 1 - p.gt,
            })
            .collect();

        let val_candidates: Vec<CandidateRecord> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == SplitTag::Val)
            .map(|(i, r)| CandidateRecord {
                id: i,
                config: r.config.clone(),
                encoded: r.encoded.clone(),
                score: Some(r.score),
                status: CandidateStatus::Evaluated,
                seed: 0,
            })
            .collect();
        let val_true = ranks_by_descending(
            &val_candidates
                .iter()
                .map(|c| c.score.unwrap().dice)
                .collect::<Vec<_>>(),
        );

        let hyper = TrainHyper {
            iterations: 250,
            batch_size: 32,
            ..TrainHyper::default()
        };
        let corr_of = |pairs: &[crate::predictor::PairExample]| {
            let mut model =
                RelationPredictor::new(tiny_predictor(), &mut stream_rng(13, 10)).unwrap();
            train_relation_predictor(&mut model, pairs, &hyper).unwrap();
            let mut cached = CachedRelationPredictor::new(&model);
            let report = rank_candidates(&mut cached, &val_candidates).unwrap();
            let pred = ranks_from_report(&report, &val_candidates);
            rank_correlation(&val_true, &pred).unwrap()
        };
        let normal = corr_of(&train_pairs);
        let reversed = corr_of(&flipped);
        assert!(normal > 0.0, "normal training gave correlation {normal}");
        assert!(reversed < 0.0, "reversed training gave correlation {reversed}");
    }
}
