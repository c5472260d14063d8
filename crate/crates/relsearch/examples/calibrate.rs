//! Scratch calibration harness for desk-scale budgets (not shipped
//! behavior): measures ablation correlations and search pick quality
//! at several predictor training budgets.

use std::time::Instant;

use relsearch::predictor::{
    build_pair_dataset, train_relation_predictor, PredictorConfig, RelationPredictor, SplitTag,
    TrainHyper,
};
use relsearch::rng::{derive_seed, stream_rng};
use relsearch::search::{
    evaluate_candidates, rank_candidates, ranks_by_descending, ranks_from_report,
    rank_correlation, records_from_candidates, run_ablation, run_search, sample_candidate,
    AblationOptions, CachedRelationPredictor, SearchBudgets, SearchConfig, SurrogateEvaluator,
    STREAM_TRAIN_SEED,
};
use relsearch::train_eval::{surrogate_evaluate, SurrogateParams};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("ablation");
    let iterations: usize = args
        .get(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(400);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let tau: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.02);

    let params = SurrogateParams {
        tau,
        ..SurrogateParams::default()
    };
    let evaluator = SurrogateEvaluator(params);
    let hyper = TrainHyper {
        iterations,
        batch_size: 32,
        lr,
        seed: 0,
    };

    match mode {
        "ablation" => {
            let mut candidates: Vec<_> = (0..100).map(|id| sample_candidate(0, id)).collect();
            evaluate_candidates(&mut candidates, &evaluator, 1);
            let records = records_from_candidates(&candidates, 75);
            let options = AblationOptions {
                seeds: vec![0, 1, 2, 3, 4],
                predictor: PredictorConfig::default(),
                hyper,
                ..AblationOptions::default()
            };
            let t = Instant::now();
            let report = run_ablation(&records, &options, None).expect("ablation");
            println!(
                "iterations={iterations} lr={lr} tau={tau} elapsed={:.1}s",
                t.elapsed().as_secs_f64()
            );
            for row in &report.per_seed {
                println!(
                    "  seed {}: transformer {:+.4}  mlp {:+.4}  regressor {:+.4}",
                    row.seed,
                    row.correlations.transformer,
                    row.correlations.mlp,
                    row.correlations.regressor
                );
            }
            println!(
                "  median: transformer {:+.4}  mlp {:+.4}  regressor {:+.4}",
                report.median.transformer, report.median.mlp, report.median.regressor
            );
        }
        "diag" => {
            // Loss-curve shape of the transformer for each ablation
            // seed, to separate undertraining from instability.
            let mut candidates: Vec<_> = (0..100).map(|id| sample_candidate(0, id)).collect();
            evaluate_candidates(&mut candidates, &evaluator, 1);
            let records = records_from_candidates(&candidates, 75);
            let train_pairs = build_pair_dataset(&records, SplitTag::Train).expect("pairs");
            let val: Vec<_> = candidates[75..].to_vec();
            let val_true = ranks_by_descending(
                &val.iter().map(|c| c.score.unwrap().dice).collect::<Vec<_>>(),
            );
            for seed in 0..5u64 {
                let mut h = hyper;
                h.seed = derive_seed(seed, STREAM_TRAIN_SEED.wrapping_add(hyper.seed));
                let mut model =
                    RelationPredictor::new(PredictorConfig::default(), &mut stream_rng(seed, 10))
                        .expect("model");
                let report =
                    train_relation_predictor(&mut model, &train_pairs, &h).expect("train");
                let window = |r: std::ops::Range<usize>| {
                    let slice = &report.losses[r];
                    slice.iter().sum::<f64>() / slice.len() as f64
                };
                let n = report.losses.len();
                let max_late = report.losses[n / 2..]
                    .iter()
                    .cloned()
                    .fold(f64::MIN, f64::max);
                let rank_report = {
                    let mut cached = CachedRelationPredictor::new(&model);
                    rank_candidates(&mut cached, &val).expect("rank")
                };
                let corr =
                    rank_correlation(&val_true, &ranks_from_report(&rank_report, &val))
                        .expect("corr");
                println!(
                    "seed {seed}: loss first10 {:.4} mid10 {:.4} last10 {:.4} max_late {:.4} val_corr {:+.4}",
                    window(0..10),
                    window(n / 2 - 5..n / 2 + 5),
                    window(n - 10..n),
                    max_late,
                    corr
                );
            }
        }
        "search" => {
            let mut ranks = Vec::new();
            for seed in 0..5u64 {
                let config = SearchConfig {
                    seed,
                    budgets: SearchBudgets::default(),
                    predictor: PredictorConfig::default(),
                    hyper,
                    threads: 1,
                };
                let t = Instant::now();
                let outcome = run_search(&config, &evaluator, None).expect("search");
                let mut scored: Vec<(usize, f64)> = outcome
                    .candidates
                    .iter()
                    .map(|c| {
                        let s = match c.score {
                            Some(s) => s.dice,
                            None => surrogate_evaluate(&c.config, &params).expect("surrogate").dice,
                        };
                        (c.id, s)
                    })
                    .collect();
                scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let true_rank = scored
                    .iter()
                    .position(|&(id, _)| id == outcome.best.id)
                    .unwrap()
                    + 1;
                println!(
                    "seed {seed}: pick id {} true rank {true_rank}/200 val_corr {:+.3} elapsed {:.1}s",
                    outcome.best.id, outcome.val_correlation,
                    t.elapsed().as_secs_f64()
                );
                ranks.push(true_rank);
            }
            ranks.sort_unstable();
            println!("median true rank: {}", ranks[2]);
        }
        other => eprintln!("unknown mode {other}"),
    }
}
