//! Pair dataset construction and the three predictor training loops.
//!
//! All trainers share one seeded Adam loop over shuffled minibatches;
//! given the same data, hyperparameters, and seed they are pure
//! functions of their inputs.

use ndarray::{Array1, Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodedConfig, MAX_LEN};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::predictor::model::{AccuracyRegressor, MlpBaseline, RelationPredictor};
use crate::rng::stream_rng;
use crate::search_space::Configuration;
use crate::tape::{fd_check, FdReport, Tape};
use crate::train_eval::{EvalScore, Optimizer, OptimizerKind};

/// One ordered training pair; `gt` is 1 iff the left score was at
/// least the right score when the pair was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub v_i: EncodedConfig,
    pub v_j: EncodedConfig,
    pub gt: u8,
}

/// Relation label: 1 iff `a_i >= a_j`; ties count as wins.
pub fn make_gt(a_i: f64, a_j: f64) -> u8 {
    u8::from(a_i >= a_j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
}

/// An evaluated configuration assigned to a predictor data split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub config: Configuration,
    pub encoded: EncodedConfig,
    pub score: EvalScore,
    pub split: SplitTag,
}

pub type TrainedRecordSet = Vec<ScoredRecord>;

/// All ordered pairs over one split, diagonal included, in row-major
/// record order.  K records give exactly K^2 pairs.
pub fn build_pair_dataset(records: &[ScoredRecord], split: SplitTag) -> Result<Vec<PairExample>> {
    let chosen: Vec<&ScoredRecord> = records.iter().filter(|r| r.split == split).collect();
    if chosen.is_empty() {
        return Err(Error::EmptySplit(format!("no records tagged {split:?}")));
    }
    let mut pairs = Vec::with_capacity(chosen.len() * chosen.len());
    for a in &chosen {
        for b in &chosen {
            pairs.push(PairExample {
                v_i: a.encoded.clone(),
                v_j: b.encoded.clone(),
                gt: make_gt(a.score.dice, b.score.dice),
            });
        }
    }
    Ok(pairs)
}

/// Regression examples (vector, score) for one split.
pub fn regression_examples(
    records: &[ScoredRecord],
    split: SplitTag,
) -> Result<Vec<(EncodedConfig, f64)>> {
    let out: Vec<(EncodedConfig, f64)> = records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| (r.encoded.clone(), r.score.dice))
        .collect();
    if out.is_empty() {
        return Err(Error::EmptySplit(format!("no records tagged {split:?}")));
    }
    Ok(out)
}

/// Training hyperparameters; the defaults are the published recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            iterations: 10_000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Reduced iteration budget for laptop-scale experiments; keeps the
/// published learning rate and batch size.
pub const DESK_SCALE_ITERATIONS: usize = 400;

impl TrainHyper {
    /// The published recipe with iterations cut to [`DESK_SCALE_ITERATIONS`].
    pub fn desk_scale() -> Self {
        TrainHyper {
            iterations: DESK_SCALE_ITERATIONS,
            ..TrainHyper::default()
        }
    }
}

/// Per-iteration training losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Shared Adam loop.  `batch_step` maps (params, example indices) to
/// (loss, grads); non-finite losses and gradients end training with a
/// divergence error carrying the last finite loss.
fn train_loop<F>(
    params: &mut ParamSet,
    n_examples: usize,
    hyper: &TrainHyper,
    mut batch_step: F,
) -> Result<TrainReport>
where
    F: FnMut(&ParamSet, &[usize]) -> Result<(f64, Vec<ArrayD<f64>>)>,
{
    if n_examples == 0 {
        return Err(Error::EmptySplit("no training examples".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = stream_rng(hyper.seed, 0);
    let mut optimizer = Optimizer::new(OptimizerKind::Adam, params);
    let mut order: Vec<usize> = (0..n_examples).collect();
    order.shuffle(&mut rng);
    let mut pos = 0usize;
    let mut losses = Vec::with_capacity(hyper.iterations);
    let mut last_finite = f64::NAN;
    for _ in 0..hyper.iterations {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        while batch.len() < hyper.batch_size {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            batch.push(order[pos]);
            pos += 1;
        }
        let (loss, grads) = match batch_step(params, &batch) {
            Ok(x) => x,
            Err(Error::NanGradient { .. }) => {
                return Err(Error::Divergence {
                    last_finite_loss: last_finite,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                last_finite_loss: last_finite,
            });
        }
        last_finite = loss;
        losses.push(loss);
        optimizer.step(params, &grads, hyper.lr)?;
    }
    Ok(TrainReport { losses })
}

fn relation_batch_loss(
    model: &RelationPredictor,
    params: &ParamSet,
    pairs: &[PairExample],
    batch: &[usize],
) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let lefts: Vec<&EncodedConfig> = batch.iter().map(|&i| &pairs[i].v_i).collect();
    let rights: Vec<&EncodedConfig> = batch.iter().map(|&i| &pairs[i].v_j).collect();
    let e_left = model.encode_on_tape(&mut tape, &bound, &lefts)?;
    let e_right = model.encode_on_tape(&mut tape, &bound, &rights)?;
    let logits = model.pair_logits_on_tape(&mut tape, &bound, e_left, e_right);
    let targets: Vec<f64> = batch.iter().map(|&i| f64::from(pairs[i].gt)).collect();
    let loss = tape.bce_with_logits_mean(logits, &targets);
    let grads = tape.backward(loss);
    Ok((tape.scalar(loss), params.collect_grads(&bound, &grads)?))
}

/// Train the transformer relation predictor in place with BCE on gt.
pub fn train_relation_predictor(
    model: &mut RelationPredictor,
    pairs: &[PairExample],
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    let mut params = std::mem::take(&mut model.params);
    let model_ref: &RelationPredictor = model;
    let result = train_loop(&mut params, pairs.len(), hyper, |ps, batch| {
        relation_batch_loss(model_ref, ps, pairs, batch)
    });
    model.params = params;
    result
}

/// Train the MLP relation baseline in place with the same loop.
pub fn train_mlp_baseline(
    model: &mut MlpBaseline,
    pairs: &[PairExample],
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    let features: Vec<Array1<f64>> = pairs
        .iter()
        .map(|p| MlpBaseline::pair_features(&p.v_i, &p.v_j))
        .collect::<Result<_>>()?;
    let mut params = std::mem::take(&mut model.params);
    let model_ref: &MlpBaseline = model;
    let result = train_loop(&mut params, pairs.len(), hyper, |ps, batch| {
        let mut m = Array2::zeros((batch.len(), 2 * MAX_LEN));
        for (r, &i) in batch.iter().enumerate() {
            m.row_mut(r).assign(&features[i]);
        }
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let leaf = tape.leaf(m.into_dyn());
        let logits = model_ref.logits_on_tape(&mut tape, &bound, leaf);
        let targets: Vec<f64> = batch.iter().map(|&i| f64::from(pairs[i].gt)).collect();
        let loss = tape.bce_with_logits_mean(logits, &targets);
        let grads = tape.backward(loss);
        Ok((tape.scalar(loss), ps.collect_grads(&bound, &grads)?))
    });
    model.params = params;
    result
}

/// Train the accuracy regressor in place with squared error on scores.
pub fn train_accuracy_regressor(
    model: &mut AccuracyRegressor,
    examples: &[(EncodedConfig, f64)],
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    let mut params = std::mem::take(&mut model.params);
    let model_ref: &AccuracyRegressor = model;
    let result = train_loop(&mut params, examples.len(), hyper, |ps, batch| {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let vecs: Vec<&EncodedConfig> = batch.iter().map(|&i| &examples[i].0).collect();
        let scores = model_ref.scores_on_tape(&mut tape, &bound, &vecs)?;
        let targets: Vec<f64> = batch.iter().map(|&i| examples[i].1).collect();
        let t_leaf = tape.leaf(Array1::from(targets).into_dyn());
        let diff = tape.sub(scores, t_leaf);
        let sq = tape.mul(diff, diff);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        Ok((tape.scalar(loss), ps.collect_grads(&bound, &grads)?))
    });
    model.params = params;
    result
}

/// Finite-difference audit of the relation predictor's gradients on one
/// pair.  Positions are a fixed table, not parameters, so they are
/// outside the checked set by construction.
pub fn gradient_check(
    model: &RelationPredictor,
    pair: &PairExample,
    step: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<FdReport> {
    let (_, analytic) = relation_batch_loss(model, &model.params, std::slice::from_ref(pair), &[0])?;
    let base = model.params.values().to_vec();
    let mut scratch = model.params.clone();
    let mut f = |vals: &[ArrayD<f64>]| -> f64 {
        scratch
            .load_values(vals.to_vec())
            .expect("shapes fixed by construction");
        let mut tape = Tape::new();
        let bound = scratch.bind(&mut tape);
        let e_l = model
            .encode_on_tape(&mut tape, &bound, &[&pair.v_i])
            .expect("validated pair");
        let e_r = model
            .encode_on_tape(&mut tape, &bound, &[&pair.v_j])
            .expect("validated pair");
        let logits = model.pair_logits_on_tape(&mut tape, &bound, e_l, e_r);
        let loss = tape.bce_with_logits_mean(logits, &[f64::from(pair.gt)]);
        tape.scalar(loss)
    };
    Ok(fd_check(&mut f, &base, &analytic, step, samples_per_tensor, seed))
}

/// Analytic parameter gradients for one pair, in registration order.
pub fn pair_gradients(model: &RelationPredictor, pair: &PairExample) -> Result<Vec<ArrayD<f64>>> {
    let (_, grads) = relation_batch_loss(model, &model.params, std::slice::from_ref(pair), &[0])?;
    Ok(grads)
}

/// Mean of p(i,j) + p(j,i) over random ordered pairs; 1.0 means the
/// predictor is statistically antisymmetric.
pub fn pair_swap_consistency(
    model: &RelationPredictor,
    vecs: &[EncodedConfig],
    num_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if vecs.len() < 2 {
        return Err(Error::Config("need at least two vectors".into()));
    }
    let refs: Vec<&EncodedConfig> = vecs.iter().collect();
    let emb = model.pooled_embeddings(&refs)?;
    let rows: Vec<Array1<f64>> = (0..vecs.len()).map(|i| emb.row(i).to_owned()).collect();
    let mut rng = stream_rng(seed, 0);
    let mut total = 0.0;
    for _ in 0..num_pairs {
        let i = rng.gen_range(0..vecs.len());
        let j = loop {
            let j = rng.gen_range(0..vecs.len());
            if j != i {
                break j;
            }
        };
        total += model.head_probability(&rows[i], &rows[j])
            + model.head_probability(&rows[j], &rows[i]);
    }
    Ok(total / num_pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::encode;
    use crate::predictor::model::PredictorConfig;
    use crate::search_space::sample_configuration;

    fn tiny_config() -> PredictorConfig {
        PredictorConfig {
            d_model: 16,
            num_layers: 1,
            num_heads: 1,
            d_ff: 32,
            head_hidden: 16,
            ..PredictorConfig::default()
        }
    }

    fn scored_records(count: usize, seed: u64, train_fraction: f64) -> TrainedRecordSet {
        let n_train = (count as f64 * train_fraction).round() as usize;
        (0..count)
            .map(|i| {
                let config = sample_configuration(&mut stream_rng(seed, i as u64));
                let encoded = encode(&config).unwrap();
                let dice = crate::train_eval::surrogate_evaluate(
                    &config,
                    &crate::train_eval::SurrogateParams::default(),
                )
                .unwrap()
                .dice;
                ScoredRecord {
                    config,
                    encoded,
                    score: EvalScore {
                        dice,
                        iterations_used: 0,
                        diverged: false,
                    },
                    split: if i < n_train { SplitTag::Train } else { SplitTag::Val },
                }
            })
            .collect()
    }

    #[test]
    fn gt_follows_the_at_least_rule() {
        assert_eq!(make_gt(0.76, 0.74), 1);
        assert_eq!(make_gt(0.74, 0.76), 0);
        assert_eq!(make_gt(0.5, 0.5), 1);
        let mut rng = stream_rng(0, 0);
        for _ in 0..200 {
            let (a, b) = (rng.gen::<f64>(), rng.gen::<f64>());
            if a != b {
                assert_eq!(make_gt(a, b) ^ make_gt(b, a), 1);
            }
            assert!(make_gt(a, b) == 1 || make_gt(b, a) == 1);
        }
    }

    #[test]
    fn twenty_records_give_four_hundred_pairs() {
        let records = scored_records(20, 1, 1.0);
        let pairs = build_pair_dataset(&records, SplitTag::Train).unwrap();
        assert_eq!(pairs.len(), 400);
        // Diagonal pairs all carry gt=1.
        for (i, r) in records.iter().enumerate() {
            let diag = &pairs[i * 20 + i];
            assert_eq!(diag.v_i, r.encoded);
            assert_eq!(diag.v_j, r.encoded);
            assert_eq!(diag.gt, 1);
        }
        // Off-diagonal labels balance exactly when scores are distinct.
        let scores: Vec<f64> = records.iter().map(|r| r.score.dice).collect();
        let distinct = scores
            .iter()
            .enumerate()
            .all(|(i, a)| scores.iter().skip(i + 1).all(|b| a != b));
        assert!(distinct, "surrogate scores should be distinct");
        let wins: usize = pairs.iter().map(|p| p.gt as usize).sum();
        assert_eq!(wins, 20 + 190);
        // Deterministic order.
        assert_eq!(pairs, build_pair_dataset(&records, SplitTag::Train).unwrap());
    }

    #[test]
    fn single_record_gives_the_diagonal_pair() {
        let records = scored_records(1, 2, 1.0);
        let pairs = build_pair_dataset(&records, SplitTag::Train).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].gt, 1);
        assert!(matches!(
            build_pair_dataset(&records, SplitTag::Val),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn split_tags_partition_the_records() {
        let records = scored_records(8, 3, 0.75);
        assert_eq!(build_pair_dataset(&records, SplitTag::Train).unwrap().len(), 36);
        assert_eq!(build_pair_dataset(&records, SplitTag::Val).unwrap().len(), 4);
        assert_eq!(regression_examples(&records, SplitTag::Train).unwrap().len(), 6);
        assert_eq!(regression_examples(&records, SplitTag::Val).unwrap().len(), 2);
    }

    #[test]
    fn diagonal_only_training_saturates_the_relation_predictor() {
        let records = scored_records(6, 4, 1.0);
        let pairs: Vec<PairExample> = build_pair_dataset(&records, SplitTag::Train)
            .unwrap()
            .into_iter()
            .filter(|p| p.v_i == p.v_j)
            .collect();
        assert_eq!(pairs.len(), 6);
        let mut model = RelationPredictor::new(tiny_config(), &mut stream_rng(4, 1)).unwrap();
        let hyper = TrainHyper {
            iterations: 250,
            batch_size: 6,
            ..TrainHyper::default()
        };
        train_relation_predictor(&mut model, &pairs, &hyper).unwrap();
        for p in &pairs {
            assert!(model.predict_relation(&p.v_i, &p.v_j).unwrap() >= 0.99);
        }
    }

    #[test]
    fn diagonal_only_training_saturates_the_mlp() {
        let records = scored_records(6, 5, 1.0);
        let pairs: Vec<PairExample> = build_pair_dataset(&records, SplitTag::Train)
            .unwrap()
            .into_iter()
            .filter(|p| p.v_i == p.v_j)
            .collect();
        let mut model = MlpBaseline::new(Default::default(), &mut stream_rng(5, 1)).unwrap();
        let hyper = TrainHyper {
            iterations: 400,
            batch_size: 6,
            ..TrainHyper::default()
        };
        train_mlp_baseline(&mut model, &pairs, &hyper).unwrap();
        for p in &pairs {
            assert!(model.predict_relation(&p.v_i, &p.v_j).unwrap() >= 0.99);
        }
    }

    #[test]
    fn relation_training_reduces_the_loss() {
        let records = scored_records(12, 6, 1.0);
        let pairs = build_pair_dataset(&records, SplitTag::Train).unwrap();
        let mut model = RelationPredictor::new(tiny_config(), &mut stream_rng(6, 1)).unwrap();
        let hyper = TrainHyper {
            iterations: 120,
            batch_size: 16,
            ..TrainHyper::default()
        };
        let report = train_relation_predictor(&mut model, &pairs, &hyper).unwrap();
        assert_eq!(report.losses.len(), 120);
        let head: f64 = report.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = report.losses[110..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let records = scored_records(8, 7, 1.0);
        let pairs = build_pair_dataset(&records, SplitTag::Train).unwrap();
        let hyper = TrainHyper {
            iterations: 40,
            batch_size: 8,
            ..TrainHyper::default()
        };
        let run = || {
            let mut model = RelationPredictor::new(tiny_config(), &mut stream_rng(7, 1)).unwrap();
            let report = train_relation_predictor(&mut model, &pairs, &hyper).unwrap();
            let p = model
                .predict_relation(&pairs[1].v_i, &pairs[1].v_j)
                .unwrap();
            (report.losses, p)
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn constant_scores_pin_the_regressor_output() {
        let examples: Vec<(EncodedConfig, f64)> = (0..8)
            .map(|i| {
                let config = sample_configuration(&mut stream_rng(8, i));
                (encode(&config).unwrap(), 0.42)
            })
            .collect();
        let mut model = AccuracyRegressor::new(tiny_config(), &mut stream_rng(8, 100)).unwrap();
        let hyper = TrainHyper {
            iterations: 400,
            batch_size: 8,
            ..TrainHyper::default()
        };
        train_accuracy_regressor(&mut model, &examples, &hyper).unwrap();
        for (v, _) in &examples {
            let s = model.predict_accuracy(v).unwrap();
            assert!((s - 0.42).abs() <= 0.01, "prediction {s}");
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let records = scored_records(2, 9, 1.0);
        let pair = PairExample {
            v_i: records[0].encoded.clone(),
            v_j: records[1].encoded.clone(),
            gt: 1,
        };
        let model = RelationPredictor::new(tiny_config(), &mut stream_rng(9, 1)).unwrap();
        let report = gradient_check(&model, &pair, 1e-5, 4, 0).unwrap();
        assert!(report.checked > 0);
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn absent_tokens_get_exactly_zero_embedding_gradient() {
        let records = scored_records(2, 10, 1.0);
        let pair = PairExample {
            v_i: records[0].encoded.clone(),
            v_j: records[1].encoded.clone(),
            gt: 0,
        };
        let model = RelationPredictor::new(tiny_config(), &mut stream_rng(10, 1)).unwrap();
        let grads = pair_gradients(&model, &pair).unwrap();
        let embed_grad = &grads[0];

        let mut present = std::collections::HashSet::new();
        for v in [&pair.v_i, &pair.v_j] {
            present.extend(crate::predictor::tokenizer::tokenize(v).unwrap());
        }
        let absent: Vec<usize> = (0..crate::predictor::tokenizer::VOCAB_SIZE)
            .filter(|t| !present.contains(t))
            .collect();
        assert!(!absent.is_empty());
        for t in absent {
            for d in 0..16 {
                assert_eq!(embed_grad[[t, d]], 0.0, "token {t} dim {d}");
            }
        }
        for &t in &present {
            let row_norm: f64 = (0..16).map(|d| embed_grad[[t, d]].abs()).sum();
            assert!(row_norm > 0.0, "present token {t} got no gradient");
        }
    }

    #[test]
    fn pair_swap_consistency_detects_structural_antisymmetry() {
        let vecs: Vec<EncodedConfig> = (0..12)
            .map(|i| encode(&sample_configuration(&mut stream_rng(11, i))).unwrap())
            .collect();

        // The antisymmetric head sums to 1 by construction.
        let anti = PredictorConfig {
            antisymmetric: true,
            ..tiny_config()
        };
        let model = RelationPredictor::new(anti, &mut stream_rng(11, 100)).unwrap();
        let c = pair_swap_consistency(&model, &vecs, 200, 0).unwrap();
        assert!((c - 1.0).abs() < 1e-12, "consistency {c}");

        // The standard head only promises the metric stays a mean of
        // probability sums; zeroing its output layer pins it to 1.
        let mut model = RelationPredictor::new(tiny_config(), &mut stream_rng(11, 101)).unwrap();
        let c = pair_swap_consistency(&model, &vecs, 200, 0).unwrap();
        assert!(c > 0.0 && c < 2.0, "consistency {c}");
        for name in ["head.w2", "head.b2"] {
            let id = model.params.find(name).unwrap();
            model.params.value_mut(id).fill(0.0);
        }
        let c = pair_swap_consistency(&model, &vecs, 200, 0).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn divergence_reports_the_last_finite_loss() {
        let mut params = ParamSet::new();
        params.register("w", crate::nn::zeros(&[2]));
        let hyper = TrainHyper {
            iterations: 10,
            batch_size: 1,
            ..TrainHyper::default()
        };
        let mut calls = 0usize;
        let err = train_loop(&mut params, 4, &hyper, |ps, _| {
            calls += 1;
            let loss = if calls < 3 { 0.5 + calls as f64 } else { f64::NAN };
            Ok((loss, vec![ArrayD::zeros(ps.values()[0].raw_dim())]))
        })
        .unwrap_err();
        match err {
            Error::Divergence { last_finite_loss } => assert_eq!(last_finite_loss, 2.5),
            other => panic!("expected divergence, got {other:?}"),
        }

        // A NaN gradient surfaces the same way.
        let mut params = ParamSet::new();
        params.register("w", crate::nn::zeros(&[2]));
        let err = train_loop(&mut params, 4, &hyper, |_, _| {
            Err(Error::NanGradient { role: "w".into() })
        })
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn empty_pair_sets_are_rejected() {
        let mut model = RelationPredictor::new(tiny_config(), &mut stream_rng(12, 1)).unwrap();
        assert!(matches!(
            train_relation_predictor(&mut model, &[], &TrainHyper::default()),
            Err(Error::EmptySplit(_))
        ));
    }
}
