//! Relation predictors over encoded configurations.
//!
//! The main model is a transformer encoder shared across both members
//! of a pair, pooled to fixed-size embeddings and scored by a small
//! head as p(a_i >= a_j).  Two ablation baselines live alongside it: an
//! MLP over padded raw vectors and an accuracy regressor that predicts
//! scores directly.

pub mod model;
pub mod tokenizer;
pub mod train;

pub use model::{
    positional_encoding, sidecar_path, AccuracyRegressor, MlpBaseline, MlpConfig,
    PredictorConfig, RelationPredictor, MLP_TAG, REGRESSOR_TAG, RELATION_TAG,
};
pub use tokenizer::{tokenize, PAD_TOKEN, VOCAB_SIZE};
pub use train::{
    build_pair_dataset, gradient_check, make_gt, pair_swap_consistency, regression_examples,
    train_accuracy_regressor, train_mlp_baseline, train_relation_predictor, PairExample,
    ScoredRecord, SplitTag, TrainHyper, TrainReport, TrainedRecordSet, DESK_SCALE_ITERATIONS,
};
