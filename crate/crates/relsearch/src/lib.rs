//! Relation-predictor driven search over deep-learning configurations for
//! 3D segmentation.
//!
//! The library samples configurations (network architecture + augmentation
//! plan + training hyperparameters) from a SpineNet-style search space,
//! encodes them as variable-length integer vectors, trains a transformer
//! relation predictor that compares two encoded configurations, and ranks
//! candidate pools by pairwise wins.  Candidate evaluation is pluggable:
//! a deterministic surrogate oracle for instant experiments, or a small
//! trainable 3D segmentation evaluator over synthetic volumes.

pub mod encoding;
pub mod error;
pub mod net_builder;
pub mod nn;
pub mod predictor;
pub mod rng;
pub mod search;
pub mod search_space;
pub mod tape;
pub mod train_eval;

pub use error::Error;

/// Schema version stamped into every JSON artifact this crate writes.
pub const SCHEMA_VERSION: u32 = 1;
