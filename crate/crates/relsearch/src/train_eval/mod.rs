//! Searchable training ingredients and the two configuration
//! evaluators.
//!
//! Losses, optimizers, schedulers, and augmentations mirror the
//! hyperparameter index maps of the search space.  Evaluation comes in
//! two flavors: a closed-form surrogate oracle whose true ranking is
//! exactly computable, and a toy evaluator that really builds and
//! trains the network on synthetic volumes.

pub mod augment;
pub mod evaluate;
pub mod losses;
pub mod optim;
pub mod synth;

pub use augment::apply_augmentations;
pub use evaluate::{
    all_background_dice, argmax_channels, foreground_dice, surrogate_evaluate, toy_train_evaluate,
    EvalScore, SurrogateParams, ToyTrainOptions,
};
pub use losses::{combined_loss, combined_loss_on_tape, one_hot, LossKind};
pub use optim::{lr_at, Optimizer, OptimizerKind, SchedulerKind};
pub use synth::{
    load_dataset, make_synthetic_dataset, save_dataset, SyntheticDataset, SyntheticVolume,
};
