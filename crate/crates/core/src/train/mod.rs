//! Loss, optimizer, the training loop and evaluation.

pub mod eval;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use eval::{evaluate_instance, evaluate_semantic, predict_labels};
pub use loss::{dice_ce_terms, LossCfg, LossTerms};
pub use optim::{sgd_step, OptimCfg, SgdState};
pub use trainer::{train, train_observed, StepRecord, TrainCfg, TrainOutcome};
