//! Label assignment, losses, optimizer, training loop and detection metrics.

mod assign;
mod eval;
mod gradcheck;
mod loss;
mod optim;
mod trainer;

pub use assign::{assign_targets, duration_band, level_for_duration, LevelTargets};
pub use eval::{average_precision, evaluate, match_class, threshold_key, EvalResult, DEFAULT_THRESHOLDS};
pub use gradcheck::{gradcheck_model, GradcheckReport, GradcheckSpec};
pub use loss::{accumulate_terms, detection_loss, finish_loss, LossOutput, LossTerms};
pub use optim::{clip_grad_norm, Sgd};
pub use trainer::{detect, evaluate_model, train, EpochStats, TrainConfig, TrainOutcome, TrainReport};
