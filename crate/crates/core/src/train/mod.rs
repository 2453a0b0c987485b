//! Loss, optimiser, two-stage training and evaluation over clue subsets.

mod adam;
mod config;
mod eval;
mod loss;
mod trainer;

pub use adam::{learning_rate, AdamConfig, AdamState};
pub use config::{default_subset_weights, SubsetSampler, TrainConfig};
pub use eval::{
    attention_csv, evaluate, evaluate_with, Corruption, CorruptionSpec, EvalReport, EvalRow,
    SubsetSummary,
};
pub use loss::{loss, loss_graph, snr_loss, spectral_l1, LossConfig};
pub use trainer::{train, validation_subset, EpochLog, TrainOutcome, Trainer};
