//! Training stages, evaluation runs and checkpoints.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod history;
pub mod pretrain;
pub mod reconstruct;

pub use ablation::{default_grid, run_ablation, AblationCell, AblationRow, AblationTable, GridEntry};
pub use checkpoint::{CheckpointBundle, Stage};
pub use config::{PretrainConfig, RunConfig, SeedConfig, EVAL_SEEDS, MMR_SEED, PRETRAIN_SEED};
pub use evaluate::{embed_samples, evaluate_retrieval, evaluate_zero_shot, retrieval_scores};
pub use history::LossHistory;
pub use pretrain::pretrain;
pub use reconstruct::{evaluate_mmr, train_mmr};
