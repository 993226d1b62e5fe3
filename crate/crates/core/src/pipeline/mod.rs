//! Training loop, checkpoints, self-refinement and the ablation harness.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod refine;
pub mod train;

pub use ablation::{results_csv, run_ablation, run_rows, AblationResult, AblationRow, ExperimentConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::{load_config_file, AblationFlags, LrDecay, TrainConfig, SEED_ENV};
pub use optim::{AdamW, AdamWConfig};
pub use refine::{refine_mask, self_refine, Split, REFINE_IOU_TRIGGER};
pub use train::{loss_log_csv, train, StepLog, TrainOutcome};
