//! Training, evaluation, ablation, sweeps and checkpoints.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod train;

pub use ablate::{ablate, ablate_variants, AblationCell, AblationResult, AblationRow, Summary, DEFAULT_SEEDS};
pub use checkpoint::{load_checkpoint, load_params_into, save_checkpoint};
pub use config::{FileConfig, ModelConfig, OptimizerConfig, Variant};
pub use eval::{evaluate, knowledge_relevance, rejection_rate, Confusion, EvalReport, Outcome, SampleRecord};
pub use model::{Model, Prediction};
pub use optim::Adam;
pub use sweep::{sweep, sweep_table, SweepCell, SweepGrid};
pub use train::{smooth, train, StepRecord};
