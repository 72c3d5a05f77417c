//! Orchestration: configuration, training, inference, and evaluation runs.

pub mod config;
pub mod evaluate;
pub mod infer;
pub mod train;

pub use config::{RunConfig, CACHE_DIR_ENV};
pub use evaluate::{run_eval, EvalReport};
pub use infer::{export_maps, resolve_prompt_state, run_infer, InferRun};
pub use train::{run_train, run_train_with_backbone, TrainOutcome};
