//! The two-stage detector: whole-code classification followed, for programs
//! judged vulnerable, by per-line classification.

pub mod config;
pub mod io;
pub mod model;
pub mod predict;
pub mod train;
pub mod verify;

pub use config::ModelConfig;
pub use io::{load_model, save_model};
pub use model::{encode_line, stage1_forward, stage2_forward, Stage1Model, Stage2Model};
pub use predict::{predict, predictions_to_jsonl, Detector, Prediction, TrainingReport};
pub use train::{train_stage1, train_stage2, TrainingHistory};
pub use verify::{run_gradient_suite, GradSuiteConfig, GradSuiteReport};
