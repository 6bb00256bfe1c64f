//! Training, checkpoints, the corruption evaluation sweep, reports and the
//! command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod report;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{EvalConfig, RunConfig, TrainConfig};
pub use eval::{eval_matrix, evaluate_condition, standard_matrix, ConditionEval, MatrixOutput};
pub use gradcheck::gradcheck_full;
pub use report::{emit_report, ReportFormat};
pub use train::{train, EpochLog};
