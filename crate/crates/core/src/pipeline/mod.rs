//! Configuration, training, online inference, evaluation, ablation and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod infer;
pub mod optim;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::losses::LossBreakdown;

pub use checkpoint::Checkpoint;
pub use config::{Arm, LrSchedule, OptimizerKind, RunConfig};
pub use evaluate::{ablate, evaluate, AblationRow, AblationTable, Evaluation, Proposer};
pub use infer::{infer, BoxSource, FrameResult, OnlineSession};
pub use train::{restore, train, TrainOptions, TrainOutcome};

/// One optimizer step as written to the loss log. Contains no timing so
/// repeated runs produce identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub video: String,
    pub anchor: usize,
    pub negative: Option<usize>,
    pub window_start: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub grad_norm: f64,
}
