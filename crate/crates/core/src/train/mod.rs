//! Optimisation, evaluation, checkpoints and experiment harnesses.

mod checkpoint;
mod diagnostics;
mod eval;
mod experiments;
mod fit;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use diagnostics::{gradcheck_suite, tiny_config, GradCheckCase, GRADCHECK_CASES};
pub use eval::{evaluate, EvalReport};
pub use experiments::{
    median, run_ablation, sweep_answer_dim, train_and_report, write_sweep, AblationMedian,
    AblationRun, AblationTable, SweepRow, TrendCheck, ABLATION_GRID,
};
pub use fit::{train, write_history, EpochRecord, TrainConfig, TrainOutcome, HISTORY_HEADER};
pub use optim::{adam_step, AdamConfig, TrainState};

pub mod checkpoint_format {
    pub use super::checkpoint::{MAGIC, VERSION};
}
