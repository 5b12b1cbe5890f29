//! Mixed-sequence assembly, teacher-forced training, greedy generation,
//! evaluation and the ablation grids.

mod ablation;
mod evaluate;
mod generate;
mod sequence;
mod train;

pub use ablation::{
    plan, read_csv, run_ablation, run_ablation_with, train_model, write_csv, AblationRow, AblationSetup, Suite,
    TrainingCell, CSV_COLUMNS,
};
pub use evaluate::{evaluate, evaluate_with, reconstruction_rate, reconstructs, score, Evaluation};
pub use generate::{argmax, generate, next_logits, prepare_prefix, GenerationResult, PreparedPrefix, Termination};
pub use sequence::{assemble, masked_loss, text_targets, Layout, MixedSequence, Segment};
pub use train::{
    batch_loss_and_grads, fit, prepare_text, record_loss, train_step, TrainConfig, TrainReport,
};
