//! Compound loss, optimiser, learning-rate schedule and the training loop.

mod checkpoint;
mod fit;
mod loss;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fit::{
    compute_gradients, dataset_norm_stats, fit, write_history_csv, Dataset, EpochRecord, FitOutcome, Sample,
    TrainConfig, Trainer, TrainerState,
};
pub use loss::{ce_loss, loss_and_grad, total_loss, LambdaSchedule, LossConfig, LossParts};
pub use optim::{adam_step, cosine_lr, AdamHyper, AdamState};
