//! Losses, optimizer and the two-stage training loop.

mod adam;
mod loss;
mod trainer;

pub use adam::Adam;
pub use loss::{
    contrastive_loss, discriminator, pairwise_loss, pairwise_term, sample_contrast_negatives, tape_contrastive,
    tape_pairwise, LossBreakdown,
};
pub use trainer::{
    objective, train, train_with, Batch, ContrastBatch, EpochRecord, Stage, StepRecord, TrainOutcome, TrainingLog,
};
