//! Optimization, the training loop, and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod fit;

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use checkpoint::{load_checkpoint, read_model_checkpoint, save_checkpoint, write_model_checkpoint};
pub use fit::{epoch_rng, fit, fit_with, reinit_label_pathway, two_stage_fit, HistoryRow, Stage, TrainConfig, TrainHistory, TrainState};
