//! Dice loss, Adam, the plateau schedule, checkpoints and the epoch loop.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod plateau;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointRecord};
pub use loss::{dice_loss, dice_value, DEFAULT_SMOOTH};
pub use plateau::PlateauState;
pub use trainer::{train, validation_loss, EpochRecord, History, TrainConfig, TrainOutcome};
