//! Dice loss and metric, Adam, and the training loop.

mod adam;
mod dice;
mod trainer;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use dice::{dice_coefficient, dice_loss, dice_similarity, DiceLossCfg};
pub use trainer::{evaluate, fit, predict_masks, train_epoch, EpochRow, TrainConfig, TrainReport};
