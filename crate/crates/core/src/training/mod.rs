pub mod augment;
pub mod dice;
pub mod optim;
pub mod phantom;
pub mod sampling;
pub mod trainer;

pub use augment::{augment, AugmentConfig};
pub use dice::{dice_loss, dice_loss_grad, dice_loss_labels, DiceError, DICE_EPS};
pub use optim::{AdamW, AdamWConfig};
pub use phantom::{make_phantom, Phantom};
pub use sampling::{draw_offset, foreground_offsets, sample_training_patch};
pub use trainer::{train, TrainConfig, TrainError, TrainState, TrainSummary, TrainingCase, StepRecord};
