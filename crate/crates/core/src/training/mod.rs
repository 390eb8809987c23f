//! Losses, optimisation and the two training stages.

pub mod classifier_stage;
pub mod data;
pub mod encoder_stage;
pub mod gradcheck;
pub mod losses;
pub mod optim;

pub use data::Track;
pub use encoder_stage::{train_encoder, EncoderRun, EncoderTrainConfig};
pub use classifier_stage::{auroc, mine_hard_negatives, train_classifier, ClassifierRun, ClassifierTrainConfig};
