//! Gradient engine, optimizer, datasets, and the training loop.

pub mod adam;
pub mod dataset;
pub mod model;
pub mod tape;
pub mod trainer;

use thiserror::Error;

pub use adam::Adam;
pub use dataset::{generate_expert_dataset, split_sizes, Dataset, Sample, Split};
pub use model::{imitation_loss, penalty_gradient, prepare_sample, window_gradient, PreparedSample};
pub use tape::{NodeId, Tape, TapeError};
pub use trainer::{
    dagger_round, init_network, relabeled_rollout, train, EpochRecord, TrainConfig, TrainOutcome,
    TrainReport,
};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("shape mismatch: optimizer holds {expected} parameters, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Flocking(#[from] crate::flocking::FlockingError),
    #[error(transparent)]
    Network(#[from] crate::ggnn::GgnnError),
    #[error(transparent)]
    Stability(#[from] crate::stability::StabilityError),
}
