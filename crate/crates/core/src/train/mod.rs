//! Training, evaluation, metrics and prefix sweeps.

mod linear;
mod metrics;
mod split;
mod sweep;
mod trainer;

use thiserror::Error;

pub use linear::LinearClassifier;
pub use metrics::{compute_metrics, Metrics};
pub use split::{stratified_split, Split};
pub use sweep::{sweep, SweepResult, SweepRow};
pub use trainer::{
    class_list, class_weights, evaluate, predict_all, run_experiment, train, weighted_loss,
    write_history, EpochRecord, Experiment, PreparedData, TrainConfig, TrainOutcome,
};

use crate::earliness::EarlinessError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Earliness(#[from] EarlinessError),
    #[error("class {0:?} has no samples in the training split")]
    ClassMissing(String),
    #[error("label {0:?} is not in the class list")]
    UnknownLabel(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
