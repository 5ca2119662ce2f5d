//! Local learning: an MLP trained by mini-batch SGD, datasets, and the
//! heterogeneity model used to split data and work across clients.

mod data;
mod model;
mod partition;

pub use data::{
    blob_center, load_idx, parse_idx, synth_blobs, to_idx, DatasetShard, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
pub use model::{
    evaluate, evaluate_by_class, fedavg_aggregate, forward_loss, gradient, local_step_count, local_train, mean_vector,
    param_count, sgd_step, softmax, ClassEvaluation, Evaluation, Layer, MlpModel,
};
pub use partition::{
    dirichlet_partition, epochs_for, largest_remainder, sample_device_profiles, sample_dirichlet,
    DeviceProfile, PartitionConfig,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnerError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("invalid layer sizes {0:?}")]
    InvalidDims(Vec<usize>),
    #[error("models have different architectures")]
    ArchitectureMismatch,
    #[error("invalid learning rate {0}")]
    InvalidRate(f64),
    #[error("{0}")]
    Data(String),
    #[error("IDX format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("I/O error: {0}")]
    Io(String),
}

#[cfg(test)]
mod tests;
