//! Clustered federated learning over Paillier-encrypted uploads.
//!
//! Participants encrypt fixed-point model vectors; a business server blinds
//! and shuffles them; a cloud server decrypts the blinded values, clusters
//! them spectrally, and returns per-cluster sums re-encrypted for the
//! participants. [`harness`] drives whole experiments against a plaintext
//! FedAvg baseline.

pub mod cluster;
pub mod harness;
pub mod he;
pub mod learner;
pub mod masking;
pub mod protocol;
pub mod rng;
pub mod scheduler;

pub use cluster::{AssignmentMatrix, ClusterError, SpectralParams};
pub use harness::{Algorithm, ExperimentConfig, HarnessError, MetricsRecord};
pub use he::{Ciphertext, EncodedVector, HeError, PrivateKey, PublicKey};
pub use learner::{DatasetShard, DeviceProfile, LearnerError, MlpModel, PartitionConfig};
pub use masking::{BlindingMask, MaskingError, Permutation};
pub use protocol::{ProtocolConfig, ProtocolError};
pub use rng::SeedTree;
pub use scheduler::{DecaySchedule, ScheduleError};
