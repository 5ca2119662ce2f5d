//! Experiment configuration: strict JSON schema, defaults and range checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::protocol::{EvaluationMode, ProtocolConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Fedcap,
    Fedavg,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Fedcap => "fedcap",
            Algorithm::Fedavg => "fedavg",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "fedcap" => Ok(Algorithm::Fedcap),
            "fedavg" => Ok(Algorithm::Fedavg),
            other => Err(format!("unknown algorithm {other:?} (expected fedcap or fedavg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "defaults::num_classes")]
        num_classes: usize,
        #[serde(default = "defaults::synthetic_dim")]
        dim: usize,
        #[serde(default = "defaults::train_per_class")]
        train_per_class: usize,
        #[serde(default = "defaults::test_per_class")]
        test_per_class: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
        #[serde(default = "defaults::sigma")]
        sigma: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::samples_per_client")]
    pub samples_per_client: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    #[serde(default = "defaults::key_bits")]
    pub key_bits: u64,
    #[serde(default = "defaults::rho")]
    pub rho: u32,
    #[serde(default = "defaults::num_clusters")]
    pub num_clusters: usize,
    #[serde(default = "defaults::rbf_gamma")]
    pub rbf_gamma: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub always_cluster: bool,
    #[serde(default = "defaults::participation_fraction")]
    pub participation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "defaults::algorithm")]
    pub algorithm: Algorithm,
    pub dataset: DatasetSpec,
    pub n_clients: usize,
    #[serde(default = "defaults::partition")]
    pub partition: PartitionSpec,
    #[serde(default = "defaults::model")]
    pub model: ModelSpec,
    #[serde(default = "defaults::train")]
    pub train: TrainSpec,
    #[serde(default = "defaults::protocol")]
    pub protocol: ProtocolSpec,
    pub rounds: u64,
    #[serde(default = "defaults::target_accuracy")]
    pub target_accuracy: f64,
    #[serde(default)]
    pub evaluation: EvaluationMode,
}

mod defaults {
    use super::*;

    pub fn algorithm() -> Algorithm {
        Algorithm::Fedcap
    }
    pub fn num_classes() -> usize {
        10
    }
    pub fn synthetic_dim() -> usize {
        16
    }
    pub fn train_per_class() -> usize {
        600
    }
    pub fn test_per_class() -> usize {
        100
    }
    pub fn separation() -> f64 {
        1.0
    }
    pub fn sigma() -> f64 {
        1.0
    }
    pub fn beta() -> f64 {
        0.8
    }
    pub fn samples_per_client() -> usize {
        200
    }
    pub fn hidden() -> Vec<usize> {
        vec![200, 100]
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn batch_size() -> usize {
        50
    }
    pub fn max_epochs() -> usize {
        5
    }
    pub fn key_bits() -> u64 {
        512
    }
    pub fn rho() -> u32 {
        crate::he::DEFAULT_RHO
    }
    pub fn num_clusters() -> usize {
        5
    }
    pub fn rbf_gamma() -> f64 {
        0.5
    }
    pub fn participation_fraction() -> f64 {
        1.0
    }
    pub fn alpha() -> f64 {
        0.1
    }
    pub fn target_accuracy() -> f64 {
        0.9
    }
    pub fn partition() -> PartitionSpec {
        PartitionSpec { beta: beta(), samples_per_client: samples_per_client() }
    }
    pub fn model() -> ModelSpec {
        ModelSpec { hidden: hidden() }
    }
    pub fn train() -> TrainSpec {
        TrainSpec { learning_rate: learning_rate(), batch_size: batch_size(), max_epochs: max_epochs() }
    }
    pub fn protocol() -> ProtocolSpec {
        ProtocolSpec {
            key_bits: key_bits(),
            rho: rho(),
            num_clusters: num_clusters(),
            rbf_gamma: rbf_gamma(),
            alpha: alpha(),
            always_cluster: false,
            participation_fraction: participation_fraction(),
        }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config { path: path.to_string(), message: message.into() }
}

fn positive(path: &str, v: f64) -> Result<(), HarnessError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("must be a positive number, got {v}")))
    }
}

fn at_least(path: &str, v: u64, min: u64) -> Result<(), HarnessError> {
    if v >= min {
        Ok(())
    } else {
        Err(invalid(path, format!("must be at least {min}, got {v}")))
    }
}

/// `a.b[2]` → `/a/b/2`.
fn json_pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for segment in path.iter() {
        use serde_path_to_error::Segment;
        match segment {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = json_pointer(e.path());
            HarnessError::Config { path, message: e.into_inner().to_string() }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every range check, reported with the JSON pointer of the offending field.
    pub fn validate(&self) -> Result<(), HarnessError> {
        at_least("/n_clients", self.n_clients as u64, 1)?;
        at_least("/rounds", self.rounds, 1)?;
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(invalid("/target_accuracy", "must lie in [0, 1]"));
        }
        positive("/partition/beta", self.partition.beta)?;
        at_least("/partition/samples_per_client", self.partition.samples_per_client as u64, 1)?;
        for (i, &h) in self.model.hidden.iter().enumerate() {
            at_least(&format!("/model/hidden/{i}"), h as u64, 1)?;
        }
        positive("/train/learning_rate", self.train.learning_rate)?;
        at_least("/train/batch_size", self.train.batch_size as u64, 1)?;
        at_least("/train/max_epochs", self.train.max_epochs as u64, 1)?;

        let p = &self.protocol;
        if !(1..=52).contains(&p.rho) {
            return Err(invalid("/protocol/rho", format!("must lie in [1, 52], got {}", p.rho)));
        }
        at_least("/protocol/key_bits", p.key_bits, u64::from(p.rho) + 32)?;
        at_least("/protocol/num_clusters", p.num_clusters as u64, 1)?;
        if p.num_clusters > self.n_clients {
            return Err(invalid(
                "/protocol/num_clusters",
                format!("{} clusters for {} clients", p.num_clusters, self.n_clients),
            ));
        }
        positive("/protocol/rbf_gamma", p.rbf_gamma)?;
        if !(p.participation_fraction > 0.0 && p.participation_fraction <= 1.0) {
            return Err(invalid("/protocol/participation_fraction", "must lie in (0, 1]"));
        }
        if !(p.alpha >= 0.0 && p.alpha.is_finite()) {
            return Err(invalid("/protocol/alpha", format!("must be nonnegative, got {}", p.alpha)));
        }

        if let DatasetSpec::Synthetic { num_classes, dim, train_per_class, test_per_class, separation, sigma } =
            &self.dataset
        {
            at_least("/dataset/num_classes", *num_classes as u64, 2)?;
            at_least("/dataset/dim", *dim as u64, 1)?;
            at_least("/dataset/test_per_class", *test_per_class as u64, 1)?;
            positive("/dataset/separation", *separation)?;
            if !(*sigma >= 0.0 && sigma.is_finite()) {
                return Err(invalid("/dataset/sigma", "must be nonnegative"));
            }
            let needed = self.n_clients * self.partition.samples_per_client;
            if num_classes * train_per_class < needed {
                return Err(invalid(
                    "/dataset/train_per_class",
                    format!("{num_classes} × {train_per_class} samples cannot cover {needed}"),
                ));
            }
        }
        Ok(())
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            key_bits: self.protocol.key_bits,
            rho: self.protocol.rho,
            num_clusters: self.protocol.num_clusters,
            rbf_gamma: self.protocol.rbf_gamma,
            alpha: self.protocol.alpha,
            always_cluster: self.protocol.always_cluster,
            participation_fraction: self.protocol.participation_fraction,
        }
    }
}
