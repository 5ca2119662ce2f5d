//! Experiment runner: builds data, clients and models from a config, runs
//! FedCAP or the plaintext FedAvg baseline, and exports metrics.

mod config;

pub use config::{
    Algorithm, DatasetSpec, ExperimentConfig, ModelSpec, PartitionSpec, ProtocolSpec,
    TrainSpec,
};

pub use crate::protocol::EvaluationMode;

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::learner::{
    dirichlet_partition, evaluate, fedavg_aggregate, load_idx, sample_device_profiles, synth_blobs,
    DatasetShard, DeviceProfile, LearnerError, MlpModel, PartitionConfig,
};
use crate::protocol::{
    personalized_evaluation, select_participants, simulated_round_seconds, train_client, ClientData, Federation,
    ProtocolError, RoundTrace,
};
use crate::rng::SeedTree;
use crate::scheduler::{expected_cluster_count, expected_early_fraction};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration at {path}: {message}")]
    Config { path: String, message: String },
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("round {round}: {source}")]
    Round {
        round: u64,
        #[source]
        source: ProtocolError,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl HarnessError {
    /// Whether the failure is a rejected input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(self, HarnessError::Config { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub clustered: bool,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub cluster_count_so_far: u64,
    /// Simulated round duration; see [`simulated_round_seconds`].
    pub wall_seconds: f64,
}

/// Data, partition, device profiles and initial model derived from a config.
/// Everything here comes from named seed streams, so experiment arms that
/// share a seed share these bit for bit.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub seeds: SeedTree,
    pub dims: Vec<usize>,
    pub clients: Vec<ClientData>,
    pub partition: Vec<Vec<usize>>,
    pub test: DatasetShard,
    pub initial: MlpModel,
}

fn load_datasets(config: &ExperimentConfig, seeds: &SeedTree) -> Result<(DatasetShard, DatasetShard), HarnessError> {
    match &config.dataset {
        DatasetSpec::Synthetic { num_classes, dim, train_per_class, test_per_class, separation, sigma } => {
            let train = synth_blobs(
                *num_classes,
                *train_per_class,
                *dim,
                *separation,
                *sigma,
                &mut seeds.stream("data-train"),
            )?;
            let test = synth_blobs(
                *num_classes,
                *test_per_class,
                *dim,
                *separation,
                *sigma,
                &mut seeds.stream("data-test"),
            )?;
            Ok((train, test))
        }
        DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
            Ok((load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?))
        }
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<ExperimentSetup, HarnessError> {
    config.validate()?;
    let seeds = SeedTree::new(config.seed);
    let (train, test) = load_datasets(config, &seeds)?;
    let classes = train.num_classes().max(test.num_classes());
    let partition_config = PartitionConfig {
        beta: config.partition.beta,
        n_clients: config.n_clients,
        samples_per_client: config.partition.samples_per_client,
    };
    let partition =
        dirichlet_partition(train.labels(), classes, &partition_config, &mut seeds.stream("partition"))?;
    let profiles: Vec<DeviceProfile> = sample_device_profiles(
        config.n_clients,
        config.train.max_epochs,
        config.train.batch_size,
        config.train.learning_rate,
        &mut seeds.stream("devices"),
    )?;
    let clients = partition
        .iter()
        .zip(profiles)
        .map(|(indices, profile)| ClientData { shard: train.subset(indices), profile })
        .collect();
    let mut dims = vec![train.dim()];
    dims.extend(&config.model.hidden);
    dims.push(classes);
    let initial = MlpModel::init(&dims, &mut seeds.stream("init"))?;
    Ok(ExperimentSetup { seeds, dims, clients, partition, test, initial })
}

/// Per-round metrics plus, for FedCAP, the protocol trace of each round.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub metrics: Vec<MetricsRecord>,
    pub traces: Vec<RoundTrace>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsRecord>, HarnessError> {
    Ok(run_experiment_traced(config)?.metrics)
}

pub fn run_experiment_traced(config: &ExperimentConfig) -> Result<ExperimentRun, HarnessError> {
    let setup = prepare(config)?;
    match config.algorithm {
        Algorithm::Fedcap => run_fedcap(config, setup),
        Algorithm::Fedavg => run_fedavg(config, setup),
    }
}

fn run_fedcap(config: &ExperimentConfig, setup: ExperimentSetup) -> Result<ExperimentRun, HarnessError> {
    let mut federation = Federation::setup(
        &config.protocol_config(),
        setup.clients,
        &setup.initial,
        setup.test,
        setup.seeds,
    )?
    .with_evaluation(config.evaluation);
    let mut metrics = Vec::with_capacity(config.rounds as usize);
    let mut traces = Vec::with_capacity(config.rounds as usize);
    let mut clusters = 0;
    for round in 1..=config.rounds {
        let (m, trace) = federation.run_round(round).map_err(|source| HarnessError::Round { round, source })?;
        clusters += u64::from(m.clustered);
        info!("fedcap round {round}: accuracy {:.4} clustered {}", m.test_accuracy, m.clustered);
        metrics.push(MetricsRecord {
            round,
            test_accuracy: m.test_accuracy,
            test_loss: m.test_loss,
            clustered: m.clustered,
            bytes_up: m.bytes_up,
            bytes_down: m.bytes_down,
            cluster_count_so_far: clusters,
            wall_seconds: m.simulated_seconds,
        });
        traces.push(trace);
    }
    Ok(ExperimentRun { metrics, traces })
}

/// Plaintext FedAvg: every selected client trains from the global model,
/// which is then replaced by the sample-weighted average.
fn run_fedavg(config: &ExperimentConfig, setup: ExperimentSetup) -> Result<ExperimentRun, HarnessError> {
    let mut global = setup.initial.clone();
    let param_bytes = global.param_count() * std::mem::size_of::<f64>();
    let mut metrics = Vec::with_capacity(config.rounds as usize);
    for round in 1..=config.rounds {
        let selected = select_participants(
            setup.clients.len(),
            config.protocol.participation_fraction,
            round,
            &setup.seeds,
        );
        let mut locals = Vec::with_capacity(selected.len());
        let mut counts = Vec::with_capacity(selected.len());
        for &pid in &selected {
            let client = &setup.clients[pid];
            locals.push(train_client(&global, client, round, pid, &setup.seeds)?);
            counts.push(client.shard.len());
        }
        global = fedavg_aggregate(&locals, &counts)?;
        let eval = match config.evaluation {
            EvaluationMode::GlobalMean => evaluate(&global, &setup.test)?,
            EvaluationMode::Personalized => {
                personalized_evaluation(&vec![&global; setup.clients.len()], &setup.clients, &setup.test)?
            }
        };
        info!("fedavg round {round}: accuracy {:.4}", eval.accuracy);
        metrics.push(MetricsRecord {
            round,
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            clustered: false,
            bytes_up: selected.len() * param_bytes,
            bytes_down: selected.len() * param_bytes,
            cluster_count_so_far: 0,
            wall_seconds: simulated_round_seconds(&setup.clients, &selected, param_bytes),
        });
    }
    Ok(ExperimentRun { metrics, traces: Vec::new() })
}

/// First round whose accuracy reaches `target`.
pub fn rounds_to_target(metrics: &[MetricsRecord], target: f64) -> Option<u64> {
    metrics.iter().find(|m| m.test_accuracy >= target).map(|m| m.round)
}

pub const CSV_HEADER: &str =
    "round,test_accuracy,test_loss,clustered,bytes_up,bytes_down,cluster_count_so_far,wall_seconds";

pub fn metrics_csv(metrics: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.round,
            m.test_accuracy,
            m.test_loss,
            m.clustered,
            m.bytes_up,
            m.bytes_down,
            m.cluster_count_so_far,
            m.wall_seconds
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: u64,
    pub target_accuracy: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub rounds_to_target: Option<u64>,
    pub total_cluster_count: u64,
    pub total_bytes_up: usize,
    pub total_bytes_down: usize,
}

pub fn summarize(config: &ExperimentConfig, metrics: &[MetricsRecord]) -> RunSummary {
    RunSummary {
        algorithm: config.algorithm,
        seed: config.seed,
        rounds: metrics.len() as u64,
        target_accuracy: config.target_accuracy,
        final_accuracy: metrics.last().map_or(0.0, |m| m.test_accuracy),
        best_accuracy: metrics.iter().map(|m| m.test_accuracy).fold(0.0, f64::max),
        rounds_to_target: rounds_to_target(metrics, config.target_accuracy),
        total_cluster_count: metrics.last().map_or(0, |m| m.cluster_count_so_far),
        total_bytes_up: metrics.iter().map(|m| m.bytes_up).sum(),
        total_bytes_down: metrics.iter().map(|m| m.bytes_down).sum(),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn export(
    config: &ExperimentConfig,
    metrics: &[MetricsRecord],
    dir: &Path,
) -> Result<RunSummary, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let summary = summarize(config, metrics);
    write(&dir.join("metrics.csv"), &metrics_csv(metrics))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&dir.join("summary.json"), &(json + "\n"))?;
    Ok(summary)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[mid] } else { 0.5 * (values[mid - 1] + values[mid]) })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareArm {
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub final_accuracies: Vec<f64>,
    pub rounds_to_target: Vec<Option<u64>>,
    pub median_final_accuracy: f64,
    pub mean_final_accuracy: f64,
    /// Median over seeds, unreached runs counted as `rounds + 1`; `None` if
    /// the median run never reached the target.
    pub median_rounds_to_target: Option<f64>,
    pub mean_rounds_to_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub target_accuracy: f64,
    pub rounds: u64,
    pub arms: Vec<CompareArm>,
}

/// Runs every algorithm on every seed (the config seed plus the next ones).
pub fn compare(
    base: &ExperimentConfig,
    algorithms: &[Algorithm],
    seed_count: u64,
) -> Result<CompareReport, HarnessError> {
    base.validate()?;
    let seeds: Vec<u64> = (0..seed_count).map(|i| base.seed + i).collect();
    let mut arms = Vec::with_capacity(algorithms.len());
    for &algorithm in algorithms {
        let mut finals = Vec::new();
        let mut reached = Vec::new();
        for &seed in &seeds {
            let config = ExperimentConfig { seed, algorithm, ..base.clone() };
            let metrics = run_experiment(&config)?;
            finals.push(metrics.last().map_or(0.0, |m| m.test_accuracy));
            reached.push(rounds_to_target(&metrics, base.target_accuracy));
        }
        let censored = base.rounds as f64 + 1.0;
        let mut as_numbers: Vec<f64> = reached.iter().map(|r| r.map_or(censored, |v| v as f64)).collect();
        let median_rounds = median(&mut as_numbers).filter(|&m| m < censored);
        let hits: Vec<f64> = reached.iter().flatten().map(|&r| r as f64).collect();
        arms.push(CompareArm {
            algorithm,
            seeds: seeds.clone(),
            median_final_accuracy: median(&mut finals.clone()).unwrap_or(0.0),
            mean_final_accuracy: mean(&finals).unwrap_or(0.0),
            final_accuracies: finals,
            rounds_to_target: reached,
            median_rounds_to_target: median_rounds,
            mean_rounds_to_target: if hits.len() == seeds.len() { mean(&hits) } else { None },
        });
    }
    Ok(CompareReport { target_accuracy: base.target_accuracy, rounds: base.rounds, arms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfdArm {
    pub alpha: f64,
    pub always_cluster: bool,
    pub cluster_count: u64,
    pub expected_cluster_count: f64,
    /// Clustering operations of the always-cluster baseline divided by this arm's.
    pub cost_reduction: f64,
    pub final_accuracy: f64,
    /// Share of this arm's clustering events within the first quarter of rounds.
    pub early_fraction: f64,
    pub expected_early_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfdReport {
    pub rounds: u64,
    pub arms: Vec<DfdArm>,
}

fn dfd_arm(config: &ExperimentConfig, baseline_count: Option<u64>) -> Result<DfdArm, HarnessError> {
    let metrics = run_experiment(config)?;
    let count = metrics.last().map_or(0, |m| m.cluster_count_so_far);
    let early_rounds = (config.rounds / 4).max(1);
    let early = metrics.iter().filter(|m| m.round <= early_rounds && m.clustered).count() as f64;
    let p = &config.protocol;
    let alpha = if p.always_cluster { 0.0 } else { p.alpha };
    Ok(DfdArm {
        alpha: p.alpha,
        always_cluster: p.always_cluster,
        cluster_count: count,
        expected_cluster_count: expected_cluster_count(config.rounds, alpha),
        cost_reduction: baseline_count.unwrap_or(count) as f64 / count.max(1) as f64,
        final_accuracy: metrics.last().map_or(0.0, |m| m.test_accuracy),
        early_fraction: early / count.max(1) as f64,
        expected_early_fraction: expected_early_fraction(config.rounds, early_rounds, alpha),
    })
}

/// One FedCAP run per α plus an always-cluster baseline; arms share data,
/// partition, initial model and every random stream.
pub fn ablate_dfd(base: &ExperimentConfig, alphas: &[f64]) -> Result<DfdReport, HarnessError> {
    let base = ExperimentConfig { algorithm: Algorithm::Fedcap, ..base.clone() };
    base.validate()?;
    for (i, &a) in alphas.iter().enumerate() {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(HarnessError::Config { path: format!("/alphas/{i}"), message: format!("invalid alpha {a}") });
        }
    }
    let always =
        ExperimentConfig { protocol: ProtocolSpec { always_cluster: true, ..base.protocol }, ..base.clone() };
    let baseline = dfd_arm(&always, None)?;
    let mut arms = vec![baseline.clone()];
    for &alpha in alphas {
        let config = ExperimentConfig {
            protocol: ProtocolSpec { alpha, always_cluster: false, ..base.protocol },
            ..base.clone()
        };
        arms.push(dfd_arm(&config, Some(baseline.cluster_count))?);
    }
    Ok(DfdReport { rounds: base.rounds, arms })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArm {
    pub num_clusters: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub rounds_to_target: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub rounds: u64,
    pub arms: Vec<ClusterArm>,
}

/// One FedCAP run per cluster count, all other settings and seeds shared.
pub fn ablate_clusters(base: &ExperimentConfig, cs: &[usize]) -> Result<ClusterReport, HarnessError> {
    let base = ExperimentConfig { algorithm: Algorithm::Fedcap, ..base.clone() };
    for (i, &c) in cs.iter().enumerate() {
        if c == 0 || c > base.n_clients {
            return Err(HarnessError::Config {
                path: format!("/cs/{i}"),
                message: format!("cluster count {c} outside [1, {}]", base.n_clients),
            });
        }
    }
    let mut arms = Vec::with_capacity(cs.len());
    for &c in cs {
        let config = ExperimentConfig { protocol: ProtocolSpec { num_clusters: c, ..base.protocol }, ..base.clone() };
        config.validate()?;
        let metrics = run_experiment(&config)?;
        let summary = summarize(&config, &metrics);
        arms.push(ClusterArm {
            num_clusters: c,
            final_accuracy: summary.final_accuracy,
            best_accuracy: summary.best_accuracy,
            rounds_to_target: summary.rounds_to_target,
        });
    }
    Ok(ClusterReport { rounds: base.rounds, arms })
}
