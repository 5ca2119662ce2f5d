//! The three-party round: participants upload encrypted weights, the business
//! server (BS) blinds and shuffles them, the cloud service provider (CSP)
//! clusters and aggregates, and the BS routes unblinded cluster sums back.

mod messages;
mod roles;
pub mod wire;

pub use messages::{
    ClusterDownload, CspOutput, CspRequest, EncryptedClusterSum, GroupingHint, MacKey,
    UploadTuple, MAC_LEN,
};
pub use roles::{
    decode_cluster_sum, BsRoundState, BusinessServer, CloudServer, MembershipCache, Participant,
};

use log::{debug, warn};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::cluster::{AssignmentMatrix, ClusterError, SpectralParams};
use crate::he::{keygen, HeError, PublicKey};
use crate::learner::{
    evaluate, evaluate_by_class, local_step_count, local_train, mean_vector, DatasetShard, DeviceProfile,
    Evaluation, LearnerError, MlpModel,
};
use crate::masking::MaskingError;
use crate::rng::SeedTree;
use crate::scheduler::{DecaySchedule, ScheduleError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("malformed message at byte {offset}: {message}")]
    Wire { offset: usize, message: String },
    #[error("only {valid} of {received} uploads passed verification")]
    TooFewUploads { received: usize, valid: usize },
    #[error("round {round} skips clustering but no grouping hint was supplied")]
    MissingHint { round: u64 },
    #[error("participant {pid} has no cluster membership")]
    EmptyMembership { pid: usize },
    #[error("download MAC check failed for participant {pid}")]
    DownloadMac { pid: usize },
    #[error("invalid protocol configuration: {0}")]
    Config(String),
    #[error("protocol invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Size of the CSP modulus `n_s`.
    pub key_bits: u64,
    pub rho: u32,
    pub num_clusters: usize,
    pub rbf_gamma: f64,
    pub alpha: f64,
    pub always_cluster: bool,
    pub participation_fraction: f64,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let fail = |m: String| Err(ProtocolError::Config(m));
        if self.key_bits < u64::from(self.rho) + 32 {
            return fail(format!("key_bits {} leaves no headroom above rho {}", self.key_bits, self.rho));
        }
        if self.num_clusters == 0 {
            return fail("num_clusters must be at least 1".into());
        }
        if !(self.rbf_gamma > 0.0) || !self.rbf_gamma.is_finite() {
            return fail(format!("rbf_gamma must be positive, got {}", self.rbf_gamma));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return fail(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return fail(format!("participation_fraction must lie in (0, 1], got {}", self.participation_fraction));
        }
        Ok(())
    }
}

/// Size of the shared user modulus `n_u`.
///
/// The BS unblinds under `pk_u` a residue `S − k·μ` with `S, μ < n_s` and
/// `k ≤ n_clients`, so `n_u > 2·n_clients·n_s` keeps the centered lift exact.
pub fn user_key_bits(key_bits: u64, n_clients: usize) -> u64 {
    key_bits + u64::from(usize::BITS - n_clients.leading_zeros()) + 2
}

/// Keys, roles and secure aggregation, independent of how local weights are produced.
#[derive(Debug, Clone)]
pub struct Deployment {
    config: ProtocolConfig,
    seeds: SeedTree,
    pk_s: PublicKey,
    pk_u: PublicKey,
    participants: Vec<Participant>,
    bs: BusinessServer,
    csp: CloudServer,
}

/// Everything that happened in one secure aggregation, including plaintext
/// values that only exist for verification.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub round: u64,
    pub clustered: bool,
    /// PIDs whose uploads were aggregated, ascending.
    pub accepted: Vec<usize>,
    /// Plaintext local weights of each accepted PID, same order.
    pub local_weights: Vec<Vec<f64>>,
    /// PID behind each shuffled batch row.
    pub batch_pids: Vec<usize>,
    /// Grouping used by the CSP, rows in batch order.
    pub grouping: AssignmentMatrix,
    /// Cluster ids of each accepted PID, same order as `accepted`.
    pub memberships: Vec<Vec<usize>>,
    /// BS membership cache as it stood when the round began.
    pub cache_before: Option<MembershipCache>,
    /// Reference model of each accepted PID after the update.
    pub references: Vec<Vec<f64>>,
    /// Ciphertext payload uploaded by participants.
    pub bytes_up: usize,
    /// Ciphertext payload downloaded by participants.
    pub bytes_down: usize,
    /// Serialized size of every message of the round.
    pub message_bytes: usize,
}

impl Deployment {
    /// Key generation and distribution: `(pk_s, sk_s)` to the CSP, one shared
    /// `(pk_u, sk_u)` to the participants, one MAC key per participant shared
    /// with the BS, and the same starting model for everyone.
    pub fn setup(
        config: &ProtocolConfig,
        n_clients: usize,
        initial: &[f64],
        seeds: SeedTree,
    ) -> Result<Self, ProtocolError> {
        config.validate()?;
        if n_clients == 0 {
            return Err(ProtocolError::Config("at least one client is required".into()));
        }
        let (pk_s, sk_s) = keygen(config.key_bits, &mut seeds.stream("kgc-csp"))?;
        let (pk_u, sk_u) =
            keygen(user_key_bits(config.key_bits, n_clients), &mut seeds.stream("kgc-user"))?;
        let mut mac_rng = seeds.stream("kgc-mac");
        let mac_keys: Vec<MacKey> = (0..n_clients).map(|_| MacKey::generate(&mut mac_rng)).collect();
        let participants = mac_keys
            .iter()
            .enumerate()
            .map(|(pid, key)| {
                Participant::new(pid, pk_s.clone(), sk_u.clone(), key.clone(), config.rho, initial.to_vec())
            })
            .collect();
        let bs = BusinessServer::new(pk_s.clone(), pk_u.clone(), mac_keys);
        let schedule = DecaySchedule::new(config.alpha, config.always_cluster, seeds.stream("dfd"))?;
        let params = SpectralParams::new(config.num_clusters, config.rbf_gamma);
        let csp = CloudServer::new(sk_s, pk_u.clone(), config.rho, params, schedule);
        Ok(Self { config: *config, seeds, pk_s, pk_u, participants, bs, csp })
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn pk_s(&self) -> &PublicKey {
        &self.pk_s
    }

    pub fn pk_u(&self) -> &PublicKey {
        &self.pk_u
    }

    pub fn participants(&self) -> &[Participant] {
        &self.participants
    }

    pub fn participants_mut(&mut self) -> &mut [Participant] {
        &mut self.participants
    }

    pub fn bs(&self) -> &BusinessServer {
        &self.bs
    }

    pub fn csp(&self) -> &CloudServer {
        &self.csp
    }

    /// Roles for driving the message flow by hand.
    pub fn roles_mut(&mut self) -> (&mut [Participant], &mut BusinessServer, &mut CloudServer) {
        (&mut self.participants, &mut self.bs, &mut self.csp)
    }

    /// Runs upload → anonymize → CSP → distribute → update for the given
    /// `(pid, local weights)` pairs.
    pub fn secure_aggregate(
        &mut self,
        round: u64,
        locals: &[(usize, Vec<f64>)],
    ) -> Result<RoundTrace, ProtocolError> {
        let mut uploads = Vec::with_capacity(locals.len());
        let mut weights_by_pid = Vec::with_capacity(locals.len());
        for (pid, weights) in locals {
            let participant = self.participants.get(*pid).ok_or_else(|| {
                ProtocolError::Invariant(format!("no participant with pid {pid}"))
            })?;
            let mut rng = self.seeds.indexed("upload", &[round, *pid as u64]);
            match participant.upload(weights, round, &mut rng) {
                Ok(u) => {
                    uploads.push(u);
                    weights_by_pid.push((*pid, weights.clone()));
                }
                Err(e) => warn!("round {round}: participant {pid} aborted its upload: {e}"),
            }
        }
        let bytes_up: usize = uploads.iter().map(|u| u.ciphertexts.len()).sum::<usize>()
            * wire::ciphertext_size(self.pk_s.ciphertext_width());
        let mut message_bytes: usize = uploads.iter().map(|u| u.to_bytes(&self.pk_s).len()).sum();

        let cache_before = self.bs.cache().cloned();
        let request = self.bs.anonymize(round, &uploads, &mut self.seeds.indexed("bs", &[round]))?;
        message_bytes += request.to_bytes(&self.pk_s).len();
        let output = self.csp.process(&request, &mut self.seeds.indexed("csp", &[round]))?;
        message_bytes += output.to_bytes(&self.pk_u).len();
        let downloads = self.bs.distribute(&output, &mut self.seeds.indexed("bs-unblind", &[round]))?;
        let bytes_down = downloads.iter().map(|d| d.payload_bytes(&self.pk_u)).sum();
        message_bytes += downloads.iter().map(|d| d.to_bytes(&self.pk_u).len()).sum::<usize>();

        let state = self.bs.state().expect("anonymize stored the round state");
        let batch_pids: Vec<usize> =
            state.permutation.inverse().iter().map(|&i| state.pids[i]).collect();
        let mut accepted = Vec::with_capacity(downloads.len());
        let mut memberships = Vec::with_capacity(downloads.len());
        let mut references = Vec::with_capacity(downloads.len());
        let mut local_weights = Vec::with_capacity(downloads.len());
        for download in &downloads {
            let pid = download.pid as usize;
            let reference = self.participants[pid].update(download)?.to_vec();
            accepted.push(pid);
            memberships.push(download.clusters.iter().map(|c| c.cluster as usize).collect());
            references.push(reference);
            let local = weights_by_pid.iter().find(|(p, _)| *p == pid).expect("accepted pid uploaded");
            local_weights.push(local.1.clone());
        }
        debug!(
            "round {round}: clustered={} accepted={} bytes_up={bytes_up} bytes_down={bytes_down}",
            output.clustered,
            accepted.len()
        );
        Ok(RoundTrace {
            round,
            clustered: output.clustered,
            accepted,
            local_weights,
            batch_pids,
            grouping: output.assignment,
            memberships,
            cache_before,
            references,
            bytes_up,
            bytes_down,
            message_bytes,
        })
    }
}

/// Uniform subset of `ceil(fraction · n)` clients (at least one), ascending.
pub fn select_participants(n: usize, fraction: f64, round: u64, seeds: &SeedTree) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..n).collect();
    }
    let count = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut chosen = index::sample(&mut seeds.indexed("participation", &[round]), n, count).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Seconds charged per local SGD step in simulated time.
pub const SIM_STEP_SECONDS: f64 = 1e-3;
/// Uplink throughput of a client with uplink factor 1, in bytes per second.
pub const SIM_UPLINK_BYTES_PER_SECOND: f64 = 1e6;

/// Simulated duration of a round: the slowest selected client's local
/// training plus upload time at its uplink factor.
pub fn simulated_round_seconds(
    clients: &[ClientData],
    selected: &[usize],
    upload_bytes_per_client: usize,
) -> f64 {
    selected
        .iter()
        .map(|&pid| {
            let c = &clients[pid];
            local_step_count(c.shard.len(), &c.profile) as f64 * SIM_STEP_SECONDS
                + upload_bytes_per_client as f64
                    / (c.profile.uplink_factor * SIM_UPLINK_BYTES_PER_SECOND)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub shard: DatasetShard,
    pub profile: DeviceProfile,
}

/// Trains client `pid` from `start` on its private stream for this round.
pub fn train_client(
    start: &MlpModel,
    client: &ClientData,
    round: u64,
    pid: usize,
    seeds: &SeedTree,
) -> Result<MlpModel, LearnerError> {
    local_train(start, &client.shard, &client.profile, &mut seeds.indexed("train", &[round, pid as u64]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub clustered: bool,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub message_bytes: usize,
    pub simulated_seconds: f64,
}

/// Which model a round's test accuracy describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    /// Each client's own model on the test set reweighted to that client's
    /// label mix, averaged with sample-count weights.
    #[default]
    Personalized,
    /// One model, the mean of all clients' models, on the plain test set.
    GlobalMean,
}

/// Sample-weighted mean over clients of `models[i]` evaluated under client
/// `i`'s training label mix.
pub fn personalized_evaluation(
    models: &[&MlpModel],
    clients: &[ClientData],
    test: &DatasetShard,
) -> Result<Evaluation, LearnerError> {
    if models.len() != clients.len() {
        return Err(LearnerError::Shape { expected: clients.len(), found: models.len() });
    }
    let (mut accuracy, mut loss, mut total) = (0.0, 0.0, 0.0);
    for (model, client) in models.iter().zip(clients) {
        let by_class = evaluate_by_class(model, test)?;
        let mix: Vec<f64> = client.shard.class_histogram().iter().map(|&c| c as f64).collect();
        let eval = by_class.reweighted(&mix);
        let weight = client.shard.len() as f64;
        accuracy += weight * eval.accuracy;
        loss += weight * eval.loss;
        total += weight;
    }
    if total == 0.0 {
        return Err(LearnerError::Data("no client samples to weight evaluation".into()));
    }
    Ok(Evaluation { accuracy: accuracy / total, loss: loss / total })
}

/// A deployment plus the clients' data, device profiles and a test set.
#[derive(Debug, Clone)]
pub struct Federation {
    deployment: Deployment,
    clients: Vec<ClientData>,
    dims: Vec<usize>,
    test: DatasetShard,
    seeds: SeedTree,
    mode: EvaluationMode,
}

impl Federation {
    pub fn setup(
        config: &ProtocolConfig,
        clients: Vec<ClientData>,
        initial: &MlpModel,
        test: DatasetShard,
        seeds: SeedTree,
    ) -> Result<Self, ProtocolError> {
        let deployment = Deployment::setup(config, clients.len(), &initial.flatten(), seeds)?;
        Ok(Self { deployment, clients, dims: initial.dims(), test, seeds, mode: EvaluationMode::default() })
    }

    pub fn with_evaluation(mut self, mode: EvaluationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn deployment(&self) -> &Deployment {
        &self.deployment
    }

    pub fn clients(&self) -> &[ClientData] {
        &self.clients
    }

    /// The mean of all participants' references.
    pub fn mean_model(&self) -> Result<MlpModel, ProtocolError> {
        let refs: Vec<Vec<f64>> =
            self.deployment.participants.iter().map(|p| p.reference().to_vec()).collect();
        Ok(MlpModel::unflatten(&mean_vector(&refs), &self.dims)?)
    }

    pub fn evaluate(&self) -> Result<Evaluation, ProtocolError> {
        Ok(match self.mode {
            EvaluationMode::GlobalMean => evaluate(&self.mean_model()?, &self.test)?,
            EvaluationMode::Personalized => {
                let models = self
                    .deployment
                    .participants
                    .iter()
                    .map(|p| MlpModel::unflatten(p.reference(), &self.dims))
                    .collect::<Result<Vec<_>, _>>()?;
                let refs: Vec<&MlpModel> = models.iter().collect();
                personalized_evaluation(&refs, &self.clients, &self.test)?
            }
        })
    }

    pub fn run_round(&mut self, round: u64) -> Result<(RoundMetrics, RoundTrace), ProtocolError> {
        let selected = select_participants(
            self.clients.len(),
            self.deployment.config.participation_fraction,
            round,
            &self.seeds,
        );
        let mut locals = Vec::with_capacity(selected.len());
        for &pid in &selected {
            let start = MlpModel::unflatten(self.deployment.participants[pid].reference(), &self.dims)?;
            let trained = train_client(&start, &self.clients[pid], round, pid, &self.seeds)?;
            locals.push((pid, trained.flatten()));
        }
        let trace = self.deployment.secure_aggregate(round, &locals)?;
        let eval = self.evaluate()?;
        let per_client_upload = locals.first().map_or(0, |(_, w)| w.len())
            * wire::ciphertext_size(self.deployment.pk_s.ciphertext_width());
        let metrics = RoundMetrics {
            round,
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            clustered: trace.clustered,
            bytes_up: trace.bytes_up,
            bytes_down: trace.bytes_down,
            message_bytes: trace.message_bytes,
            simulated_seconds: simulated_round_seconds(&self.clients, &selected, per_client_upload),
        };
        Ok((metrics, trace))
    }
}
