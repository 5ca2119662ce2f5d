//! Participant, business server and cloud service provider state machines.

use log::warn;
use num_bigint::BigUint;
use rand::Rng;

use super::messages::{
    ClusterDownload, CspOutput, CspRequest, EncryptedClusterSum, GroupingHint, MacKey, UploadTuple,
};
use super::ProtocolError;
use crate::cluster::{aggregate_clusters, oblivious_spectral_cluster, AssignmentMatrix, SpectralParams};
use crate::he::{
    center, decode_centered, decrypt_vector, encode_vector, encrypt_vector, reduce_signed,
    PrivateKey, PublicKey,
};
use crate::masking::{
    apply_shuffle, blind, sample_mask, sample_permutation, unblind_cluster_sum, unshuffle_index,
    BlindingMask, Permutation,
};
use crate::scheduler::DecaySchedule;

/// A data owner. Holds the shared user secret key and its own MAC key.
#[derive(Debug, Clone)]
pub struct Participant {
    pid: usize,
    pk_s: PublicKey,
    pk_u: PublicKey,
    sk_u: PrivateKey,
    mac_key: MacKey,
    rho: u32,
    reference: Vec<f64>,
}

impl Participant {
    pub fn new(
        pid: usize,
        pk_s: PublicKey,
        sk_u: PrivateKey,
        mac_key: MacKey,
        rho: u32,
        reference: Vec<f64>,
    ) -> Self {
        let pk_u = sk_u.public_key().clone();
        Self { pid, pk_s, pk_u, sk_u, mac_key, rho, reference }
    }

    pub fn pid(&self) -> usize {
        self.pid
    }

    /// `ω_{i,g}`: the model the next local training starts from.
    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn mac_key(&self) -> &MacKey {
        &self.mac_key
    }

    /// Encodes, encrypts under `pk_s` and tags the local weights.
    pub fn upload<R: Rng + ?Sized>(
        &self,
        weights: &[f64],
        round: u64,
        rng: &mut R,
    ) -> Result<UploadTuple, ProtocolError> {
        let encoded = encode_vector(weights, self.rho, &self.pk_s)?;
        let ciphertexts = encrypt_vector(&self.pk_s, &encoded, rng)?;
        Ok(UploadTuple::sealed(self.pid as u32, round, ciphertexts, &self.mac_key, &self.pk_s))
    }

    /// Decrypts each cluster sum, divides by its size and averages over the
    /// clusters this participant belongs to.
    pub fn update(&mut self, download: &ClusterDownload) -> Result<&[f64], ProtocolError> {
        if download.pid as usize != self.pid {
            return Err(ProtocolError::Invariant(format!(
                "participant {} received the download for {}",
                self.pid, download.pid
            )));
        }
        if !download.verify(&self.mac_key, &self.pk_u) {
            return Err(ProtocolError::DownloadMac { pid: self.pid });
        }
        if download.clusters.is_empty() {
            return Err(ProtocolError::EmptyMembership { pid: self.pid });
        }
        let dim = self.reference.len();
        let mut reference = vec![0.0; dim];
        for cluster in &download.clusters {
            if cluster.ciphertexts.len() != dim || cluster.size == 0 {
                return Err(ProtocolError::Invariant(format!(
                    "cluster {} has {} entries of size {}",
                    cluster.cluster,
                    cluster.ciphertexts.len(),
                    cluster.size
                )));
            }
            let plain = decrypt_vector(&self.sk_u, &cluster.ciphertexts, self.rho)?;
            for (acc, e) in reference.iter_mut().zip(&plain.entries) {
                *acc += decode_cluster_sum(e, self.pk_u.n(), self.pk_s.n(), self.rho) / f64::from(cluster.size);
            }
        }
        let count = download.clusters.len() as f64;
        for v in &mut reference {
            *v /= count;
        }
        self.reference = reference;
        Ok(&self.reference)
    }

    pub fn set_reference(&mut self, reference: Vec<f64>) {
        self.reference = reference;
    }
}

/// Recovers the real cluster sum from a `pk_u` plaintext holding
/// `S − k·μ`, where `S` and `μ` are residues modulo `n_s`.
pub fn decode_cluster_sum(residue: &BigUint, n_u: &BigUint, n_s: &BigUint, rho: u32) -> f64 {
    decode_centered(&reduce_signed(&center(residue, n_u), n_s), rho, n_s)
}

/// Per-round anonymization state held by the BS.
#[derive(Debug, Clone)]
pub struct BsRoundState {
    pub round: u64,
    pub permutation: Permutation,
    pub mask: BlindingMask,
    /// PID of each accepted upload, in upload order.
    pub pids: Vec<usize>,
}

/// Cluster ids per PID from the most recent clustered round.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipCache {
    pub clusters: usize,
    pub by_pid: Vec<Option<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub struct BusinessServer {
    pk_s: PublicKey,
    pk_u: PublicKey,
    mac_keys: Vec<MacKey>,
    cache: Option<MembershipCache>,
    state: Option<BsRoundState>,
}

impl BusinessServer {
    pub fn new(pk_s: PublicKey, pk_u: PublicKey, mac_keys: Vec<MacKey>) -> Self {
        Self { pk_s, pk_u, mac_keys, cache: None, state: None }
    }

    pub fn cache(&self) -> Option<&MembershipCache> {
        self.cache.as_ref()
    }

    pub fn state(&self) -> Option<&BsRoundState> {
        self.state.as_ref()
    }

    fn accept(&self, round: u64, upload: &UploadTuple) -> Result<(), String> {
        let pid = upload.pid as usize;
        let key = self.mac_keys.get(pid).ok_or_else(|| format!("unknown pid {pid}"))?;
        if !upload.verify(key, &self.pk_s) {
            return Err(format!("MAC check failed for pid {pid}"));
        }
        if upload.timestamp != round {
            return Err(format!("pid {pid} sent timestamp {} in round {round}", upload.timestamp));
        }
        Ok(())
    }

    /// Verifies tags, then blinds every upload with a fresh mask and shuffles
    /// the batch with a fresh permutation.
    pub fn anonymize<R: Rng + ?Sized>(
        &mut self,
        round: u64,
        uploads: &[UploadTuple],
        rng: &mut R,
    ) -> Result<CspRequest, ProtocolError> {
        self.anonymize_with(round, uploads, rng, |pk, dim, count, rng| {
            Ok((sample_mask(pk, dim, round, rng)?, sample_permutation(count, round, rng)?))
        })
    }

    /// [`Self::anonymize`] with the mask and permutation supplied by `draw`,
    /// called with `(pk_s, dim, accepted count, rng)`.
    pub fn anonymize_with<R, F>(
        &mut self,
        round: u64,
        uploads: &[UploadTuple],
        rng: &mut R,
        draw: F,
    ) -> Result<CspRequest, ProtocolError>
    where
        R: Rng + ?Sized,
        F: FnOnce(&PublicKey, usize, usize, &mut R) -> Result<(BlindingMask, Permutation), ProtocolError>,
    {
        let mut accepted: Vec<&UploadTuple> = Vec::with_capacity(uploads.len());
        for upload in uploads {
            match self.accept(round, upload) {
                Ok(()) if accepted.iter().any(|a| a.pid == upload.pid) => {
                    warn!("round {round}: dropping duplicate upload from pid {}", upload.pid)
                }
                Ok(()) => accepted.push(upload),
                Err(reason) => warn!("round {round}: dropping upload: {reason}"),
            }
        }
        let required = uploads.len().min(2);
        if accepted.len() < required || accepted.is_empty() {
            return Err(ProtocolError::TooFewUploads { received: uploads.len(), valid: accepted.len() });
        }
        let dim = accepted[0].ciphertexts.len();
        if let Some(bad) = accepted.iter().find(|u| u.ciphertexts.len() != dim) {
            return Err(ProtocolError::Invariant(format!(
                "pid {} uploaded {} coordinates, expected {dim}",
                bad.pid,
                bad.ciphertexts.len()
            )));
        }

        let (mask, permutation) = draw(&self.pk_s, dim, accepted.len(), rng)?;
        if mask.len() != dim || permutation.len() != accepted.len() {
            return Err(ProtocolError::Invariant("mask or permutation has the wrong size".into()));
        }
        let raw: Vec<_> = accepted.iter().map(|u| u.ciphertexts.clone()).collect();
        let batch = apply_shuffle(&permutation, &blind(&self.pk_s, &raw, &mask, rng)?)?;
        let pids: Vec<usize> = accepted.iter().map(|u| u.pid as usize).collect();

        let hint = match &self.cache {
            Some(cache) => {
                let rows: Option<Vec<Vec<bool>>> = (0..pids.len())
                    .map(|j| {
                        let pid = pids[unshuffle_index(&permutation, j).ok()?];
                        let member_of = cache.by_pid.get(pid)?.as_ref()?;
                        Some((0..cache.clusters).map(|k| member_of.contains(&k)).collect())
                    })
                    .collect();
                match rows {
                    Some(rows) => GroupingHint::Groups(AssignmentMatrix::new(rows, round)?),
                    None => GroupingHint::Unavailable,
                }
            }
            None => GroupingHint::Unavailable,
        };

        self.state = Some(BsRoundState { round, permutation, mask, pids });
        Ok(CspRequest { round, batch, hint: Some(hint) })
    }

    /// Unblinds each cluster sum and routes it to every member, mapping
    /// shuffled rows back to PIDs.
    pub fn distribute<R: Rng + ?Sized>(
        &mut self,
        output: &CspOutput,
        rng: &mut R,
    ) -> Result<Vec<ClusterDownload>, ProtocolError> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| ProtocolError::Invariant("distribute called before anonymize".into()))?;
        if output.round != state.round || output.assignment.rows() != state.pids.len() {
            return Err(ProtocolError::Invariant(format!(
                "CSP output for round {} with {} rows does not match round {} with {} uploads",
                output.round,
                output.assignment.rows(),
                state.round,
                state.pids.len()
            )));
        }
        let mut unblinded: Vec<Option<EncryptedClusterSum>> = vec![None; output.assignment.cols()];
        for sum in &output.sums {
            let k = sum.cluster as usize;
            if k >= unblinded.len() || output.assignment.column_size(k) != sum.size as usize {
                return Err(ProtocolError::Invariant(format!(
                    "cluster {k} reported with size {}",
                    sum.size
                )));
            }
            let ciphertexts =
                unblind_cluster_sum(&self.pk_u, &sum.ciphertexts, &state.mask, sum.size as usize, rng)?;
            unblinded[k] = Some(EncryptedClusterSum { cluster: sum.cluster, size: sum.size, ciphertexts });
        }

        let mut memberships: Vec<(usize, Vec<usize>)> = Vec::with_capacity(state.pids.len());
        for j in 0..state.pids.len() {
            let pid = state.pids[unshuffle_index(&state.permutation, j)?];
            let clusters = output.assignment.clusters_of(j);
            if clusters.is_empty() {
                return Err(ProtocolError::EmptyMembership { pid });
            }
            memberships.push((pid, clusters));
        }
        memberships.sort_unstable_by_key(|(pid, _)| *pid);

        let mut downloads = Vec::with_capacity(memberships.len());
        for (pid, clusters) in &memberships {
            let sums = clusters
                .iter()
                .map(|&k| {
                    unblinded[k].clone().ok_or_else(|| {
                        ProtocolError::Invariant(format!("no sum for cluster {k} of pid {pid}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            downloads.push(ClusterDownload::sealed(
                *pid as u32,
                state.round,
                sums,
                &self.mac_keys[*pid],
                &self.pk_u,
            ));
        }

        if output.clustered {
            let mut by_pid = vec![None; self.mac_keys.len()];
            for (pid, clusters) in memberships {
                by_pid[pid] = Some(clusters);
            }
            self.cache = Some(MembershipCache { clusters: output.assignment.cols(), by_pid });
        }
        Ok(downloads)
    }
}

/// The CSP: the only holder of `sk_s`.
#[derive(Debug, Clone)]
pub struct CloudServer {
    sk_s: PrivateKey,
    pk_u: PublicKey,
    rho: u32,
    params: SpectralParams,
    schedule: DecaySchedule,
    last_phi: Option<AssignmentMatrix>,
}

impl CloudServer {
    pub fn new(
        sk_s: PrivateKey,
        pk_u: PublicKey,
        rho: u32,
        params: SpectralParams,
        schedule: DecaySchedule,
    ) -> Self {
        Self { sk_s, pk_u, rho, params, schedule, last_phi: None }
    }

    pub fn last_phi(&self) -> Option<&AssignmentMatrix> {
        self.last_phi.as_ref()
    }

    pub fn params(&self) -> &SpectralParams {
        &self.params
    }

    /// Decrypts the blinded batch, clusters it or adopts the BS grouping,
    /// sums each cluster modulo `n_s` and re-encrypts the sums under `pk_u`.
    pub fn process<R: Rng + ?Sized>(
        &mut self,
        request: &CspRequest,
        rng: &mut R,
    ) -> Result<CspOutput, ProtocolError> {
        let round = request.round;
        if request.batch.is_empty() {
            return Err(ProtocolError::TooFewUploads { received: 0, valid: 0 });
        }
        let points = request
            .batch
            .iter()
            .map(|row| decrypt_vector(&self.sk_s, row, self.rho))
            .collect::<Result<Vec<_>, _>>()?;
        let n_s = self.sk_s.public_key().n();

        let scheduled = self.schedule.should_cluster(round)?;
        let reuse = if scheduled {
            None
        } else {
            match &request.hint {
                None => return Err(ProtocolError::MissingHint { round }),
                Some(GroupingHint::Unavailable) => {
                    warn!("round {round}: no cached grouping for this batch, clustering instead");
                    None
                }
                Some(GroupingHint::Groups(phi)) if phi.rows() == points.len() => Some(phi.clone()),
                Some(GroupingHint::Groups(phi)) => {
                    return Err(ProtocolError::Invariant(format!(
                        "grouping hint has {} rows for a batch of {}",
                        phi.rows(),
                        points.len()
                    )))
                }
            }
        };
        let clustered = reuse.is_none();
        let assignment = match reuse {
            Some(phi) => phi,
            None => {
                let params = SpectralParams {
                    num_clusters: self.params.num_clusters.min(points.len()),
                    ..self.params
                };
                oblivious_spectral_cluster(&points, n_s, &params, round, rng)?
            }
        };

        let sums = aggregate_clusters(&points, &assignment, n_s)?
            .into_iter()
            .map(|s| {
                let enc = crate::he::EncodedVector { key_id: self.pk_u.key_id(), ..s.sum };
                Ok(EncryptedClusterSum {
                    cluster: s.cluster as u32,
                    size: s.size as u32,
                    ciphertexts: encrypt_vector(&self.pk_u, &enc, rng)?,
                })
            })
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        self.last_phi = Some(assignment.clone());
        Ok(CspOutput { round, clustered, assignment, sums })
    }
}
