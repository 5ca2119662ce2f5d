//! Typed messages exchanged between participants, the business server (BS)
//! and the cloud service provider (CSP).

use hmac::{Hmac, Mac};
use rand::Rng;
use sha2::Sha256;

use super::wire::{self, Decoder, Encoder};
use super::ProtocolError;
use crate::cluster::AssignmentMatrix;
use crate::he::{Ciphertext, PublicKey};

type HmacSha256 = Hmac<Sha256>;

pub const MAC_LEN: usize = 32;

/// Symmetric key shared between one participant and the BS.
#[derive(Clone, PartialEq, Eq)]
pub struct MacKey([u8; 32]);

impl std::fmt::Debug for MacKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("MacKey(..)")
    }
}

impl MacKey {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; 32];
        rng.fill(&mut k);
        Self(k)
    }

    pub fn sign(&self, body: &[u8]) -> [u8; MAC_LEN] {
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("HMAC accepts any key length");
        mac.update(body);
        mac.finalize().into_bytes().into()
    }

    pub fn verify(&self, body: &[u8], tag: &[u8]) -> bool {
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("HMAC accepts any key length");
        mac.update(body);
        mac.verify_slice(tag).is_ok()
    }
}

fn put_ciphertexts(e: &mut Encoder, cts: &[Ciphertext], width: usize) {
    e.len(cts.len());
    for c in cts {
        e.biguint(c.value(), width);
    }
}

fn get_ciphertexts(d: &mut Decoder<'_>, pk: &PublicKey) -> Result<Vec<Ciphertext>, ProtocolError> {
    let count = d.len()?;
    let width = pk.ciphertext_width();
    (0..count).map(|_| Ok(Ciphertext::from_raw(d.biguint(width)?, pk.key_id()))).collect()
}

fn put_assignment(e: &mut Encoder, phi: &AssignmentMatrix) {
    e.len(phi.rows()).len(phi.cols()).u64(phi.round_created());
    for row in 0..phi.rows() {
        for &member in phi.row(row) {
            e.u8(u8::from(member));
        }
    }
}

fn get_assignment(d: &mut Decoder<'_>) -> Result<AssignmentMatrix, ProtocolError> {
    let rows = d.len()?;
    let cols = d.len()?;
    let round = d.u64()?;
    let at = d.position();
    let memberships = (0..rows)
        .map(|_| (0..cols).map(|_| Ok(d.u8()? != 0)).collect::<Result<Vec<_>, ProtocolError>>())
        .collect::<Result<Vec<_>, _>>()?;
    AssignmentMatrix::new(memberships, round)
        .map_err(|e| ProtocolError::Wire { offset: at, message: e.to_string() })
}

/// `([W_i]_{pk_s}, PID, TS)` plus its integrity tag.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadTuple {
    pub pid: u32,
    pub timestamp: u64,
    pub ciphertexts: Vec<Ciphertext>,
    pub tag: [u8; MAC_LEN],
}

impl UploadTuple {
    /// Everything except the tag; this is what the tag authenticates.
    pub fn body(&self, pk_s: &PublicKey) -> Vec<u8> {
        let mut e = Encoder::new(wire::TAG_UPLOAD);
        e.u32(self.pid).u64(self.timestamp);
        put_ciphertexts(&mut e, &self.ciphertexts, pk_s.ciphertext_width());
        e.finish()
    }

    pub fn to_bytes(&self, pk_s: &PublicKey) -> Vec<u8> {
        let mut bytes = self.body(pk_s);
        bytes.extend_from_slice(&(MAC_LEN as u32).to_be_bytes());
        bytes.extend_from_slice(&self.tag);
        bytes
    }

    pub fn from_bytes(bytes: &[u8], pk_s: &PublicKey) -> Result<Self, ProtocolError> {
        let mut d = Decoder::new(bytes, wire::TAG_UPLOAD)?;
        let pid = d.u32()?;
        let timestamp = d.u64()?;
        let ciphertexts = get_ciphertexts(&mut d, pk_s)?;
        let at = d.position();
        let tag: [u8; MAC_LEN] = d
            .bytes()?
            .try_into()
            .map_err(|_| ProtocolError::Wire { offset: at, message: "tag must be 32 bytes".into() })?;
        d.finish()?;
        Ok(Self { pid, timestamp, ciphertexts, tag })
    }

    pub fn sealed(pid: u32, timestamp: u64, ciphertexts: Vec<Ciphertext>, key: &MacKey, pk_s: &PublicKey) -> Self {
        let mut t = Self { pid, timestamp, ciphertexts, tag: [0; MAC_LEN] };
        t.tag = key.sign(&t.body(pk_s));
        t
    }

    pub fn verify(&self, key: &MacKey, pk_s: &PublicKey) -> bool {
        key.verify(&self.body(pk_s), &self.tag)
    }
}

/// How the CSP should group the batch when it does not re-cluster.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupingHint {
    /// The BS has no cached membership for some batch member.
    Unavailable,
    /// Cached memberships, rows in shuffled batch order.
    Groups(AssignmentMatrix),
}

/// Blinded, shuffled uploads. Carries no participant identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct CspRequest {
    pub round: u64,
    pub batch: Vec<Vec<Ciphertext>>,
    pub hint: Option<GroupingHint>,
}

impl CspRequest {
    pub fn to_bytes(&self, pk_s: &PublicKey) -> Vec<u8> {
        let mut e = Encoder::new(wire::TAG_CSP_REQUEST);
        e.u64(self.round).len(self.batch.len());
        for row in &self.batch {
            put_ciphertexts(&mut e, row, pk_s.ciphertext_width());
        }
        match &self.hint {
            None => e.u8(0),
            Some(GroupingHint::Unavailable) => e.u8(1),
            Some(GroupingHint::Groups(phi)) => {
                e.u8(2);
                put_assignment(&mut e, phi);
                &mut e
            }
        };
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8], pk_s: &PublicKey) -> Result<Self, ProtocolError> {
        let mut d = Decoder::new(bytes, wire::TAG_CSP_REQUEST)?;
        let round = d.u64()?;
        let rows = d.len()?;
        let batch = (0..rows).map(|_| get_ciphertexts(&mut d, pk_s)).collect::<Result<Vec<_>, _>>()?;
        let at = d.position();
        let hint = match d.u8()? {
            0 => None,
            1 => Some(GroupingHint::Unavailable),
            2 => Some(GroupingHint::Groups(get_assignment(&mut d)?)),
            other => {
                return Err(ProtocolError::Wire { offset: at, message: format!("hint kind {other}") })
            }
        };
        d.finish()?;
        Ok(Self { round, batch, hint })
    }
}

/// One cluster's modular sum of blinded members, re-encrypted under `pk_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedClusterSum {
    pub cluster: u32,
    pub size: u32,
    pub ciphertexts: Vec<Ciphertext>,
}

fn put_sums(e: &mut Encoder, sums: &[EncryptedClusterSum], width: usize) {
    e.len(sums.len());
    for s in sums {
        e.u32(s.cluster).u32(s.size);
        put_ciphertexts(e, &s.ciphertexts, width);
    }
}

fn get_sums(d: &mut Decoder<'_>, pk_u: &PublicKey) -> Result<Vec<EncryptedClusterSum>, ProtocolError> {
    let count = d.len()?;
    (0..count)
        .map(|_| {
            let cluster = d.u32()?;
            let size = d.u32()?;
            Ok(EncryptedClusterSum { cluster, size, ciphertexts: get_ciphertexts(d, pk_u)? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CspOutput {
    pub round: u64,
    pub clustered: bool,
    /// The grouping actually used, rows in shuffled batch order.
    pub assignment: AssignmentMatrix,
    pub sums: Vec<EncryptedClusterSum>,
}

impl CspOutput {
    pub fn to_bytes(&self, pk_u: &PublicKey) -> Vec<u8> {
        let mut e = Encoder::new(wire::TAG_CSP_OUTPUT);
        e.u64(self.round).u8(u8::from(self.clustered));
        put_assignment(&mut e, &self.assignment);
        put_sums(&mut e, &self.sums, pk_u.ciphertext_width());
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8], pk_u: &PublicKey) -> Result<Self, ProtocolError> {
        let mut d = Decoder::new(bytes, wire::TAG_CSP_OUTPUT)?;
        let round = d.u64()?;
        let clustered = d.u8()? != 0;
        let assignment = get_assignment(&mut d)?;
        let sums = get_sums(&mut d, pk_u)?;
        d.finish()?;
        Ok(Self { round, clustered, assignment, sums })
    }
}

/// The unblinded sums of every cluster the receiving participant belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDownload {
    pub pid: u32,
    pub round: u64,
    pub clusters: Vec<EncryptedClusterSum>,
    pub tag: [u8; MAC_LEN],
}

impl ClusterDownload {
    pub fn body(&self, pk_u: &PublicKey) -> Vec<u8> {
        let mut e = Encoder::new(wire::TAG_DOWNLOAD);
        e.u32(self.pid).u64(self.round);
        put_sums(&mut e, &self.clusters, pk_u.ciphertext_width());
        e.finish()
    }

    pub fn to_bytes(&self, pk_u: &PublicKey) -> Vec<u8> {
        let mut bytes = self.body(pk_u);
        bytes.extend_from_slice(&(MAC_LEN as u32).to_be_bytes());
        bytes.extend_from_slice(&self.tag);
        bytes
    }

    pub fn from_bytes(bytes: &[u8], pk_u: &PublicKey) -> Result<Self, ProtocolError> {
        let mut d = Decoder::new(bytes, wire::TAG_DOWNLOAD)?;
        let pid = d.u32()?;
        let round = d.u64()?;
        let clusters = get_sums(&mut d, pk_u)?;
        let at = d.position();
        let tag: [u8; MAC_LEN] = d
            .bytes()?
            .try_into()
            .map_err(|_| ProtocolError::Wire { offset: at, message: "tag must be 32 bytes".into() })?;
        d.finish()?;
        Ok(Self { pid, round, clusters, tag })
    }

    pub fn sealed(
        pid: u32,
        round: u64,
        clusters: Vec<EncryptedClusterSum>,
        key: &MacKey,
        pk_u: &PublicKey,
    ) -> Self {
        let mut d = Self { pid, round, clusters, tag: [0; MAC_LEN] };
        d.tag = key.sign(&d.body(pk_u));
        d
    }

    pub fn verify(&self, key: &MacKey, pk_u: &PublicKey) -> bool {
        key.verify(&self.body(pk_u), &self.tag)
    }

    /// Bytes of ciphertext payload carried.
    pub fn payload_bytes(&self, pk_u: &PublicKey) -> usize {
        self.clusters.iter().map(|c| c.ciphertexts.len()).sum::<usize>()
            * wire::ciphertext_size(pk_u.ciphertext_width())
    }
}
