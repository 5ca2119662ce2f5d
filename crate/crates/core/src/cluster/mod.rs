//! Oblivious soft spectral clustering over blinded parameter vectors.
//!
//! Pipeline: RBF similarity → normalized Laplacian → spectral embedding →
//! k-means hard labels → affinity-budget soft assignment. Distances are
//! taken over centered modular differences, so a mask shared by every point
//! cancels out exactly and clustering blinded vectors gives the same result
//! as clustering the originals.

mod kmeans;
pub mod linalg;

pub use kmeans::{kmeans, MAX_ITERATIONS as KMEANS_MAX_ITERATIONS};
pub use linalg::{symmetric_eig, Eigen, Matrix};

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use rand::Rng;
use thiserror::Error;

use crate::he::{center, EncodedVector};

/// Rows shorter than this are treated as zero before normalization.
const ZERO_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("shape mismatch: expected {expected}, got {found}")]
    Shape { expected: usize, found: usize },
    #[error("points disagree on precision or key")]
    Incompatible,
    #[error("invalid spectral parameters: {0}")]
    InvalidParams(String),
    #[error("cannot form {clusters} clusters from {points} points")]
    TooManyClusters { clusters: usize, points: usize },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("zero degree at row {0}")]
    ZeroDegree(usize),
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("assignment leaves row {0} without a cluster")]
    UncoveredRow(usize),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralParams {
    pub num_clusters: usize,
    pub rbf_gamma: f64,
}

impl SpectralParams {
    pub fn new(num_clusters: usize, rbf_gamma: f64) -> Self {
        Self { num_clusters, rbf_gamma }
    }

    pub fn validate(&self, points: usize) -> Result<(), ClusterError> {
        if self.num_clusters == 0 {
            return Err(ClusterError::InvalidParams("num_clusters must be at least 1".into()));
        }
        if !(self.rbf_gamma > 0.0 && self.rbf_gamma.is_finite()) {
            return Err(ClusterError::InvalidParams("rbf_gamma must be positive".into()));
        }
        if self.num_clusters > points {
            return Err(ClusterError::TooManyClusters { clusters: self.num_clusters, points });
        }
        Ok(())
    }
}

/// Symmetric RBF similarities with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    entries: Matrix,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Builds `exp(−d_ij / 2γ)` from a distance function, upper triangle mirrored.
    pub fn from_distances(
        n: usize,
        gamma: f64,
        mut distance: impl FnMut(usize, usize) -> Result<f64, ClusterError>,
    ) -> Result<Self, ClusterError> {
        let mut entries = Matrix::identity(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let s = (-distance(i, j)? / (2.0 * gamma)).exp();
                entries[(i, j)] = s;
                entries[(j, i)] = s;
            }
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Laplacian,
    Affinity,
}

/// Row-normalized eigenvector embedding, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEmbedding {
    pub rows: Vec<Vec<f64>>,
    pub source: EmbeddingSource,
}

/// Binary `n × c` membership matrix; a point may sit in several clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix {
    memberships: Vec<Vec<bool>>,
    round_created: u64,
}

impl AssignmentMatrix {
    /// Rejects ragged input and rows with no membership.
    pub fn new(memberships: Vec<Vec<bool>>, round_created: u64) -> Result<Self, ClusterError> {
        let c = memberships.first().map_or(0, Vec::len);
        for (j, row) in memberships.iter().enumerate() {
            if row.len() != c {
                return Err(ClusterError::Shape { expected: c, found: row.len() });
            }
            if !row.iter().any(|&m| m) {
                return Err(ClusterError::UncoveredRow(j));
            }
        }
        Ok(Self { memberships, round_created })
    }

    /// One-hot memberships from hard labels.
    pub fn from_labels(labels: &[usize], c: usize, round_created: u64) -> Result<Self, ClusterError> {
        let memberships = labels
            .iter()
            .map(|&l| {
                if l >= c {
                    return Err(ClusterError::Shape { expected: c, found: l + 1 });
                }
                Ok((0..c).map(|k| k == l).collect())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(memberships, round_created)
    }

    pub fn rows(&self) -> usize {
        self.memberships.len()
    }

    pub fn cols(&self) -> usize {
        self.memberships.first().map_or(0, Vec::len)
    }

    pub fn round_created(&self) -> u64 {
        self.round_created
    }

    pub fn is_member(&self, row: usize, cluster: usize) -> bool {
        self.memberships[row][cluster]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.memberships[row]
    }

    /// Cluster ids containing `row`, ascending.
    pub fn clusters_of(&self, row: usize) -> Vec<usize> {
        self.memberships[row].iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| k).collect()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.rows()).filter(|&j| self.memberships[j][cluster]).collect()
    }

    pub fn column_size(&self, cluster: usize) -> usize {
        self.memberships.iter().filter(|row| row[cluster]).count()
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        self.memberships.clone()
    }

    /// 0/1 CSV, one row per point, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.memberships {
            let cells: Vec<&str> = row.iter().map(|&m| if m { "1" } else { "0" }).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn check_compatible(a: &EncodedVector, b: &EncodedVector) -> Result<(), ClusterError> {
    if a.len() != b.len() {
        return Err(ClusterError::Shape { expected: a.len(), found: b.len() });
    }
    if a.precision_rho != b.precision_rho || a.key_id != b.key_id {
        return Err(ClusterError::Incompatible);
    }
    Ok(())
}

/// L2 norm of centered modular differences scaled by `2^−ρ`.
pub fn pairwise_distance(
    a: &EncodedVector,
    b: &EncodedVector,
    n: &BigUint,
) -> Result<f64, ClusterError> {
    check_compatible(a, b)?;
    let scale = 2f64.powi(-(a.precision_rho as i32));
    let mut sum = 0.0;
    for (x, y) in a.entries.iter().zip(&b.entries) {
        let diff = if x >= y { x - y } else { n - (y - x) };
        if diff.is_zero() {
            continue;
        }
        let d = center(&diff, n).to_f64().unwrap_or(f64::INFINITY) * scale;
        sum += d * d;
    }
    Ok(sum.sqrt())
}

pub fn rbf_similarity(
    points: &[EncodedVector],
    n: &BigUint,
    params: &SpectralParams,
) -> Result<SimilarityMatrix, ClusterError> {
    SimilarityMatrix::from_distances(points.len(), params.rbf_gamma, |i, j| {
        pairwise_distance(&points[i], &points[j], n)
    })
}

/// RBF similarity over plain real vectors (demo and tests).
pub fn rbf_similarity_real(
    points: &[Vec<f64>],
    params: &SpectralParams,
) -> Result<SimilarityMatrix, ClusterError> {
    SimilarityMatrix::from_distances(points.len(), params.rbf_gamma, |i, j| {
        let (a, b) = (&points[i], &points[j]);
        if a.len() != b.len() {
            return Err(ClusterError::Shape { expected: a.len(), found: b.len() });
        }
        Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
    })
}

/// `D^{−1/2} (D − S) D^{−1/2}` with `D` the diagonal of row sums.
pub fn normalized_laplacian(s: &SimilarityMatrix) -> Result<Matrix, ClusterError> {
    let n = s.n();
    let mut inv_sqrt_degree = Vec::with_capacity(n);
    for i in 0..n {
        let degree: f64 = s.matrix().row(i).iter().sum();
        if !(degree > 0.0) {
            return Err(ClusterError::ZeroDegree(i));
        }
        inv_sqrt_degree.push(1.0 / degree.sqrt());
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let degree: f64 = s.matrix().row(i).iter().sum();
        out[(i, i)] = (degree - s.get(i, i)) * inv_sqrt_degree[i] * inv_sqrt_degree[i];
        for j in (i + 1)..n {
            let v = -s.get(i, j) * inv_sqrt_degree[i] * inv_sqrt_degree[j];
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

fn normalize_rows(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for row in rows.iter_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_ROW_NORM {
            row.iter_mut().enumerate().for_each(|(k, v)| *v = if k == 0 { 1.0 } else { 0.0 });
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    rows
}

fn embedding_from_columns(eigen: &Eigen, columns: &[usize]) -> Vec<Vec<f64>> {
    let n = eigen.vectors.rows();
    (0..n).map(|i| columns.iter().map(|&k| eigen.vectors[(i, k)]).collect()).collect()
}

/// Eigenvectors of the `c` smallest Laplacian eigenvalues, rows normalized.
pub fn spectral_embed(l_norm: &Matrix, c: usize) -> Result<SpectralEmbedding, ClusterError> {
    let n = l_norm.rows();
    if c == 0 || c > n {
        return Err(ClusterError::TooManyClusters { clusters: c, points: n });
    }
    let eigen = symmetric_eig(l_norm)?;
    let columns: Vec<usize> = (0..c).collect();
    Ok(SpectralEmbedding {
        rows: normalize_rows(embedding_from_columns(&eigen, &columns)),
        source: EmbeddingSource::Laplacian,
    })
}

/// Eigenvectors of the `c` largest affinity eigenvalues, rows normalized.
pub fn affinity_embed(s: &SimilarityMatrix, c: usize) -> Result<SpectralEmbedding, ClusterError> {
    let n = s.n();
    if c == 0 || c > n {
        return Err(ClusterError::TooManyClusters { clusters: c, points: n });
    }
    let eigen = symmetric_eig(s.matrix())?;
    let columns: Vec<usize> = (0..c).map(|k| n - 1 - k).collect();
    Ok(SpectralEmbedding {
        rows: normalize_rows(embedding_from_columns(&eigen, &columns)),
        source: EmbeddingSource::Affinity,
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Affinity-budget soft assignment.
///
/// Point `j` joins cluster `k` when its affinity `a_jk` to the centroid of
/// `k` (in the affinity embedding) is at least the mean affinity of `j`
/// across all clusters.
pub fn soft_assign(
    s: &SimilarityMatrix,
    hard_labels: &[usize],
    params: &SpectralParams,
    round: u64,
) -> Result<AssignmentMatrix, ClusterError> {
    let n = s.n();
    let c = params.num_clusters;
    if hard_labels.len() != n {
        return Err(ClusterError::Shape { expected: n, found: hard_labels.len() });
    }
    let embedding = affinity_embed(s, c)?;
    let mut centroids = vec![vec![0.0; c]; c];
    let mut counts = vec![0usize; c];
    for (row, &label) in embedding.rows.iter().zip(hard_labels) {
        if label >= c {
            return Err(ClusterError::Shape { expected: c, found: label + 1 });
        }
        counts[label] += 1;
        for (acc, v) in centroids[label].iter_mut().zip(row) {
            *acc += v;
        }
    }
    for (k, (centroid, &count)) in centroids.iter_mut().zip(&counts).enumerate() {
        if count == 0 {
            return Err(ClusterError::EmptyCluster(k));
        }
        centroid.iter_mut().for_each(|v| *v /= count as f64);
    }

    let memberships = embedding
        .rows
        .iter()
        .map(|row| {
            let affinity: Vec<f64> = centroids
                .iter()
                .map(|centroid| (-euclidean(row, centroid) / (2.0 * params.rbf_gamma)).exp())
                .collect();
            budget_memberships(&affinity)
        })
        .collect();
    AssignmentMatrix::new(memberships, round)
}

/// `a_k >= mean(a)` for each cluster `k`.
pub fn budget_memberships(affinity: &[f64]) -> Vec<bool> {
    let budget = affinity.iter().sum::<f64>() / affinity.len() as f64;
    let best = affinity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // the mean can round above an all-equal row's maximum
    let threshold = budget.min(best);
    affinity.iter().map(|&a| a >= threshold).collect()
}

/// Everything the clustering pipeline produced, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOutcome {
    pub similarity: SimilarityMatrix,
    pub hard_labels: Vec<usize>,
    pub assignment: AssignmentMatrix,
}

/// Runs Laplacian embedding, k-means and soft assignment on a similarity matrix.
pub fn cluster_similarity<R: Rng + ?Sized>(
    similarity: SimilarityMatrix,
    params: &SpectralParams,
    round: u64,
    rng: &mut R,
) -> Result<SpectralOutcome, ClusterError> {
    params.validate(similarity.n())?;
    let l_norm = normalized_laplacian(&similarity)?;
    let embedding = spectral_embed(&l_norm, params.num_clusters)?;
    let hard_labels = kmeans(&embedding.rows, params.num_clusters, rng)?;
    let assignment = soft_assign(&similarity, &hard_labels, params, round)?;
    Ok(SpectralOutcome { similarity, hard_labels, assignment })
}

pub fn oblivious_spectral_cluster_detailed<R: Rng + ?Sized>(
    points: &[EncodedVector],
    n: &BigUint,
    params: &SpectralParams,
    round: u64,
    rng: &mut R,
) -> Result<SpectralOutcome, ClusterError> {
    params.validate(points.len())?;
    cluster_similarity(rbf_similarity(points, n, params)?, params, round, rng)
}

/// Soft cluster memberships for blinded encoded parameter vectors.
pub fn oblivious_spectral_cluster<R: Rng + ?Sized>(
    points: &[EncodedVector],
    n: &BigUint,
    params: &SpectralParams,
    round: u64,
    rng: &mut R,
) -> Result<AssignmentMatrix, ClusterError> {
    Ok(oblivious_spectral_cluster_detailed(points, n, params, round, rng)?.assignment)
}

/// Modular sum of one cluster's members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSum {
    pub cluster: usize,
    pub sum: EncodedVector,
    pub size: usize,
}

/// Coordinatewise modular sums per cluster column; empty columns are skipped.
pub fn aggregate_clusters(
    points: &[EncodedVector],
    phi: &AssignmentMatrix,
    n: &BigUint,
) -> Result<Vec<ClusterSum>, ClusterError> {
    if phi.rows() != points.len() {
        return Err(ClusterError::Shape { expected: phi.rows(), found: points.len() });
    }
    let Some(first) = points.first() else {
        return Ok(Vec::new());
    };
    for p in points {
        check_compatible(first, p)?;
    }
    let mut out = Vec::new();
    for k in 0..phi.cols() {
        let members = phi.members(k);
        if members.is_empty() {
            continue;
        }
        let mut entries = vec![BigUint::zero(); first.len()];
        for &j in &members {
            for (acc, v) in entries.iter_mut().zip(&points[j].entries) {
                *acc += v;
                if &*acc >= n {
                    *acc -= n;
                }
            }
        }
        out.push(ClusterSum {
            cluster: k,
            sum: EncodedVector {
                entries,
                precision_rho: first.precision_rho,
                key_id: first.key_id,
            },
            size: members.len(),
        });
    }
    Ok(out)
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same points");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| pairs(v)).sum();
    let row_sum: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let col_sum: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = if total > 0.0 { row_sum * col_sum / total } else { 0.0 };
    let max_index = 0.5 * (row_sum + col_sum);
    if (max_index - expected).abs() < f64::EPSILON {
        return if index == max_index { 1.0 } else { 0.0 };
    }
    (index - expected) / (max_index - expected)
}
