//! Labelled feature matrices, IDX ingestion and the synthetic blob task.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::LearnerError;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major features with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl DatasetShard {
    pub fn new(
        dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, LearnerError> {
        if features.len() != dim * labels.len() {
            return Err(LearnerError::Shape { expected: dim * labels.len(), found: features.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(LearnerError::Data(format!("label {bad} not below {num_classes}")));
        }
        Ok(Self { dim, num_classes, features, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        Self {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Center of blob `k`: `separation · (⌊k/dim⌋ + 1) · e_{k mod dim}`.
pub fn blob_center(k: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    c[k % dim] = separation * ((k / dim) + 1) as f64;
    c
}

/// `per_class` isotropic Gaussian samples around each blob center, class-major.
pub fn synth_blobs<R: Rng + ?Sized>(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<DatasetShard, LearnerError> {
    if dim == 0 || num_classes == 0 {
        return Err(LearnerError::Data("blob task needs dim ≥ 1 and at least one class".into()));
    }
    if !(separation > 0.0) || !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(LearnerError::Data(format!(
            "invalid blob geometry: separation {separation}, sigma {sigma}"
        )));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| LearnerError::Data(e.to_string()))?;
    let mut features = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for k in 0..num_classes {
        let center = blob_center(k, dim, separation);
        for _ in 0..per_class {
            features.extend(center.iter().map(|c| c + noise.sample(rng)));
            labels.push(k);
        }
    }
    DatasetShard::new(dim, num_classes, features, labels)
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, LearnerError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LearnerError::Format { offset, message: format!("truncated {what}") })
}

/// Parses an IDX image/label pair held in memory. Pixels are scaled by 1/255;
/// the class count is at least 10.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<DatasetShard, LearnerError> {
    let magic = read_u32(images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(LearnerError::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32(images, 4, "image count")? as usize;
    let rows = read_u32(images, 8, "row count")? as usize;
    let cols = read_u32(images, 12, "column count")? as usize;
    let dim = rows * cols;
    let body = &images[16..];
    if body.len() < count * dim {
        return Err(LearnerError::Format {
            offset: 16 + body.len(),
            message: format!("image data truncated: need {} bytes", count * dim),
        });
    }

    let magic = read_u32(labels, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(LearnerError::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = read_u32(labels, 4, "label count")? as usize;
    if label_count != count {
        return Err(LearnerError::Format {
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    let label_body = &labels[8..];
    if label_body.len() < count {
        return Err(LearnerError::Format {
            offset: 8 + label_body.len(),
            message: format!("label data truncated: need {count} bytes"),
        });
    }
    let labels: Vec<usize> = label_body[..count].iter().map(|&b| usize::from(b)).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let features = body[..count * dim].iter().map(|&b| f64::from(b) / 255.0).collect();
    DatasetShard::new(dim, num_classes, features, labels)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<DatasetShard, LearnerError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| LearnerError::Io(format!("{}: {e}", p.display())))
    };
    parse_idx(&read(images)?, &read(labels)?)
}

/// Serializes a shard whose features lie in `[0, 1]` back into IDX bytes
/// (`rows × cols` must equal the feature dimension).
pub fn to_idx(shard: &DatasetShard, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    assert_eq!(rows * cols, shard.dim(), "image shape must match the feature dimension");
    let mut images = Vec::with_capacity(16 + shard.len() * shard.dim());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [shard.len(), rows, cols] {
        images.extend_from_slice(&(v as u32).to_be_bytes());
    }
    images.extend(shard.features.iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + shard.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(shard.len() as u32).to_be_bytes());
    labels.extend(shard.labels.iter().map(|&l| l as u8));
    (images, labels)
}
