//! Identity anonymization state held by the business server: a per-round
//! additive blinding mask and a uniform shuffle of upload positions.

use num_bigint::{BigUint, RandBigInt};
use rand::Rng;
use thiserror::Error;

use crate::he::{Ciphertext, HeError, PublicKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskingError {
    #[error("shape mismatch: expected {expected}, got {found}")]
    Shape { expected: usize, found: usize },
    #[error("index {index} out of range for permutation of size {size}")]
    Index { index: usize, size: usize },
    #[error("cluster is empty")]
    EmptyCluster,
    #[error("size must be at least 1")]
    ZeroSize,
    #[error(transparent)]
    He(#[from] HeError),
}

/// Per-round blinding vector in `Z_n^dim`, shared by every client of the round.
#[derive(Clone, PartialEq, Eq)]
pub struct BlindingMask {
    mask_entries: Vec<BigUint>,
    round_index: u64,
}

// Never print mask contents.
impl std::fmt::Debug for BlindingMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlindingMask")
            .field("dim", &self.mask_entries.len())
            .field("round_index", &self.round_index)
            .finish()
    }
}

impl BlindingMask {
    pub fn from_entries(mask_entries: Vec<BigUint>, round_index: u64) -> Self {
        Self { mask_entries, round_index }
    }

    pub fn entries(&self) -> &[BigUint] {
        &self.mask_entries
    }

    pub fn len(&self) -> usize {
        self.mask_entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask_entries.is_empty()
    }

    pub fn round_index(&self) -> u64 {
        self.round_index
    }
}

pub fn sample_mask<R: Rng + ?Sized>(
    pk: &PublicKey,
    dim: usize,
    round: u64,
    rng: &mut R,
) -> Result<BlindingMask, MaskingError> {
    if dim == 0 {
        return Err(MaskingError::ZeroSize);
    }
    let mask_entries = (0..dim).map(|_| rng.gen_biguint_below(pk.n())).collect();
    Ok(BlindingMask { mask_entries, round_index: round })
}

/// Adds `Enc(mask_j)` to coordinate `j` of every upload. Each mask coordinate
/// is encrypted afresh per upload.
pub fn blind<R: Rng + ?Sized>(
    pk: &PublicKey,
    uploads: &[Vec<Ciphertext>],
    mask: &BlindingMask,
    rng: &mut R,
) -> Result<Vec<Vec<Ciphertext>>, MaskingError> {
    uploads
        .iter()
        .map(|upload| {
            if upload.len() != mask.len() {
                return Err(MaskingError::Shape { expected: mask.len(), found: upload.len() });
            }
            upload
                .iter()
                .zip(&mask.mask_entries)
                .map(|(c, m)| {
                    let masked = pk.encrypt(m, rng)?;
                    Ok(pk.add(c, &masked)?)
                })
                .collect()
        })
        .collect()
}

/// Removes `cluster_size · mask` from an encrypted cluster sum:
/// `sum_j · Enc(mask_j)^(n − cluster_size)`.
pub fn unblind_cluster_sum<R: Rng + ?Sized>(
    pk: &PublicKey,
    encrypted_sum: &[Ciphertext],
    mask: &BlindingMask,
    cluster_size: usize,
    rng: &mut R,
) -> Result<Vec<Ciphertext>, MaskingError> {
    if cluster_size == 0 {
        return Err(MaskingError::EmptyCluster);
    }
    if encrypted_sum.len() != mask.len() {
        return Err(MaskingError::Shape { expected: mask.len(), found: encrypted_sum.len() });
    }
    let size = BigUint::from(cluster_size) % pk.n();
    let negated_size = (pk.n() - size) % pk.n();
    encrypted_sum
        .iter()
        .zip(&mask.mask_entries)
        .map(|(c, m)| {
            let scaled = pk.scalar_mul(&pk.encrypt(m, rng)?, &negated_size)?;
            Ok(pk.add(c, &scaled)?)
        })
        .collect()
}

/// Bijection on `[0, size)` with its inverse stored alongside.
#[derive(Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
    round_index: u64,
}

impl std::fmt::Debug for Permutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Permutation")
            .field("size", &self.forward.len())
            .field("round_index", &self.round_index)
            .finish()
    }
}

impl Permutation {
    pub fn identity(size: usize) -> Self {
        let forward: Vec<usize> = (0..size).collect();
        Self { inverse: forward.clone(), forward, round_index: 0 }
    }

    /// Builds a permutation from its forward map, rejecting non-bijections.
    pub fn from_forward(forward: Vec<usize>, round_index: u64) -> Result<Self, MaskingError> {
        let size = forward.len();
        let mut inverse = vec![usize::MAX; size];
        for (i, &j) in forward.iter().enumerate() {
            if j >= size {
                return Err(MaskingError::Index { index: j, size });
            }
            if inverse[j] != usize::MAX {
                return Err(MaskingError::Index { index: j, size });
            }
            inverse[j] = i;
        }
        Ok(Self { forward, inverse, round_index })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn round_index(&self) -> u64 {
        self.round_index
    }

    /// The inverse as a permutation in its own right.
    pub fn inverted(&self) -> Self {
        Self {
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
            round_index: self.round_index,
        }
    }
}

/// Uniform permutation by Fisher-Yates. `gen_range` is exact (widening
/// multiply with rejection), so all `count!` outcomes are equally likely.
pub fn sample_permutation<R: Rng + ?Sized>(
    count: usize,
    round: u64,
    rng: &mut R,
) -> Result<Permutation, MaskingError> {
    if count == 0 {
        return Err(MaskingError::ZeroSize);
    }
    let mut forward: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.gen_range(0..=i);
        forward.swap(i, j);
    }
    Permutation::from_forward(forward, round)
}

/// `output[forward[i]] = items[i]`.
pub fn apply_shuffle<T: Clone>(perm: &Permutation, items: &[T]) -> Result<Vec<T>, MaskingError> {
    if items.len() != perm.len() {
        return Err(MaskingError::Shape { expected: perm.len(), found: items.len() });
    }
    Ok(perm.inverse.iter().map(|&i| items[i].clone()).collect())
}

/// The original position whose item landed at `shuffled_j`.
pub fn unshuffle_index(perm: &Permutation, shuffled_j: usize) -> Result<usize, MaskingError> {
    perm.inverse
        .get(shuffled_j)
        .copied()
        .ok_or(MaskingError::Index { index: shuffled_j, size: perm.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::{keygen, toy_keypair};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn mask_range_and_determinism() {
        let (pk, _) = toy_keypair();
        let m = sample_mask(&pk, 3, 1, &mut seeded(1)).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.entries().iter().all(|e| e < pk.n()));
        assert_eq!(m, sample_mask(&pk, 3, 1, &mut seeded(1)).unwrap());
        let big_mask = sample_mask(&pk, 10_000, 1, &mut seeded(2)).unwrap();
        assert!(big_mask.entries().iter().all(|e| e < pk.n()));
        assert_eq!(sample_mask(&pk, 0, 1, &mut seeded(1)), Err(MaskingError::ZeroSize));
        assert!(!format!("{m:?}").contains("entries"));
    }

    #[test]
    fn blind_examples_on_toy_key() {
        let (pk, sk) = toy_keypair();
        let mut rng = seeded(3);
        let uploads = vec![
            vec![pk.encrypt(&big(7), &mut rng).unwrap()],
            vec![pk.encrypt(&big(30), &mut rng).unwrap()],
        ];
        let mask = BlindingMask::from_entries(vec![big(10)], 1);
        let blinded = blind(&pk, &uploads, &mask, &mut rng).unwrap();
        assert_eq!(sk.decrypt(&blinded[0][0]).unwrap(), big(17));
        assert_eq!(sk.decrypt(&blinded[1][0]).unwrap(), big(5));

        let zero = BlindingMask::from_entries(vec![big(0)], 1);
        let same = blind(&pk, &uploads, &zero, &mut rng).unwrap();
        assert_eq!(sk.decrypt(&same[0][0]).unwrap(), big(7));
        // re-randomized even under a zero mask
        assert_ne!(same[0][0], uploads[0][0]);

        let wide = BlindingMask::from_entries(vec![big(1), big(2)], 1);
        assert_eq!(
            blind(&pk, &uploads, &wide, &mut rng).unwrap_err(),
            MaskingError::Shape { expected: 2, found: 1 }
        );
    }

    #[test]
    fn unblind_examples_on_toy_key() {
        let (pk, sk) = toy_keypair();
        let mut rng = seeded(4);
        let mask = BlindingMask::from_entries(vec![big(10)], 1);
        let single = vec![pk.encrypt(&big(17), &mut rng).unwrap()];
        let out = unblind_cluster_sum(&pk, &single, &mask, 1, &mut rng).unwrap();
        assert_eq!(sk.decrypt(&out[0]).unwrap(), big(7));

        // w = {1, 2, 3}, blinded sum 36 ≡ 1
        let triple = vec![pk.encrypt(&big(1), &mut rng).unwrap()];
        let out = unblind_cluster_sum(&pk, &triple, &mask, 3, &mut rng).unwrap();
        assert_eq!(sk.decrypt(&out[0]).unwrap(), big(6));

        let zero = BlindingMask::from_entries(vec![big(0)], 1);
        let out = unblind_cluster_sum(&pk, &triple, &zero, 3, &mut rng).unwrap();
        assert_eq!(sk.decrypt(&out[0]).unwrap(), big(1));

        assert_eq!(
            unblind_cluster_sum(&pk, &triple, &mask, 0, &mut rng).unwrap_err(),
            MaskingError::EmptyCluster
        );
    }

    #[test]
    fn blind_then_unblind_recovers_sum_on_large_key() {
        let mut rng = seeded(5);
        let (pk, sk) = keygen(256, &mut rng).unwrap();
        let weights: Vec<Vec<u64>> = vec![vec![1, 2, 3], vec![40, 50, 60], vec![7, 8, 9]];
        let uploads: Vec<Vec<Ciphertext>> = weights
            .iter()
            .map(|w| w.iter().map(|&v| pk.encrypt(&big(v), &mut rng).unwrap()).collect())
            .collect();
        let mask = sample_mask(&pk, 3, 1, &mut rng).unwrap();
        let blinded = blind(&pk, &uploads, &mask, &mut rng).unwrap();
        let sum: Vec<Ciphertext> = (0..3)
            .map(|j| {
                blinded
                    .iter()
                    .skip(1)
                    .fold(blinded[0][j].clone(), |acc, v| pk.add(&acc, &v[j]).unwrap())
            })
            .collect();
        let out = unblind_cluster_sum(&pk, &sum, &mask, 3, &mut rng).unwrap();
        let got: Vec<BigUint> = out.iter().map(|c| sk.decrypt(c).unwrap()).collect();
        assert_eq!(got, vec![big(48), big(60), big(72)]);
    }

    #[test]
    fn permutation_hand_cases() {
        let id = sample_permutation(1, 0, &mut seeded(6)).unwrap();
        assert_eq!(id.forward(), &[0]);
        let rev = Permutation::from_forward(vec![2, 1, 0], 0).unwrap();
        assert_eq!(apply_shuffle(&rev, &['a', 'b', 'c']).unwrap(), vec!['c', 'b', 'a']);
        assert_eq!(unshuffle_index(&rev, 0).unwrap(), 2);
        assert_eq!(unshuffle_index(&rev, 3), Err(MaskingError::Index { index: 3, size: 3 }));
        let identity = Permutation::identity(4);
        assert_eq!(apply_shuffle(&identity, &[1, 2, 3, 4]).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(unshuffle_index(&identity, 2).unwrap(), 2);
        assert!(apply_shuffle(&rev, &[1, 2]).is_err());
        assert!(Permutation::from_forward(vec![0, 0], 0).is_err());
        assert_eq!(
            sample_permutation(5, 0, &mut seeded(7)).unwrap(),
            sample_permutation(5, 0, &mut seeded(7)).unwrap()
        );
    }

    // Chi-square uniformity over the 24 permutations of 4 elements.
    #[test]
    fn fisher_yates_is_uniform_on_four_elements() {
        let mut rng = seeded(8);
        let samples = 24_000;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..samples {
            let p = sample_permutation(4, 0, &mut rng).unwrap();
            *counts.entry(p.forward().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 24);
        let expected = samples as f64 / 24.0;
        let sigma = (samples as f64 * (1.0 / 24.0) * (23.0 / 24.0)).sqrt();
        let mut chi2 = 0.0;
        for &c in counts.values() {
            assert!((c as f64 - expected).abs() <= 5.0 * sigma, "count {c}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 23 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 49.73, "chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn shuffle_roundtrip_and_conservation(count in 1usize..40, seed in any::<u64>()) {
            let perm = sample_permutation(count, 0, &mut seeded(seed)).unwrap();
            let items: Vec<usize> = (0..count).map(|i| i * 7 + 1).collect();
            let shuffled = apply_shuffle(&perm, &items).unwrap();
            for i in 0..count {
                prop_assert_eq!(shuffled[perm.forward()[i]], items[i]);
                prop_assert_eq!(perm.inverse()[perm.forward()[i]], i);
            }
            for j in 0..count {
                prop_assert_eq!(perm.forward()[unshuffle_index(&perm, j).unwrap()], j);
            }
            let mut sorted = shuffled.clone();
            sorted.sort_unstable();
            prop_assert_eq!(&sorted, &items);
            prop_assert_eq!(apply_shuffle(&perm.inverted(), &shuffled).unwrap(), items);
        }
    }
}
