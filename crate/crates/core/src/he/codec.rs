//! Fixed-point codec between real model parameters and residues mod `n`.
//!
//! A real `x` is stored as `round(2^ρ · x)` (half away from zero); negative
//! values use the centered representative `n − |v|`.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{FromPrimitive, ToPrimitive, Zero};
use rand::Rng;

use super::paillier::{Ciphertext, KeyId, PrivateKey, PublicKey};
use super::HeError;

/// Real vector in residue form, tagged with the precision and the key it targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedVector {
    pub entries: Vec<BigUint>,
    pub precision_rho: u32,
    pub key_id: KeyId,
}

impl EncodedVector {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes every entry with the centered representative modulo `n`.
    pub fn decode(&self, n: &BigUint) -> Vec<f64> {
        self.entries.iter().map(|e| decode_centered(e, self.precision_rho, n)).collect()
    }
}

fn scale(rho: u32) -> f64 {
    2f64.powi(rho as i32)
}

/// `round_half_away_from_zero(2^ρ · x) mod n`.
pub fn encode_scalar(x: f64, rho: u32, n: &BigUint) -> Result<BigUint, HeError> {
    let overflow = || HeError::EncodingOverflow { value: x, rho };
    let scaled = (x * scale(rho)).round();
    if !scaled.is_finite() {
        return Err(overflow());
    }
    let value = BigInt::from_f64(scaled).ok_or_else(overflow)?;
    let magnitude = value.magnitude();
    // two bits of headroom: |x| < n / 2^(ρ+2)
    if (magnitude << 2u32) >= *n {
        return Err(overflow());
    }
    Ok(match value.sign() {
        Sign::Minus => n - magnitude,
        _ => magnitude.clone(),
    })
}

/// Maps a residue to its centered lift in `[-n/2, n/2)`.
pub fn center(e: &BigUint, n: &BigUint) -> BigInt {
    let doubled: BigUint = e << 1u32;
    if &doubled < n {
        BigInt::from_biguint(Sign::Plus, e.clone())
    } else {
        BigInt::from_biguint(Sign::Plus, e.clone()) - BigInt::from_biguint(Sign::Plus, n.clone())
    }
}

/// `ê / 2^ρ` with `ê = e` if `e < n/2`, else `e − n`.
pub fn decode_centered(e: &BigUint, rho: u32, n: &BigUint) -> f64 {
    let lifted = center(e, n);
    lifted.to_f64().unwrap_or(f64::NAN) / scale(rho)
}

/// Reduces a signed integer into `[0, n)`.
pub fn reduce_signed(v: &BigInt, n: &BigUint) -> BigUint {
    let modulus = BigInt::from_biguint(Sign::Plus, n.clone());
    let r = ((v % &modulus) + &modulus) % &modulus;
    r.to_biguint().unwrap_or_else(BigUint::zero)
}

pub fn encode_vector(x: &[f64], rho: u32, pk: &PublicKey) -> Result<EncodedVector, HeError> {
    let entries = x
        .iter()
        .enumerate()
        .map(|(index, &v)| encode_scalar(v, rho, pk.n()).map_err(|e| e.at(index)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EncodedVector { entries, precision_rho: rho, key_id: pk.key_id() })
}

/// Encrypts every entry under `pk`, preserving order and length.
pub fn encrypt_vector<R: Rng + ?Sized>(
    pk: &PublicKey,
    v: &EncodedVector,
    rng: &mut R,
) -> Result<Vec<Ciphertext>, HeError> {
    v.entries
        .iter()
        .enumerate()
        .map(|(index, m)| pk.encrypt(m, rng).map_err(|e| e.at(index)))
        .collect()
}

pub fn decrypt_vector(
    sk: &PrivateKey,
    ciphertexts: &[Ciphertext],
    rho: u32,
) -> Result<EncodedVector, HeError> {
    let entries = ciphertexts
        .iter()
        .enumerate()
        .map(|(index, c)| sk.decrypt(c).map_err(|e| e.at(index)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EncodedVector { entries, precision_rho: rho, key_id: sk.key_id() })
}
