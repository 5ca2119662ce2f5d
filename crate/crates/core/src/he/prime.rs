//! Probabilistic prime generation for Paillier moduli.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

use super::HeError;

/// Miller-Rabin rounds for every candidate.
pub const MILLER_RABIN_ROUNDS: usize = 64;

/// Candidates tried per prime before giving up.
const MAX_CANDIDATES: usize = 200_000;

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

/// Miller-Rabin with `rounds` random bases, preceded by trial division.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    if let Some(small) = n.to_u32() {
        if small < 2 {
            return false;
        }
        if small <= 256 {
            return SMALL_PRIMES.contains(&small);
        }
    }
    for &p in SMALL_PRIMES.iter() {
        if (n % p).is_zero() {
            return false;
        }
    }

    let one = BigUint::one();
    let two = BigUint::from(2u32);
    let n_minus_one = n - &one;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;

    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_one);
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n_minus_one {
                continue 'witness;
            }
            if x == one {
                return false;
            }
        }
        return false;
    }
    true
}

/// A random prime of exactly `bits` bits with its two top bits set, so that
/// the product of two such primes has exactly `bits_a + bits_b` bits.
pub fn generate_prime<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> Result<BigUint, HeError> {
    if bits < 3 {
        return Err(HeError::KeyTooSmall(bits * 2));
    }
    let top = (BigUint::one() << (bits - 1)) | (BigUint::one() << (bits - 2));
    for _ in 0..MAX_CANDIDATES {
        let candidate = rng.gen_biguint(bits) | &top | BigUint::one();
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return Ok(candidate);
        }
    }
    Err(HeError::PrimeGeneration(MAX_CANDIDATES))
}

pub(crate) fn lcm(a: &BigUint, b: &BigUint) -> BigUint {
    a.lcm(b)
}
