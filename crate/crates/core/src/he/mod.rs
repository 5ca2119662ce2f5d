//! Paillier cryptosystem (`g = n + 1`) and the fixed-point codec that moves
//! real-valued model parameters into its plaintext space.

mod codec;
mod paillier;
pub mod prime;

pub use codec::{
    center, decode_centered, decrypt_vector, encode_scalar, encode_vector, encrypt_vector,
    reduce_signed, EncodedVector,
};
pub use paillier::{
    keygen, keypair_from_primes, Ciphertext, KeyId, PrivateKey, PrivateKeyRecord, PublicKey,
    PublicKeyRecord,
};

use thiserror::Error;

/// Default fixed-point precision in bits.
pub const DEFAULT_RHO: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeError {
    #[error("key size of {0} bits is below the 16-bit minimum")]
    KeyTooSmall(u64),
    #[error("prime generation gave up after {0} attempts")]
    PrimeGeneration(usize),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("plaintext outside [0, n)")]
    PlaintextOutOfRange,
    #[error("nonce must be a unit in [1, n)")]
    InvalidNonce,
    #[error("ciphertext is not a unit modulo n^2")]
    MalformedCiphertext,
    #[error("ciphertext belongs to key {found}, expected {expected}")]
    KeyMismatch { expected: KeyId, found: KeyId },
    #[error("{value} does not fit the fixed-point range at precision {rho}")]
    EncodingOverflow { value: f64, rho: u32 },
    #[error("element {index}: {source}")]
    Element {
        index: usize,
        #[source]
        source: Box<HeError>,
    },
}

impl HeError {
    pub(crate) fn at(self, index: usize) -> Self {
        HeError::Element { index, source: Box::new(self) }
    }
}

/// The toy key `p = 5, q = 7` used for exhaustive checks.
pub fn toy_keypair() -> (PublicKey, PrivateKey) {
    keypair_from_primes(5u32.into(), 7u32.into()).expect("5 and 7 form a valid toy key")
}
