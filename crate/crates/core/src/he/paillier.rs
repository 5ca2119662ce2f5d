use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prime::{generate_prime, is_probable_prime, lcm, MILLER_RABIN_ROUNDS};
use super::HeError;

/// Pairs of primes tried before keygen reports failure.
const MAX_KEY_ATTEMPTS: usize = 64;

/// Short fingerprint of a public modulus, carried by every ciphertext.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub u64);

impl KeyId {
    fn of(n: &BigUint) -> Self {
        let digest = Sha256::digest(n.to_bytes_be());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        KeyId(u64::from_be_bytes(head))
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    key_id: KeyId,
}

impl PublicKey {
    fn from_modulus(n: BigUint) -> Self {
        let n_squared = &n * &n;
        let g = &n + BigUint::one();
        let key_id = KeyId::of(&n);
        Self { n, n_squared, g, key_id }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// Fixed width in bytes of a serialized ciphertext value (`n²` in big-endian).
    pub fn ciphertext_width(&self) -> usize {
        self.n_squared.bits().div_ceil(8) as usize
    }

    fn check_key(&self, c: &Ciphertext) -> Result<(), HeError> {
        if c.key_id != self.key_id {
            return Err(HeError::KeyMismatch { expected: self.key_id, found: c.key_id });
        }
        Ok(())
    }

    /// Draws `r` uniformly from `Z_n*`.
    pub fn sample_nonce<R: Rng + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    pub fn encrypt<R: Rng + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, HeError> {
        if m >= &self.n {
            return Err(HeError::PlaintextOutOfRange);
        }
        let r = self.sample_nonce(rng);
        self.encrypt_with_nonce(m, &r)
    }

    /// `c = g^m · r^n mod n²`. With `g = n + 1`, `g^m = 1 + m·n mod n²`.
    pub fn encrypt_with_nonce(&self, m: &BigUint, r: &BigUint) -> Result<Ciphertext, HeError> {
        if m >= &self.n {
            return Err(HeError::PlaintextOutOfRange);
        }
        if r.is_zero() || r >= &self.n || !r.gcd(&self.n).is_one() {
            return Err(HeError::InvalidNonce);
        }
        let g_m = (BigUint::one() + m * &self.n) % &self.n_squared;
        let r_n = r.modpow(&self.n, &self.n_squared);
        Ok(Ciphertext { value: g_m * r_n % &self.n_squared, key_id: self.key_id })
    }

    /// Homomorphic addition: the product of ciphertexts decrypts to `m1 + m2 mod n`.
    pub fn add(&self, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, HeError> {
        self.check_key(c1)?;
        self.check_key(c2)?;
        Ok(Ciphertext { value: &c1.value * &c2.value % &self.n_squared, key_id: self.key_id })
    }

    /// `c^k mod n²`, which decrypts to `k·m mod n`.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext, HeError> {
        self.check_key(c)?;
        if k >= &self.n {
            return Err(HeError::PlaintextOutOfRange);
        }
        Ok(Ciphertext { value: c.value.modpow(k, &self.n_squared), key_id: self.key_id })
    }

    pub fn negate(&self, c: &Ciphertext) -> Result<Ciphertext, HeError> {
        self.scalar_mul(c, &(&self.n - BigUint::one()))
    }

    pub fn sub(&self, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, HeError> {
        self.add(c1, &self.negate(c2)?)
    }

    pub fn to_record(&self) -> PublicKeyRecord {
        PublicKeyRecord { n: hex_of(&self.n), g: hex_of(&self.g) }
    }

    pub fn from_record(record: &PublicKeyRecord) -> Result<Self, HeError> {
        let n = parse_hex("n", &record.n)?;
        let g = parse_hex("g", &record.g)?;
        if n.is_even() || n < BigUint::from(15u32) {
            return Err(HeError::InvalidKey("n must be an odd composite".into()));
        }
        if g != &n + BigUint::one() {
            return Err(HeError::InvalidKey("g must equal n + 1".into()));
        }
        Ok(Self::from_modulus(n))
    }
}

/// Per-prime constants for CRT decryption.
#[derive(Clone, PartialEq, Eq)]
struct CrtHalf {
    prime: BigUint,
    prime_squared: BigUint,
    exponent: BigUint,
    h: BigUint,
}

impl CrtHalf {
    fn new(prime: &BigUint, g: &BigUint) -> Result<Self, HeError> {
        let prime_squared = prime * prime;
        let exponent = prime - BigUint::one();
        let l = (g.modpow(&exponent, &prime_squared) - BigUint::one()) / prime;
        let h = l
            .modinv(prime)
            .ok_or_else(|| HeError::InvalidKey("L_p(g^(p-1)) not invertible".into()))?;
        Ok(Self { prime: prime.clone(), prime_squared, exponent, h })
    }

    fn decrypt(&self, c: &BigUint) -> BigUint {
        let u = c.modpow(&self.exponent, &self.prime_squared);
        let l = (u - BigUint::one()) / &self.prime;
        l * &self.h % &self.prime
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey {
    lambda: BigUint,
    dec_mu: BigUint,
    p: BigUint,
    q: BigUint,
    public: PublicKey,
    crt_p: CrtHalf,
    crt_q: CrtHalf,
    q_inv_p: BigUint,
}

// Secret material stays out of debug output.
impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey").field("key_id", &self.public.key_id).finish_non_exhaustive()
    }
}

impl PrivateKey {
    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn dec_mu(&self) -> &BigUint {
        &self.dec_mu
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn key_id(&self) -> KeyId {
        self.public.key_id
    }

    fn check(&self, c: &Ciphertext) -> Result<(), HeError> {
        self.public.check_key(c)?;
        let v = &c.value;
        if v.is_zero() || v >= &self.public.n_squared || !v.gcd(&self.public.n).is_one() {
            return Err(HeError::MalformedCiphertext);
        }
        Ok(())
    }

    /// Decrypts through the CRT split over `p²` and `q²`.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, HeError> {
        self.check(c)?;
        let mp = self.crt_p.decrypt(&c.value);
        let mq = self.crt_q.decrypt(&c.value);
        // m = mq + q·((mp − mq)·q⁻¹ mod p)
        let diff = (&mp + &self.p - (&mq % &self.p)) % &self.p;
        let t = diff * &self.q_inv_p % &self.p;
        Ok(mq + &self.q * t)
    }

    /// The textbook formula `m = L(c^λ mod n²)·μ mod n`.
    pub fn decrypt_textbook(&self, c: &Ciphertext) -> Result<BigUint, HeError> {
        self.check(c)?;
        let n = &self.public.n;
        let u = c.value.modpow(&self.lambda, &self.public.n_squared);
        let l = (u - BigUint::one()) / n;
        Ok(l * &self.dec_mu % n)
    }

    pub fn to_record(&self) -> PrivateKeyRecord {
        PrivateKeyRecord {
            n: hex_of(&self.public.n),
            g: hex_of(&self.public.g),
            lambda: hex_of(&self.lambda),
            p: hex_of(&self.p),
            q: hex_of(&self.q),
        }
    }

    pub fn from_record(record: &PrivateKeyRecord) -> Result<Self, HeError> {
        let p = parse_hex("p", &record.p)?;
        let q = parse_hex("q", &record.q)?;
        let key = keypair_from_primes(p, q)?.1;
        if hex_of(&key.public.n) != record.n.to_ascii_lowercase()
            || hex_of(&key.lambda) != record.lambda.to_ascii_lowercase()
            || hex_of(&key.public.g) != record.g.to_ascii_lowercase()
        {
            return Err(HeError::InvalidKey("n, g or lambda inconsistent with p and q".into()));
        }
        Ok(key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    key_id: KeyId,
}

impl Ciphertext {
    /// Wraps a raw residue; validity is checked on use.
    pub fn from_raw(value: BigUint, key_id: KeyId) -> Self {
        Self { value, key_id }
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }
}

/// Lowercase hex, big-endian.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicKeyRecord {
    pub n: String,
    pub g: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivateKeyRecord {
    pub n: String,
    pub g: String,
    pub lambda: String,
    pub p: String,
    pub q: String,
}

fn hex_of(v: &BigUint) -> String {
    v.to_str_radix(16)
}

fn parse_hex(field: &str, s: &str) -> Result<BigUint, HeError> {
    BigUint::parse_bytes(s.as_bytes(), 16)
        .ok_or_else(|| HeError::InvalidKey(format!("field {field} is not hex")))
}

/// Generates a key pair whose modulus has exactly `key_bits` bits.
pub fn keygen<R: Rng + ?Sized>(key_bits: u64, rng: &mut R) -> Result<(PublicKey, PrivateKey), HeError> {
    if key_bits < 16 {
        return Err(HeError::KeyTooSmall(key_bits));
    }
    let p_bits = key_bits / 2;
    let q_bits = key_bits - p_bits;
    for _ in 0..MAX_KEY_ATTEMPTS {
        let p = generate_prime(p_bits, rng)?;
        let q = generate_prime(q_bits, rng)?;
        if p == q {
            continue;
        }
        match keypair_from_primes(p, q) {
            Ok(pair) => {
                debug_assert_eq!(pair.0.bits(), key_bits);
                return Ok(pair);
            }
            Err(HeError::InvalidKey(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(HeError::PrimeGeneration(MAX_KEY_ATTEMPTS))
}

/// Builds a key pair from explicit primes (used for toy keys and key import).
pub fn keypair_from_primes(p: BigUint, q: BigUint) -> Result<(PublicKey, PrivateKey), HeError> {
    let one = BigUint::one();
    if p == q {
        return Err(HeError::InvalidKey("p and q must differ".into()));
    }
    let mut check_rng = crate::rng::seeded(0x5EED_0F_u64 ^ p.bits());
    for prime in [&p, &q] {
        if !is_probable_prime(prime, MILLER_RABIN_ROUNDS, &mut check_rng) {
            return Err(HeError::InvalidKey("p and q must be prime".into()));
        }
    }
    let n = &p * &q;
    let phi = (&p - &one) * (&q - &one);
    if !n.gcd(&phi).is_one() {
        return Err(HeError::InvalidKey("gcd(n, (p-1)(q-1)) must be 1".into()));
    }
    let lambda = lcm(&(&p - &one), &(&q - &one));
    // With g = n + 1, L(g^λ mod n²) = λ mod n.
    let dec_mu = (&lambda % &n)
        .modinv(&n)
        .ok_or_else(|| HeError::InvalidKey("lambda not invertible mod n".into()))?;
    let public = PublicKey::from_modulus(n);
    let crt_p = CrtHalf::new(&p, &public.g)?;
    let crt_q = CrtHalf::new(&q, &public.g)?;
    let q_inv_p = (&q % &p)
        .modinv(&p)
        .ok_or_else(|| HeError::InvalidKey("q not invertible mod p".into()))?;
    let private =
        PrivateKey { lambda, dec_mu, p, q, public: public.clone(), crt_p, crt_q, q_inv_p };
    Ok((public, private))
}
