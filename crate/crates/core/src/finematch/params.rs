//! Bit-length constraints and prime generation for the fine-grained protocol.

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};

use super::FineMatchError;

/// Requested bit lengths. `coord_bits` is the width of each non-negative
/// fixed-point coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamSpec {
    pub k1: u32,
    pub k2: u32,
    pub k3: u32,
    pub k4: u32,
    pub coord_bits: u32,
}

impl ParamSpec {
    pub const DEFAULT: ParamSpec = ParamSpec {
        k1: 832,
        k2: 320,
        k3: 128,
        k4: 128,
        coord_bits: 22,
    };

    /// Small set for exhaustive tests.
    pub const TOY: ParamSpec = ParamSpec {
        k1: 256,
        k2: 96,
        k3: 32,
        k4: 32,
        coord_bits: 10,
    };

    pub const fn new(k1: u32, k2: u32, k3: u32, k4: u32, coord_bits: u32) -> Self {
        ParamSpec {
            k1,
            k2,
            k3,
            k4,
            coord_bits,
        }
    }

    /// Left-hand sides of the three inequalities, in order.
    pub fn bounds(&self) -> [(Inequality, u64, u64); 3] {
        let (k1, k2, k3, k4, b) = (
            self.k1 as u64,
            self.k2 as u64,
            self.k3 as u64,
            self.k4 as u64,
            self.coord_bits as u64,
        );
        [
            (
                Inequality::SumBound,
                k4 + (2 * k2 + 2 * b + 2).max(k2 + b + k3 + 2),
                k1,
            ),
            (
                Inequality::ProductBound,
                k4 + (2 * k2 + 2 * b + 2).max(k2 + 2 * b + 1 + k3),
                k1,
            ),
            (Inequality::NoiseBound, k4 + k3 + 2 * b + 2, k2),
        ]
    }

    pub fn check(&self) -> Result<(), FineMatchError> {
        if self.coord_bits == 0 || self.coord_bits > 31 {
            return Err(FineMatchError::UnsupportedSpec(format!(
                "coordinate width {} outside 1..=31",
                self.coord_bits
            )));
        }
        if self.k3 == 0 || self.k4 < 2 || self.k2 < 2 {
            return Err(FineMatchError::UnsupportedSpec(format!("{self:?}")));
        }
        for (which, lhs, rhs) in self.bounds() {
            if lhs >= rhs {
                return Err(FineMatchError::ConstraintViolation { which, lhs, rhs });
            }
        }
        Ok(())
    }

    /// Exclusive upper bound on any recovered b-value under these lengths.
    pub fn recovery_cap(&self) -> BigUint {
        BigUint::one() << (self.k4 + 2 * self.k2 + 2 * self.coord_bits + 2) as usize
    }
}

impl Default for ParamSpec {
    fn default() -> Self {
        ParamSpec::DEFAULT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Inequality {
    /// k4 + max(2k2 + 2β + 2, k2 + β + k3 + 2) < k1
    SumBound,
    /// k4 + max(2k2 + 2β + 2, k2 + 2β + 1 + k3) < k1
    ProductBound,
    /// k4 + k3 + 2β + 2 < k2
    NoiseBound,
}

impl fmt::Display for Inequality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Inequality::SumBound => "k4 + max(2k2 + 2b + 2, k2 + b + k3 + 2) < k1",
            Inequality::ProductBound => "k4 + max(2k2 + 2b + 2, k2 + 2b + 1 + k3) < k1",
            Inequality::NoiseBound => "k4 + k3 + 2b + 2 < k2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FineGrainParams {
    pub spec: ParamSpec,
    pub p: BigUint,
    pub alpha: BigUint,
    alpha_sq: BigUint,
    cap: BigUint,
}

impl FineGrainParams {
    /// Builds params from announced values, checking sizes but not primality.
    pub fn from_public(spec: ParamSpec, p: BigUint, alpha: BigUint) -> Result<Self, FineMatchError> {
        spec.check()?;
        Self::from_public_unchecked(spec, p, alpha)
    }

    /// `from_public` without the bit-length inequalities. Recovery is only
    /// guaranteed when they hold; this exists to observe what breaks when
    /// they do not.
    #[doc(hidden)]
    pub fn from_public_unchecked(
        spec: ParamSpec,
        p: BigUint,
        alpha: BigUint,
    ) -> Result<Self, FineMatchError> {
        if p.bits() != spec.k1 as u64 || alpha.bits() != spec.k2 as u64 {
            return Err(FineMatchError::UnsupportedSpec(format!(
                "modulus sizes {}/{} do not match {}/{}",
                p.bits(),
                alpha.bits(),
                spec.k1,
                spec.k2
            )));
        }
        let alpha_sq = &alpha * &alpha;
        if alpha_sq >= p {
            return Err(FineMatchError::UnsupportedSpec("alpha^2 >= p".into()));
        }
        Ok(FineGrainParams {
            cap: spec.recovery_cap(),
            spec,
            p,
            alpha,
            alpha_sq,
        })
    }

    /// Like `from_public`, and also requires both moduli to be prime.
    pub fn from_primes<R: RngCore + CryptoRng>(
        spec: ParamSpec,
        p: BigUint,
        alpha: BigUint,
        rng: &mut R,
    ) -> Result<Self, FineMatchError> {
        if !is_probable_prime(&p, rng) || !is_probable_prime(&alpha, rng) {
            return Err(FineMatchError::UnsupportedSpec("modulus is not prime".into()));
        }
        Self::from_public(spec, p, alpha)
    }

    pub fn alpha_sq(&self) -> &BigUint {
        &self.alpha_sq
    }

    pub(crate) fn cap(&self) -> &BigUint {
        &self.cap
    }

    pub fn coord_limit(&self) -> u64 {
        1u64 << self.spec.coord_bits
    }
}

pub fn gen_params<R: RngCore + CryptoRng>(
    spec: ParamSpec,
    rng: &mut R,
) -> Result<FineGrainParams, FineMatchError> {
    spec.check()?;
    let p = random_prime(spec.k1, rng);
    let alpha = random_prime(spec.k2, rng);
    FineGrainParams::from_public(spec, p, alpha)
}

const MR_ROUNDS: usize = 24;
const SIEVE_LIMIT: u32 = 4096;

fn small_primes() -> Vec<u32> {
    let n = SIEVE_LIMIT as usize;
    let mut composite = vec![false; n];
    let mut out = Vec::new();
    for i in 3..n {
        if !composite[i] {
            if i % 2 == 1 {
                out.push(i as u32);
            }
            let mut j = i * i;
            while j < n {
                composite[j] = true;
                j += i;
            }
        }
    }
    out
}

/// Miller-Rabin with random bases after trial division.
pub fn is_probable_prime<R: RngCore + CryptoRng>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    if n.is_even() {
        return *n == two;
    }
    for sp in small_primes().into_iter().take(64) {
        let sp = BigUint::from(sp);
        if *n == sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    miller_rabin(n, rng)
}

fn miller_rabin<R: RngCore + CryptoRng>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    let n_minus_1 = n - 1u32;
    if n_minus_1 <= two {
        return true;
    }
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..MR_ROUNDS {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits. Scans upward from a random odd
/// start, skipping candidates with a small factor.
pub fn random_prime<R: RngCore + CryptoRng>(bits: u32, rng: &mut R) -> BigUint {
    assert!(bits >= 16, "prime width too small");
    let primes = small_primes();
    'restart: loop {
        let mut c = rng.gen_biguint(bits as u64);
        c.set_bit(bits as u64 - 1, true);
        c.set_bit(0, true);
        let mut rem: Vec<u32> = primes
            .iter()
            .map(|&p| (&c % p).to_u32_digits().first().copied().unwrap_or(0))
            .collect();
        let mut delta = 0u32;
        loop {
            if rem.iter().all(|&r| r != 0) {
                let cand = &c + delta;
                if cand.bits() != bits as u64 {
                    continue 'restart;
                }
                if miller_rabin(&cand, rng) {
                    return cand;
                }
            }
            delta += 2;
            for (r, &p) in rem.iter_mut().zip(&primes) {
                *r = (*r + 2) % p;
            }
        }
    }
}
