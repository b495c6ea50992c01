//! Shamir t-of-n sharing over a prime field `p < 2^127`.
//!
//! Byte secrets are cut into 15-byte limbs, each shared independently.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::CryptoError;

const MERSENNE_127: u128 = (1u128 << 127) - 1;
pub const LIMB_BYTES: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimeField {
    p: u128,
}

fn mul_wide(a: u128, b: u128) -> (u128, u128) {
    let (a1, a0) = (a >> 64, a & u64::MAX as u128);
    let (b1, b0) = (b >> 64, b & u64::MAX as u128);
    let p00 = a0 * b0;
    let p01 = a0 * b1;
    let p10 = a1 * b0;
    let p11 = a1 * b1;
    let mid = (p00 >> 64) + (p01 & u64::MAX as u128) + (p10 & u64::MAX as u128);
    let lo = (p00 & u64::MAX as u128) | (mid << 64);
    let hi = p11 + (p01 >> 64) + (p10 >> 64) + (mid >> 64);
    (hi, lo)
}

impl PrimeField {
    /// The default share field, `2^127 - 1`.
    pub fn mersenne127() -> Self {
        Self { p: MERSENNE_127 }
    }

    /// Accepts primes in `[3, 2^127)` (Miller–Rabin over fixed bases).
    pub fn new(p: u128) -> Result<Self, CryptoError> {
        if p < 3 || p > MERSENNE_127 {
            return Err(CryptoError::NotPrime);
        }
        let f = Self { p };
        if !f.is_probable_prime() {
            return Err(CryptoError::NotPrime);
        }
        Ok(f)
    }

    pub fn modulus(&self) -> u128 {
        self.p
    }

    fn is_probable_prime(&self) -> bool {
        let n = self.p;
        const BASES: [u128; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
        for &b in &BASES {
            if n == b {
                return true;
            }
            if n % b == 0 {
                return false;
            }
        }
        let mut d = n - 1;
        let mut s = 0;
        while d % 2 == 0 {
            d /= 2;
            s += 1;
        }
        'outer: for &a in &BASES {
            let mut x = self.pow(a, d);
            if x == 1 || x == n - 1 {
                continue;
            }
            for _ in 1..s {
                x = self.mul(x, x);
                if x == n - 1 {
                    continue 'outer;
                }
            }
            return false;
        }
        true
    }

    #[inline]
    pub fn add(&self, a: u128, b: u128) -> u128 {
        let s = a + b;
        if s >= self.p {
            s - self.p
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(&self, a: u128, b: u128) -> u128 {
        if a >= b {
            a - b
        } else {
            a + self.p - b
        }
    }

    pub fn mul(&self, a: u128, b: u128) -> u128 {
        if self.p == MERSENNE_127 {
            let (hi, lo) = mul_wide(a, b);
            let r = (lo & MERSENNE_127) + (lo >> 127) + (hi << 1);
            let r = (r & MERSENNE_127) + (r >> 127);
            if r >= MERSENNE_127 {
                r - MERSENNE_127
            } else {
                r
            }
        } else if self.p <= u64::MAX as u128 {
            (a * b) % self.p
        } else {
            let mut acc = 0u128;
            let mut base = a;
            let mut e = b;
            while e > 0 {
                if e & 1 == 1 {
                    acc = self.add(acc, base);
                }
                base = self.add(base, base);
                e >>= 1;
            }
            acc
        }
    }

    pub fn pow(&self, mut base: u128, mut e: u128) -> u128 {
        let mut acc = 1u128;
        base %= self.p;
        while e > 0 {
            if e & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            e >>= 1;
        }
        acc
    }

    pub fn inv(&self, a: u128) -> u128 {
        self.pow(a, self.p - 2)
    }

    /// `a * x`, faster than [`mul`](Self::mul) when `x` fits a word.
    pub fn mul_small(&self, a: u128, x: u128) -> u128 {
        if self.p != MERSENNE_127 || x > u64::MAX as u128 {
            return self.mul(a, x);
        }
        let (a1, a0, x) = ((a >> 64) as u64, a as u64, x as u64);
        let lo_part = a0 as u128 * x as u128;
        let hi_part = a1 as u128 * x as u128;
        let (lo, carry) = lo_part.overflowing_add(hi_part << 64);
        let hi = (hi_part >> 64) + carry as u128;
        let r = (lo & MERSENNE_127) + (lo >> 127) + (hi << 1);
        let r = (r & MERSENNE_127) + (r >> 127);
        if r >= MERSENNE_127 {
            r - MERSENNE_127
        } else {
            r
        }
    }

    /// Inverses of nonzero elements with a single exponentiation.
    pub fn batch_inv(&self, xs: &[u128]) -> Vec<u128> {
        let mut prefix = Vec::with_capacity(xs.len());
        let mut acc = 1u128;
        for &x in xs {
            prefix.push(acc);
            acc = self.mul(acc, x);
        }
        let mut inv = self.inv(acc);
        let mut out = vec![0; xs.len()];
        for i in (0..xs.len()).rev() {
            out[i] = self.mul(inv, prefix[i]);
            inv = self.mul(inv, xs[i]);
        }
        out
    }

    pub fn random<R: RngCore + ?Sized>(&self, rng: &mut R) -> u128 {
        let bits = 128 - self.p.leading_zeros();
        let mask = if bits == 128 { u128::MAX } else { (1u128 << bits) - 1 };
        loop {
            let mut b = [0u8; 16];
            rng.fill_bytes(&mut b);
            let x = u128::from_le_bytes(b) & mask;
            if x < self.p {
                return x;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Share {
    pub index: u128,
    pub value: u128,
    pub threshold: usize,
    pub prime: u128,
}

fn check_params(t: usize, n: usize, field: &PrimeField) -> Result<(), CryptoError> {
    if t < 2 || t > n || (n as u128) >= field.p {
        return Err(CryptoError::InvalidThreshold { t, n });
    }
    Ok(())
}

/// Evaluates `secret + c_1 x + ... + c_{t-1} x^{t-1}` at `x = 1..=n`.
pub fn share_with_coefficients(
    secret: u128,
    coeffs: &[u128],
    n: usize,
    field: &PrimeField,
) -> Result<Vec<Share>, CryptoError> {
    let t = coeffs.len() + 1;
    check_params(t, n, field)?;
    if secret >= field.p || coeffs.iter().any(|&c| c >= field.p) {
        return Err(CryptoError::SecretTooLarge);
    }
    // Horner's rule, stepping all evaluation points together.
    let mut acc = vec![0u128; n];
    for &c in coeffs.iter().rev() {
        for (x, a) in (1..=n as u128).zip(acc.iter_mut()) {
            *a = field.add(field.mul_small(*a, x), c);
        }
    }
    Ok((1..=n as u128)
        .zip(acc)
        .map(|(x, a)| Share {
            index: x,
            value: field.add(field.mul_small(a, x), secret),
            threshold: t,
            prime: field.p,
        })
        .collect())
}

pub fn share_secret<R: RngCore + ?Sized>(
    secret: u128,
    t: usize,
    n: usize,
    field: &PrimeField,
    rng: &mut R,
) -> Result<Vec<Share>, CryptoError> {
    check_params(t, n, field)?;
    let coeffs: Vec<u128> = (1..t).map(|_| field.random(rng)).collect();
    share_with_coefficients(secret, &coeffs, n, field)
}

/// Lagrange basis values at zero for the given distinct nonzero indices.
pub fn lagrange_at_zero(indices: &[u128], field: &PrimeField) -> Result<Vec<u128>, CryptoError> {
    for (i, &a) in indices.iter().enumerate() {
        if a == 0 || a >= field.p {
            return Err(CryptoError::DuplicateIndex(a));
        }
        if indices[..i].contains(&a) {
            return Err(CryptoError::DuplicateIndex(a));
        }
    }
    let mut nums = Vec::with_capacity(indices.len());
    let mut dens = Vec::with_capacity(indices.len());
    for &xi in indices {
        let mut num = 1u128;
        let mut den = 1u128;
        for &xj in indices {
            if xj != xi {
                num = field.mul_small(num, xj);
                den = field.mul(den, field.sub(xj, xi));
            }
        }
        nums.push(num);
        dens.push(den);
    }
    let inv = field.batch_inv(&dens);
    Ok(nums.into_iter().zip(inv).map(|(n, d)| field.mul(n, d)).collect())
}

/// Interpolates at zero using the first `t` shares.
pub fn reconstruct(shares: &[Share]) -> Result<u128, CryptoError> {
    let first = shares.first().ok_or(CryptoError::InsufficientShares { have: 0, need: 2 })?;
    let t = first.threshold;
    let field = PrimeField { p: first.prime };
    if shares.len() < t {
        return Err(CryptoError::InsufficientShares {
            have: shares.len(),
            need: t,
        });
    }
    let idx: Vec<u128> = shares.iter().map(|s| s.index).collect();
    lagrange_at_zero(&idx, &field)?;
    let used = &shares[..t];
    let basis = lagrange_at_zero(&idx[..t], &field)?;
    Ok(used
        .iter()
        .zip(basis)
        .fold(0, |acc, (s, l)| field.add(acc, field.mul(s.value, l))))
}

/// Packs bytes into 15-byte big-endian limbs (the last may be shorter).
pub fn bytes_to_limbs(bytes: &[u8]) -> Vec<u128> {
    bytes
        .chunks(LIMB_BYTES)
        .map(|c| c.iter().fold(0u128, |acc, &b| (acc << 8) | b as u128))
        .collect()
}

pub fn limbs_to_bytes(limbs: &[u128], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    for (i, &l) in limbs.iter().enumerate() {
        let width = (len - i * LIMB_BYTES).min(LIMB_BYTES);
        let be = l.to_be_bytes();
        out.extend_from_slice(&be[16 - width..]);
    }
    out
}

/// Shares of a byte secret: `result[j]` holds recipient `j+1`'s value per limb.
pub fn share_bytes<R: RngCore + ?Sized>(
    secret: &[u8],
    t: usize,
    n: usize,
    field: &PrimeField,
    rng: &mut R,
) -> Result<Vec<Vec<u128>>, CryptoError> {
    let limbs = bytes_to_limbs(secret);
    let mut out = vec![Vec::with_capacity(limbs.len()); n];
    for limb in limbs {
        for (j, s) in share_secret(limb, t, n, field, rng)?.into_iter().enumerate() {
            out[j].push(s.value);
        }
    }
    Ok(out)
}

/// Rebuilds a byte secret from `(index, limb values)` pairs using a
/// precomputed basis over exactly those indices.
pub fn reconstruct_bytes(
    shares: &[(u128, &[u128])],
    t: usize,
    len: usize,
    field: &PrimeField,
) -> Result<Vec<u8>, CryptoError> {
    if shares.len() < t {
        return Err(CryptoError::InsufficientShares {
            have: shares.len(),
            need: t,
        });
    }
    let used = &shares[..t];
    let idx: Vec<u128> = used.iter().map(|s| s.0).collect();
    let basis = lagrange_at_zero(&idx, field)?;
    combine_bytes(used, &basis, len, field)
}

/// Combines shares with precomputed Lagrange weights (one per share).
pub fn combine_bytes(
    used: &[(u128, &[u128])],
    basis: &[u128],
    len: usize,
    field: &PrimeField,
) -> Result<Vec<u8>, CryptoError> {
    let nlimbs = len.div_ceil(LIMB_BYTES);
    if used.iter().any(|s| s.1.len() != nlimbs) {
        return Err(CryptoError::BadElement);
    }
    let limbs: Vec<u128> = (0..nlimbs)
        .map(|l| {
            used.iter()
                .zip(basis)
                .fold(0, |acc, (s, &b)| field.add(acc, field.mul(s.1[l], b)))
        })
        .collect();
    Ok(limbs_to_bytes(&limbs, len))
}
