//! Safe-prime multiplicative groups and randomized Diffie–Hellman.
//!
//! For peers `u`, `v` with keys `s_u`, `s_v`, the server hands `u` the value
//! `pub_v^r` and `v` the value `pub_u^r`; both then derive `g^(s_u s_v r)`
//! without learning whose key they were given.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{sha256, CryptoError};

const MODP_2048: &str = "\
FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74\
020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437\
4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05\
98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB\
9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718\
3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF";

/// Largest 64-bit safe prime below 2^64 found by descending search.
const SIM_64: u64 = 18_446_744_073_709_550_147;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    /// p = 23, g = 3; exhaustive test oracles only.
    Toy23,
    /// 64-bit safe prime, g = 4; fast simulation.
    Sim64,
    /// RFC 3526 2048-bit MODP group, g = 2.
    Modp2048,
}

/// Subgroup of prime order `q = (p-1)/2` in `Z_p^*`, generated by `g`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhGroup {
    kind: GroupKind,
    p: BigUint,
    q: BigUint,
    g: BigUint,
    width: usize,
    /// Montgomery context when the modulus fits a machine word.
    word: Option<Montgomery>,
}

impl DhGroup {
    pub fn new(kind: GroupKind) -> Self {
        let (p, g) = match kind {
            GroupKind::Toy23 => (BigUint::from(23u32), BigUint::from(3u32)),
            GroupKind::Sim64 => (BigUint::from(SIM_64), BigUint::from(4u32)),
            GroupKind::Modp2048 => (
                BigUint::parse_bytes(MODP_2048.as_bytes(), 16).expect("static prime"),
                BigUint::from(2u32),
            ),
        };
        let q = (&p - 1u32) >> 1;
        let width = p.bits().div_ceil(8) as usize;
        let word = p.to_u64().map(Montgomery::new);
        Self {
            kind,
            p,
            q,
            g,
            width,
            word,
        }
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn modulus(&self) -> &BigUint {
        &self.p
    }

    pub fn order(&self) -> &BigUint {
        &self.q
    }

    pub fn generator(&self) -> &BigUint {
        &self.g
    }

    /// Fixed width of encoded elements and exponents.
    pub fn element_bytes(&self) -> usize {
        self.width
    }

    pub fn pow(&self, base: &BigUint, exp: &BigUint) -> BigUint {
        match (self.word, base.to_u64(), exp.to_u64()) {
            (Some(m), Some(b), Some(e)) => BigUint::from(m.pow(b, e)),
            _ => base.modpow(exp, &self.p),
        }
    }

    /// Uniform exponent in `[1, q)`.
    pub fn random_exponent<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        let bits = self.q.bits();
        let nbytes = bits.div_ceil(8) as usize;
        let top_mask = if bits % 8 == 0 {
            0xff
        } else {
            (1u8 << (bits % 8)) - 1
        };
        let mut buf = vec![0u8; nbytes];
        loop {
            rng.fill_bytes(&mut buf);
            buf[0] &= top_mask;
            let x = BigUint::from_bytes_be(&buf);
            if !x.is_zero() && x < self.q {
                return x;
            }
        }
    }

    pub fn keygen<R: RngCore + ?Sized>(&self, rng: &mut R) -> KeyPair {
        let secret = self.random_exponent(rng);
        let public = self.pow(&self.g, &secret);
        KeyPair { secret, public }
    }

    pub fn keypair_from_secret(&self, secret: BigUint) -> KeyPair {
        let public = self.pow(&self.g, &secret);
        KeyPair { secret, public }
    }

    /// Big-endian, left-padded to [`Self::element_bytes`].
    pub fn encode(&self, x: &BigUint) -> Vec<u8> {
        let raw = x.to_bytes_be();
        let mut out = vec![0u8; self.width.saturating_sub(raw.len())];
        out.extend_from_slice(&raw);
        out
    }

    /// Parses an encoded element, rejecting values outside `[1, p)`.
    pub fn decode_element(&self, bytes: &[u8]) -> Result<BigUint, CryptoError> {
        if bytes.len() != self.width {
            return Err(CryptoError::BadElement);
        }
        let x = BigUint::from_bytes_be(bytes);
        if x.is_zero() || x >= self.p {
            return Err(CryptoError::BadElement);
        }
        Ok(x)
    }

    /// Parses an encoded exponent, rejecting values outside `[1, q)`.
    pub fn decode_exponent(&self, bytes: &[u8]) -> Result<BigUint, CryptoError> {
        let x = BigUint::from_bytes_be(bytes);
        if x.is_zero() || x >= self.q {
            return Err(CryptoError::BadElement);
        }
        Ok(x)
    }

    pub fn is_member(&self, x: &BigUint) -> bool {
        !x.is_zero() && x < &self.p && self.pow(x, &self.q).is_one()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub secret: BigUint,
    pub public: BigUint,
}

/// Montgomery arithmetic modulo an odd `n < 2^64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Montgomery {
    n: u64,
    /// `-n^-1 mod 2^64`.
    neg_inv: u64,
    /// `2^128 mod n`.
    r2: u64,
}

impl Montgomery {
    fn new(n: u64) -> Self {
        debug_assert!(n % 2 == 1);
        let mut inv = n;
        for _ in 0..6 {
            inv = inv.wrapping_mul(2u64.wrapping_sub(n.wrapping_mul(inv)));
        }
        let r = ((1u128 << 64) % n as u128) as u64;
        let r2 = ((r as u128 * r as u128) % n as u128) as u64;
        Self {
            n,
            neg_inv: inv.wrapping_neg(),
            r2,
        }
    }

    fn redc(&self, t: u128) -> u64 {
        let m = (t as u64).wrapping_mul(self.neg_inv);
        let (s, carry) = t.overflowing_add(m as u128 * self.n as u128);
        let hi = (s >> 64) as u64;
        if carry || hi >= self.n {
            hi.wrapping_sub(self.n)
        } else {
            hi
        }
    }

    fn mul(&self, a: u64, b: u64) -> u64 {
        self.redc(a as u128 * b as u128)
    }

    fn pow(&self, base: u64, mut exp: u64) -> u64 {
        let mut b = self.mul(base % self.n, self.r2);
        let mut acc = self.mul(1 % self.n, self.r2);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, b);
            }
            b = self.mul(b, b);
            exp >>= 1;
        }
        self.redc(acc as u128)
    }
}

/// 32-byte seed hashed from a shared group element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SharedSeed(pub [u8; 32]);

pub fn randomize_pub(group: &DhGroup, public: &BigUint, r: &BigUint) -> Result<BigUint, CryptoError> {
    if r.is_zero() {
        return Err(CryptoError::ZeroExponent);
    }
    Ok(group.pow(public, r))
}

/// Raw shared element `peer^secret`.
pub fn shared_element(group: &DhGroup, secret: &BigUint, randomized_peer: &BigUint) -> BigUint {
    group.pow(randomized_peer, secret)
}

pub fn derive_shared(group: &DhGroup, secret: &BigUint, randomized_peer: &BigUint) -> SharedSeed {
    let elem = shared_element(group, secret, randomized_peer);
    SharedSeed(sha256(&[b"safeagg/seed", &group.encode(&elem)]))
}
