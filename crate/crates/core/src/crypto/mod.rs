//! Commitments, PRG expansion, randomized Diffie–Hellman and Shamir sharing.

pub mod cipher;
pub mod commit;
pub mod group;
pub mod prg;
pub mod shamir;

use thiserror::Error;

pub use cipher::{open, seal, ShareKey};
pub use commit::{commit, verify, Commitment};
pub use group::{derive_shared, randomize_pub, DhGroup, GroupKind, KeyPair, SharedSeed};
pub use prg::{prg_expand, prg_fill};
pub use shamir::{reconstruct, share_secret, PrimeField, Share};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("randomizing exponent must be nonzero")]
    ZeroExponent,
    #[error("commitment nonce must be at least 16 bytes, got {0}")]
    ShortNonce(usize),
    #[error("insufficient shares: have {have}, need {need}")]
    InsufficientShares { have: usize, need: usize },
    #[error("duplicate share index {0}")]
    DuplicateIndex(u128),
    #[error("invalid threshold t={t} for n={n}")]
    InvalidThreshold { t: usize, n: usize },
    #[error("modulus is not a usable prime")]
    NotPrime,
    #[error("secret does not fit the share field")]
    SecretTooLarge,
    #[error("malformed group element")]
    BadElement,
    #[error("share payload failed authentication")]
    AuthFailed,
}

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}
