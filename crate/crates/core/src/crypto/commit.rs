//! Hash commitments: `digest = H(len(payload) || payload || nonce)`.

use serde::{Deserialize, Serialize};

use super::{sha256, CryptoError};

pub const MIN_NONCE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Commitment(pub [u8; 32]);

fn digest(payload: &[u8], nonce: &[u8]) -> [u8; 32] {
    let len = (payload.len() as u64).to_le_bytes();
    sha256(&[b"safeagg/commit", &len, payload, nonce])
}

pub fn commit(payload: &[u8], nonce: &[u8]) -> Result<Commitment, CryptoError> {
    if nonce.len() < MIN_NONCE {
        return Err(CryptoError::ShortNonce(nonce.len()));
    }
    Ok(Commitment(digest(payload, nonce)))
}

/// Never fails; any mismatch (including a short nonce) is `false`.
pub fn verify(c: &Commitment, payload: &[u8], nonce: &[u8]) -> bool {
    nonce.len() >= MIN_NONCE && digest(payload, nonce) == c.0
}
