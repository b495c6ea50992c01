//! Authenticated encryption of share payloads between subgroup members.
//!
//! Keystream: `H(key || label || counter)`; tag: first 16 bytes of
//! `H(key || "mac" || label || ciphertext)`. The label binds each record to
//! its secret type, so a record relabelled in transit fails to open.

use super::{sha256, CryptoError, SharedSeed};

pub const TAG_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShareKey([u8; 32]);

impl ShareKey {
    pub fn from_seed(seed: &SharedSeed) -> Self {
        Self(sha256(&[b"safeagg/share-key", &seed.0]))
    }
}

fn keystream_xor(key: &ShareKey, label: u8, data: &mut [u8]) {
    for (i, chunk) in data.chunks_mut(32).enumerate() {
        let ks = sha256(&[b"safeagg/ks", &key.0, &[label], &(i as u64).to_le_bytes()]);
        for (b, k) in chunk.iter_mut().zip(ks) {
            *b ^= k;
        }
    }
}

fn tag(key: &ShareKey, label: u8, ct: &[u8]) -> [u8; TAG_BYTES] {
    let d = sha256(&[b"safeagg/mac", &key.0, &[label], ct]);
    d[..TAG_BYTES].try_into().unwrap()
}

pub fn seal(key: &ShareKey, label: u8, plaintext: &[u8]) -> Vec<u8> {
    let mut out = plaintext.to_vec();
    keystream_xor(key, label, &mut out);
    let t = tag(key, label, &out);
    out.extend_from_slice(&t);
    out
}

pub fn open(key: &ShareKey, label: u8, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < TAG_BYTES {
        return Err(CryptoError::AuthFailed);
    }
    let (ct, t) = sealed.split_at(sealed.len() - TAG_BYTES);
    if tag(key, label, ct) != t {
        return Err(CryptoError::AuthFailed);
    }
    let mut out = ct.to_vec();
    keystream_xor(key, label, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_label_binding() {
        let k = ShareKey::from_seed(&SharedSeed([4; 32]));
        let msg: Vec<u8> = (0..100).collect();
        let s = seal(&k, 1, &msg);
        assert_eq!(s.len(), 100 + TAG_BYTES);
        assert_ne!(&s[..100], &msg[..]);
        assert_eq!(open(&k, 1, &s).unwrap(), msg);
        assert_eq!(open(&k, 2, &s), Err(CryptoError::AuthFailed));
        let other = ShareKey::from_seed(&SharedSeed([5; 32]));
        assert_eq!(open(&other, 1, &s), Err(CryptoError::AuthFailed));
        let mut bad = s.clone();
        bad[3] ^= 1;
        assert_eq!(open(&k, 1, &bad), Err(CryptoError::AuthFailed));
        assert_eq!(open(&k, 1, &s[..5]), Err(CryptoError::AuthFailed));
    }
}
