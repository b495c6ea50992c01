//! Counter-mode SHA-256 expansion of a 32-byte seed into ring elements.
//!
//! Block `i` is `H("safeagg/prg" || seed || i)`; it yields eight 32-bit words
//! when `w <= 32` and four 64-bit words otherwise, each masked to `w` bits.
//! The stream is prefix-consistent: expanding `m` elements gives the first
//! `m` elements of any longer expansion.

use crate::numeric::{ParamVector, SegmentSpec};

use super::sha256;

pub fn prg_fill(seed: &[u8; 32], out: &mut [u64], spec: &SegmentSpec) {
    let mask = spec.clamp_max();
    let per_block = if spec.word_bits() <= 32 { 8 } else { 4 };
    for (block, chunk) in out.chunks_mut(per_block).enumerate() {
        let ctr = (block as u64).to_le_bytes();
        let d = sha256(&[b"safeagg/prg", seed, &ctr]);
        if per_block == 8 {
            for (j, slot) in chunk.iter_mut().enumerate() {
                let b: [u8; 4] = d[4 * j..4 * j + 4].try_into().unwrap();
                *slot = u32::from_le_bytes(b) as u64 & mask;
            }
        } else {
            for (j, slot) in chunk.iter_mut().enumerate() {
                let b: [u8; 8] = d[8 * j..8 * j + 8].try_into().unwrap();
                *slot = u64::from_le_bytes(b) & mask;
            }
        }
    }
}

pub fn prg_expand(seed: &[u8; 32], m: usize, spec: &SegmentSpec) -> ParamVector {
    let mut out = vec![0u64; m];
    prg_fill(seed, &mut out, spec);
    ParamVector::from_elems(out, *spec).expect("masked to w bits")
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn spec() -> SegmentSpec {
        SegmentSpec::new(32, 8, 16).unwrap()
    }

    #[test]
    fn deterministic_and_prefix_consistent() {
        let s = [3u8; 32];
        let a = prg_expand(&s, 100, &spec());
        assert_eq!(a, prg_expand(&s, 100, &spec()));
        let b = prg_expand(&s, 37, &spec());
        assert_eq!(&a.as_slice()[..37], b.as_slice());
        assert_eq!(prg_expand(&s, 0, &spec()).len(), 0);
    }

    #[test]
    fn wide_and_narrow_words_in_range() {
        for w in [8u32, 20, 33, 64] {
            let sp = SegmentSpec::new(w, 4, 6).unwrap();
            let v = prg_expand(&[9u8; 32], 200, &sp);
            assert!(v.as_slice().iter().all(|&e| e <= sp.clamp_max()));
        }
    }

    #[test]
    fn one_bit_avalanche() {
        let a = [0x5au8; 32];
        for bit in [0usize, 77, 255] {
            let mut b = a;
            b[bit / 8] ^= 1 << (bit % 8);
            let va = prg_expand(&a, 1000, &spec());
            let vb = prg_expand(&b, 1000, &spec());
            let differ = va
                .as_slice()
                .iter()
                .zip(vb.as_slice())
                .filter(|(x, y)| x != y)
                .count();
            assert!(differ >= 990, "bit {bit}: {differ}");
        }
    }

    #[test]
    fn histogram_chi_square() {
        let sp = SegmentSpec::new(32, 8, 16).unwrap();
        let v = prg_expand(&[1u8; 32], 100_000, &sp);
        let bins = 64usize;
        let mut counts = vec![0f64; bins];
        for &e in v.as_slice() {
            counts[(e >> 26) as usize] += 1.0;
        }
        let expected = 100_000.0 / bins as f64;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2={stat} p={p}");
    }
}
