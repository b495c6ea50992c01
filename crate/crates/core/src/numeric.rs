//! Fixed-point quantization and modular vector arithmetic over the ring 2^w.
//!
//! Every element lives in `[0, 2^w)`; negatives use two's-complement
//! embedding. The bit layout splits each word into a high segment `[k, w)`
//! and a low segment `[0, k)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("invalid segment spec: w={w}, q={q}, k={k}")]
    InvalidSpec { w: u32, q: u32, k: u32 },
    #[error("value {value} saturates a {w}-bit word with {q} fractional bits")]
    Saturation { value: f64, w: u32, q: u32 },
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("segment spec mismatch between operands")]
    SpecMismatch,
    #[error("element {value:#x} does not fit in {w} bits")]
    OutOfRange { value: u64, w: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

/// Word layout: ring width `w`, fixed-point fraction `q`, low segment `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    word_bits: u32,
    frac_bits: u32,
    low_bits: u32,
}

impl SegmentSpec {
    /// The low segment may be narrower than the fraction; only `0 < k < w`
    /// and `0 < q < w <= 64` are enforced.
    pub fn new(word_bits: u32, frac_bits: u32, low_bits: u32) -> Result<Self, NumericError> {
        let bad = NumericError::InvalidSpec {
            w: word_bits,
            q: frac_bits,
            k: low_bits,
        };
        if word_bits == 0 || word_bits > 64 || frac_bits == 0 || frac_bits >= word_bits {
            return Err(bad);
        }
        if low_bits == 0 || low_bits >= word_bits {
            return Err(bad);
        }
        Ok(Self {
            word_bits,
            frac_bits,
            low_bits,
        })
    }

    pub fn word_bits(&self) -> u32 {
        self.word_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn low_bits(&self) -> u32 {
        self.low_bits
    }

    /// Same layout with a different low segment width.
    pub fn with_low_bits(&self, low_bits: u32) -> Result<Self, NumericError> {
        Self::new(self.word_bits, self.frac_bits, low_bits)
    }

    /// `2^w - 1`, the largest ring element (R_U).
    pub fn clamp_max(&self) -> u64 {
        if self.word_bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.word_bits) - 1
        }
    }

    /// Λ_RH: ones on `[0, k)`, zeros on `[k, w)`.
    pub fn lambda_rh(&self) -> u64 {
        (1u64 << self.low_bits) - 1
    }

    /// R_H in quantized units.
    pub fn high_unit(&self) -> u64 {
        1u64 << self.low_bits
    }

    /// Bytes needed to carry one element on the wire.
    pub fn word_bytes(&self) -> usize {
        self.word_bits.div_ceil(8) as usize
    }

    #[inline]
    pub fn reduce(&self, v: u64) -> u64 {
        v & self.clamp_max()
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        self.reduce(a.wrapping_add(b))
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        self.reduce(a.wrapping_sub(b))
    }

    /// Two's-complement reading of a ring element.
    #[inline]
    pub fn to_signed(&self, v: u64) -> i64 {
        let shift = 64 - self.word_bits;
        ((v << shift) as i64) >> shift
    }

    #[inline]
    pub fn from_signed(&self, v: i64) -> u64 {
        self.reduce(v as u64)
    }

    /// Balanced split of a signed element: `x = high * 2^k + low - 2^(k-1)`
    /// with `low` in `[0, 2^k)`. Values within half a unit of zero map to a
    /// zero high part.
    #[inline]
    pub fn split_balanced(&self, v: u64) -> (i64, u64) {
        let half = 1i128 << (self.low_bits - 1);
        let shifted = self.to_signed(v) as i128 + half;
        let high = shifted >> self.low_bits;
        let low = shifted - (high << self.low_bits);
        (high as i64, low as u64)
    }

    /// High part of the balanced split.
    #[inline]
    pub fn balanced_high(&self, v: u64) -> i64 {
        self.split_balanced(v).0
    }

    pub fn quantize(&self, value: f64) -> Result<u64, NumericError> {
        let scaled = (value * (1u64 << self.frac_bits) as f64).round();
        let lim = 2f64.powi(self.word_bits as i32 - 1);
        if !scaled.is_finite() || scaled >= lim || scaled < -lim {
            return Err(NumericError::Saturation {
                value,
                w: self.word_bits,
                q: self.frac_bits,
            });
        }
        Ok(self.from_signed(scaled as i64))
    }

    pub fn dequantize(&self, v: u64) -> f64 {
        self.to_signed(v) as f64 / (1u64 << self.frac_bits) as f64
    }
}

impl Default for SegmentSpec {
    fn default() -> Self {
        Self {
            word_bits: 32,
            frac_bits: 8,
            low_bits: 16,
        }
    }
}

pub fn quantize(value: f64, spec: &SegmentSpec) -> Result<u64, NumericError> {
    spec.quantize(value)
}

pub fn dequantize(v: u64, spec: &SegmentSpec) -> f64 {
    spec.dequantize(v)
}

/// A vector of ring elements sharing one [`SegmentSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamVector {
    elems: Vec<u64>,
    spec: SegmentSpec,
}

impl ParamVector {
    pub fn zeros(len: usize, spec: SegmentSpec) -> Self {
        Self {
            elems: vec![0; len],
            spec,
        }
    }

    pub fn from_elems(elems: Vec<u64>, spec: SegmentSpec) -> Result<Self, NumericError> {
        if let Some(&bad) = elems.iter().find(|&&e| e > spec.clamp_max()) {
            return Err(NumericError::OutOfRange {
                value: bad,
                w: spec.word_bits,
            });
        }
        Ok(Self { elems, spec })
    }

    pub fn quantize(values: &[f64], spec: SegmentSpec) -> Result<Self, NumericError> {
        let elems = values
            .iter()
            .map(|&v| spec.quantize(v))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { elems, spec })
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.elems.iter().map(|&e| self.spec.dequantize(e)).collect()
    }

    pub fn to_signed(&self) -> Vec<i64> {
        self.elems.iter().map(|&e| self.spec.to_signed(e)).collect()
    }

    pub fn spec(&self) -> &SegmentSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.elems
    }

    pub fn into_elems(self) -> Vec<u64> {
        self.elems
    }

    fn check(&self, other: &ParamVector) -> Result<(), NumericError> {
        if self.spec != other.spec {
            return Err(NumericError::SpecMismatch);
        }
        if self.elems.len() != other.elems.len() {
            return Err(NumericError::LengthMismatch {
                left: self.elems.len(),
                right: other.elems.len(),
            });
        }
        Ok(())
    }

    pub fn add_assign_mod(&mut self, other: &ParamVector) -> Result<(), NumericError> {
        self.check(other)?;
        self.add_slice(&other.elems, Sign::Plus);
        Ok(())
    }

    pub fn sub_assign_mod(&mut self, other: &ParamVector) -> Result<(), NumericError> {
        self.check(other)?;
        self.add_slice(&other.elems, Sign::Minus);
        Ok(())
    }

    /// Adds or subtracts raw words (already reduced or not) element-wise.
    /// Panics on length mismatch; callers own the layout.
    pub fn add_slice(&mut self, words: &[u64], sign: Sign) {
        assert_eq!(self.elems.len(), words.len(), "slice length mismatch");
        let mask = self.spec.clamp_max();
        match sign {
            Sign::Plus => {
                for (e, w) in self.elems.iter_mut().zip(words) {
                    *e = e.wrapping_add(*w) & mask;
                }
            }
            Sign::Minus => {
                for (e, w) in self.elems.iter_mut().zip(words) {
                    *e = e.wrapping_sub(*w) & mask;
                }
            }
        }
    }

    /// Element-wise multiplication by a small scalar, mod 2^w.
    pub fn scale_mod(&self, factor: u64) -> ParamVector {
        let elems = self
            .elems
            .iter()
            .map(|&e| self.spec.reduce(e.wrapping_mul(factor)))
            .collect();
        ParamVector {
            elems,
            spec: self.spec,
        }
    }
}

pub fn vec_add_mod(a: &ParamVector, b: &ParamVector) -> Result<ParamVector, NumericError> {
    let mut out = a.clone();
    out.add_assign_mod(b)?;
    Ok(out)
}

pub fn vec_sub_mod(a: &ParamVector, b: &ParamVector) -> Result<ParamVector, NumericError> {
    let mut out = a.clone();
    out.sub_assign_mod(b)?;
    Ok(out)
}

/// Bit slicing: `high = x >> k`, `low = x mod 2^k`.
pub fn split_segments(x: &ParamVector) -> (ParamVector, ParamVector) {
    let k = x.spec.low_bits;
    let lam = x.spec.lambda_rh();
    let high = x.elems.iter().map(|&e| e >> k).collect();
    let low = x.elems.iter().map(|&e| e & lam).collect();
    (
        ParamVector {
            elems: high,
            spec: x.spec,
        },
        ParamVector {
            elems: low,
            spec: x.spec,
        },
    )
}

/// Segment-local masking: the low segment moves by `±low(mask)` mod 2^k,
/// the high segment is kept bit-exactly.
pub fn apply_partial_mask(
    x: &ParamVector,
    mask: &ParamVector,
    sign: Sign,
) -> Result<ParamVector, NumericError> {
    x.check(mask)?;
    let lam = x.spec.lambda_rh();
    let elems = x
        .elems
        .iter()
        .zip(&mask.elems)
        .map(|(&v, &m)| {
            let low = match sign {
                Sign::Plus => v.wrapping_add(m),
                Sign::Minus => v.wrapping_sub(m),
            } & lam;
            (v & !lam) | low
        })
        .collect();
    Ok(ParamVector {
        elems,
        spec: x.spec,
    })
}

/// Two-lane form of a parameter vector used for masked uploads.
///
/// The high lane carries the balanced high part of each element and the low
/// lane its offset low part, each as a full ring element. Inter-group masks
/// touch only the low lane, so the high lane of a subgroup sum is readable
/// once intra and self masks are gone, while the two lanes still recombine
/// into an exact global sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneVector {
    pub high: ParamVector,
    pub low: ParamVector,
}

impl LaneVector {
    pub fn encode(x: &ParamVector) -> Self {
        let spec = x.spec;
        let mut high = Vec::with_capacity(x.len());
        let mut low = Vec::with_capacity(x.len());
        for &e in &x.elems {
            let (h, l) = spec.split_balanced(e);
            high.push(spec.from_signed(h));
            low.push(l);
        }
        Self {
            high: ParamVector { elems: high, spec },
            low: ParamVector { elems: low, spec },
        }
    }

    pub fn zeros(len: usize, spec: SegmentSpec) -> Self {
        Self {
            high: ParamVector::zeros(len, spec),
            low: ParamVector::zeros(len, spec),
        }
    }

    pub fn len(&self) -> usize {
        self.high.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high.is_empty()
    }

    pub fn spec(&self) -> &SegmentSpec {
        &self.high.spec
    }

    pub fn add_assign_mod(&mut self, other: &LaneVector) -> Result<(), NumericError> {
        self.high.add_assign_mod(&other.high)?;
        self.low.add_assign_mod(&other.low)
    }

    pub fn sub_assign_mod(&mut self, other: &LaneVector) -> Result<(), NumericError> {
        self.high.sub_assign_mod(&other.high)?;
        self.low.sub_assign_mod(&other.low)
    }

    /// Recombines a sum of `count` encoded vectors into the plain ring sum.
    pub fn decode(&self, count: u64) -> ParamVector {
        let spec = self.high.spec;
        let k = spec.low_bits;
        let offset = spec.reduce(count.wrapping_mul(1u64 << (k - 1)));
        let elems = self
            .high
            .elems
            .iter()
            .zip(&self.low.elems)
            .map(|(&h, &l)| spec.sub(spec.add(spec.reduce(h << k), l), offset))
            .collect();
        ParamVector { elems, spec }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s16() -> SegmentSpec {
        SegmentSpec::new(16, 4, 8).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let spec = SegmentSpec::new(32, 8, 16).unwrap();
        assert_eq!(spec.quantize(1.5).unwrap(), 384);
        assert_eq!(spec.quantize(0.0).unwrap(), 0);
        let spec16 = SegmentSpec::new(16, 8, 12).unwrap();
        assert_eq!(spec16.quantize(-1.0).unwrap(), 65280);
        assert_eq!(spec16.dequantize(65280), -1.0);
    }

    #[test]
    fn quantize_saturates() {
        let spec = SegmentSpec::new(16, 8, 12).unwrap();
        assert!(matches!(
            spec.quantize(128.0),
            Err(NumericError::Saturation { .. })
        ));
        assert!(spec.quantize(-128.0).is_ok());
        assert!(spec.quantize(f64::NAN).is_err());
    }

    #[test]
    fn add_wraps() {
        let spec = SegmentSpec::new(8, 2, 4).unwrap();
        let a = ParamVector::from_elems(vec![200], spec).unwrap();
        let b = ParamVector::from_elems(vec![100], spec).unwrap();
        assert_eq!(vec_add_mod(&a, &b).unwrap().as_slice(), &[44]);
        let z = ParamVector::zeros(1, spec);
        assert_eq!(vec_add_mod(&a, &z).unwrap(), a);
    }

    #[test]
    fn mismatch_errors() {
        let a = ParamVector::zeros(2, s16());
        let b = ParamVector::zeros(3, s16());
        assert!(matches!(
            vec_add_mod(&a, &b),
            Err(NumericError::LengthMismatch { .. })
        ));
        let c = ParamVector::zeros(2, SegmentSpec::new(16, 4, 9).unwrap());
        assert_eq!(vec_sub_mod(&a, &c), Err(NumericError::SpecMismatch));
        assert!(ParamVector::from_elems(vec![1 << 16], s16()).is_err());
    }

    #[test]
    fn split_examples() {
        let x = ParamVector::from_elems(vec![0x1234, 0], s16()).unwrap();
        let (h, l) = split_segments(&x);
        assert_eq!(h.as_slice(), &[0x12, 0]);
        assert_eq!(l.as_slice(), &[0x34, 0]);
    }

    #[test]
    fn partial_mask_examples() {
        let x = ParamVector::from_elems(vec![0x1234], s16()).unwrap();
        let m = ParamVector::from_elems(vec![0xABCD], s16()).unwrap();
        assert_eq!(
            apply_partial_mask(&x, &m, Sign::Plus).unwrap().as_slice(),
            &[0x1201]
        );
        let z = ParamVector::zeros(1, s16());
        assert_eq!(apply_partial_mask(&x, &z, Sign::Minus).unwrap(), x);
    }

    #[test]
    fn invalid_specs() {
        assert!(SegmentSpec::new(65, 8, 16).is_err());
        assert!(SegmentSpec::new(32, 0, 16).is_err());
        assert!(SegmentSpec::new(32, 8, 32).is_err());
        assert!(SegmentSpec::new(32, 8, 0).is_err());
        let s = SegmentSpec::new(64, 8, 20).unwrap();
        assert_eq!(s.clamp_max(), u64::MAX);
        assert_eq!(s.lambda_rh(), (1 << 20) - 1);
    }

    #[test]
    fn balanced_split_near_zero() {
        let s = SegmentSpec::new(32, 8, 10).unwrap();
        for v in [-512i64, -1, 0, 1, 511] {
            assert_eq!(s.balanced_high(s.from_signed(v)), 0, "{v}");
        }
        assert_eq!(s.balanced_high(s.from_signed(512)), 1);
        assert_eq!(s.balanced_high(s.from_signed(-513)), -1);
    }

    fn spec_strategy() -> impl Strategy<Value = SegmentSpec> {
        (2u32..=64).prop_flat_map(|w| {
            (Just(w), 1..w, 1..w).prop_map(|(w, q, k)| SegmentSpec::new(w, q, k).unwrap())
        })
    }

    fn vec_pair() -> impl Strategy<Value = (ParamVector, ParamVector)> {
        (spec_strategy(), 1usize..40).prop_flat_map(|(spec, len)| {
            let m = spec.clamp_max();
            (
                proptest::collection::vec(0..=m, len),
                proptest::collection::vec(0..=m, len),
            )
                .prop_map(move |(a, b)| {
                    (
                        ParamVector::from_elems(a, spec).unwrap(),
                        ParamVector::from_elems(b, spec).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn add_sub_inverse((a, b) in vec_pair()) {
            let s = vec_add_mod(&a, &b).unwrap();
            prop_assert_eq!(vec_sub_mod(&s, &b).unwrap(), a.clone());
            prop_assert_eq!(s, vec_add_mod(&b, &a).unwrap());
        }

        #[test]
        fn add_matches_integer_oracle((a, b) in vec_pair()) {
            let w = a.spec().word_bits();
            let s = vec_add_mod(&a, &b).unwrap();
            for i in 0..a.len() {
                let want = ((a.as_slice()[i] as u128 + b.as_slice()[i] as u128) % (1u128 << w)) as u64;
                prop_assert_eq!(s.as_slice()[i], want);
            }
        }

        #[test]
        fn split_recombines((a, _b) in vec_pair()) {
            let (h, l) = split_segments(&a);
            let k = a.spec().low_bits();
            for i in 0..a.len() {
                prop_assert_eq!((h.as_slice()[i] << k) + l.as_slice()[i], a.as_slice()[i]);
            }
        }

        #[test]
        fn partial_mask_inverse_and_high_kept((a, m) in vec_pair(), plus in any::<bool>()) {
            let sign = if plus { Sign::Plus } else { Sign::Minus };
            let y = apply_partial_mask(&a, &m, sign).unwrap();
            prop_assert_eq!(split_segments(&y).0, split_segments(&a).0);
            prop_assert_eq!(apply_partial_mask(&y, &m, sign.flip()).unwrap(), a);
        }

        #[test]
        fn quantize_round_trip(v in -1000.0f64..1000.0) {
            let spec = SegmentSpec::new(32, 8, 16).unwrap();
            let back = spec.dequantize(spec.quantize(v).unwrap());
            prop_assert!((back - v).abs() <= 2f64.powi(-9) + 1e-12);
        }

        #[test]
        fn lanes_sum_exactly(
            (spec, rows) in spec_strategy().prop_flat_map(|s| {
                let m = s.clamp_max();
                (Just(s), proptest::collection::vec(proptest::collection::vec(0..=m, 5), 1..12))
            })
        ) {
            let mut plain = ParamVector::zeros(5, spec);
            let mut lanes = LaneVector::zeros(5, spec);
            for r in &rows {
                let x = ParamVector::from_elems(r.clone(), spec).unwrap();
                plain.add_assign_mod(&x).unwrap();
                lanes.add_assign_mod(&LaneVector::encode(&x)).unwrap();
            }
            prop_assert_eq!(lanes.decode(rows.len() as u64), plain);
        }
    }
}
