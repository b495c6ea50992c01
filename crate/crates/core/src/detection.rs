//! Suspicious-subgroup detection over revealed high segments, the adaptive
//! threshold, disclosure-radius calculators, and DR/CR/FPR accounting.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggserver::SubgroupAggregate;
use crate::numeric::{ParamVector, SegmentSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("subgroup size {0} too small, need at least 2")]
    SubgroupTooSmall(usize),
    #[error("radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("R_H of {0} fixed-point units leaves no room for a segment")]
    SegmentOutOfRange(f64),
}

/// `R_H = 2(1 - sqrt((n-1)/n)) * eps`.
pub fn compute_rh(n: usize, eps: f64) -> Result<f64, DetectionError> {
    if n < 2 {
        return Err(DetectionError::SubgroupTooSmall(n));
    }
    if !(eps > 0.0) {
        return Err(DetectionError::BadRadius(eps));
    }
    let nf = n as f64;
    Ok(2.0 * (1.0 - ((nf - 1.0) / nf).sqrt()) * eps)
}

/// Low-segment width `k = ceil(log2(R_H * 2^q))`, clamped to at least 1.
pub fn segment_bits(n: usize, eps: f64, frac_bits: u32, word_bits: u32) -> Result<u32, DetectionError> {
    let q = compute_rh(n, eps)? * (1u64 << frac_bits) as f64;
    let k = q.log2().ceil().max(1.0);
    if k >= word_bits as f64 {
        return Err(DetectionError::SegmentOutOfRange(q));
    }
    Ok(k as u32)
}

/// Segment spec whose low width is sized by [`segment_bits`].
pub fn spec_for_budget(
    n: usize,
    eps: f64,
    word_bits: u32,
    frac_bits: u32,
) -> Result<SegmentSpec, DetectionError> {
    let k = segment_bits(n, eps, frac_bits, word_bits)?;
    SegmentSpec::new(word_bits, frac_bits, k).map_err(|_| DetectionError::SegmentOutOfRange(k as f64))
}

/// Chebyshev tail bound `sigma^2 / eps^2`, clamped to `[0, 1]`.
pub fn chebyshev_bound(variance: f64, eps: f64) -> f64 {
    if eps <= 0.0 {
        return 1.0;
    }
    (variance / (eps * eps)).clamp(0.0, 1.0)
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Mean over `trials` random `n`-subsets of the subset's population
/// variance. Its expectation is `((n-1)/n) * variance(population)` when the
/// population is large.
pub fn mean_subset_variance<R: Rng + ?Sized>(
    population: &[f64],
    n: usize,
    trials: usize,
    rng: &mut R,
) -> f64 {
    let mut buf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for _ in 0..trials {
        buf.clear();
        buf.extend(sample(rng, population.len(), n).iter().map(|i| population[i]));
        acc += variance(&buf);
    }
    acc / trials as f64
}

/// Fraction of random `n`-subsets whose mean lies at least `radius` from the
/// population mean.
pub fn subset_tail_probability<R: Rng + ?Sized>(
    population: &[f64],
    n: usize,
    radius: f64,
    trials: usize,
    rng: &mut R,
) -> f64 {
    let mu = population.iter().sum::<f64>() / population.len() as f64;
    let mut hits = 0usize;
    for _ in 0..trials {
        let s: f64 = sample(rng, population.len(), n).iter().map(|i| population[i]).sum();
        if (s / n as f64 - mu).abs() >= radius {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

/// `xi = (rho/T) * sum of the last T recorded values`; `+inf` until `T`
/// values exist.
pub fn adaptive_threshold(history: &[f64], rho: f64, window: usize) -> f64 {
    if window == 0 || history.len() < window {
        return f64::INFINITY;
    }
    let tail = &history[history.len() - window..];
    rho / window as f64 * tail.iter().sum::<f64>()
}

/// Which Std value of a round enters the threshold window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryMode {
    /// Value at loop exit, after replacements.
    #[default]
    PostReplacement,
    /// Value before any replacement.
    PreReplacement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionState {
    pub rho: f64,
    pub window: usize,
    pub mode: HistoryMode,
    /// Threshold while fewer than `window` values are recorded.
    pub warmup_threshold: Option<f64>,
    history: VecDeque<f64>,
}

impl DetectionState {
    pub fn new(rho: f64, window: usize) -> Self {
        Self {
            rho,
            window,
            mode: HistoryMode::default(),
            warmup_threshold: None,
            history: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn with_mode(mut self, mode: HistoryMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn threshold(&self) -> f64 {
        if self.in_warmup() {
            return self.warmup_threshold.unwrap_or(f64::INFINITY);
        }
        let h: Vec<f64> = self.history.iter().copied().collect();
        adaptive_threshold(&h, self.rho, self.window)
    }

    pub fn history(&self) -> Vec<f64> {
        self.history.iter().copied().collect()
    }

    pub fn in_warmup(&self) -> bool {
        self.history.len() < self.window
    }

    pub fn record(&mut self, value: f64) {
        self.history.push_back(value);
        while self.history.len() > self.window.max(1) {
            self.history.pop_front();
        }
    }
}

/// One round of detection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionOutcome {
    /// Leaf index of each entry of `distances`.
    pub leaves: Vec<usize>,
    pub distances: Vec<f64>,
    pub xi: f64,
    /// Std before the loop, then after each replacement.
    pub std_sequence: Vec<f64>,
    pub flagged: BTreeSet<usize>,
}

impl DetectionOutcome {
    pub fn final_std(&self) -> f64 {
        *self.std_sequence.last().unwrap_or(&0.0)
    }
}

/// Distance of each non-void subgroup's mean high segment from the global
/// model's, in high-segment units.
pub fn subgroup_distances(aggregates: &[SubgroupAggregate], x_t: &ParamVector) -> (Vec<usize>, Vec<f64>) {
    let spec = *x_t.spec();
    let global: Vec<f64> = x_t
        .as_slice()
        .iter()
        .map(|&v| spec.balanced_high(v) as f64)
        .collect();
    let mut leaves = Vec::new();
    let mut dists = Vec::new();
    for a in aggregates {
        let Some(high) = &a.revealed_high else { continue };
        let n = a.survivors.max(1) as f64;
        let d2: f64 = high
            .as_slice()
            .iter()
            .zip(&global)
            .map(|(&h, &g)| {
                let diff = spec.to_signed(h) as f64 / n - g;
                diff * diff
            })
            .sum();
        leaves.push(a.leaf);
        dists.push(d2.sqrt());
    }
    (leaves, dists)
}

/// Detection loop on precomputed distances: while `Std(D) > xi`, flag the
/// largest distance (lowest leaf on ties) and zero it. Rounds that end with
/// every subgroup replaced are not added to the threshold history.
pub fn detect_distances(leaves: &[usize], distances: &[f64], state: &mut DetectionState) -> DetectionOutcome {
    let xi = state.threshold();
    let mut d = distances.to_vec();
    let mut stds = vec![std_dev(&d)];
    let mut flagged = BTreeSet::new();
    while *stds.last().unwrap() > xi && flagged.len() < d.len() {
        let mut best = None::<usize>;
        for i in 0..d.len() {
            if flagged.contains(&leaves[i]) {
                continue;
            }
            best = match best {
                Some(b) if d[b] > d[i] || (d[b] == d[i] && leaves[b] < leaves[i]) => Some(b),
                _ => Some(i),
            };
        }
        let Some(i) = best else { break };
        flagged.insert(leaves[i]);
        d[i] = 0.0;
        stds.push(std_dev(&d));
    }
    // A round where every subgroup was replaced is abandoned; its all-zero
    // Std would otherwise drag the threshold towards 0.
    if flagged.is_empty() || flagged.len() < d.len() {
        state.record(match state.mode {
            HistoryMode::PostReplacement => *stds.last().unwrap(),
            HistoryMode::PreReplacement => stds[0],
        });
    }
    DetectionOutcome {
        leaves: leaves.to_vec(),
        distances: distances.to_vec(),
        xi,
        std_sequence: stds,
        flagged,
    }
}

pub fn detect(aggregates: &[SubgroupAggregate], x_t: &ParamVector, state: &mut DetectionState) -> DetectionOutcome {
    let (leaves, d) = subgroup_distances(aggregates, x_t);
    detect_distances(&leaves, &d, state)
}

/// Running DR/CR/FPR totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DetectionMetrics {
    pub attacker_rounds: u64,
    pub detected_rounds: u64,
    pub attackers_total: u64,
    pub attackers_caught: u64,
    pub subgroups_total: u64,
    pub benign_flagged: u64,
}

impl DetectionMetrics {
    /// Records a round. `attacker_leaves` has one entry per active attacker.
    pub fn record(&mut self, flagged: &BTreeSet<usize>, attacker_leaves: &[usize], subgroups: usize) {
        let dirty: BTreeSet<usize> = attacker_leaves.iter().copied().collect();
        if !attacker_leaves.is_empty() {
            self.attacker_rounds += 1;
            if flagged.iter().any(|l| dirty.contains(l)) {
                self.detected_rounds += 1;
            }
            self.attackers_total += attacker_leaves.len() as u64;
            self.attackers_caught += attacker_leaves.iter().filter(|l| flagged.contains(l)).count() as u64;
        }
        self.subgroups_total += subgroups as u64;
        self.benign_flagged += flagged.iter().filter(|l| !dirty.contains(l)).count() as u64;
    }

    pub fn merge(&mut self, o: &DetectionMetrics) {
        self.attacker_rounds += o.attacker_rounds;
        self.detected_rounds += o.detected_rounds;
        self.attackers_total += o.attackers_total;
        self.attackers_caught += o.attackers_caught;
        self.subgroups_total += o.subgroups_total;
        self.benign_flagged += o.benign_flagged;
    }

    /// Detection rate; 1 when no attacker round occurred.
    pub fn dr(&self) -> f64 {
        ratio(self.detected_rounds, self.attacker_rounds, 1.0)
    }

    pub fn cr(&self) -> f64 {
        ratio(self.attackers_caught, self.attackers_total, 1.0)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.benign_flagged, self.subgroups_total, 0.0)
    }
}

fn ratio(a: u64, b: u64, empty: f64) -> f64 {
    if b == 0 {
        empty
    } else {
        a as f64 / b as f64
    }
}
