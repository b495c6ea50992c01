//! Benign and model-replacement workloads plus attack schedules.

pub mod toytask;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use toytask::{TaskEval, ToyTask, ToyTaskConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("attacker index {0} out of range")]
    UnknownUser(usize),
    #[error("attacker {0} listed twice")]
    Duplicate(usize),
    #[error("{attackers} attackers exceed the allowed share of {users} users")]
    TooMany { attackers: usize, users: usize },
    #[error("attack starts at round {start}, run has {rounds}")]
    StartOutOfRange { start: u32, rounds: u32 },
    #[error("continuous attack needs at least one round")]
    EmptySchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Strategy {
    OneShot,
    Continuous { rounds: u32 },
    EverPresent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    pub attackers: Vec<usize>,
    pub strategy: Strategy,
    pub start_round: u32,
    /// Overrides `N / (eta |U_a|)`.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Per-round floor on the scale of continuous attacks; defaults to
    /// `N / (eta G)`.
    #[serde(default)]
    pub min_scale: Option<f64>,
    /// Caps `||x_a - X_t||`, a crude stand-in for distance-regularised
    /// attackers.
    #[serde(default)]
    pub norm_cap: Option<f64>,
}

/// Attackers may make up at most this fraction of the population.
pub const MAX_ATTACKER_FRACTION: f64 = 0.25;

impl AttackPlan {
    pub fn validate(&self, users: usize, rounds: u32) -> Result<(), AttackError> {
        let mut seen = std::collections::BTreeSet::new();
        for &a in &self.attackers {
            if a >= users {
                return Err(AttackError::UnknownUser(a));
            }
            if !seen.insert(a) {
                return Err(AttackError::Duplicate(a));
            }
        }
        if self.attackers.len() as f64 > MAX_ATTACKER_FRACTION * users as f64 {
            return Err(AttackError::TooMany {
                attackers: self.attackers.len(),
                users,
            });
        }
        if self.start_round >= rounds {
            return Err(AttackError::StartOutOfRange {
                start: self.start_round,
                rounds,
            });
        }
        if matches!(self.strategy, Strategy::Continuous { rounds: 0 }) {
            return Err(AttackError::EmptySchedule);
        }
        Ok(())
    }

    /// Scale applied by every attacker in `round`, or `None` when the
    /// attackers behave benignly.
    pub fn scale_at(&self, round: u32, users: usize, eta: f64, groups: usize) -> Option<f64> {
        if self.attackers.is_empty() || round < self.start_round {
            return None;
        }
        let gamma = self
            .gamma
            .unwrap_or_else(|| scale_factor(users, eta, self.attackers.len()));
        match self.strategy {
            Strategy::OneShot => (round == self.start_round).then_some(gamma),
            Strategy::EverPresent => Some(gamma),
            Strategy::Continuous { rounds } => {
                if round >= self.start_round + rounds {
                    return None;
                }
                let floor = self
                    .min_scale
                    .unwrap_or(users as f64 / (eta * groups.max(1) as f64));
                Some((gamma / rounds as f64).max(floor))
            }
        }
    }

    /// Last round in which the attackers act, if bounded.
    pub fn last_round(&self) -> Option<u32> {
        match self.strategy {
            Strategy::OneShot => Some(self.start_round),
            Strategy::Continuous { rounds } => Some(self.start_round + rounds - 1),
            Strategy::EverPresent => None,
        }
    }
}

/// `gamma = N / (eta |U_a|)`.
pub fn scale_factor(users: usize, eta: f64, attackers: usize) -> f64 {
    users as f64 / (eta * attackers.max(1) as f64)
}

/// `x_a = X_t + scale (X_target - X_t)`, optionally norm-capped.
pub fn attacker_update(x_t: &[f64], target: &[f64], scale: f64, norm_cap: Option<f64>) -> Vec<f64> {
    let mut delta: Vec<f64> = x_t.iter().zip(target).map(|(x, t)| scale * (t - x)).collect();
    if let Some(cap) = norm_cap {
        let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm > cap && norm > 0.0 {
            delta.iter_mut().for_each(|d| *d *= cap / norm);
        }
    }
    x_t.iter().zip(&delta).map(|(x, d)| x + d).collect()
}

/// Benign updates drawn around the current model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dim: usize,
    /// Mean drift `delta_t` per coordinate.
    pub drift: f64,
    /// `sigma_t = sigma0 * decay^t`.
    pub sigma0: f64,
    pub decay: f64,
    /// The attackers' target is `X_t + target_offset` on every coordinate.
    pub target_offset: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            drift: 0.0,
            sigma0: 2.0,
            decay: 0.97,
            target_offset: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn sigma_at(&self, round: u32) -> f64 {
        self.sigma0 * self.decay.powi(round as i32)
    }

    pub fn benign_update<R: Rng + ?Sized>(&self, x_t: &[f64], round: u32, rng: &mut R) -> Vec<f64> {
        let sigma = self.sigma_at(round);
        if sigma <= 0.0 {
            return x_t.iter().map(|x| x + self.drift).collect();
        }
        let noise = Normal::new(self.drift, sigma).unwrap();
        x_t.iter().map(|x| x + noise.sample(rng)).collect()
    }
}

/// What benign users compute each round.
#[derive(Debug, Clone)]
pub enum Workload {
    Synthetic(SyntheticConfig),
    Task(Box<ToyTask>),
}

impl Workload {
    pub fn dim(&self) -> usize {
        match self {
            Workload::Synthetic(c) => c.dim,
            Workload::Task(t) => t.cfg.param_count(),
        }
    }

    pub fn initial_model(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    pub fn benign_update<R: Rng + ?Sized>(&self, x_t: &[f64], user: usize, round: u32, rng: &mut R) -> Vec<f64> {
        match self {
            Workload::Synthetic(c) => c.benign_update(x_t, round, rng),
            Workload::Task(t) => t.benign_update(x_t, user),
        }
    }

    pub fn attack_target(&self, x_t: &[f64], attackers: &[usize]) -> Vec<f64> {
        match self {
            Workload::Synthetic(c) => x_t.iter().map(|x| x + c.target_offset).collect(),
            Workload::Task(t) => t.backdoor_target(x_t, attackers),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Option<TaskEval> {
        match self {
            Workload::Synthetic(_) => None,
            Workload::Task(t) => Some(t.eval(x)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn plan(strategy: Strategy) -> AttackPlan {
        AttackPlan {
            attackers: (0..10).collect(),
            strategy,
            start_round: 50,
            gamma: None,
            min_scale: Some(0.0),
            norm_cap: None,
        }
    }

    #[test]
    fn replacement_example() {
        let g = scale_factor(1000, 1.0, 10);
        assert_eq!(g, 100.0);
        assert_eq!(attacker_update(&[0.0], &[10.0], g, None), vec![1000.0]);
        assert_eq!(attacker_update(&[3.0, 4.0], &[3.0, 4.0], g, None), vec![3.0, 4.0]);
    }

    #[test]
    fn replacement_identity_closed_form() {
        // N - |U_a| no-op users plus |U_a| attackers land exactly on the target
        let (n, k, eta) = (1000usize, 10usize, 0.5);
        let x_t = [1.5, -2.0];
        let target = [4.0, 0.25];
        let xa = attacker_update(&x_t, &target, scale_factor(n, eta, k), None);
        let next: Vec<f64> = (0..2)
            .map(|i| {
                let s = (n - k) as f64 * x_t[i] + k as f64 * xa[i];
                x_t[i] + eta / n as f64 * (s - n as f64 * x_t[i])
            })
            .collect();
        for i in 0..2 {
            assert!((next[i] - target[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn schedules() {
        let one = plan(Strategy::OneShot);
        assert_eq!(one.scale_at(49, 1000, 1.0, 27), None);
        assert_eq!(one.scale_at(50, 1000, 1.0, 27), Some(100.0));
        assert_eq!(one.scale_at(51, 1000, 1.0, 27), None);
        let cont = plan(Strategy::Continuous { rounds: 5 });
        let total: f64 = (45..60).filter_map(|r| cont.scale_at(r, 1000, 1.0, 27)).sum();
        assert!((total - 100.0).abs() < 1e-9);
        let ever = plan(Strategy::EverPresent);
        assert_eq!(ever.scale_at(59, 1000, 1.0, 27), Some(100.0));
        let floored = AttackPlan {
            min_scale: None,
            ..cont
        };
        // gamma/k = 20 falls below N/(eta G) = 1000/27
        assert!((floored.scale_at(50, 1000, 1.0, 27).unwrap() - 1000.0 / 27.0).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        let p = plan(Strategy::OneShot);
        assert!(p.validate(100, 60).is_ok());
        assert_eq!(p.validate(100, 50), Err(AttackError::StartOutOfRange { start: 50, rounds: 50 }));
        assert!(matches!(p.validate(20, 60), Err(AttackError::TooMany { .. })));
        let mut d = p.clone();
        d.attackers[1] = 0;
        assert_eq!(d.validate(100, 60), Err(AttackError::Duplicate(0)));
    }

    #[test]
    fn norm_cap_applies() {
        let x = attacker_update(&[0.0, 0.0], &[3.0, 4.0], 2.0, Some(5.0));
        assert!((x[0] - 3.0).abs() < 1e-12 && (x[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_updates() {
        let c = SyntheticConfig {
            sigma0: 0.0,
            drift: 0.5,
            ..Default::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(c.benign_update(&[1.0, 2.0], 3, &mut rng), vec![1.5, 2.5]);
        let c = SyntheticConfig {
            sigma0: 1.0,
            decay: 1.0,
            drift: 0.25,
            ..Default::default()
        };
        let mean = (0..10_000)
            .map(|_| c.benign_update(&[0.0], 0, &mut rng)[0])
            .sum::<f64>()
            / 1e4;
        assert!((mean - 0.25).abs() < 3.0 / 100.0);
    }
}
