//! Softmax regression on Gaussian class blobs with a feature-trigger
//! backdoor.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTaskConfig {
    pub features: usize,
    pub classes: usize,
    /// Leading features carrying clipped noise; the trigger overwrites them.
    pub trigger_features: usize,
    pub trigger_value: f64,
    pub target_class: usize,
    pub samples_per_user: usize,
    pub test_samples: usize,
    /// Standard deviation of class means on informative features.
    pub separation: f64,
    pub local_lr: f64,
    pub local_epochs: usize,
    pub weight_decay: f64,
    /// Epochs the attackers spend fitting their backdoored model.
    pub attack_epochs: usize,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            features: 32,
            classes: 10,
            trigger_features: 4,
            trigger_value: 5.0,
            target_class: 7,
            samples_per_user: 20,
            test_samples: 2000,
            separation: 0.6,
            local_lr: 0.2,
            local_epochs: 1,
            weight_decay: 0.01,
            attack_epochs: 60,
        }
    }
}

impl ToyTaskConfig {
    pub fn param_count(&self) -> usize {
        self.features * self.classes + self.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaskEval {
    pub main_accuracy: f64,
    pub backdoor_accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub cfg: ToyTaskConfig,
    means: Vec<Vec<f64>>,
    partitions: Vec<Vec<Sample>>,
    test: Vec<Sample>,
    backdoor_test: Vec<Sample>,
}

impl ToyTask {
    pub fn generate(cfg: ToyTaskConfig, users: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mean_dist = Normal::new(0.0, cfg.separation).unwrap();
        let means: Vec<Vec<f64>> = (0..cfg.classes)
            .map(|_| {
                (0..cfg.features)
                    .map(|f| if f < cfg.trigger_features { 0.0 } else { mean_dist.sample(&mut rng) })
                    .collect()
            })
            .collect();
        let mut task = Self {
            cfg,
            means,
            partitions: Vec::new(),
            test: Vec::new(),
            backdoor_test: Vec::new(),
        };
        task.partitions = (0..users)
            .map(|_| (0..cfg.samples_per_user).map(|_| task.draw(&mut rng)).collect())
            .collect();
        task.test = (0..cfg.test_samples).map(|_| task.draw(&mut rng)).collect();
        task.backdoor_test = task
            .test
            .iter()
            .filter(|s| s.label != cfg.target_class)
            .map(|s| task.triggered(s))
            .collect();
        task
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let noise = Normal::new(0.0, 1.0).unwrap();
        let label = rng.random_range(0..self.cfg.classes);
        let x = (0..self.cfg.features)
            .map(|f| {
                let z: f64 = noise.sample(rng);
                if f < self.cfg.trigger_features {
                    (0.5 * z).clamp(-1.0, 1.0)
                } else {
                    self.means[label][f] + z
                }
            })
            .collect();
        Sample { x, label }
    }

    /// Copy of `s` with the trigger applied and relabelled to the target.
    pub fn triggered(&self, s: &Sample) -> Sample {
        let mut x = s.x.clone();
        for v in x.iter_mut().take(self.cfg.trigger_features) {
            *v = self.cfg.trigger_value;
        }
        Sample {
            x,
            label: self.cfg.target_class,
        }
    }

    pub fn partition(&self, user: usize) -> &[Sample] {
        &self.partitions[user]
    }

    pub fn test_set(&self) -> &[Sample] {
        &self.test
    }

    pub fn backdoor_test_set(&self) -> &[Sample] {
        &self.backdoor_test
    }

    pub fn initial_model(&self) -> Vec<f64> {
        vec![0.0; self.cfg.param_count()]
    }

    /// Local training from the current global model on `user`'s data.
    pub fn benign_update(&self, x_t: &[f64], user: usize) -> Vec<f64> {
        let mut w = x_t.to_vec();
        for _ in 0..self.cfg.local_epochs {
            gd_step(&self.cfg, &mut w, &self.partitions[user], self.cfg.local_lr);
        }
        w
    }

    /// Backdoored model fitted by the attackers on their pooled data plus
    /// triggered copies.
    pub fn backdoor_target(&self, x_t: &[f64], attackers: &[usize]) -> Vec<f64> {
        let mut data = Vec::new();
        for &a in attackers {
            for s in &self.partitions[a] {
                data.push(s.clone());
                if s.label != self.cfg.target_class {
                    data.push(self.triggered(s));
                }
            }
        }
        let mut w = x_t.to_vec();
        for _ in 0..self.cfg.attack_epochs {
            gd_step(&self.cfg, &mut w, &data, self.cfg.local_lr);
        }
        w
    }

    pub fn eval(&self, w: &[f64]) -> TaskEval {
        TaskEval {
            main_accuracy: accuracy(&self.cfg, w, &self.test),
            backdoor_accuracy: accuracy(&self.cfg, w, &self.backdoor_test),
            loss: loss(&self.cfg, w, &self.test),
        }
    }
}

fn logits(cfg: &ToyTaskConfig, w: &[f64], x: &[f64], out: &mut [f64]) {
    let f = cfg.features;
    let bias = &w[f * cfg.classes..];
    for (c, o) in out.iter_mut().enumerate() {
        let row = &w[c * f..(c + 1) * f];
        *o = bias[c] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn softmax(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// One full-batch gradient step of L2-regularised cross-entropy.
pub fn gd_step(cfg: &ToyTaskConfig, w: &mut [f64], data: &[Sample], lr: f64) {
    if data.is_empty() {
        return;
    }
    let f = cfg.features;
    let mut grad = vec![0.0; w.len()];
    let mut p = vec![0.0; cfg.classes];
    for s in data {
        logits(cfg, w, &s.x, &mut p);
        softmax(&mut p);
        p[s.label] -= 1.0;
        for (c, &pc) in p.iter().enumerate() {
            for (g, &xi) in grad[c * f..(c + 1) * f].iter_mut().zip(&s.x) {
                *g += pc * xi;
            }
            grad[f * cfg.classes + c] += pc;
        }
    }
    let inv = 1.0 / data.len() as f64;
    for (wi, g) in w.iter_mut().zip(&grad) {
        *wi -= lr * (g * inv + cfg.weight_decay * *wi);
    }
}

pub fn predict(cfg: &ToyTaskConfig, w: &[f64], x: &[f64]) -> usize {
    let mut z = vec![0.0; cfg.classes];
    logits(cfg, w, x, &mut z);
    let mut best = 0;
    for c in 1..z.len() {
        if z[c] > z[best] {
            best = c;
        }
    }
    best
}

pub fn accuracy(cfg: &ToyTaskConfig, w: &[f64], data: &[Sample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().filter(|s| predict(cfg, w, &s.x) == s.label).count() as f64 / data.len() as f64
}

/// Mean cross-entropy.
pub fn loss(cfg: &ToyTaskConfig, w: &[f64], data: &[Sample]) -> f64 {
    let mut z = vec![0.0; cfg.classes];
    let mut acc = 0.0;
    for s in data {
        logits(cfg, w, &s.x, &mut z);
        softmax(&mut z);
        acc -= z[s.label].max(1e-300).ln();
    }
    acc / data.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> ToyTask {
        ToyTask::generate(ToyTaskConfig::default(), 60, 9)
    }

    #[test]
    fn shapes_and_trigger_absent() {
        let t = task();
        assert_eq!(t.cfg.param_count(), 330);
        for p in &t.partitions {
            for s in p {
                assert!(s.x[..4].iter().all(|v| v.abs() <= 1.0));
            }
        }
        assert!(t.backdoor_test_set().iter().all(|s| s.x[..4] == [5.0; 4]));
    }

    #[test]
    fn zero_model_is_chance() {
        let t = task();
        let e = t.eval(&t.initial_model());
        // argmax ties pick class 0
        assert!((e.main_accuracy - 0.1).abs() < 0.03);
        assert!((e.loss - 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn fedavg_loss_decreases() {
        let t = task();
        let mut x = t.initial_model();
        let mut prev = t.eval(&x).loss;
        for _ in 0..10 {
            let mut sum = vec![0.0; x.len()];
            for u in 0..60 {
                for (s, v) in sum.iter_mut().zip(t.benign_update(&x, u)) {
                    *s += v;
                }
            }
            x = sum.iter().map(|s| s / 60.0).collect();
            let l = t.eval(&x).loss;
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn backdoor_fixture_works() {
        let t = task();
        let target = t.backdoor_target(&t.initial_model(), &[0, 1, 2]);
        assert!(t.eval(&target).backdoor_accuracy > 0.8);
    }
}
