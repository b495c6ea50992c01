//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line; pass criterion numbers as arguments
//! to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use safeagg::adversary::{AttackPlan, Strategy};
use safeagg::detection::{compute_rh, mean_subset_variance, variance, DetectionMetrics};
use safeagg::numeric::{ParamVector, SegmentSpec};
use safeagg::orgtree::{assign_subgroups, derive_identity, finalize_identities, Identity, TreeConfig};
use safeagg::sim::bench::{bench_point, BenchPoint};
use safeagg::sim::{
    substream, DropPoint, DropTiming, Protocol, ScenarioConfig, Simulation, WorkloadMode,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, budget: Duration) -> Result<(), String> {
    let took = started.elapsed();
    check(took <= budget, || format!("took {took:.1?}, budget {budget:?}"))
}

fn synthetic(users: usize, h: u32, d: u32, m: usize, seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        users,
        seed,
        rounds: 1,
        tree: TreeConfig::new(h, d, 2),
        ..ScenarioConfig::default()
    };
    cfg.segment.low_bits = Some(12);
    cfg.workload.mode = WorkloadMode::Synthetic;
    cfg.workload.synthetic.dim = m;
    cfg
}

fn task(seed: u64, rounds: u32) -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        seed,
        rounds,
        ..ScenarioConfig::default()
    };
    cfg.workload.mode = WorkloadMode::Task;
    cfg
}

fn random_inputs(rng: &mut ChaCha20Rng, n: usize, m: usize, spec: SegmentSpec, bound: i64) -> Vec<ParamVector> {
    (0..n)
        .map(|_| {
            let e = (0..m).map(|_| spec.from_signed(rng.random_range(-bound..=bound))).collect();
            ParamVector::from_elems(e, spec).unwrap()
        })
        .collect()
}

fn plain_sum(xs: &[ParamVector], keep: impl Fn(usize) -> bool) -> ParamVector {
    let mut s = ParamVector::zeros(xs[0].len(), *xs[0].spec());
    for (u, x) in xs.iter().enumerate() {
        if keep(u) {
            s.add_assign_mod(x).unwrap();
        }
    }
    s
}

fn pick_attackers(seed: u64, users: usize, k: usize) -> Vec<usize> {
    let mut rng = substream(seed, "acceptance-attackers", 0, k as u64);
    let mut a = sample(&mut rng, users, k).into_vec();
    a.sort_unstable();
    a
}

fn plan(attackers: Vec<usize>, strategy: Strategy, start_round: u32) -> AttackPlan {
    AttackPlan {
        attackers,
        strategy,
        start_round,
        gamma: None,
        min_scale: None,
        norm_cap: None,
    }
}

/// Single intra peer on each side, so subgroups of three are valid.
fn narrow(mut cfg: ScenarioConfig) -> ScenarioConfig {
    cfg.tree.kappa_intra = 1;
    cfg
}

fn min_users(h: u32, d: u32) -> usize {
    3 * (d as usize).pow(h)
}

const TREES: [(u32, u32); 3] = [(2, 2), (3, 2), (3, 3)];

fn exact_aggregation() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    for i in 0..100u64 {
        let (h, d) = TREES[i as usize % 3];
        // Both ends of the range for every shape, log-uniform in between.
        let lo = min_users(h, d).max(27);
        let n = match i / 3 {
            0 => lo,
            1 => 512,
            _ => (lo as f64 * (512.0 / lo as f64).powf(rng.random::<f64>())).round() as usize,
        };
        let mut sim = Simulation::new(narrow(synthetic(n, h, d, 8, i))).map_err(|e| e.to_string())?;
        let xs = random_inputs(&mut rng, n, 8, sim.spec(), i64::from(i32::MAX));
        let out = sim.aggregate_inputs(&xs, &BTreeMap::new(), Some(&BTreeSet::new()))?;
        check(out.sum.as_ref() == Some(&plain_sum(&xs, |_| true)), || {
            format!("config {i}: N={n} {h}x{d} sum mismatch")
        })?;
    }
    within(started, Duration::from_secs(10))?;
    Ok(format!("100/100 configs bit-exact in {:.1?}", started.elapsed()))
}

fn dropout_robustness() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let mut dropped_total = 0;
    for i in 0..50u64 {
        let (n, h, d) = [(100, 2, 2), (160, 2, 2), (243, 3, 2), (300, 2, 2), (243, 2, 2)][i as usize % 5];
        let mut sim = Simulation::new(synthetic(n, h, d, 6, 1000 + i)).map_err(|e| e.to_string())?;
        let xs = random_inputs(&mut rng, n, 6, sim.spec(), 1 << 24);
        let count = (0.15 * n as f64).round() as usize;
        let drops: BTreeMap<usize, DropPoint> = sample(&mut rng, n, count)
            .into_iter()
            .map(|u| (u, DropPoint::BeforeUpload))
            .collect();
        dropped_total += drops.len();
        let out = sim.aggregate_inputs(&xs, &drops, Some(&BTreeSet::new()))?;
        check(out.sum == Some(plain_sum(&xs, |u| !drops.contains_key(&u))), || {
            format!("run {i}: N={n} {h}x{d} survivor sum mismatch")
        })?;
        check(out.contributions == n - count, || format!("run {i}: contributions {}", out.contributions))?;
    }
    Ok(format!("50/50 runs exact, {dropped_total} dropouts recovered"))
}

fn carry_bound() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let mut rounds = 0;
    let mut worst = 0u64;
    let mut ratio = 0f64;
    for cfg_i in 0..20u64 {
        let (h, d) = TREES[cfg_i as usize % 3];
        let n = rng.random_range(min_users(h, d).max(54)..=120);
        let mut sim = Simulation::new(narrow(synthetic(n, h, d, 8, 3000 + cfg_i))).map_err(|e| e.to_string())?;
        let spec = sim.spec();
        for _ in 0..50 {
            let bound = 1i64 << rng.random_range(4..24);
            let xs = random_inputs(&mut rng, n, 8, spec, bound);
            let out = sim.aggregate_inputs(&xs, &BTreeMap::new(), Some(&BTreeSet::new()))?;
            for a in &out.aggregates {
                let high = a.revealed_high.as_ref().ok_or("leaf without revealed high part")?;
                let sum = plain_sum(&xs, |u| out.leaf_of[u] == a.leaf);
                for (hv, sv) in high.as_slice().iter().zip(sum.as_slice()) {
                    let diff = (spec.to_signed(*hv) - spec.balanced_high(*sv)).unsigned_abs();
                    check(diff as usize <= a.survivors, || {
                        format!("round {rounds}: |diff|={diff} > n_i={}", a.survivors)
                    })?;
                    worst = worst.max(diff);
                    ratio = ratio.max(diff as f64 / a.survivors as f64);
                }
            }
            rounds += 1;
        }
    }
    Ok(format!("{rounds} rounds, 0 violations, max |diff|={worst} (max |diff|/n_i={ratio:.2})"))
}

fn subset_variance() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let normal = Normal::<f64>::new(0.0, 1.5).unwrap();
    let pop: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
    let var_n = variance(&pop);
    let eps = 2.0 * var_n.sqrt();
    let mut notes = Vec::new();
    for n in [16usize, 64, 256] {
        let expected = (n as f64 - 1.0) / n as f64 * var_n;
        let got = mean_subset_variance(&pop, n, 10_000, &mut rng);
        let rel = (got - expected).abs() / expected;
        check(rel < 0.02, || format!("n={n}: mean subset variance {got:.4} vs {expected:.4}"))?;

        // Members of a subset against a disclosed value at the far edge of
        // the R_H/2 window around the subset mean.
        let rh = compute_rh(n, eps).map_err(|e| e.to_string())?;
        let mut hits = 0usize;
        let mut total = 0usize;
        for _ in 0..10_000 {
            let idx = sample(&mut rng, pop.len(), n);
            let xs: Vec<f64> = idx.iter().map(|i| pop[i]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let y = mean + if rng.random::<bool>() { rh / 2.0 } else { -rh / 2.0 };
            hits += xs.iter().filter(|x| (*x - y).abs() >= eps).count();
            total += n;
        }
        let tail = hits as f64 / total as f64;
        let bound = expected / (eps - rh / 2.0).powi(2);
        check(tail <= bound, || format!("n={n}: tail {tail:.4} > bound {bound:.4}"))?;
        check((bound - var_n / (eps * eps)).abs() < 0.01, || {
            format!("n={n}: expected bound {bound:.4} differs from sigma^2/eps^2")
        })?;
        notes.push(format!("n={n} var_rel_err={rel:.4} tail={tail:.4}<=bound={bound:.4}"));
    }
    within(started, Duration::from_secs(60))?;
    Ok(notes.join("; "))
}

fn detection_headline() -> Outcome {
    let started = Instant::now();
    let mut total = DetectionMetrics::default();
    for seed in 0..20u64 {
        let mut warm = Simulation::new(task(seed, 11)).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            warm.step().map_err(|e| e.to_string())?;
        }
        let groups = warm.config().groups();
        for k in 1..=13usize {
            for (strategy, rounds) in [(Strategy::OneShot, 1), (Strategy::Continuous { rounds: 5 }, 5)] {
                let mut sim = warm.clone();
                let p = plan(pick_attackers(seed, warm.config().users, k), strategy, 5);
                let gamma = p.scale_at(5, warm.config().users, warm.config().eta, groups).unwrap();
                check(gamma >= warm.config().users as f64 / (warm.config().eta * groups as f64) - 1e-9, || {
                    format!("gamma {gamma} below N/(eta G)")
                })?;
                sim.set_attack_plan(Some(p)).map_err(|e| e.to_string())?;
                let before = sim.metrics();
                for _ in 0..rounds {
                    sim.step().map_err(|e| e.to_string())?;
                }
                let after = sim.metrics();
                let delta = DetectionMetrics {
                    attacker_rounds: after.attacker_rounds - before.attacker_rounds,
                    detected_rounds: after.detected_rounds - before.detected_rounds,
                    attackers_total: after.attackers_total - before.attackers_total,
                    attackers_caught: after.attackers_caught - before.attackers_caught,
                    subgroups_total: after.subgroups_total - before.subgroups_total,
                    benign_flagged: after.benign_flagged - before.benign_flagged,
                };
                total.merge(&delta);
            }
        }
    }
    let (dr, cr, fpr) = (total.dr(), total.cr(), total.fpr());
    let line = format!(
        "DR={dr:.3} CR={cr:.3} FPR={fpr:.4} over {} attacker rounds in {:.0?}",
        total.attacker_rounds,
        started.elapsed()
    );
    check(dr == 1.0 && cr >= 0.95 && fpr == 0.0, || line.clone())?;
    within(started, Duration::from_secs(300))?;
    Ok(line)
}

fn after_attack_accuracy() -> Outcome {
    let started = Instant::now();
    let (mut off_bd, mut on_bd, mut gap) = (0f64, 0f64, 0f64);
    let (mut min_off, mut max_on, mut max_gap) = (1f64, 0f64, 0f64);
    for seed in 0..20u64 {
        let users = task(seed, 7).users;
        let k = 1 + (seed as usize % 13);
        let attackers = pick_attackers(seed, users, k);
        let run = |detect: bool, attack: bool| -> Result<(f64, f64), String> {
            let mut cfg = task(seed, 7);
            cfg.detection.enabled = detect;
            if attack {
                cfg.attack = Some(plan(attackers.clone(), Strategy::OneShot, 5));
            }
            let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
            let mut row = None;
            while sim.round() < 7 {
                row = Some(sim.step().map_err(|e| e.to_string())?.clone());
            }
            let row = row.unwrap();
            Ok((row.main_accuracy.unwrap(), row.backdoor_accuracy.unwrap()))
        };
        let (_, bd_off) = run(false, true)?;
        let (main_on, bd_on) = run(true, true)?;
        let (main_clean, _) = run(true, false)?;
        off_bd += bd_off / 20.0;
        on_bd += bd_on / 20.0;
        gap += (main_on - main_clean).abs() / 20.0;
        min_off = min_off.min(bd_off);
        max_on = max_on.max(bd_on);
        max_gap = max_gap.max((main_on - main_clean).abs());
    }
    let line = format!(
        "backdoor off={off_bd:.3} (min {min_off:.3}) on={on_bd:.3} (max {max_on:.3}); main gap {gap:.4} (max {max_gap:.4})"
    );
    check(min_off > 0.8 && max_on < 0.05 && max_gap <= 0.02, || line.clone())?;
    within(started, Duration::from_secs(300))?;
    Ok(line)
}

fn ever_present() -> Outcome {
    let mut notes = Vec::new();
    for seed in 0..5u64 {
        let run = |k: usize| -> Result<Vec<(f64, f64, f64)>, String> {
            let mut cfg = task(seed, 30);
            // Detection stays on from round 1 through a fixed warm-up bound.
            cfg.detection.warmup_threshold = Some(0.5);
            cfg.attack = Some(plan(pick_attackers(seed, cfg.users, k), Strategy::EverPresent, 0));
            let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
            let mut out = Vec::new();
            while sim.round() < 30 {
                let r = sim.step().map_err(|e| e.to_string())?;
                out.push((r.loss.unwrap(), r.main_accuracy.unwrap(), r.backdoor_accuracy.unwrap()));
            }
            Ok(out)
        };
        let many = run(30)?;
        let few = run(5)?;
        // Loss change over rounds 10..30: flat with more attackers than
        // subgroups, still falling with fewer.
        let stalled = many[9].0 - many[29].0;
        let falling = few[9].0 - few[29].0;
        check(stalled <= 0.01, || {
            format!("seed {seed}, 30 attackers: loss {:.3} -> {:.3}", many[9].0, many[29].0)
        })?;
        let (l30, bd) = (few[29].0, few[29].2);
        check(falling > 0.1 && bd <= 0.1, || {
            format!("seed {seed}, 5 attackers: backdoor {bd:.3}, loss {:.3} -> {l30:.3}", few[9].0)
        })?;
        notes.push(format!("s{seed}: drop {stalled:.3} vs {falling:.3}, bd {bd:.3}"));
    }
    Ok(notes.join("; "))
}

fn random_ids(n: usize, rng: &mut ChaCha20Rng) -> Vec<Identity> {
    let r_s: [u8; 32] = rng.random();
    let pre: Vec<[u8; 32]> = (0..n)
        .map(|u| derive_identity(&r_s, &(u as u64).to_le_bytes(), &rng.random()))
        .collect();
    finalize_identities(&pre)
}

fn org_statistics() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(808);
    let tree = TreeConfig::new(3, 3, 2);
    let mut counts = vec![0f64; 27];
    for _ in 0..1000 {
        let a = assign_subgroups(&random_ids(243, &mut rng), &tree).map_err(|e| e.to_string())?;
        counts[a.leaf_of[17]] += 1.0;
    }
    let e = 1000.0 / 27.0;
    let stat: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new(26.0).unwrap().cdf(stat);
    check(p > 0.01, || format!("occupancy chi-square p={p:.4}"))?;

    let mut notes = vec![format!("occupancy p={p:.3}")];
    for (x, tree) in [(2usize, TreeConfig::new(1, 2, 2)), (3, TreeConfig::new(1, 3, 2)), (4, TreeConfig::new(2, 2, 2))] {
        let trials = 4000;
        let mut hits = 0;
        for _ in 0..trials {
            let a = assign_subgroups(&random_ids(400, &mut rng), &tree).map_err(|e| e.to_string())?;
            let occupied: BTreeSet<usize> = (0..x).map(|u| a.leaf_of[u]).collect();
            hits += usize::from(occupied.len() == x);
        }
        let expect = (1..=x).product::<usize>() as f64 / (x as f64).powi(x as i32);
        let freq = hits as f64 / trials as f64;
        let sigma = (expect * (1.0 - expect) / trials as f64).sqrt();
        check((freq - expect).abs() <= 3.0 * sigma, || {
            format!("x={x}: distinct freq {freq:.4} vs {expect:.4} (sigma {sigma:.4})")
        })?;
        notes.push(format!("x={x} {freq:.3}~{expect:.3}"));
    }

    for trial in 0..200 {
        let n = rng.random_range(4..64usize);
        let r_s: [u8; 32] = rng.random();
        let mut r_u: Vec<[u8; 32]> = (0..n).map(|_| rng.random()).collect();
        let ids = |r_u: &[[u8; 32]]| {
            let pre: Vec<_> = r_u
                .iter()
                .enumerate()
                .map(|(u, r)| derive_identity(&r_s, &(u as u64).to_le_bytes(), r))
                .collect();
            finalize_identities(&pre)
        };
        let before = ids(&r_u);
        let who = rng.random_range(0..n);
        let bit = rng.random_range(0..256usize);
        r_u[who][bit / 8] ^= 1 << (bit % 8);
        let after = ids(&r_u);
        let changed = (0..n).filter(|&u| before[u].finalized != after[u].finalized).count();
        check(changed == n - 1 && before[who].finalized == after[who].finalized, || {
            format!("avalanche trial {trial}: {changed} of {n} finalized ids changed")
        })?;
    }
    notes.push("avalanche 200/200".into());
    Ok(notes.join("; "))
}

fn complexity_orderings() -> Outcome {
    let point = |protocol, users, h, d, dropout| BenchPoint {
        protocol,
        users,
        height: h,
        degree: d,
        model_len: 64,
        dropout,
    };
    let run = |p: BenchPoint| bench_point(p, 9).map_err(|e| e.to_string());
    let tree = TreeConfig::new(3, 3, 2);
    let expect = (2 * tree.kappa_intra + 2 * tree.height as usize + 1) as f64;
    let small = run(point(Protocol::Tree, 270, 3, 3, 0.0))?;
    let large = run(point(Protocol::Tree, 1080, 3, 3, 0.0))?;
    check(small.user_prg_expansions == expect && large.user_prg_expansions == expect, || {
        format!(
            "tree per-user PRG {} / {} (expected {expect})",
            small.user_prg_expansions, large.user_prg_expansions
        )
    })?;
    let base = run(point(Protocol::Baseline, 100, 2, 2, 0.0))?;
    check(base.user_prg_expansions == 100.0, || {
        format!("baseline per-user PRG {}", base.user_prg_expansions)
    })?;

    let tree_drop = run(point(Protocol::Tree, 100, 2, 2, 0.15))?;
    let base_drop = run(point(Protocol::Baseline, 100, 2, 2, 0.15))?;
    let tree_bound = (2 * 2 + 2 * 2) as f64;
    check(tree_drop.cancellations_per_dropout <= tree_bound, || {
        format!("tree cancellations/dropout {}", tree_drop.cancellations_per_dropout)
    })?;
    check(base_drop.cancellations_per_dropout >= 0.8 * 100.0, || {
        format!("baseline cancellations/dropout {}", base_drop.cancellations_per_dropout)
    })?;

    let b22 = run(point(Protocol::Tree, 1000, 2, 2, 0.0))?;
    let b33 = run(point(Protocol::Tree, 1000, 3, 3, 0.0))?;
    check(b33.user_bytes < b22.user_bytes, || {
        format!("per-user bytes 2x2={} 3x3={}", b22.user_bytes, b33.user_bytes)
    })?;
    Ok(format!(
        "PRG/user tree={expect} (N=270,1080) baseline=100; cancel/dropout tree={:.1} baseline={:.1}; bytes/user 2x2={:.0} > 3x3={:.0}",
        tree_drop.cancellations_per_dropout, base_drop.cancellations_per_dropout, b22.user_bytes, b33.user_bytes
    ))
}

fn determinism() -> Outcome {
    let mut scenarios = Vec::new();
    let mut cfg = task(42, 8);
    cfg.dropout.rate = 0.05;
    cfg.dropout.timing = DropTiming::Uniform;
    cfg.abort_on_failure = false;
    cfg.attack = Some(plan(pick_attackers(42, cfg.users, 4), Strategy::Continuous { rounds: 2 }, 5));
    scenarios.push(cfg);
    let mut cfg = synthetic(120, 2, 2, 16, 7);
    cfg.rounds = 8;
    cfg.dropout.rate = 0.1;
    scenarios.push(cfg);
    let mut cfg = synthetic(60, 2, 2, 16, 8);
    cfg.protocol = Protocol::Baseline;
    cfg.rounds = 3;
    scenarios.push(cfg);
    for (i, cfg) in scenarios.into_iter().enumerate() {
        let a = Simulation::new(cfg.clone()).and_then(Simulation::run).map_err(|e| e.to_string())?;
        let b = Simulation::new(cfg).and_then(Simulation::run).map_err(|e| e.to_string())?;
        check(a.to_csv() == b.to_csv(), || format!("scenario {i}: CSV differs"))?;
        check(a.to_json() == b.to_json(), || format!("scenario {i}: JSON differs"))?;
    }
    Ok("3 scenarios byte-identical (CSV and JSON)".into())
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "exact aggregation", exact_aggregation),
    (2, "dropout robustness", dropout_robustness),
    (3, "carry bound", carry_bound),
    (4, "subset variance and tail bound", subset_variance),
    (5, "detection headline", detection_headline),
    (6, "after-attack accuracy", after_attack_accuracy),
    (7, "ever-present attack", ever_present),
    (8, "grouping statistics", org_statistics),
    (9, "complexity orderings", complexity_orderings),
    (10, "determinism", determinism),
];

fn main() -> ExitCode {
    let only: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in CRITERIA {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let took = started.elapsed();
        match res {
            Ok(detail) => println!("acceptance {id:>2} PASS {name} [{took:.1?}]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("acceptance {id:>2} FAIL {name} [{took:.1?}]: {detail}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
