//! Deterministic round orchestration.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use super::config::{ConfigError, DropTiming, Protocol, ScenarioConfig, WorkloadMode};
use super::report::{RoundRow, RoundTranscript, RunReport, RunSummary};
use super::transport::{RoundPhase, StarTransport, TransportError};
use crate::adversary::{attacker_update, AttackPlan, ToyTask, Workload};
use crate::aggserver::{fedsgd_update, AggServer, ServerCounters, ServerError, SubgroupAggregate, TopologyMode};
use crate::crypto::{sha256, DhGroup};
use crate::detection::{detect, std_dev, subgroup_distances, DetectionMetrics, DetectionOutcome, DetectionState};
use crate::numeric::{NumericError, ParamVector, SegmentSpec};
use crate::useragent::{MaskLayout, UserAgent, UserCounters, UserError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("round {round}: {reason}")]
    Protocol { round: u32, reason: String },
    #[error("round {round}: {source}")]
    Numeric { round: u32, source: NumericError },
    #[error("run already finished after {0} rounds")]
    Finished(u32),
}

/// Where a dropping user stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropPoint {
    BeforeShare,
    BeforeUpload,
    BeforeUnmask,
}

#[derive(Debug, Error)]
enum RoundError {
    #[error("server: {0}")]
    Server(#[from] ServerError),
    #[error("user {0}: {1}")]
    User(usize, UserError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
}

/// Independent RNG stream for `(seed, label, round, index)`.
pub fn substream(seed: u64, label: &str, round: u32, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(sha256(&[
        b"safeagg/substream",
        &seed.to_le_bytes(),
        label.as_bytes(),
        &round.to_le_bytes(),
        &index.to_le_bytes(),
    ]))
}

fn seed_bytes(seed: u64, label: &str, index: u64) -> [u8; 32] {
    let mut b = [0u8; 32];
    substream(seed, label, 0, index).fill(&mut b);
    b
}

/// Outcome of one protocol round at the aggregation layer.
#[derive(Debug, Clone, Default)]
pub struct ProtocolRound {
    pub sum: Option<ParamVector>,
    pub contributions: usize,
    pub detection: Option<DetectionOutcome>,
    /// Masking leaf of every user; empty for the baseline.
    pub leaf_of: Vec<usize>,
    pub aggregates: Vec<SubgroupAggregate>,
    pub abandoned: bool,
}

#[derive(Clone)]
pub struct Simulation {
    cfg: ScenarioConfig,
    spec: SegmentSpec,
    workload: Workload,
    users: Vec<UserAgent>,
    server: AggServer,
    transport: StarTransport,
    detector: DetectionState,
    metrics: DetectionMetrics,
    x: ParamVector,
    round: u32,
    attack: Option<AttackPlan>,
    target: Option<Vec<f64>>,
    rows: Vec<RoundRow>,
    transcripts: Vec<RoundTranscript>,
    user_totals: UserCounters,
    server_totals: ServerCounters,
    abandoned: u32,
    user_time: Duration,
    server_time: Duration,
}

macro_rules! timed {
    ($acc:expr, $e:expr) => {{
        let started = Instant::now();
        let out = $e;
        $acc += started.elapsed();
        out
    }};
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let spec = cfg.segment_spec()?;
        let group = Arc::new(DhGroup::new(cfg.group));
        let workload = match cfg.workload.mode {
            WorkloadMode::Synthetic => Workload::Synthetic(cfg.workload.synthetic),
            WorkloadMode::Task => Workload::Task(Box::new(ToyTask::generate(
                cfg.workload.task,
                cfg.users,
                cfg.seed,
            ))),
        };
        let (mode, layout) = match cfg.protocol {
            Protocol::Tree => (TopologyMode::Tree(cfg.tree), MaskLayout::Split),
            Protocol::Baseline => (
                crate::baseline::topology_mode(cfg.users, cfg.baseline_threshold),
                crate::baseline::LAYOUT,
            ),
        };
        let users = (0..cfg.users)
            .map(|u| UserAgent::new(u, group.clone(), spec, layout, seed_bytes(cfg.seed, "agent", u as u64)))
            .collect();
        let server = AggServer::new(group, spec, cfg.model_len(), mode, seed_bytes(cfg.seed, "server", 0));
        let x = ParamVector::quantize(&workload.initial_model(), spec)
            .map_err(|source| SimError::Numeric { round: 0, source })?;
        let mut detector = DetectionState::new(cfg.detection.rho, cfg.detection.window).with_mode(cfg.detection.history);
        detector.warmup_threshold = cfg.detection.warmup_threshold;
        Ok(Self {
            transport: StarTransport::new(cfg.users),
            attack: cfg.attack.clone(),
            cfg,
            spec,
            workload,
            users,
            server,
            detector,
            metrics: DetectionMetrics::default(),
            x,
            round: 0,
            target: None,
            rows: Vec::new(),
            transcripts: Vec::new(),
            user_totals: UserCounters::default(),
            server_totals: ServerCounters::default(),
            abandoned: 0,
            user_time: Duration::ZERO,
            server_time: Duration::ZERO,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn spec(&self) -> SegmentSpec {
        self.spec
    }

    pub fn model(&self) -> &ParamVector {
        &self.x
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn workload(&self) -> &Workload {
        &self.workload
    }

    pub fn rows(&self) -> &[RoundRow] {
        &self.rows
    }

    pub fn metrics(&self) -> DetectionMetrics {
        self.metrics
    }

    /// Replaces the attack plan for the remaining rounds.
    pub fn set_attack_plan(&mut self, plan: Option<AttackPlan>) -> Result<(), SimError> {
        if let Some(p) = &plan {
            p.validate(self.cfg.users, self.cfg.rounds)
                .map_err(|e| SimError::Config(e.into()))?;
        }
        self.attack = plan;
        self.target = None;
        Ok(())
    }

    /// Wall time spent in user and server code during the last round, in ms.
    pub fn role_times(&self) -> (f64, f64) {
        (self.user_time.as_secs_f64() * 1e3, self.server_time.as_secs_f64() * 1e3)
    }

    pub fn user(&self, u: usize) -> &UserAgent {
        &self.users[u]
    }

    pub fn server(&self) -> &AggServer {
        &self.server
    }

    #[doc(hidden)]
    pub fn server_mut(&mut self) -> &mut AggServer {
        &mut self.server
    }

    fn draw_dropouts(&self, round: u32) -> BTreeMap<usize, DropPoint> {
        let n = self.cfg.users;
        let count = (self.cfg.dropout.rate * n as f64).round() as usize;
        let mut rng = substream(self.cfg.seed, "dropout", round, 0);
        let mut chosen: Vec<usize> = sample(&mut rng, n, count).into_vec();
        chosen.sort_unstable();
        chosen
            .into_iter()
            .map(|u| {
                let p = match self.cfg.dropout.timing {
                    DropTiming::BeforeUpload => DropPoint::BeforeUpload,
                    DropTiming::Uniform => match rng.random_range(0..3) {
                        0 => DropPoint::BeforeShare,
                        1 => DropPoint::BeforeUpload,
                        _ => DropPoint::BeforeUnmask,
                    },
                };
                (u, p)
            })
            .collect()
    }

    /// Local models for the round, plus the users acting as attackers.
    fn local_models(&mut self, round: u32) -> (Vec<Vec<f64>>, Vec<usize>) {
        let x_t = self.x.dequantize();
        let n = self.cfg.users;
        let scale = self
            .attack
            .as_ref()
            .and_then(|p| p.scale_at(round, n, self.cfg.eta, self.cfg.groups()));
        let mut active = Vec::new();
        if let (Some(scale), Some(plan)) = (scale, self.attack.as_ref()) {
            if self.target.is_none() {
                self.target = Some(self.workload.attack_target(&x_t, &plan.attackers));
            }
            active = plan.attackers.clone();
            active.sort_unstable();
            let target = self.target.as_ref().unwrap();
            let xa = attacker_update(&x_t, target, scale, plan.norm_cap);
            let models = (0..n)
                .map(|u| {
                    if active.binary_search(&u).is_ok() {
                        xa.clone()
                    } else {
                        let mut rng = substream(self.cfg.seed, "update", round, u as u64);
                        self.workload.benign_update(&x_t, u, round, &mut rng)
                    }
                })
                .collect();
            return (models, active);
        }
        let models = (0..n)
            .map(|u| {
                let mut rng = substream(self.cfg.seed, "update", round, u as u64);
                self.workload.benign_update(&x_t, u, round, &mut rng)
            })
            .collect();
        (models, active)
    }

    /// Runs the next round and returns its report row.
    pub fn step(&mut self) -> Result<&RoundRow, SimError> {
        if self.round >= self.cfg.rounds {
            return Err(SimError::Finished(self.round));
        }
        let round = self.round + 1;
        let (models, attackers) = self.local_models(self.round);
        let inputs = models
            .iter()
            .map(|m| ParamVector::quantize(m, self.spec))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| SimError::Numeric { round, source })?;
        let drops = self.draw_dropouts(round);
        self.server.reset_counters();
        for u in &mut self.users {
            u.reset_counters();
        }
        self.transport.reset_traffic();
        self.user_time = Duration::ZERO;
        self.server_time = Duration::ZERO;
        let started = Instant::now();
        let result = self.run_protocol(round, &inputs, &drops, None);
        let elapsed = started.elapsed();
        let (outcome, failure) = match result {
            Ok(r) => (r, None),
            Err(RoundError::Server(ServerError::ExclusionFailed(u))) => (
                ProtocolRound {
                    abandoned: true,
                    ..Default::default()
                },
                Some(format!("exclusion reply missing from user {u}")),
            ),
            Err(e) => {
                if self.cfg.abort_on_failure {
                    return Err(SimError::Protocol {
                        round,
                        reason: e.to_string(),
                    });
                }
                (
                    ProtocolRound {
                        abandoned: true,
                        ..Default::default()
                    },
                    Some(e.to_string()),
                )
            }
        };
        if let Some(sum) = &outcome.sum {
            if outcome.contributions > 0 {
                self.x = fedsgd_update(&self.x, sum, outcome.contributions, self.cfg.eta)
                    .map_err(|source| SimError::Numeric { round, source })?;
            }
        }
        if outcome.abandoned {
            self.abandoned += 1;
        }
        let online_attackers: Vec<usize> = attackers
            .iter()
            .copied()
            .filter(|a| !drops.contains_key(a))
            .collect();
        let attacker_leaves: Vec<usize> = if outcome.leaf_of.is_empty() {
            vec![0; online_attackers.len()]
        } else {
            online_attackers.iter().map(|&a| outcome.leaf_of[a]).collect()
        };
        let flagged = outcome
            .detection
            .as_ref()
            .map(|d| d.flagged.clone())
            .unwrap_or_default();
        if !outcome.abandoned || outcome.detection.is_some() {
            self.metrics.record(&flagged, &attacker_leaves, self.cfg.groups());
        }
        let eval = self.workload.eval(&self.x.dequantize());
        let srv = self.server.counters();
        let mut users_sum = UserCounters::default();
        let mut max_prg = 0u64;
        for u in &self.users {
            let c = u.counters();
            users_sum.key_agreements += c.key_agreements;
            users_sum.prg_expansions += c.prg_expansions;
            users_sum.prg_elements += c.prg_elements;
            users_sum.shares_created += c.shares_created;
            max_prg = max_prg.max(c.prg_expansions);
        }
        accumulate_user(&mut self.user_totals, &users_sum);
        accumulate_server(&mut self.server_totals, &srv);
        let det = outcome.detection.as_ref();
        let row = RoundRow {
            round,
            dropouts: drops.len(),
            attackers_active: online_attackers.len(),
            abandoned: outcome.abandoned,
            std_initial: det.map(|d| d.std_sequence[0]),
            std_final: det.map(|d| d.final_std()),
            xi: det.map(|d| d.xi),
            flagged: flagged.len(),
            dr: self.metrics.dr(),
            cr: self.metrics.cr(),
            fpr: self.metrics.fpr(),
            main_accuracy: eval.map(|e| e.main_accuracy),
            backdoor_accuracy: eval.map(|e| e.backdoor_accuracy),
            loss: eval.map(|e| e.loss),
        };
        let traffic = self.transport.traffic().clone();
        self.transcripts.push(RoundTranscript {
            round,
            dropped: drops.into_iter().collect(),
            failure,
            attacker_leaves,
            detection: outcome.detection,
            server_counters: srv,
            user_counters: users_sum,
            max_user_prg_expansions: max_prg,
            server_bytes_sent: traffic.server_sent,
            server_bytes_received: traffic.server_received,
            user_bytes_sent: traffic.user_sent.iter().sum(),
            user_bytes_received: traffic.user_received.iter().sum(),
            elapsed_ms: self.cfg.output.timings.then(|| elapsed.as_secs_f64() * 1e3),
        });
        self.rows.push(row);
        self.round = round;
        Ok(self.rows.last().unwrap())
    }

    pub fn run(mut self) -> Result<RunReport, SimError> {
        while self.round < self.cfg.rounds {
            self.step()?;
        }
        Ok(self.into_report())
    }

    pub fn into_report(self) -> RunReport {
        let last = self.rows.last();
        RunReport {
            schema: super::report::SCHEMA.to_string(),
            config: self.cfg.clone(),
            summary: RunSummary {
                rounds: self.round,
                abandoned_rounds: self.abandoned,
                metrics: self.metrics,
                final_main_accuracy: last.and_then(|r| r.main_accuracy),
                final_backdoor_accuracy: last.and_then(|r| r.backdoor_accuracy),
                user_counters: self.user_totals,
                server_counters: self.server_totals,
            },
            rows: self.rows,
            transcripts: self.transcripts,
        }
    }

    fn detect_round(&mut self, aggregates: &[crate::aggserver::SubgroupAggregate]) -> DetectionOutcome {
        if self.cfg.detection.enabled {
            return detect(aggregates, &self.x, &mut self.detector);
        }
        let (leaves, distances) = subgroup_distances(aggregates, &self.x);
        DetectionOutcome {
            std_sequence: vec![std_dev(&distances)],
            leaves,
            distances,
            xi: f64::INFINITY,
            flagged: BTreeSet::new(),
        }
    }

    /// One full protocol round over the star transport.
    fn run_protocol(
        &mut self,
        round: u32,
        inputs: &[ParamVector],
        drops: &BTreeMap<usize, DropPoint>,
        forced: Option<&BTreeSet<usize>>,
    ) -> Result<ProtocolRound, RoundError> {
        let n = self.cfg.users;
        let tree = self.cfg.protocol == Protocol::Tree;
        let t = &mut self.transport;
        t.begin_round();
        let stops_before = |u: usize, p: DropPoint| drops.get(&u).is_some_and(|&d| d <= p);

        t.enter(RoundPhase::Commit)?;
        let commit = timed!(self.server_time, self.server.start_round(round, n));
        let delivered = match &commit {
            Some(m) => Some(t.broadcast(0..n, m)?),
            None => None,
        };
        t.enter(RoundPhase::Advertise)?;
        for u in 0..n {
            let agent = &mut self.users[u];
            let msg = timed!(self.user_time, {
                agent.begin_round(round);
                agent.advertise(delivered.as_ref())
            })
            .map_err(|e| RoundError::User(u, e))?;
            let msg = t.to_server(u, &msg)?;
            timed!(self.server_time, self.server.receive_advertise(u, &msg))?;
        }
        if tree {
            t.enter(RoundPhase::TreeCommit)?;
            let tc = timed!(self.server_time, self.server.tree_commit())?;
            let m = t.broadcast(0..n, &tc)?;
            let mut reveals = Vec::with_capacity(n);
            for u in 0..n {
                reveals.push(timed!(self.user_time, self.users[u].reveal(&m)).map_err(|e| RoundError::User(u, e))?);
            }
            t.enter(RoundPhase::Reveal)?;
            for (u, r) in reveals.iter().enumerate() {
                let m = t.to_server(u, r)?;
                timed!(self.server_time, self.server.receive_reveal(u, &m))?;
            }
        }
        t.enter(RoundPhase::Assign)?;
        let assignments = timed!(self.server_time, self.server.assign_peers())?;
        let mut bundles = Vec::new();
        for (u, a) in &assignments {
            let m = t.to_user(*u, a)?;
            if stops_before(*u, DropPoint::BeforeShare) {
                continue;
            }
            bundles.push((*u, timed!(self.user_time, self.users[*u].distribute_shares(&m)).map_err(|e| RoundError::User(*u, e))?));
        }
        t.enter(RoundPhase::Share)?;
        for (u, b) in &bundles {
            let m = t.to_server(*u, b)?;
            timed!(self.server_time, self.server.receive_share_bundle(*u, &m))?;
        }
        t.enter(RoundPhase::Relay)?;
        for (u, r) in timed!(self.server_time, self.server.relay_shares()) {
            let m = t.to_user(u, &r)?;
            timed!(self.user_time, self.users[u].receive_shares(&m)).map_err(|e| RoundError::User(u, e))?;
        }
        t.enter(RoundPhase::Upload)?;
        for (u, req) in timed!(self.server_time, self.server.upload_requests()) {
            let m = t.to_user(u, &req)?;
            if stops_before(u, DropPoint::BeforeUpload) {
                continue;
            }
            let y = timed!(self.user_time, self.users[u].mask_input(&inputs[u], &m)).map_err(|e| RoundError::User(u, e))?;
            let y = t.to_server(u, &y)?;
            timed!(self.server_time, self.server.receive_input(u, &y))?;
        }
        t.enter(RoundPhase::Unmask)?;
        for (u, req) in timed!(self.server_time, self.server.unmask_requests()) {
            if stops_before(u, DropPoint::BeforeUnmask) {
                continue;
            }
            let m = t.to_user(u, &req)?;
            let resp = timed!(self.user_time, self.users[u].unmask_response(&m)).map_err(|e| RoundError::User(u, e))?;
            let resp = t.to_server(u, &resp)?;
            timed!(self.server_time, self.server.receive_unmask(u, &resp))?;
        }
        timed!(self.server_time, self.server.recover())?;
        let aggregates = timed!(self.server_time, self.server.aggregate_subgroups())?;
        let leaf_of = if tree {
            timed!(self.server_time, self.server.mask_assignment().map(|a| a.leaf_of.clone()).unwrap_or_default())
        } else {
            Vec::new()
        };
        let detection = match forced {
            Some(f) => tree.then(|| DetectionOutcome {
                leaves: Vec::new(),
                distances: Vec::new(),
                xi: f64::INFINITY,
                std_sequence: vec![0.0],
                flagged: f.clone(),
            }),
            None => tree.then(|| self.detect_round(&aggregates)),
        };
        let flagged = detection.as_ref().map(|d| d.flagged.clone()).unwrap_or_default();
        let t = &mut self.transport;
        t.enter(RoundPhase::Exclusion)?;
        for (u, req) in timed!(self.server_time, self.server.exclusion_requests(&flagged)) {
            if stops_before(u, DropPoint::BeforeUnmask) {
                continue;
            }
            let m = t.to_user(u, &req)?;
            let reply = timed!(self.user_time, self.users[u].exclusion_reply(&m)).map_err(|e| RoundError::User(u, e))?;
            let reply = t.to_server(u, &reply)?;
            timed!(self.server_time, self.server.receive_exclusion_reply(u, &reply))?;
        }
        let global = timed!(self.server_time, self.server.finalize(&self.x, self.cfg.substitute_excluded))?;
        if tree {
            t.enter(RoundPhase::Opening)?;
            let opening = timed!(self.server_time, self.server.opening())?;
            let online: Vec<usize> = (0..n).filter(|&u| !stops_before(u, DropPoint::BeforeUnmask)).collect();
            let m = t.broadcast(online.iter().copied(), &opening)?;
            for u in online {
                timed!(self.user_time, self.users[u].verify_opening(&m)).map_err(|e| RoundError::User(u, e))?;
            }
        }
        let contributions = global.contributions();
        Ok(ProtocolRound {
            abandoned: global.aggregated == 0,
            sum: Some(global.sum),
            contributions,
            detection,
            leaf_of,
            aggregates,
        })
    }

    /// Runs one protocol round on caller-supplied inputs without touching
    /// the model or the report. `flagged` bypasses detection when given.
    pub fn aggregate_inputs(
        &mut self,
        inputs: &[ParamVector],
        drops: &BTreeMap<usize, DropPoint>,
        flagged: Option<&BTreeSet<usize>>,
    ) -> Result<ProtocolRound, String> {
        let round = self.round + 1;
        self.server.reset_counters();
        for u in &mut self.users {
            u.reset_counters();
        }
        self.transport.reset_traffic();
        let out = self.run_protocol(round, inputs, drops, flagged).map_err(|e| e.to_string());
        self.round = round;
        out
    }

    pub fn user_counters(&self) -> Vec<UserCounters> {
        self.users.iter().map(UserAgent::counters).collect()
    }

    pub fn traffic(&self) -> &super::transport::TrafficTotals {
        self.transport.traffic()
    }
}

fn accumulate_user(acc: &mut UserCounters, c: &UserCounters) {
    acc.key_agreements += c.key_agreements;
    acc.prg_expansions += c.prg_expansions;
    acc.prg_elements += c.prg_elements;
    acc.shares_created += c.shares_created;
}

fn accumulate_server(acc: &mut ServerCounters, c: &ServerCounters) {
    acc.key_agreements += c.key_agreements;
    acc.randomizations += c.randomizations;
    acc.prg_expansions += c.prg_expansions;
    acc.prg_elements += c.prg_elements;
    acc.reconstructions += c.reconstructions;
    acc.dropout_cancellations += c.dropout_cancellations;
    acc.exclusion_cancellations += c.exclusion_cancellations;
}

/// Convenience: runs a scenario to completion.
pub fn run_scenario(cfg: ScenarioConfig) -> Result<RunReport, SimError> {
    Simulation::new(cfg)?.run()
}

