//! Cost benchmarks: one instrumented round per grid point.

use serde::{Deserialize, Serialize};

use super::config::{DropoutConfig, DropTiming, Protocol, ScenarioConfig, WorkloadMode};
use super::runner::{SimError, Simulation};
use crate::orgtree::TreeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub protocol: Protocol,
    pub users: usize,
    pub height: u32,
    pub degree: u32,
    pub model_len: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(flatten)]
    pub point: BenchPoint,
    pub dropouts: usize,
    /// Mean over users that uploaded.
    pub user_prg_expansions: f64,
    pub user_max_prg_expansions: u64,
    pub user_key_agreements: f64,
    pub user_bytes: f64,
    pub server_reconstructions: u64,
    pub server_dropout_cancellations: u64,
    pub cancellations_per_dropout: f64,
    pub server_prg_elements: u64,
    pub user_ms: f64,
    pub server_ms: f64,
}

impl BenchPoint {
    pub fn scenario(&self, seed: u64) -> ScenarioConfig {
        let mut cfg = ScenarioConfig {
            users: self.users,
            rounds: 1,
            seed,
            protocol: self.protocol,
            tree: TreeConfig::new(self.height, self.degree, 2),
            dropout: DropoutConfig {
                rate: self.dropout,
                timing: DropTiming::BeforeUpload,
            },
            ..ScenarioConfig::default()
        };
        cfg.workload.mode = WorkloadMode::Synthetic;
        cfg.workload.synthetic.dim = self.model_len;
        cfg.detection.enabled = false;
        cfg
    }
}

pub fn bench_point(point: BenchPoint, seed: u64) -> Result<BenchRow, SimError> {
    let mut sim = Simulation::new(point.scenario(seed))?;
    sim.step()?;
    let timing = sim.role_times();
    let report = sim.into_report();
    let tr = &report.transcripts[0];
    let online = (point.users - tr.dropped.len()).max(1) as f64;
    let dropouts = tr.dropped.len();
    Ok(BenchRow {
        point,
        dropouts,
        user_prg_expansions: tr.user_counters.prg_expansions as f64 / online,
        user_max_prg_expansions: tr.max_user_prg_expansions,
        user_key_agreements: tr.user_counters.key_agreements as f64 / point.users as f64,
        user_bytes: (tr.user_bytes_sent + tr.user_bytes_received) as f64 / point.users as f64,
        server_reconstructions: tr.server_counters.reconstructions,
        server_dropout_cancellations: tr.server_counters.dropout_cancellations,
        cancellations_per_dropout: if dropouts == 0 {
            0.0
        } else {
            tr.server_counters.dropout_cancellations as f64 / dropouts as f64
        },
        server_prg_elements: tr.server_counters.prg_elements,
        user_ms: timing.0 / point.users as f64,
        server_ms: timing.1,
    })
}

pub fn run_bench(grid: &[BenchPoint], seed: u64) -> Result<Vec<BenchRow>, SimError> {
    grid.iter().map(|p| bench_point(*p, seed)).collect()
}

/// The default grid: both protocols across vector sizes and tree shapes.
pub fn default_grid() -> Vec<BenchPoint> {
    let mut grid = Vec::new();
    for &(protocol, users) in &[(Protocol::Baseline, 100), (Protocol::Tree, 100), (Protocol::Tree, 1000)] {
        for &(h, d) in &[(2, 2), (3, 3)] {
            if protocol == Protocol::Baseline && (h, d) != (2, 2) {
                continue;
            }
            if protocol == Protocol::Tree && users == 100 && (h, d) == (3, 3) {
                continue;
            }
            for &m in &[100, 1000] {
                for &dropout in &[0.0, 0.15] {
                    grid.push(BenchPoint {
                        protocol,
                        users,
                        height: h,
                        degree: d,
                        model_len: m,
                        dropout,
                    });
                }
            }
        }
    }
    grid
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
