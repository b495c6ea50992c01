//! Run reports: per-round CSV plus a JSON transcript.
//!
//! CSV columns, in order: `round, dropouts, attackers_active, abandoned,
//! std_initial, std_final, xi, flagged, dr, cr, fpr, main_accuracy,
//! backdoor_accuracy, loss`. Empty cells mean "not applicable"; an infinite
//! threshold (warm-up) prints as `inf`.

use std::io;
use std::path::Path;

use serde::Serialize;

use super::config::ScenarioConfig;
use super::runner::DropPoint;
use crate::aggserver::ServerCounters;
use crate::detection::{DetectionMetrics, DetectionOutcome};
use crate::useragent::UserCounters;

pub const SCHEMA: &str = "safeagg-report/1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRow {
    pub round: u32,
    pub dropouts: usize,
    pub attackers_active: usize,
    pub abandoned: bool,
    pub std_initial: Option<f64>,
    pub std_final: Option<f64>,
    pub xi: Option<f64>,
    pub flagged: usize,
    pub dr: f64,
    pub cr: f64,
    pub fpr: f64,
    pub main_accuracy: Option<f64>,
    pub backdoor_accuracy: Option<f64>,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTranscript {
    pub round: u32,
    pub dropped: Vec<(usize, DropPoint)>,
    pub failure: Option<String>,
    pub attacker_leaves: Vec<usize>,
    pub detection: Option<DetectionOutcome>,
    pub server_counters: ServerCounters,
    pub user_counters: UserCounters,
    pub max_user_prg_expansions: u64,
    pub server_bytes_sent: u64,
    pub server_bytes_received: u64,
    pub user_bytes_sent: u64,
    pub user_bytes_received: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub rounds: u32,
    pub abandoned_rounds: u32,
    pub metrics: DetectionMetrics,
    pub final_main_accuracy: Option<f64>,
    pub final_backdoor_accuracy: Option<f64>,
    pub user_counters: UserCounters,
    pub server_counters: ServerCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub schema: String,
    pub config: ScenarioConfig,
    pub summary: RunSummary,
    pub rows: Vec<RoundRow>,
    pub transcripts: Vec<RoundTranscript>,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        let body = String::from_utf8(w.into_inner().expect("flush")).expect("utf8");
        format!("# {SCHEMA}\n{body}")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `rounds.csv` and `report.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("rounds.csv"), self.to_csv())?;
        std::fs::write(dir.join("report.json"), self.to_json())
    }
}
