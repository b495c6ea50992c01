use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;

use safeagg::adversary::{AttackPlan, Strategy};
use safeagg::sim::bench::{default_grid, run_bench, to_csv};
use safeagg::sim::{substream, Protocol, ScenarioConfig, SimError, Simulation};

#[derive(Parser)]
#[command(name = "safeagg", version, about = "Tree-grouped secure aggregation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write rounds.csv and report.json.
    Run(RunArgs),
    /// Run the cost benchmark grid.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// tree (alias safelearning) or baseline.
    #[arg(long)]
    protocol: Option<Protocol>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<u32>,
    /// Number of attackers, drawn from the run seed.
    #[arg(long)]
    attackers: Option<usize>,
    /// Attacker scale factor override.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write bench.csv here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn apply_overrides(mut cfg: ScenarioConfig, a: &RunArgs) -> ScenarioConfig {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.protocol {
        cfg.protocol = p;
    }
    if let Some(r) = a.rounds {
        cfg.rounds = r;
    }
    if let Some(r) = a.rho {
        cfg.detection.rho = r;
    }
    if let Some(o) = &a.out {
        cfg.output.dir = Some(o.clone());
    }
    if let Some(k) = a.attackers {
        let mut rng = substream(cfg.seed, "attackers", 0, 0);
        let mut chosen = sample(&mut rng, cfg.users, k.min(cfg.users)).into_vec();
        chosen.sort_unstable();
        let plan = cfg.attack.get_or_insert_with(|| AttackPlan {
            attackers: Vec::new(),
            strategy: Strategy::OneShot,
            start_round: cfg.rounds * 3 / 4,
            gamma: None,
            min_scale: None,
            norm_cap: None,
        });
        plan.attackers = chosen;
    }
    if let Some(g) = a.scale {
        if let Some(plan) = cfg.attack.as_mut() {
            plan.gamma = Some(g);
        }
    }
    cfg
}

fn run(a: RunArgs) -> Result<(), (u8, String)> {
    let cfg = match &a.config {
        Some(p) => ScenarioConfig::load(p).map_err(|e| (1, e.to_string()))?,
        None => ScenarioConfig::default(),
    };
    let cfg = apply_overrides(cfg, &a);
    let out = cfg.output.dir.clone();
    let sim = Simulation::new(cfg).map_err(|e| (1, e.to_string()))?;
    let report = sim.run().map_err(|e| match e {
        SimError::Config(c) => (1, c.to_string()),
        other => (2, format!("protocol abort: {other}")),
    })?;
    let s = &report.summary;
    println!(
        "rounds={} abandoned={} DR={:.3} CR={:.3} FPR={:.4}",
        s.rounds,
        s.abandoned_rounds,
        s.metrics.dr(),
        s.metrics.cr(),
        s.metrics.fpr()
    );
    if let (Some(m), Some(b)) = (s.final_main_accuracy, s.final_backdoor_accuracy) {
        println!("main_accuracy={m:.4} backdoor_accuracy={b:.4}");
    }
    if let Some(dir) = out {
        report.write_to(&dir).map_err(|e| (1, format!("writing {}: {e}", dir.display())))?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), (u8, String)> {
    let rows = run_bench(&default_grid(), a.seed).map_err(|e| (2, e.to_string()))?;
    let csv = to_csv(&rows);
    match a.out {
        Some(p) => std::fs::write(&p, csv).map_err(|e| (1, e.to_string()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Bench(a) => bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
