//! Runtime selection on the default task: which slots each round picks and
//! how the final scores rank.
//!
//! cargo run --release --example runtime_selection -- [role-half|half] [seeds] [interval]

use mpo_adapt::run::{run_training, RunConfig, Strategy};
use mpo_adapt::selection::Grouping;
use mpo_adapt::train::SyntheticTask;

fn main() -> mpo_adapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let grouping: Grouping = match args.next() {
        Some(g) => serde_json::from_value(serde_json::Value::String(g))?,
        None => Grouping::RoleHalf,
    };
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let interval: Option<usize> = args.next().and_then(|s| s.parse().ok());
    let (mut proj, mut total) = (0usize, 0usize);
    for seed in 0..seeds {
        let mut cfg = RunConfig {
            seed,
            strategy: Strategy::OverRuntime,
            ..RunConfig::default()
        };
        cfg.selection.grouping = grouping;
        if let Some(t) = interval {
            cfg.selection.interval = t;
        }
        let task = SyntheticTask::generate(&cfg.task, seed)?;
        let out = run_training(&task, &cfg)?;
        let ledger = out.ledger.expect("runtime strategy keeps a ledger");
        for (k, round) in ledger.rounds.iter().enumerate() {
            let names: Vec<String> = round.iter().map(ToString::to_string).collect();
            println!("seed {seed} round {}: {}", k + 1, names.join(" "));
        }
        if let Some(first) = ledger.rounds.first() {
            proj += first.iter().filter(|id| id.role == "proj").count();
            total += first.len();
        }
        if seeds == 1 {
            println!("{}", serde_json::to_string_pretty(&ledger.dump())?);
        }
    }
    println!("first-round proj share: {proj}/{total}");
    Ok(())
}
