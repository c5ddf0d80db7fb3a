//! Final eval loss of several strategies over a few seeds on the default task.
//!
//! cargo run --release --example compare_strategies -- [seeds] [strategy ...]

use std::time::Instant;

use mpo_adapt::run::{run_training, RunConfig, Strategy};
use mpo_adapt::train::SyntheticTask;

fn main() -> mpo_adapt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let strategies: Vec<Strategy> = if args.len() > 1 {
        args[1..]
            .iter()
            .map(|s| serde_json::from_value(serde_json::Value::String(s.clone())))
            .collect::<Result<_, _>>()?
    } else {
        vec![Strategy::Lora, Strategy::OverRuntime]
    };
    for s in strategies {
        let started = Instant::now();
        let mut finals = Vec::new();
        for seed in 0..seeds {
            let cfg = RunConfig {
                seed,
                strategy: s,
                ..RunConfig::default()
            };
            let task = SyntheticTask::generate(&cfg.task, seed)?;
            let out = run_training(&task, &cfg)?;
            finals.push(out.final_row().eval_loss);
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        println!(
            "{:<18} mean {mean:.6e}  per-seed {:?}  ({:.1}s)",
            s.name(),
            finals.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>(),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
