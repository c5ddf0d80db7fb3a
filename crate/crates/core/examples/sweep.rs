//! Sweep one hyper-parameter over seeds and print the aggregate and trend.
//!
//! cargo run --release --example sweep -- scale 1,2,3,4 10 over-runtime

use mpo_adapt::run::{RunConfig, Strategy};
use mpo_adapt::sweep::{run_sweep, thread_count, SweepParam};

fn parse_list(s: &str) -> Vec<usize> {
    s.split(',').filter_map(|v| v.trim().parse().ok()).collect()
}

fn main() -> mpo_adapt::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let param: SweepParam = args.first().map_or("scale", String::as_str).parse()?;
    let values = parse_list(args.get(1).map_or("1,2,3,4", String::as_str));
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let strategy: Strategy = match args.get(3) {
        Some(s) => serde_json::from_value(serde_json::Value::String(s.clone()))?,
        None => Strategy::OverRuntime,
    };
    let base = RunConfig {
        strategy,
        ..RunConfig::default()
    };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let report = run_sweep(&base, param, &values, &seeds, thread_count()?, None)?;
    for a in &report.aggregate {
        let rounds: Vec<usize> = report.rows.iter().filter(|r| r.value == a.value).map(|r| r.rounds).collect();
        println!(
            "{}={:<3} trainable {:>6}  eval {:.4e} ± {:.2e}  rounds {:?}",
            param.name(),
            a.value,
            a.trainable,
            a.mean,
            a.std,
            rounds
        );
    }
    println!("trend: {}", serde_json::to_string(&report.trend)?);
    Ok(())
}
