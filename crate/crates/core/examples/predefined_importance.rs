//! Predefined selection: warm-up LoRA run, loss-delta scores on calibration
//! batches, then a fresh run with the top slots factored from step 0.
//!
//! cargo run --release --example predefined_importance -- [seed]

use mpo_adapt::run::{run_training, RunConfig, Strategy};
use mpo_adapt::train::SyntheticTask;

fn main() -> mpo_adapt::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = RunConfig {
        seed,
        strategy: Strategy::OverPredefined,
        ..RunConfig::default()
    };
    let task = SyntheticTask::generate(&cfg.task, seed)?;
    let out = run_training(&task, &cfg)?;
    let warm = out.warmup.as_ref().expect("predefined runs keep warm-up metrics");
    let last = warm.last().expect("warm-up rows");
    println!("warm-up stopped at step {} with eval loss {:.4e}", last.step, last.eval_loss);
    let ledger = out.ledger.as_ref().expect("ledger");
    println!("{}", serde_json::to_string_pretty(&ledger.dump())?);
    let fin = out.final_row();
    println!(
        "phase 2: eval loss {:.4e}, trainable {}, factored {:?}",
        fin.eval_loss, fin.trainable, fin.selected
    );
    Ok(())
}
