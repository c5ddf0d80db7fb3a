//! Train LoRA briefly, swap every slot for an MPO chain, train on, then merge
//! the adapters into the base weights and compare both inference routes.
//!
//! cargo run --release --example adapter_merge

use mpo_adapt::adapters::LoraConfig;
use mpo_adapt::mpo::plan_auto;
use mpo_adapt::rng::Streams;
use mpo_adapt::run::{run_training, RunConfig, Strategy};
use mpo_adapt::tensor::rel_frobenius_error;
use mpo_adapt::train::{AdaptedModel, SyntheticTask};

fn main() -> mpo_adapt::Result<()> {
    let mut cfg = RunConfig {
        strategy: Strategy::Lora,
        ..RunConfig::default()
    };
    cfg.train.steps = 200;
    let task = SyntheticTask::generate(&cfg.task, cfg.seed)?;
    let mut model: AdaptedModel = run_training(&task, &cfg)?.model;
    let (x, y) = task.eval.all()?;
    let streams = Streams::new(cfg.seed);
    println!("trained lora: eval loss {:.6e}, trainable {}", model.loss(&x, &y)?, model.trainable_count());
    for id in model.slot_ids() {
        let (r, c) = model.slot(&id)?.shape;
        let before = model.loss(&x, &y)?;
        model.over_parameterize(&id, &plan_auto(r, c, 3, None)?, &streams)?;
        let after = model.loss(&x, &y)?;
        println!("  swap {id:<14} loss change {:.1e}", (after - before).abs() / before);
    }
    println!("all slots factored: trainable {}", model.trainable_count());

    let merged = model.merged()?;
    let probe = streams.normal("example", "inputs", &[task.backbone.hidden(), 64], 1.0);
    let gap = rel_frobenius_error(&model.forward(&probe)?, &merged.forward(&probe)?)?;
    println!(
        "merged: {} parameters (base {}), output gap {gap:.1e}",
        merged.param_count(),
        task.backbone.param_count()
    );
    let fresh = AdaptedModel::with_lora(task.backbone.clone(), LoraConfig::default())?;
    println!("untrained adapters leave the base unchanged: {}", fresh.merged()? == task.backbone);
    Ok(())
}
