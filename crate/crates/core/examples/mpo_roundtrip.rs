//! Decompose a random matrix under a few plans and contract it back.
//!
//! cargo run --release --example mpo_roundtrip -- [rows] [cols]

use mpo_adapt::mpo::{budget, contract, decompose, plan_auto, plan_shapes};
use mpo_adapt::rng::Streams;
use mpo_adapt::tensor::rel_frobenius_error;

fn main() -> mpo_adapt::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let rows = args.next().transpose().ok().flatten().unwrap_or(768);
    let cols = args.next().transpose().ok().flatten().unwrap_or(8);
    let w = Streams::new(0).normal("example", "w", &[rows, cols], 1.0);
    let mut plans = Vec::new();
    for m in [1, 2, 3, 5, 9] {
        plans.push(plan_auto(rows, cols, m, None)?);
    }
    if (rows, cols) == (768, 8) {
        plans.push(plan_shapes(768, 8, &[24, 32], &[2, 4], None)?);
    }
    println!("{:>3}  {:<28} {:<28} {:>10} {:>8} {:>10}", "m", "row factors", "col factors", "stored", "n_add", "rel err");
    for plan in plans {
        let chain = decompose(&w, &plan)?;
        let err = rel_frobenius_error(&w, &contract(&chain)?)?;
        let b = budget(&plan);
        println!(
            "{:>3}  {:<28} {:<28} {:>10} {:>8} {:>10.2e}",
            plan.len(),
            format!("{:?}", plan.in_dims),
            format!("{:?}", plan.out_dims),
            b.n_params_chain,
            b.n_add,
            err
        );
        println!("     bonds {:?}", plan.bond_dims);
    }
    Ok(())
}
