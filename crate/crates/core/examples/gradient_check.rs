//! Tape gradients of an MPO chain against central differences, for chains of
//! growing length.
//!
//! cargo run --release --example gradient_check

use mpo_adapt::mpo::plan_auto;
use mpo_adapt::rng::Streams;
use mpo_adapt::verify::finite_difference_error;

fn main() -> mpo_adapt::Result<()> {
    let streams = Streams::new(0);
    for m in 1..=6 {
        let plan = plan_auto(16, 8, m, None)?;
        let factors: Vec<_> = (0..m)
            .map(|k| streams.normal("example", &format!("{m}.{k}"), &plan.factor_dims(k), 0.5))
            .collect();
        let x = streams.normal("example", &format!("x{m}"), &[8, 4], 1.0);
        let y = streams.normal("example", &format!("y{m}"), &[16, 4], 1.0);
        let err = finite_difference_error(&factors, 1e-5, |t, v| {
            let w = t.chain_contract(v, &plan)?;
            let xv = t.constant(x.clone());
            let p = t.matmul(w, xv)?;
            let h = t.tanh(p);
            t.mse_loss(h, &y)
        })?;
        println!("m={m} bonds {:?}: max relative gradient error {err:.2e}", plan.bond_dims);
    }
    Ok(())
}
