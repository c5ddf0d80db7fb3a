//! Reconstruction error against the truncation bound as the bond cap shrinks.
//!
//! cargo run --release --example truncation_bound

use mpo_adapt::mpo::{contract, decompose, error_bound, plan_shapes};
use mpo_adapt::rng::Streams;

fn main() -> mpo_adapt::Result<()> {
    let streams = Streams::new(0);
    // a matrix with a decaying spectrum so truncation is gradual
    let u = streams.normal("example", "u", &[64, 16], 1.0);
    let v = streams.normal("example", "v", &[16, 64], 1.0);
    let mut w = mpo_adapt::tensor::DenseTensor::zeros(&[64, 64])?;
    for k in 0..16 {
        let scale = 0.6f64.powi(k as i32);
        for i in 0..64 {
            for j in 0..64 {
                w.data_mut()[i * 64 + j] += scale * u.at2(i, k) * v.at2(k, j);
            }
        }
    }
    let norm = w.frobenius_norm();
    println!("{:>4} {:>14} {:>14} {:>8}", "cap", "measured", "bound", "ratio");
    for cap in [64, 32, 16, 8, 4, 2, 1] {
        let plan = plan_shapes(64, 64, &[4, 4, 4], &[4, 4, 4], Some(&[cap]))?;
        let chain = decompose(&w, &plan)?;
        let measured = w.sub(&contract(&chain)?)?.frobenius_norm() / norm;
        let bound = error_bound(&chain) / norm;
        let ratio = if bound > 0.0 { measured / bound } else { 0.0 };
        println!("{cap:>4} {measured:>14.4e} {bound:>14.4e} {ratio:>8.4}  bonds {:?}", plan.bond_dims);
    }
    Ok(())
}
