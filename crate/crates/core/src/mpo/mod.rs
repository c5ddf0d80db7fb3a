//! Matrix product operator decomposition of weight matrices.
//!
//! A matrix `W[I, J]` with `I = prod i_k` and `J = prod j_k` is rewritten as a
//! chain of local tensors `T_k[d_{k-1}, i_k, j_k, d_k]`. Before the sweep the
//! elements are permuted so that each `(i_k, j_k)` pair is adjacent; the
//! sweep then peels one local tensor per step with a reshape and a truncated
//! SVD, carrying `diag(sigma) * Vt` to the next step. Contraction runs the
//! same chain left to right and undoes the permutation.

mod chain;
mod plan;

pub use chain::{contract, decompose, deinterleave, error_bound, interleave, MpoChain};
pub use plan::{
    auto_factors, budget, full_bond_dims, plan_auto, plan_shapes, BudgetReport, MpoShapePlan,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_mpot, write_mpot};

/// Contents of `plan.json` inside a chain directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainManifest {
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
    pub bond_dims: Vec<usize>,
    pub truncation_errors: Vec<f64>,
}

/// Writes `plan.json` and `factor_1.mpot .. factor_m.mpot` into `dir`.
pub fn save_chain(dir: impl AsRef<Path>, chain: &MpoChain) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let plan = chain.plan();
    let manifest = ChainManifest {
        in_dims: plan.in_dims.clone(),
        out_dims: plan.out_dims.clone(),
        bond_dims: plan.bond_dims.clone(),
        truncation_errors: chain.truncation_errors().to_vec(),
    };
    fs::write(dir.join("plan.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    for (k, f) in chain.factors().iter().enumerate() {
        write_mpot(dir.join(format!("factor_{}.mpot", k + 1)), f)?;
    }
    Ok(())
}

pub fn load_chain(dir: impl AsRef<Path>) -> Result<MpoChain> {
    let dir = dir.as_ref();
    let plan_path = dir.join("plan.json");
    let manifest: ChainManifest =
        serde_json::from_slice(&fs::read(&plan_path)?).map_err(|e| Error::Format {
            path: plan_path.clone(),
            reason: e.to_string(),
        })?;
    let plan = MpoShapePlan {
        in_dims: manifest.in_dims,
        out_dims: manifest.out_dims,
        bond_dims: manifest.bond_dims,
    };
    plan.validate()?;
    let factors = (0..plan.len())
        .map(|k| read_mpot(dir.join(format!("factor_{}.mpot", k + 1))))
        .collect::<Result<Vec<_>>>()?;
    MpoChain::with_errors(plan, factors, manifest.truncation_errors)
}
