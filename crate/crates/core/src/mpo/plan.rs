use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Factorization of a matrix shape `(I, J)` into `m` row factors `i_k` and
/// column factors `j_k`, plus the bond dimensions linking neighbouring
/// local tensors (`bond_dims[0] == bond_dims[m] == 1`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpoShapePlan {
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
    pub bond_dims: Vec<usize>,
}

/// Parameter accounting for one plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub n_params_chain: usize,
    pub n_params_dense: usize,
    pub n_add: i64,
}

/// Untruncated bond dimensions: `d_k = min(prod_{p<=k} i_p j_p, prod_{p>k} i_p j_p)`.
pub fn full_bond_dims(in_dims: &[usize], out_dims: &[usize]) -> Vec<usize> {
    let m = in_dims.len();
    let site: Vec<u128> = in_dims
        .iter()
        .zip(out_dims)
        .map(|(&i, &j)| (i * j) as u128)
        .collect();
    let mut bonds = vec![1usize; m + 1];
    for k in 1..m {
        let left: u128 = site[..k].iter().product();
        let right: u128 = site[k..].iter().product();
        bonds[k] = left.min(right) as usize;
    }
    bonds
}

fn check_product(factors: &[usize], expected: usize) -> Result<()> {
    let product = factors.iter().try_fold(1usize, |a, &f| a.checked_mul(f));
    match product {
        Some(p) if p == expected && factors.iter().all(|&f| f >= 1) => Ok(()),
        _ => Err(Error::FactorProductMismatch {
            factors: factors.to_vec(),
            product: product.unwrap_or(usize::MAX),
            expected,
        }),
    }
}

/// Builds a plan from explicit factors. `bond_caps`, when given, holds either
/// one cap applied to every internal bond or `m - 1` per-bond caps.
pub fn plan_shapes(
    rows: usize,
    cols: usize,
    row_factors: &[usize],
    col_factors: &[usize],
    bond_caps: Option<&[usize]>,
) -> Result<MpoShapePlan> {
    let m = row_factors.len();
    if m > 0 {
        check_product(row_factors, rows)?;
    }
    if m == 0 || col_factors.len() != m {
        // factor lists of different length cannot describe one chain
        let (factors, expected) = if m == 0 { (row_factors, rows) } else { (col_factors, cols) };
        return Err(Error::FactorProductMismatch {
            factors: factors.to_vec(),
            product: factors.iter().product(),
            expected,
        });
    }
    check_product(col_factors, cols)?;

    let mut bonds = full_bond_dims(row_factors, col_factors);
    if let Some(caps) = bond_caps {
        if caps.iter().any(|&c| c < 1) {
            return Err(Error::BadBondCap(format!("caps must be >= 1, got {caps:?}")));
        }
        let per_bond: Vec<usize> = match caps.len() {
            1 => vec![caps[0]; m.saturating_sub(1)],
            n if n + 1 == m => caps.to_vec(),
            n => {
                return Err(Error::BadBondCap(format!(
                    "expected 1 or {} caps, got {n}",
                    m.saturating_sub(1)
                )))
            }
        };
        for (k, cap) in per_bond.into_iter().enumerate() {
            bonds[k + 1] = bonds[k + 1].min(cap);
        }
        // a bond can never exceed what the previous step can pass along
        for k in 1..m {
            bonds[k] = bonds[k].min(bonds[k - 1] * row_factors[k - 1] * col_factors[k - 1]);
        }
    }
    Ok(MpoShapePlan {
        in_dims: row_factors.to_vec(),
        out_dims: col_factors.to_vec(),
        bond_dims: bonds,
    })
}

/// Splits `n` into `m` factors as evenly as possible: prime factors are dealt
/// largest-first onto the currently smallest slot, then the slots are placed
/// largest at the two ends and the smallest in the middle.
pub fn auto_factors(n: usize, m: usize) -> Vec<usize> {
    assert!(m >= 1 && n >= 1);
    let mut primes = Vec::new();
    let mut rest = n;
    let mut p = 2;
    while p * p <= rest {
        while rest.is_multiple_of(p) {
            primes.push(p);
            rest /= p;
        }
        p += 1;
    }
    if rest > 1 {
        primes.push(rest);
    }
    primes.sort_unstable_by(|a, b| b.cmp(a));

    let mut slots = vec![1usize; m];
    for p in primes {
        let (idx, _) = slots
            .iter()
            .enumerate()
            .min_by_key(|&(i, &v)| (v, i))
            .unwrap();
        slots[idx] *= p;
    }
    slots.sort_unstable_by(|a, b| b.cmp(a));

    let mut out = vec![1usize; m];
    let (mut lo, mut hi) = (0usize, m - 1);
    for (k, v) in slots.into_iter().enumerate() {
        if k % 2 == 0 {
            out[lo] = v;
            lo += 1;
        } else {
            out[hi] = v;
            hi = hi.saturating_sub(1);
        }
    }
    out
}

/// Plan with `m` automatically chosen factors on each side.
pub fn plan_auto(rows: usize, cols: usize, m: usize, bond_caps: Option<&[usize]>) -> Result<MpoShapePlan> {
    if m == 0 {
        return Err(Error::Config("factor count m must be >= 1".into()));
    }
    plan_shapes(rows, cols, &auto_factors(rows, m), &auto_factors(cols, m), bond_caps)
}

impl MpoShapePlan {
    pub fn len(&self) -> usize {
        self.in_dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_dims.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn cols(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Dims of local tensor `k` (0-based): `[d_{k-1}, i_k, j_k, d_k]`.
    pub fn factor_dims(&self, k: usize) -> [usize; 4] {
        [
            self.bond_dims[k],
            self.in_dims[k],
            self.out_dims[k],
            self.bond_dims[k + 1],
        ]
    }

    pub fn is_truncated(&self) -> bool {
        self.bond_dims != full_bond_dims(&self.in_dims, &self.out_dims)
    }

    /// Checks the structural invariants of a plan read from outside.
    pub fn validate(&self) -> Result<()> {
        let m = self.in_dims.len();
        let err = |msg: String| Err(Error::PlanMismatch(msg));
        if m == 0 || self.out_dims.len() != m || self.bond_dims.len() != m + 1 {
            return err(format!(
                "inconsistent lengths: {} in, {} out, {} bonds",
                m,
                self.out_dims.len(),
                self.bond_dims.len()
            ));
        }
        if self.in_dims.iter().chain(&self.out_dims).chain(&self.bond_dims).any(|&d| d == 0) {
            return err("zero dimension".into());
        }
        if self.bond_dims[0] != 1 || self.bond_dims[m] != 1 {
            return err("boundary bonds must be 1".into());
        }
        let full = full_bond_dims(&self.in_dims, &self.out_dims);
        for k in 1..m {
            if self.bond_dims[k] > full[k] {
                return err(format!("bond {k} = {} exceeds {}", self.bond_dims[k], full[k]));
            }
            if self.bond_dims[k] > self.bond_dims[k - 1] * self.in_dims[k - 1] * self.out_dims[k - 1] {
                return err(format!("bond {k} exceeds what bond {} can carry", k - 1));
            }
        }
        Ok(())
    }

    /// Re-derives a plan (with the stored bonds as caps) for a matrix of the given shape.
    pub fn for_shape(&self, rows: usize, cols: usize) -> Result<Self> {
        self.validate()?;
        let caps = &self.bond_dims[1..self.len()];
        let caps = if caps.is_empty() { None } else { Some(caps) };
        plan_shapes(rows, cols, &self.in_dims, &self.out_dims, caps)
    }
}

/// `n_params_chain = sum_k i_k j_k d_{k-1} d_k`, `n_add = n_params_chain - prod_k i_k j_k`.
pub fn budget(plan: &MpoShapePlan) -> BudgetReport {
    let n_params_chain: usize = (0..plan.len())
        .map(|k| plan.factor_dims(k).iter().product::<usize>())
        .sum();
    let n_params_dense: usize = plan
        .in_dims
        .iter()
        .zip(&plan.out_dims)
        .map(|(i, j)| i * j)
        .product();
    BudgetReport {
        n_params_chain,
        n_params_dense,
        n_add: n_params_chain as i64 - n_params_dense as i64,
    }
}
