use super::plan::MpoShapePlan;
use crate::error::{Error, Result};
use crate::tensor::{matmul, svd_truncated, DenseTensor};

/// A matrix stored as an ordered chain of 4th-order local tensors
/// `T_k[d_{k-1}, i_k, j_k, d_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpoChain {
    plan: MpoShapePlan,
    factors: Vec<DenseTensor>,
    /// One entry per internal bond: Frobenius norm of what that SVD step dropped.
    truncation_errors: Vec<f64>,
}

impl MpoChain {
    /// Wraps existing factors; their dims must match the plan.
    pub fn from_factors(plan: MpoShapePlan, factors: Vec<DenseTensor>) -> Result<Self> {
        let m = plan.len();
        Self::with_errors(plan, factors, vec![0.0; m.saturating_sub(1)])
    }

    pub fn with_errors(
        plan: MpoShapePlan,
        factors: Vec<DenseTensor>,
        truncation_errors: Vec<f64>,
    ) -> Result<Self> {
        plan.validate()?;
        if factors.len() != plan.len() {
            return Err(Error::PlanMismatch(format!(
                "{} factors for a {}-factor plan",
                factors.len(),
                plan.len()
            )));
        }
        for (k, f) in factors.iter().enumerate() {
            if f.dims() != plan.factor_dims(k) {
                return Err(Error::PlanMismatch(format!(
                    "factor {k} has dims {:?}, plan wants {:?}",
                    f.dims(),
                    plan.factor_dims(k)
                )));
            }
        }
        if truncation_errors.len() != plan.len().saturating_sub(1)
            || truncation_errors.iter().any(|&e| !(e >= 0.0))
        {
            return Err(Error::PlanMismatch("bad truncation error list".into()));
        }
        Ok(Self {
            plan,
            factors,
            truncation_errors,
        })
    }

    pub fn plan(&self) -> &MpoShapePlan {
        &self.plan
    }

    pub fn factors(&self) -> &[DenseTensor] {
        &self.factors
    }

    pub fn truncation_errors(&self) -> &[f64] {
        &self.truncation_errors
    }

    /// Replaces factor `k`, keeping its dims.
    pub fn set_factor(&mut self, k: usize, value: DenseTensor) -> Result<()> {
        if value.dims() != self.plan.factor_dims(k) {
            return Err(Error::PlanMismatch(format!("factor {k} dims {:?}", value.dims())));
        }
        self.factors[k] = value;
        Ok(())
    }

    pub fn factor_mut(&mut self, k: usize) -> &mut DenseTensor {
        &mut self.factors[k]
    }

    /// Total number of stored floats.
    pub fn stored_len(&self) -> usize {
        self.factors.iter().map(DenseTensor::len).sum()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.plan.rows(), self.plan.cols())
    }
}

/// Axis order taking `[i_1..i_m, j_1..j_m]` to `[i_1, j_1, ..., i_m, j_m]`.
fn interleave_axes(m: usize) -> Vec<usize> {
    (0..m).flat_map(|k| [k, m + k]).collect()
}

/// Inverse of [`interleave_axes`].
fn deinterleave_axes(m: usize) -> Vec<usize> {
    (0..m).map(|k| 2 * k).chain((0..m).map(|k| 2 * k + 1)).collect()
}

/// Reorders the matrix elements so that each `(i_k, j_k)` pair is adjacent.
pub fn interleave(w: &DenseTensor, plan: &MpoShapePlan) -> Result<DenseTensor> {
    let m = plan.len();
    let dims: Vec<usize> = plan.in_dims.iter().chain(&plan.out_dims).copied().collect();
    w.reshaped(&dims)?.permute(&interleave_axes(m))
}

/// Inverse of [`interleave`]: takes the pair-ordered elements back to an `[I, J]` matrix.
pub fn deinterleave(x: &DenseTensor, plan: &MpoShapePlan) -> Result<DenseTensor> {
    let m = plan.len();
    let dims: Vec<usize> = plan
        .in_dims
        .iter()
        .zip(&plan.out_dims)
        .flat_map(|(&i, &j)| [i, j])
        .collect();
    x.reshaped(&dims)?
        .permute(&deinterleave_axes(m))?
        .reshaped(&[plan.rows(), plan.cols()])
}

/// Sequential reshape + truncated SVD, one local tensor per step.
///
/// Left vectors paired with an exactly-zero singular value are stored as
/// zeros, so an all-zero matrix yields all-zero factors.
pub fn decompose(w: &DenseTensor, plan: &MpoShapePlan) -> Result<MpoChain> {
    plan.validate()?;
    let (rows, cols) = w.shape2()?;
    if rows != plan.rows() || cols != plan.cols() {
        return Err(Error::ShapeMismatch(format!(
            "matrix [{rows}, {cols}] vs plan [{}, {}]",
            plan.rows(),
            plan.cols()
        )));
    }
    let m = plan.len();
    let mut current = interleave(w, plan)?;
    let mut factors = Vec::with_capacity(m);
    let mut errors = Vec::with_capacity(m.saturating_sub(1));
    for k in 0..m - 1 {
        let [d_prev, i_k, j_k, d_k] = plan.factor_dims(k);
        let step_rows = d_prev * i_k * j_k;
        let reshaped = current.reshape(&[step_rows as i64, -1])?;
        let svd = svd_truncated(&reshaped, d_k)?;
        let mut u = svd.u.clone();
        for (c, &s) in svd.sigma.iter().enumerate() {
            if s == 0.0 {
                for r in 0..step_rows {
                    u.data_mut()[r * d_k + c] = 0.0;
                }
            }
        }
        factors.push(u.reshaped(&[d_prev, i_k, j_k, d_k])?);
        errors.push(svd.discarded_energy.sqrt());
        current = svd.sigma_vt()?;
    }
    factors.push(current.reshaped(&plan.factor_dims(m - 1))?);
    MpoChain::with_errors(plan.clone(), factors, errors)
}

/// Left-to-right contraction of the chain back to an `[I, J]` matrix.
pub fn contract(chain: &MpoChain) -> Result<DenseTensor> {
    let plan = chain.plan();
    let mut left = DenseTensor::scalar(1.0).reshaped(&[1, 1])?;
    for (k, f) in chain.factors().iter().enumerate() {
        let [d_prev, i_k, j_k, d_k] = plan.factor_dims(k);
        let prod = matmul(&left, &f.reshaped(&[d_prev, i_k * j_k * d_k])?)?;
        let rows = prod.len() / d_k;
        left = prod.reshaped(&[rows, d_k])?;
    }
    deinterleave(&left, plan)
}

/// `sqrt(sum_k eps_k^2)`, an upper bound on `|W - contract(chain)|_F`.
pub fn error_bound(chain: &MpoChain) -> f64 {
    chain
        .truncation_errors()
        .iter()
        .map(|e| e * e)
        .sum::<f64>()
        .sqrt()
}
