//! Low-rank adapter pairs on frozen base matrices.
//!
//! A layer with frozen `W0 (d1 x d2)` gets `A (r x d2)` and `B (d1 x r)`;
//! the adapted weight is `W0 + (alpha / r) * B * A`. Either half can be
//! swapped for an MPO chain holding the same matrix, which enlarges the
//! trainable parameter set without changing the function, and contracted
//! back before merging.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpo::{self, MpoChain, MpoShapePlan};
use crate::rng::Streams;
use crate::tensor::{matmul, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Half {
    A,
    B,
    /// Unconstrained additive delta (full-dense-delta baseline).
    D,
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Half::A => "A",
            Half::B => "B",
            Half::D => "D",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotId {
    pub layer: usize,
    pub role: String,
    pub half: Half,
}

impl SlotId {
    pub fn new(layer: usize, role: &str, half: Half) -> Self {
        Self {
            layer,
            role: role.to_string(),
            half,
        }
    }

    /// `layer{l}.{role}`
    pub fn base_ref(&self) -> String {
        format!("layer{}.{}", self.layer, self.role)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::UnknownSlot(s.to_string());
        let mut parts = s.splitn(3, '.');
        let layer = parts
            .next()
            .and_then(|p| p.strip_prefix("layer"))
            .and_then(|n| n.parse().ok())
            .ok_or_else(bad)?;
        let role = parts.next().filter(|r| !r.is_empty()).ok_or_else(bad)?;
        let half = match parts.next() {
            Some("A") => Half::A,
            Some("B") => Half::B,
            Some("D") => Half::D,
            _ => return Err(bad()),
        };
        Ok(Self::new(layer, role, half))
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}.{}", self.layer, self.role, self.half)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotForm {
    Dense(DenseTensor),
    Factored(MpoChain),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSlot {
    pub id: SlotId,
    pub base_ref: String,
    pub form: SlotForm,
    pub shape: (usize, usize),
    pub trainable: bool,
}

impl AdapterSlot {
    pub fn dense(id: SlotId, value: DenseTensor) -> Result<Self> {
        let shape = value.shape2()?;
        Ok(Self {
            base_ref: id.base_ref(),
            id,
            form: SlotForm::Dense(value),
            shape,
            trainable: true,
        })
    }

    pub fn is_factored(&self) -> bool {
        matches!(self.form, SlotForm::Factored(_))
    }

    /// The matrix this slot currently represents.
    pub fn effective_matrix(&self) -> Result<DenseTensor> {
        match &self.form {
            SlotForm::Dense(m) => Ok(m.clone()),
            SlotForm::Factored(chain) => mpo::contract(chain),
        }
    }

    /// Number of stored floats.
    pub fn param_count(&self) -> usize {
        match &self.form {
            SlotForm::Dense(m) => m.len(),
            SlotForm::Factored(chain) => chain.stored_len(),
        }
    }

    /// Trainable tensors in a fixed order (one for dense, one per factor).
    pub fn params(&self) -> Vec<&DenseTensor> {
        match &self.form {
            SlotForm::Dense(m) => vec![m],
            SlotForm::Factored(c) => c.factors().iter().collect(),
        }
    }

    pub fn param_mut(&mut self, k: usize) -> &mut DenseTensor {
        match &mut self.form {
            SlotForm::Dense(m) => {
                assert_eq!(k, 0);
                m
            }
            SlotForm::Factored(c) => c.factor_mut(k),
        }
    }

    /// Overwrites the represented matrix with zeros (keeps the form).
    pub fn zero_out(&mut self) {
        match &mut self.form {
            SlotForm::Dense(m) => m.data_mut().fill(0.0),
            SlotForm::Factored(c) => {
                let last = c.factors().len() - 1;
                c.factor_mut(last).data_mut().fill(0.0);
            }
        }
    }
}

/// Kaiming-normal `A` (std `sqrt(2 / d2)`) and zero `B`, so the product starts at zero.
pub fn init_adapter(
    base_ref: &str,
    rows_out: usize,
    rows_in: usize,
    cfg: &LoraConfig,
) -> Result<(AdapterSlot, AdapterSlot)> {
    if rows_out == 0 || rows_in == 0 || cfg.rank == 0 {
        return Err(Error::Config(format!(
            "adapter dims must be positive: d1={rows_out}, d2={rows_in}, r={}",
            cfg.rank
        )));
    }
    let (layer, role) = parse_base_ref(base_ref)?;
    let a_id = SlotId::new(layer, &role, Half::A);
    let b_id = SlotId::new(layer, &role, Half::B);
    let std = (2.0 / rows_in as f64).sqrt();
    let a = Streams::new(cfg.seed).normal("lora-init", &a_id.to_string(), &[cfg.rank, rows_in], std);
    let b = DenseTensor::zeros(&[rows_out, cfg.rank])?;
    Ok((AdapterSlot::dense(a_id, a)?, AdapterSlot::dense(b_id, b)?))
}

fn parse_base_ref(base_ref: &str) -> Result<(usize, String)> {
    let id = SlotId::parse(&format!("{base_ref}.A"))?;
    Ok((id.layer, id.role))
}

/// `(alpha / r) * B * A` as a dense matrix.
pub fn delta_matrix(a: &AdapterSlot, b: &AdapterSlot, cfg: &LoraConfig) -> Result<DenseTensor> {
    Ok(matmul(&b.effective_matrix()?, &a.effective_matrix()?)?.scale(cfg.scaling()))
}

/// `(alpha / r) * B * (A * x)` for `x` of shape `[d2, n]`.
pub fn forward_delta(
    a: &AdapterSlot,
    b: &AdapterSlot,
    cfg: &LoraConfig,
    x: &DenseTensor,
) -> Result<DenseTensor> {
    let ax = matmul(&a.effective_matrix()?, x)?;
    Ok(matmul(&b.effective_matrix()?, &ax)?.scale(cfg.scaling()))
}

/// Replaces a dense slot by an MPO chain representing the same matrix.
///
/// An exactly-zero matrix gets random factors `1..m-1` and a zero last factor
/// instead of an SVD, so the product stays zero while every factor can still
/// receive gradient.
pub fn over_parameterize(
    slot: &AdapterSlot,
    plan: &MpoShapePlan,
    streams: &Streams,
) -> Result<AdapterSlot> {
    let SlotForm::Dense(matrix) = &slot.form else {
        return Err(Error::AlreadyFactored(slot.id.to_string()));
    };
    plan.validate()?;
    if (plan.rows(), plan.cols()) != slot.shape {
        return Err(Error::PlanMismatch(format!(
            "plan is [{}, {}], slot {} is {:?}",
            plan.rows(),
            plan.cols(),
            slot.id,
            slot.shape
        )));
    }
    if plan.is_truncated() {
        return Err(Error::PlanMismatch(format!(
            "truncated plan {:?} would change slot {}",
            plan.bond_dims, slot.id
        )));
    }
    let chain = if matrix.is_all_zero() {
        zero_chain(plan, streams, &slot.id.to_string())?
    } else {
        mpo::decompose(matrix, plan)?
    };
    Ok(AdapterSlot {
        form: SlotForm::Factored(chain),
        ..slot.clone()
    })
}

fn zero_chain(plan: &MpoShapePlan, streams: &Streams, slot_id: &str) -> Result<MpoChain> {
    let m = plan.len();
    let mut rng = streams.stream("mpo-zero-init", slot_id);
    let factors = (0..m)
        .map(|k| {
            let dims = plan.factor_dims(k);
            if k + 1 == m {
                DenseTensor::zeros(&dims)
            } else {
                let fan_in = (dims[0] * dims[1] * dims[2]) as f64;
                Ok(crate::rng::normal_tensor(&mut rng, &dims, 1.0 / fan_in.sqrt()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    MpoChain::from_factors(plan.clone(), factors)
}

/// `W0 + (alpha / r) * B * A`, with factored halves contracted first.
pub fn merge(slots: &[AdapterSlot], cfg: &LoraConfig, w0: &DenseTensor) -> Result<DenseTensor> {
    let find = |half: Half| {
        slots
            .iter()
            .find(|s| s.id.half == half)
            .ok_or_else(|| Error::UnknownSlot(format!("missing {half} half")))
    };
    let delta = match slots.iter().find(|s| s.id.half == Half::D) {
        Some(d) => d.effective_matrix()?,
        None => delta_matrix(find(Half::A)?, find(Half::B)?, cfg)?,
    };
    if delta.dims() != w0.dims() {
        return Err(Error::ShapeMismatch(format!(
            "delta {:?} vs base {:?}",
            delta.dims(),
            w0.dims()
        )));
    }
    w0.add(&delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpo::plan_shapes;
    use crate::tensor::rel_frobenius_error;

    fn cfg(rank: usize, alpha: f64, seed: u64) -> LoraConfig {
        LoraConfig { rank, alpha, seed }
    }

    #[test]
    fn slot_id_round_trip() {
        let id = SlotId::new(3, "proj", Half::B);
        assert_eq!(id.to_string(), "layer3.proj.B");
        assert_eq!(SlotId::parse("layer3.proj.B").unwrap(), id);
        assert!(SlotId::parse("layerx.proj.B").is_err());
        assert!(SlotId::parse("layer1.proj.C").is_err());
    }

    #[test]
    fn init_is_zero_product_and_deterministic() {
        let c = cfg(4, 8.0, 42);
        let (a, b) = init_adapter("layer0.proj", 6, 8, &c).unwrap();
        assert_eq!(a.shape, (4, 8));
        assert_eq!(b.shape, (6, 4));
        assert!(delta_matrix(&a, &b, &c).unwrap().is_all_zero());
        let (a2, _) = init_adapter("layer0.proj", 6, 8, &c).unwrap();
        assert_eq!(a.effective_matrix().unwrap().data(), a2.effective_matrix().unwrap().data());
    }

    #[test]
    fn forward_delta_hand_case() {
        let c = cfg(2, 2.0, 0);
        let a = AdapterSlot::dense(SlotId::new(0, "proj", Half::A), DenseTensor::eye(2).unwrap()).unwrap();
        let b = AdapterSlot::dense(
            SlotId::new(0, "proj", Half::B),
            DenseTensor::diag(&[2.0, 3.0]).unwrap(),
        )
        .unwrap();
        let x = DenseTensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(c.scaling(), 1.0);
        assert_eq!(forward_delta(&a, &b, &c, &x).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn zero_slot_stays_zero_after_factoring() {
        let c = cfg(4, 8.0, 1);
        let (_, b) = init_adapter("layer1.ffn", 32, 32, &c).unwrap();
        let plan = plan_shapes(32, 4, &[4, 2, 4], &[2, 1, 2], None).unwrap();
        let fb = over_parameterize(&b, &plan, &Streams::new(1)).unwrap();
        assert!(fb.effective_matrix().unwrap().is_all_zero());
        let SlotForm::Factored(chain) = &fb.form else { panic!() };
        let zero_factors = chain.factors().iter().filter(|f| f.is_all_zero()).count();
        assert_eq!(zero_factors, 1);
        assert!(chain.factors().last().unwrap().is_all_zero());
    }

    #[test]
    fn over_parameterize_preserves_function_and_counts() {
        let c = cfg(8, 16.0, 3);
        let (a, _) = init_adapter("layer0.proj", 768, 768, &c).unwrap();
        let plan = plan_shapes(8, 768, &[2, 4], &[24, 32], None).unwrap();
        let fa = over_parameterize(&a, &plan, &Streams::new(3)).unwrap();
        let before = a.effective_matrix().unwrap();
        let after = fa.effective_matrix().unwrap();
        assert!(rel_frobenius_error(&before, &after).unwrap() <= 1e-10);
        let added = fa.param_count() as i64 - a.param_count() as i64;
        assert_eq!(added, mpo::budget(&plan).n_add);
    }

    #[test]
    fn over_parameterize_errors() {
        let c = cfg(2, 2.0, 0);
        let (a, _) = init_adapter("layer0.proj", 4, 4, &c).unwrap();
        let wrong = plan_shapes(4, 2, &[2, 2], &[2, 1], None).unwrap();
        assert!(matches!(
            over_parameterize(&a, &wrong, &Streams::new(0)),
            Err(Error::PlanMismatch(_))
        ));
        let plan = plan_shapes(2, 4, &[2, 1], &[2, 2], None).unwrap();
        let truncated = plan_shapes(2, 4, &[2, 1], &[2, 2], Some(&[1])).unwrap();
        assert!(matches!(
            over_parameterize(&a, &truncated, &Streams::new(0)),
            Err(Error::PlanMismatch(_))
        ));
        let fa = over_parameterize(&a, &plan, &Streams::new(0)).unwrap();
        assert!(matches!(
            over_parameterize(&fa, &plan, &Streams::new(0)),
            Err(Error::AlreadyFactored(_))
        ));
    }

    #[test]
    fn merge_at_init_is_base() {
        let c = cfg(4, 8.0, 0);
        let (a, b) = init_adapter("layer0.proj", 5, 3, &c).unwrap();
        let w0 = DenseTensor::from_fn(&[5, 3], |k| k as f64).unwrap();
        assert_eq!(merge(&[a, b], &c, &w0).unwrap(), w0);
    }
}
