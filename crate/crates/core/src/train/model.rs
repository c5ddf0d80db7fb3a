use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::task::{Backbone, ROLES};
use crate::adapters::{self, AdapterSlot, Half, LoraConfig, SlotForm, SlotId};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mpo::MpoShapePlan;
use crate::rng::Streams;
use crate::tensor::{matmul, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    /// `(alpha / r) * B * A` per matrix.
    LowRank,
    /// Unconstrained additive `D` per matrix.
    FullDelta,
}

/// Gradient of the loss for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGrad {
    /// With respect to the matrix the slot represents (contracted if factored).
    pub matrix: DenseTensor,
    /// With respect to each stored tensor, in [`AdapterSlot::params`] order.
    pub params: Vec<DenseTensor>,
}

/// Frozen backbone plus one adapter pair (or delta) per weight matrix.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub backbone: Backbone,
    pub lora: LoraConfig,
    pub kind: AdapterKind,
    slots: BTreeMap<SlotId, AdapterSlot>,
}

impl AdaptedModel {
    pub fn with_lora(backbone: Backbone, lora: LoraConfig) -> Result<Self> {
        let h = backbone.hidden();
        let mut slots = BTreeMap::new();
        for l in 0..backbone.layers() {
            for role in ROLES {
                let (a, b) = adapters::init_adapter(&format!("layer{l}.{role}"), h, h, &lora)?;
                slots.insert(a.id.clone(), a);
                slots.insert(b.id.clone(), b);
            }
        }
        Ok(Self {
            backbone,
            lora,
            kind: AdapterKind::LowRank,
            slots,
        })
    }

    pub fn with_full_delta(backbone: Backbone, lora: LoraConfig) -> Result<Self> {
        let h = backbone.hidden();
        let mut slots = BTreeMap::new();
        for l in 0..backbone.layers() {
            for role in ROLES {
                let id = SlotId::new(l, role, Half::D);
                slots.insert(id.clone(), AdapterSlot::dense(id, DenseTensor::zeros(&[h, h])?)?);
            }
        }
        Ok(Self {
            backbone,
            lora,
            kind: AdapterKind::FullDelta,
            slots,
        })
    }

    /// Reassembles a model from stored slots.
    pub fn from_slots(
        backbone: Backbone,
        lora: LoraConfig,
        kind: AdapterKind,
        slots: Vec<AdapterSlot>,
    ) -> Result<Self> {
        let model = Self {
            backbone,
            lora,
            kind,
            slots: slots.into_iter().map(|s| (s.id.clone(), s)).collect(),
        };
        for l in 0..model.backbone.layers() {
            for role in ROLES {
                model.layer_slots(l, role)?;
            }
        }
        Ok(model)
    }

    pub fn slots(&self) -> impl Iterator<Item = &AdapterSlot> {
        self.slots.values()
    }

    pub fn slot_ids(&self) -> Vec<SlotId> {
        self.slots.keys().cloned().collect()
    }

    pub fn slot(&self, id: &SlotId) -> Result<&AdapterSlot> {
        self.slots.get(id).ok_or_else(|| Error::UnknownSlot(id.to_string()))
    }

    pub fn slot_mut(&mut self, id: &SlotId) -> Result<&mut AdapterSlot> {
        self.slots.get_mut(id).ok_or_else(|| Error::UnknownSlot(id.to_string()))
    }

    /// Replaces the slot's dense matrix by an MPO chain built from `plan`.
    pub fn over_parameterize(&mut self, id: &SlotId, plan: &MpoShapePlan, streams: &Streams) -> Result<()> {
        let slot = self.slot(id)?;
        let factored = adapters::over_parameterize(slot, plan, streams)?;
        self.slots.insert(id.clone(), factored);
        Ok(())
    }

    /// Swaps in a slot with the same id, e.g. a dense stand-in for a probe.
    pub fn replace_slot(&mut self, slot: AdapterSlot) -> Result<()> {
        let old = self.slot(&slot.id)?;
        if old.shape != slot.shape {
            return Err(Error::ShapeMismatch(format!(
                "slot {} is {:?}, replacement is {:?}",
                slot.id, old.shape, slot.shape
            )));
        }
        self.slots.insert(slot.id.clone(), slot);
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.slots.values().filter(|s| s.trainable).map(AdapterSlot::param_count).sum()
    }

    fn layer_slots(&self, layer: usize, role: &str) -> Result<Vec<&AdapterSlot>> {
        let halves: &[Half] = match self.kind {
            AdapterKind::LowRank => &[Half::A, Half::B],
            AdapterKind::FullDelta => &[Half::D],
        };
        halves.iter().map(|&h| self.slot(&SlotId::new(layer, role, h))).collect()
    }

    /// Backbone with every adapter folded into its base matrix.
    pub fn merged(&self) -> Result<Backbone> {
        let mut merged = self.backbone.clone();
        for l in 0..self.backbone.layers() {
            for (r, role) in ROLES.iter().enumerate() {
                let slots: Vec<AdapterSlot> = self.layer_slots(l, role)?.into_iter().cloned().collect();
                let w = adapters::merge(&slots, &self.lora, self.backbone.weight(l, r))?;
                *merged.weight_mut(l, r) = w;
            }
        }
        Ok(merged)
    }

    /// Forward pass through the adapter route: `W0 x + (alpha/r) B (A x)` per matrix.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let mut h = x.clone();
        for l in 0..self.backbone.layers() {
            for (r, role) in ROLES.iter().enumerate() {
                let mut out = matmul(self.backbone.weight(l, r), &h)?;
                match self.kind {
                    AdapterKind::LowRank => {
                        let s = self.layer_slots(l, role)?;
                        out = out.add(&adapters::forward_delta(s[0], s[1], &self.lora, &h)?)?;
                    }
                    AdapterKind::FullDelta => {
                        let d = self.slot(&SlotId::new(l, role, Half::D))?.effective_matrix()?;
                        out = out.add(&matmul(&d, &h)?)?;
                    }
                }
                h = if r == 0 { out.map(f64::tanh) } else { out };
            }
        }
        Ok(h)
    }

    /// Mean squared error of [`forward`](Self::forward) against `y`.
    pub fn loss(&self, x: &DenseTensor, y: &DenseTensor) -> Result<f64> {
        mse(&self.forward(x)?, y)
    }

    /// Loss and per-slot gradients from one reverse sweep.
    pub fn forward_backward(
        &self,
        x: &DenseTensor,
        y: &DenseTensor,
    ) -> Result<(f64, BTreeMap<SlotId, SlotGrad>)> {
        let mut tape = Tape::new();
        let mut handles: BTreeMap<SlotId, (Var, Vec<Var>)> = BTreeMap::new();
        let mut h = tape.constant(x.clone());
        for l in 0..self.backbone.layers() {
            for (r, role) in ROLES.iter().enumerate() {
                let w0 = tape.constant(self.backbone.weight(l, r).clone());
                let mut mats = Vec::new();
                for slot in self.layer_slots(l, role)? {
                    let (matrix, params) = slot_node(&mut tape, slot)?;
                    handles.insert(slot.id.clone(), (matrix, params));
                    mats.push(matrix);
                }
                let delta = match self.kind {
                    AdapterKind::LowRank => {
                        let ba = tape.matmul(mats[1], mats[0])?;
                        tape.scale(ba, self.lora.scaling())
                    }
                    AdapterKind::FullDelta => mats[0],
                };
                let w = tape.add(w0, delta)?;
                let out = tape.matmul(w, h)?;
                h = if r == 0 { tape.tanh(out) } else { out };
            }
        }
        let loss_var = tape.mse_loss(h, y)?;
        let loss = tape.value(loss_var).data()[0];
        let mut grads = tape.backward(loss_var)?;
        let mut out = BTreeMap::new();
        for (id, (matrix, params)) in handles {
            let zero_like = |v: Var| DenseTensor::zeros(tape.value(v).dims());
            let gm = match grads.take(matrix) {
                Some(g) => g,
                None => zero_like(matrix)?,
            };
            let gp = params
                .iter()
                .map(|&p| {
                    if p == matrix {
                        Ok(gm.clone())
                    } else {
                        grads.take(p).map_or_else(|| zero_like(p), Ok)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            out.insert(
                id,
                SlotGrad {
                    matrix: gm,
                    params: gp,
                },
            );
        }
        Ok((loss, out))
    }
}

fn slot_node(tape: &mut Tape, slot: &AdapterSlot) -> Result<(Var, Vec<Var>)> {
    let leaf = |tape: &mut Tape, v: &DenseTensor| {
        if slot.trainable {
            tape.param(v.clone())
        } else {
            tape.constant(v.clone())
        }
    };
    match &slot.form {
        SlotForm::Dense(m) => {
            let v = leaf(tape, m);
            Ok((v, vec![v]))
        }
        SlotForm::Factored(chain) => {
            let params: Vec<Var> = chain.factors().iter().map(|f| leaf(tape, f)).collect();
            let matrix = tape.chain_contract(&params, chain.plan())?;
            Ok((matrix, params))
        }
    }
}

pub fn mse(pred: &DenseTensor, target: &DenseTensor) -> Result<f64> {
    let d = pred.sub(target)?;
    Ok(d.hadamard(&d)?.sum() / d.len() as f64)
}
