//! Importance scores and grouped top-N selection of slots to over-parameterize.
//!
//! Two scores are supported. The loss-delta score zeroes one slot and
//! measures how far the calibration loss moves. The first-order score
//! accumulates gradients with respect to each slot's matrix during training
//! and reduces them against the current matrix. Slots are ranked inside their
//! group and each round takes the best unselected ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapters::{AdapterSlot, SlotId};
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, DenseTensor};
use crate::train::{AdaptedModel, SlotGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Predefined,
    Runtime,
}

/// How accumulated gradients meet the current matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// `sum(accum(|g|) * |W|)`
    AbsAccum,
    /// `|sum(accum(g) * W)|`
    SignedInner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// One group per `(role, half)`, spanning all layers.
    RoleHalf,
    /// One group per half, pooling roles.
    Half,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Slots to select per group.
    pub top_n: usize,
    /// Number of rounds the quota is spread over (runtime).
    pub split: usize,
    /// Training steps between rounds (runtime).
    pub interval: usize,
    pub mode: SelectionMode,
    pub reduction: Reduction,
    /// Clear gradient accumulators after each round.
    pub reset_accum: bool,
    pub grouping: Grouping,
    /// Step budget of the vanilla run that precedes predefined scoring.
    pub converge_steps: usize,
    /// Early stop after this many evals without enough improvement.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub calib_batches: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            top_n: 2,
            split: 2,
            interval: 100,
            mode: SelectionMode::Runtime,
            reduction: Reduction::AbsAccum,
            reset_accum: true,
            grouping: Grouping::RoleHalf,
            converge_steps: 600,
            patience: 5,
            min_rel_improvement: 1e-4,
            calib_batches: 8,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split == 0 || self.interval == 0 || self.calib_batches == 0 {
            return Err(Error::Config("split, interval and calib_batches must be >= 1".into()));
        }
        if self.top_n > 0 && self.split > self.top_n {
            return Err(Error::Config(format!(
                "split {} exceeds top_n {}",
                self.split, self.top_n
            )));
        }
        if !(self.min_rel_improvement >= 0.0) {
            return Err(Error::Config("min_rel_improvement must be >= 0".into()));
        }
        Ok(())
    }

    /// Slots taken per group in one round.
    pub fn per_round(&self) -> usize {
        match self.mode {
            SelectionMode::Predefined => self.top_n,
            SelectionMode::Runtime => self.top_n.div_ceil(self.split),
        }
    }
}

pub fn group_key(id: &SlotId, grouping: Grouping) -> String {
    match grouping {
        Grouping::RoleHalf => format!("{}.{}", id.role, id.half),
        Grouping::Half => id.half.to_string(),
    }
}

/// Scores, gradient accumulators and the growing selected set.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceLedger {
    pub mode: SelectionMode,
    pub groups: BTreeMap<String, Vec<SlotId>>,
    pub scores: BTreeMap<SlotId, f64>,
    pub accum: BTreeMap<SlotId, DenseTensor>,
    pub selected: Vec<SlotId>,
    /// Picks of each round, in order.
    pub rounds: Vec<Vec<SlotId>>,
}

impl ImportanceLedger {
    pub fn new(ids: impl IntoIterator<Item = SlotId>, mode: SelectionMode, grouping: Grouping) -> Self {
        let mut groups: BTreeMap<String, Vec<SlotId>> = BTreeMap::new();
        for id in ids {
            groups.entry(group_key(&id, grouping)).or_default().push(id);
        }
        for members in groups.values_mut() {
            members.sort();
        }
        Self {
            mode,
            groups,
            scores: BTreeMap::new(),
            accum: BTreeMap::new(),
            selected: Vec::new(),
            rounds: Vec::new(),
        }
    }

    pub fn for_model(model: &AdaptedModel, cfg: &SelectionConfig) -> Self {
        let ids = model.slots().filter(|s| s.trainable).map(|s| s.id.clone());
        Self::new(ids, cfg.mode, cfg.grouping)
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_selected(&self, id: &SlotId) -> bool {
        self.selected.contains(id)
    }

    fn selected_in(&self, members: &[SlotId]) -> usize {
        members.iter().filter(|id| self.is_selected(id)).count()
    }

    /// True once every group holds `min(top_n, group size)` selected slots.
    pub fn is_complete(&self, top_n: usize) -> bool {
        self.groups
            .values()
            .all(|m| self.selected_in(m) >= top_n.min(m.len()))
    }

    /// Adds one step of contracted-matrix gradients to the accumulators.
    pub fn accumulate(&mut self, grads: &BTreeMap<SlotId, SlotGrad>, reduction: Reduction) -> Result<()> {
        for (id, g) in grads {
            let incoming = match reduction {
                Reduction::AbsAccum => g.matrix.map(f64::abs),
                Reduction::SignedInner => g.matrix.clone(),
            };
            match self.accum.get_mut(id) {
                Some(acc) => acc.axpy(1.0, &incoming)?,
                None => {
                    self.accum.insert(id.clone(), incoming);
                }
            }
        }
        Ok(())
    }

    pub fn reset_accum(&mut self) {
        self.accum.clear();
    }

    /// First-order score of one slot against its current matrix.
    pub fn score_runtime(&self, id: &SlotId, current: &DenseTensor, reduction: Reduction) -> Result<f64> {
        let acc = self
            .accum
            .get(id)
            .ok_or_else(|| Error::MissingAccumulator(id.to_string()))?;
        if acc.dims() != current.dims() {
            return Err(Error::ShapeMismatch(format!(
                "accumulator {:?} vs matrix {:?} for {id}",
                acc.dims(),
                current.dims()
            )));
        }
        let terms: Vec<f64> = match reduction {
            Reduction::AbsAccum => acc.data().iter().zip(current.data()).map(|(a, w)| a * w.abs()).collect(),
            Reduction::SignedInner => acc.data().iter().zip(current.data()).map(|(a, w)| a * w).collect(),
        };
        Ok(pairwise_sum(&terms).abs())
    }

    /// Scores every slot of the model from the accumulators.
    pub fn score_all_runtime(&mut self, model: &AdaptedModel, reduction: Reduction) -> Result<()> {
        for members in self.groups.values() {
            for id in members {
                let w = model.slot(id)?.effective_matrix()?;
                let s = self.score_runtime(id, &w, reduction)?;
                self.scores.insert(id.clone(), s);
            }
        }
        Ok(())
    }

    /// Picks the best unselected slots of every group and appends them to the selection.
    ///
    /// Ties fall back to slot order (layer, role, half).
    pub fn select_round(&mut self, cfg: &SelectionConfig) -> Vec<SlotId> {
        let pick = cfg.per_round();
        let mut chosen = Vec::new();
        for members in self.groups.values() {
            let quota = cfg.top_n.min(members.len()).saturating_sub(self.selected_in(members));
            let mut candidates: Vec<&SlotId> = members.iter().filter(|id| !self.is_selected(id)).collect();
            let score = |id: &SlotId| self.scores.get(id).copied().unwrap_or(0.0);
            candidates.sort_by(|a, b| score(b).total_cmp(&score(a)).then_with(|| a.cmp(b)));
            chosen.extend(candidates.into_iter().take(pick.min(quota)).cloned());
        }
        self.selected.extend(chosen.iter().cloned());
        self.rounds.push(chosen.clone());
        chosen
    }

    /// `{"mode", "groups": {group: [{"slot", "score", "selected"}]}}`
    pub fn dump(&self) -> Value {
        let groups: serde_json::Map<String, Value> = self
            .groups
            .iter()
            .map(|(g, members)| {
                let rows = members
                    .iter()
                    .map(|id| {
                        json!({
                            "slot": id.to_string(),
                            "score": self.scores.get(id).copied().unwrap_or(0.0),
                            "selected": self.is_selected(id),
                        })
                    })
                    .collect();
                (g.clone(), Value::Array(rows))
            })
            .collect();
        json!({ "mode": self.mode, "groups": groups })
    }
}

/// Mean loss of the model over calibration batches.
pub fn mean_loss(model: &AdaptedModel, batches: &[(DenseTensor, DenseTensor)]) -> Result<f64> {
    let losses = batches
        .iter()
        .map(|(x, y)| model.loss(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&losses) / losses.len().max(1) as f64)
}

/// Loss-delta score: how much the mean calibration loss moves when the slot is zeroed.
pub fn score_predefined(model: &AdaptedModel, batches: &[(DenseTensor, DenseTensor)], id: &SlotId) -> Result<f64> {
    let base = mean_loss(model, batches)?;
    score_predefined_from(model, batches, id, base)
}

fn score_predefined_from(
    model: &AdaptedModel,
    batches: &[(DenseTensor, DenseTensor)],
    id: &SlotId,
    base: f64,
) -> Result<f64> {
    let slot = model.slot(id)?;
    if slot.effective_matrix()?.is_all_zero() {
        return Ok(0.0);
    }
    let mut zeroed = model.clone();
    zeroed.slot_mut(id)?.zero_out();
    Ok((base - mean_loss(&zeroed, batches)?).abs())
}

/// Loss-delta scores for every slot in the ledger.
pub fn score_all_predefined(
    ledger: &mut ImportanceLedger,
    model: &AdaptedModel,
    batches: &[(DenseTensor, DenseTensor)],
) -> Result<()> {
    let base = mean_loss(model, batches)?;
    for members in ledger.groups.values() {
        for id in members {
            let s = score_predefined_from(model, batches, id, base)?;
            ledger.scores.insert(id.clone(), s);
        }
    }
    Ok(())
}

/// Exact loss change versus its first-order estimate for a slot scaled to `eps * W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorProbe {
    pub exact: f64,
    pub first_order: f64,
}

impl TaylorProbe {
    pub fn discrepancy(&self) -> f64 {
        (self.exact - self.first_order).abs() / self.first_order.max(1e-300)
    }
}

/// Probe against arbitrary loss and gradient functions of one matrix.
pub fn taylor_probe_with(
    w: &DenseTensor,
    eps: f64,
    loss: impl Fn(&DenseTensor) -> Result<f64>,
    grad: impl Fn(&DenseTensor) -> Result<DenseTensor>,
) -> Result<TaylorProbe> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Config(format!("probe scale {eps} outside (0, 1]")));
    }
    let scaled = w.scale(eps);
    let zero = DenseTensor::zeros(w.dims())?;
    let exact = (loss(&scaled)? - loss(&zero)?).abs();
    let g = grad(&scaled)?;
    let first_order = pairwise_sum(g.hadamard(&scaled)?.data()).abs();
    Ok(TaylorProbe { exact, first_order })
}

/// Probe one slot of a model on a fixed batch.
pub fn taylor_consistency_probe(
    model: &AdaptedModel,
    id: &SlotId,
    eps: f64,
    x: &DenseTensor,
    y: &DenseTensor,
) -> Result<TaylorProbe> {
    let w = model.slot(id)?.effective_matrix()?;
    let with = |v: &DenseTensor| -> Result<AdaptedModel> {
        let mut probe = model.clone();
        let mut slot = AdapterSlot::dense(id.clone(), v.clone())?;
        slot.trainable = true;
        probe.replace_slot(slot)?;
        Ok(probe)
    };
    taylor_probe_with(
        &w,
        eps,
        |v| with(v)?.loss(x, y),
        |v| {
            let (_, grads) = with(v)?.forward_backward(x, y)?;
            grads
                .get(id)
                .map(|g| g.matrix.clone())
                .ok_or_else(|| Error::UnknownSlot(id.to_string()))
        },
    )
}

/// Least-squares slope of `log(values)` against `log(xs)`.
pub fn log_log_slope(xs: &[f64], values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs.iter().zip(values).map(|(x, v)| (x.ln(), v.max(1e-300).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}
