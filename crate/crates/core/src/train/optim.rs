use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::model::{AdaptedModel, SlotGrad};
use crate::adapters::SlotId;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        weight_decay: f64,
    },
    Adamw {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adamw {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate for MPO factors; falls back to `lr`.
    pub mpo_lr: Option<f64>,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 64,
            lr: 1.5e-2,
            mpo_lr: None,
            schedule: Schedule::Cosine,
            optimizer: OptimizerKind::default(),
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0) || self.mpo_lr.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at 0-based step `t`.
    pub fn lr_at(&self, base: f64, t: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                if self.steps == 0 {
                    base
                } else {
                    base * 0.5 * (1.0 + (PI * t as f64 / self.steps as f64).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: DenseTensor,
    v: DenseTensor,
    t: u32,
}

/// Per-tensor optimizer state keyed by `(slot, param index)`.
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    state: BTreeMap<(SlotId, usize), Moments>,
}

impl Optimizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops the state of a slot whose parameter layout changed.
    pub fn forget(&mut self, id: &SlotId) {
        self.state.retain(|(s, _), _| s != id);
    }

    /// One update of every trainable slot. Decoupled weight decay.
    pub fn step(
        &mut self,
        model: &mut AdaptedModel,
        grads: &BTreeMap<SlotId, SlotGrad>,
        cfg: &TrainConfig,
        step_index: usize,
    ) -> Result<()> {
        for id in model.slot_ids() {
            let slot = model.slot_mut(&id)?;
            if !slot.trainable {
                continue;
            }
            let Some(g) = grads.get(&id) else { continue };
            let base = if slot.is_factored() {
                cfg.mpo_lr.unwrap_or(cfg.lr)
            } else {
                cfg.lr
            };
            let lr = cfg.lr_at(base, step_index);
            for (k, gk) in g.params.iter().enumerate() {
                let p = slot.param_mut(k);
                if p.dims() != gk.dims() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient {:?} for {id} param {k} {:?}",
                        gk.dims(),
                        p.dims()
                    )));
                }
                match cfg.optimizer {
                    OptimizerKind::Sgd { weight_decay } => {
                        for (w, &gv) in p.data_mut().iter_mut().zip(gk.data()) {
                            *w -= lr * (gv + weight_decay * *w);
                        }
                    }
                    OptimizerKind::Adamw {
                        beta1,
                        beta2,
                        eps,
                        weight_decay,
                    } => {
                        let st = self.state.entry((id.clone(), k)).or_insert_with(|| Moments {
                            m: DenseTensor::zeros(gk.dims()).expect("valid dims"),
                            v: DenseTensor::zeros(gk.dims()).expect("valid dims"),
                            t: 0,
                        });
                        st.t += 1;
                        let bc1 = 1.0 - beta1.powi(st.t as i32);
                        let bc2 = 1.0 - beta2.powi(st.t as i32);
                        let (m, v) = (st.m.data_mut(), st.v.data_mut());
                        for (((w, &gv), mi), vi) in p
                            .data_mut()
                            .iter_mut()
                            .zip(gk.data())
                            .zip(m.iter_mut())
                            .zip(v.iter_mut())
                        {
                            *mi = beta1 * *mi + (1.0 - beta1) * gv;
                            *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                            let mhat = *mi / bc1;
                            let vhat = *vi / bc2;
                            *w -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *w);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
