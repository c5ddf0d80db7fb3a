//! Run configuration, training strategies and the outer training loop.

mod checkpoint;

pub use checkpoint::{export_merged, load_checkpoint, load_merged, save_checkpoint, write_run};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{LoraConfig, SlotId};
use crate::error::{Error, Result};
use crate::mpo::{plan_auto, plan_shapes, MpoShapePlan};
use crate::rng::Streams;
use crate::selection::{self, ImportanceLedger, SelectionConfig, SelectionMode};
use crate::tensor::DenseTensor;
use crate::train::{AdaptedModel, Optimizer, SyntheticTask, TaskConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Unconstrained additive delta on every matrix.
    FullDenseDelta,
    Lora,
    /// Every slot factored with `mpo.m` factors from step 0.
    OverAll,
    /// Every slot factored with two factors from step 0.
    OverSvd,
    /// Vanilla run, loss-delta scores, then a fresh run with the top slots factored.
    OverPredefined,
    /// Slots factored during training from accumulated gradient scores.
    OverRuntime,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FullDenseDelta,
        Strategy::Lora,
        Strategy::OverAll,
        Strategy::OverSvd,
        Strategy::OverPredefined,
        Strategy::OverRuntime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FullDenseDelta => "full-dense-delta",
            Strategy::Lora => "lora",
            Strategy::OverAll => "over-all",
            Strategy::OverSvd => "over-svd",
            Strategy::OverPredefined => "over-predefined",
            Strategy::OverRuntime => "over-runtime",
        }
    }

    /// Whether any slot can end up factored.
    pub fn factors_slots(self) -> bool {
        !matches!(self, Strategy::FullDenseDelta | Strategy::Lora)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpoConfig {
    /// Factor count for generated plans.
    pub m: usize,
    /// Explicit factorizations keyed by `"{rows}x{cols}"`.
    pub plans: BTreeMap<String, FactorSpec>,
}

impl Default for MpoConfig {
    fn default() -> Self {
        Self {
            m: 3,
            plans: BTreeMap::new(),
        }
    }
}

impl MpoConfig {
    pub fn plan_for(&self, rows: usize, cols: usize, m: usize) -> Result<MpoShapePlan> {
        match self.plans.get(&format!("{rows}x{cols}")) {
            Some(spec) => plan_shapes(rows, cols, &spec.in_dims, &spec.out_dims, None),
            None => plan_auto(rows, cols, m, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Source of every random stream in the run.
    pub seed: u64,
    pub strategy: Strategy,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub selection: SelectionConfig,
    pub mpo: MpoConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            strategy: Strategy::Lora,
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            lora: LoraConfig::default(),
            selection: SelectionConfig::default(),
            mpo: MpoConfig::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<Self>(text)
            .map_err(|e| Error::Config(e.to_string()))?
            .resolved()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Validates and fills derived fields: the adapter seed follows `seed`
    /// and the selection mode follows the strategy.
    pub fn resolved(mut self) -> Result<Self> {
        if self.lora.seed != 0 && self.lora.seed != self.seed {
            return Err(Error::Config(format!(
                "lora.seed {} differs from seed {}; set only seed",
                self.lora.seed, self.seed
            )));
        }
        self.lora.seed = self.seed;
        match self.strategy {
            Strategy::OverPredefined => self.selection.mode = SelectionMode::Predefined,
            Strategy::OverRuntime => self.selection.mode = SelectionMode::Runtime,
            _ => {}
        }
        self.task.validate()?;
        self.train.validate()?;
        self.selection.validate()?;
        if self.lora.rank == 0 || !(self.lora.alpha > 0.0) {
            return Err(Error::Config("lora rank must be >= 1 and alpha > 0".into()));
        }
        if self.lora.rank > self.task.hidden {
            return Err(Error::Config("lora rank exceeds hidden size".into()));
        }
        if self.mpo.m == 0 {
            return Err(Error::Config("mpo.m must be >= 1".into()));
        }
        for (key, spec) in &self.mpo.plans {
            let (r, c) = key
                .split_once('x')
                .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Config(format!("plan key {key:?} is not ROWSxCOLS")))?;
            plan_shapes(r, c, &spec.in_dims, &spec.out_dims, None)?;
        }
        Ok(self)
    }

    /// Factor count used when a slot is over-parameterized.
    pub fn factor_count(&self) -> usize {
        match self.strategy {
            Strategy::OverSvd => 2,
            _ => self.mpo.m,
        }
    }

    pub fn plan_for(&self, rows: usize, cols: usize) -> Result<MpoShapePlan> {
        match self.strategy {
            Strategy::OverSvd => plan_auto(rows, cols, 2, None),
            _ => self.mpo.plan_for(rows, cols, self.mpo.m),
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub trainable: usize,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub metrics: Vec<MetricsRow>,
    pub model: AdaptedModel,
    /// Selection state of the predefined and runtime strategies.
    pub ledger: Option<ImportanceLedger>,
    /// Metrics of the vanilla run that precedes predefined selection.
    pub warmup: Option<Vec<MetricsRow>>,
}

impl RunOutcome {
    pub fn final_row(&self) -> &MetricsRow {
        self.metrics.last().expect("at least the step-0 row")
    }

    pub fn rounds(&self) -> usize {
        self.ledger.as_ref().map_or(0, ImportanceLedger::rounds_done)
    }

    pub fn metrics_jsonl(&self) -> Result<String> {
        rows_jsonl(&self.metrics)
    }
}

pub fn rows_jsonl(rows: &[MetricsRow]) -> Result<String> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    Ok(out)
}

struct Data {
    train: (DenseTensor, DenseTensor),
    eval: (DenseTensor, DenseTensor),
}

struct EarlyStop {
    patience: usize,
    min_rel: f64,
}

/// Runtime selection state threaded through the loop.
struct Runtime<'a> {
    ledger: ImportanceLedger,
    cfg: &'a SelectionConfig,
}

/// Trains `task` under `cfg.strategy` and returns the metrics and final model.
pub fn run_training(task: &SyntheticTask, cfg: &RunConfig) -> Result<RunOutcome> {
    let cfg = cfg.clone().resolved()?;
    let data = Data {
        train: task.train.all()?,
        eval: task.eval.all()?,
    };
    let streams = Streams::new(cfg.seed);
    let fresh_lora = || AdaptedModel::with_lora(task.backbone.clone(), cfg.lora);
    let steps = cfg.train.steps;

    let (metrics, model, ledger, warmup) = match cfg.strategy {
        Strategy::FullDenseDelta => {
            let mut model = AdaptedModel::with_full_delta(task.backbone.clone(), cfg.lora)?;
            let rows = train_loop(task, &cfg, &data, &mut model, steps, None, None)?;
            (rows, model, None, None)
        }
        Strategy::Lora => {
            let mut model = fresh_lora()?;
            let rows = train_loop(task, &cfg, &data, &mut model, steps, None, None)?;
            (rows, model, None, None)
        }
        Strategy::OverAll | Strategy::OverSvd => {
            let mut model = fresh_lora()?;
            for id in model.slot_ids() {
                factor_slot(&mut model, &id, &cfg, &streams)?;
            }
            let rows = train_loop(task, &cfg, &data, &mut model, steps, None, None)?;
            (rows, model, None, None)
        }
        Strategy::OverPredefined => {
            let mut vanilla = fresh_lora()?;
            let stop = EarlyStop {
                patience: cfg.selection.patience,
                min_rel: cfg.selection.min_rel_improvement,
            };
            let warm = train_loop(task, &cfg, &data, &mut vanilla, cfg.selection.converge_steps, None, Some(stop))?;
            let calib = calibration_batches(task, &cfg)?;
            let mut ledger = ImportanceLedger::for_model(&vanilla, &cfg.selection);
            selection::score_all_predefined(&mut ledger, &vanilla, &calib)?;
            let picks = ledger.select_round(&cfg.selection);
            let mut model = fresh_lora()?;
            for id in &picks {
                factor_slot(&mut model, id, &cfg, &streams)?;
            }
            let rows = train_loop(task, &cfg, &data, &mut model, steps, None, None)?;
            (rows, model, Some(ledger), Some(warm))
        }
        Strategy::OverRuntime => {
            let mut model = fresh_lora()?;
            let mut rt = Runtime {
                ledger: ImportanceLedger::for_model(&model, &cfg.selection),
                cfg: &cfg.selection,
            };
            let rows = train_loop(task, &cfg, &data, &mut model, steps, Some(&mut rt), None)?;
            (rows, model, Some(rt.ledger), None)
        }
    };
    Ok(RunOutcome {
        config: cfg,
        metrics,
        model,
        ledger,
        warmup,
    })
}

/// Held-out batches drawn fresh from the teacher for loss-delta scoring.
pub fn calibration_batches(task: &SyntheticTask, cfg: &RunConfig) -> Result<Vec<(DenseTensor, DenseTensor)>> {
    (0..cfg.selection.calib_batches)
        .map(|k| task.sample(&format!("calib{k}"), cfg.train.batch_size)?.all())
        .collect()
}

fn factor_slot(model: &mut AdaptedModel, id: &SlotId, cfg: &RunConfig, streams: &Streams) -> Result<()> {
    let (rows, cols) = model.slot(id)?.shape;
    let plan = cfg.plan_for(rows, cols)?;
    model.over_parameterize(id, &plan, streams)
}

/// Sample indices of the minibatch used at 0-based step `t`.
pub fn batch_indices(streams: &Streams, t: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut rng = streams.stream("batch", &t.to_string());
    (0..batch_size).map(|_| rng.random_range(0..n)).collect()
}

fn factored_ids(model: &AdaptedModel) -> Vec<String> {
    model
        .slots()
        .filter(|s| s.is_factored())
        .map(|s| s.id.to_string())
        .collect()
}

fn eval_row(model: &AdaptedModel, data: &Data, step: usize) -> Result<MetricsRow> {
    let row = MetricsRow {
        step,
        train_loss: model.loss(&data.train.0, &data.train.1)?,
        eval_loss: model.loss(&data.eval.0, &data.eval.1)?,
        trainable: model.trainable_count(),
        selected: factored_ids(model),
    };
    if !row.eval_loss.is_finite() || !row.train_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("train {} eval {}", row.train_loss, row.eval_loss),
        });
    }
    Ok(row)
}

fn train_loop(
    task: &SyntheticTask,
    cfg: &RunConfig,
    data: &Data,
    model: &mut AdaptedModel,
    steps: usize,
    mut runtime: Option<&mut Runtime<'_>>,
    early_stop: Option<EarlyStop>,
) -> Result<Vec<MetricsRow>> {
    let streams = Streams::new(cfg.seed);
    let train_cfg = TrainConfig {
        steps,
        ..cfg.train.clone()
    };
    let mut opt = Optimizer::new();
    let mut rows = vec![eval_row(model, data, 0)?];
    let (mut best, mut stale) = (rows[0].eval_loss, 0usize);
    for step in 1..=steps {
        let idx = batch_indices(&streams, step - 1, train_cfg.batch_size, task.train.len());
        let (x, y) = task.train.batch(&idx)?;
        let (loss, grads) = model.forward_backward(&x, &y)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("minibatch loss {loss}"),
            });
        }
        let selecting = runtime
            .as_ref()
            .is_some_and(|rt| !rt.ledger.is_complete(rt.cfg.top_n));
        if selecting {
            let rt = runtime.as_mut().expect("checked");
            rt.ledger.accumulate(&grads, rt.cfg.reduction)?;
        }
        opt.step(model, &grads, &train_cfg, step - 1)?;
        if selecting && step % cfg.selection.interval == 0 {
            let rt = runtime.as_mut().expect("checked");
            rt.ledger.score_all_runtime(model, rt.cfg.reduction)?;
            for id in rt.ledger.select_round(rt.cfg) {
                factor_slot(model, &id, cfg, &streams)?;
                opt.forget(&id);
            }
            if rt.cfg.reset_accum {
                rt.ledger.reset_accum();
            }
        }
        if step % train_cfg.eval_every == 0 || step == steps {
            let row = eval_row(model, data, step)?;
            let eval = row.eval_loss;
            rows.push(row);
            if let Some(stop) = &early_stop {
                if eval < best * (1.0 - stop.min_rel) {
                    best = eval;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= stop.patience {
                        break;
                    }
                }
            }
        }
    }
    Ok(rows)
}
