//! Hyper-parameter sweeps over top-N, split number and parameter scale.
//!
//! Every `(value, seed)` cell is an independent run. Cells may be spread over
//! `MPO_OVER_THREADS` worker threads; results are keyed by cell so the output
//! does not depend on the thread count.

use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::run::{run_training, write_run, RunConfig, RunOutcome};
use crate::train::SyntheticTask;

pub const THREADS_ENV: &str = "MPO_OVER_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "topN")]
    TopN,
    #[serde(rename = "split")]
    Split,
    /// MPO factor count; 1 keeps every slot a single factor.
    #[serde(rename = "scale")]
    Scale,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topN" | "top_n" => Ok(SweepParam::TopN),
            "split" => Ok(SweepParam::Split),
            "scale" => Ok(SweepParam::Scale),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::TopN => "topN",
            SweepParam::Split => "split",
            SweepParam::Scale => "scale",
        }
    }

    /// The base config with this parameter set to `value`.
    pub fn apply(self, base: &RunConfig, value: usize, seed: u64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.lora.seed = seed;
        match self {
            SweepParam::TopN => {
                cfg.selection.top_n = value;
                cfg.selection.split = cfg.selection.split.min(value).max(1);
            }
            SweepParam::Split => cfg.selection.split = value,
            SweepParam::Scale => {
                if !cfg.strategy.factors_slots() {
                    return Err(Error::Config(format!(
                        "scale sweep needs a factoring strategy, got {}",
                        cfg.strategy.name()
                    )));
                }
                cfg.mpo.m = value;
            }
        }
        cfg.resolved()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub seed: u64,
    pub final_eval_loss: f64,
    pub final_train_loss: f64,
    /// Trainable count at the end of training.
    pub trainable: usize,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub value: usize,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub trainable: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendStatus {
    /// Non-increasing over every value.
    Monotone,
    /// Non-increasing up to `plateau_from`, then within tolerance of that level.
    Plateau,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub status: TrendStatus,
    /// Length of the longest non-increasing prefix of the means.
    pub prefix_len: usize,
    pub plateau_from: Option<usize>,
    pub rel_tol: f64,
    /// Largest rise after the prefix, relative to the prefix's last mean.
    pub max_rise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub aggregate: Vec<SweepAggregate>,
    pub trend: TrendReport,
}

/// Relative slack allowed after the non-increasing prefix.
pub const PLATEAU_REL_TOL: f64 = 0.05;

/// Classifies a sequence of mean losses as monotone, plateaued or neither.
pub fn analyze_trend(values: &[usize], means: &[f64], rel_tol: f64) -> TrendReport {
    let n = means.len();
    let mut prefix = n.min(1);
    while prefix < n && means[prefix] <= means[prefix - 1] {
        prefix += 1;
    }
    if prefix == n {
        return TrendReport {
            status: TrendStatus::Monotone,
            prefix_len: prefix,
            plateau_from: None,
            rel_tol,
            max_rise: 0.0,
        };
    }
    let level = means[prefix - 1];
    let max_rise = means[prefix..]
        .iter()
        .map(|m| (m - level) / level.abs().max(f64::MIN_POSITIVE))
        .fold(f64::NEG_INFINITY, f64::max);
    TrendReport {
        status: if max_rise <= rel_tol {
            TrendStatus::Plateau
        } else {
            TrendStatus::Violated
        },
        prefix_len: prefix,
        plateau_from: Some(values[prefix - 1]),
        rel_tol,
        max_rise,
    }
}

/// Worker thread count from `MPO_OVER_THREADS`, default 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        Err(_) => Ok(1),
    }
}

fn run_cell(cfg: &RunConfig) -> Result<RunOutcome> {
    let task = SyntheticTask::generate(&cfg.task, cfg.seed)?;
    run_training(&task, cfg)
}

/// Runs every `(value, seed)` cell. With `out_dir`, each cell's run directory
/// is written to `out_dir/{param}={value}/seed{seed}`.
pub fn run_sweep(
    base: &RunConfig,
    param: SweepParam,
    values: &[usize],
    seeds: &[u64],
    threads: usize,
    out_dir: Option<&Path>,
) -> Result<SweepReport> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let cells: Vec<(usize, u64, RunConfig)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .map(|(v, s)| Ok((v, s, param.apply(base, v, s)?)))
        .collect::<Result<_>>()?;
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(cells.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some((value, seed, cfg)) = cells.get(k) else { break };
                let row = run_cell(cfg).and_then(|out| {
                    if let Some(dir) = out_dir {
                        write_run(dir.join(format!("{}={value}", param.name())).join(format!("seed{seed}")), &out)?;
                    }
                    let last = out.final_row();
                    Ok(SweepRow {
                        value: *value,
                        seed: *seed,
                        final_eval_loss: last.eval_loss,
                        final_train_loss: last.train_loss,
                        trainable: last.trainable,
                        rounds: out.rounds(),
                    })
                });
                results.lock().expect("no panics while holding the lock")[k] = Some(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    let aggregate: Vec<SweepAggregate> = values
        .iter()
        .map(|&v| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.value == v).collect();
            let losses: Vec<f64> = cell.iter().map(|r| r.final_eval_loss).collect();
            let (mean, std) = mean_std(&losses);
            SweepAggregate {
                value: v,
                n: losses.len(),
                mean,
                std,
                trainable: cell[0].trainable,
            }
        })
        .collect();
    let means: Vec<f64> = aggregate.iter().map(|a| a.mean).collect();
    let trend = analyze_trend(values, &means, PLATEAU_REL_TOL);
    Ok(SweepReport {
        param,
        values: values.to_vec(),
        seeds: seeds.to_vec(),
        rows,
        aggregate,
        trend,
    })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
