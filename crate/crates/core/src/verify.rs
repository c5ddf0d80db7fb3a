//! Self-check suites run by `mpo-adapt verify`.
//!
//! Each property is measured on fresh random data from the seed and reported
//! with its measured value and threshold; a suite passes when all of its
//! properties do.

use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Serialize;

use crate::adapters::{Half, LoraConfig, SlotId};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mpo::{budget, contract, decompose, error_bound, full_bond_dims, plan_shapes, MpoShapePlan};
use crate::rng::{normal_tensor, Streams};
use crate::run::{run_training, RunConfig, Strategy};
use crate::selection::{self, Grouping, ImportanceLedger, SelectionConfig, SelectionMode};
use crate::tensor::{rel_frobenius_error, DenseTensor};
use crate::train::{AdaptedModel, SyntheticTask, TaskConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Mpo,
    Grad,
    Merge,
    Bound,
    Selection,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "mpo" => Suite::Mpo,
            "grad" => Suite::Grad,
            "merge" => Suite::Merge,
            "bound" => Suite::Bound,
            "selection" => Suite::Selection,
            other => return Err(Error::Config(format!("unknown suite {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suite: String,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

fn at_most(suite: &'static str, name: &str, measured: f64, threshold: f64, detail: String) -> PropertyResult {
    PropertyResult {
        suite,
        name: name.to_string(),
        passed: measured <= threshold,
        measured,
        threshold,
        detail,
    }
}

fn at_least(suite: &'static str, name: &str, measured: f64, threshold: f64, detail: String) -> PropertyResult {
    PropertyResult {
        passed: measured >= threshold,
        ..at_most(suite, name, measured, threshold, detail)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<VerifyReport> {
    let streams = Streams::new(seed);
    let mut properties = Vec::new();
    let wants = |s: Suite| suite == Suite::All || suite == s;
    if wants(Suite::Mpo) {
        properties.extend(mpo_suite(&streams)?);
    }
    if wants(Suite::Bound) {
        properties.extend(bound_suite(&streams, 100)?);
    }
    if wants(Suite::Grad) {
        properties.extend(grad_suite(&streams)?);
    }
    if wants(Suite::Merge) {
        properties.extend(merge_suite(seed)?);
    }
    if wants(Suite::Selection) {
        properties.extend(selection_suite(seed)?);
    }
    Ok(VerifyReport {
        suite: format!("{suite:?}").to_lowercase(),
        passed: properties.iter().all(|p| p.passed),
        properties,
    })
}

/// Random factorization of a shape with `m` factors drawn from small integers.
pub fn random_plan(rng: &mut impl Rng, m: usize, max_factor: usize) -> Result<MpoShapePlan> {
    let ins: Vec<usize> = (0..m).map(|_| rng.random_range(1..=max_factor)).collect();
    let outs: Vec<usize> = (0..m).map(|_| rng.random_range(1..=max_factor)).collect();
    plan_shapes(ins.iter().product(), outs.iter().product(), &ins, &outs, None)
}

fn mpo_suite(streams: &Streams) -> Result<Vec<PropertyResult>> {
    const S: &str = "mpo";
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    let mut count = 0;
    let cases: [(usize, usize, &[usize], &[usize]); 6] = [
        (768, 8, &[24, 32], &[2, 4]),
        (8, 768, &[2, 4], &[24, 32]),
        (64, 64, &[4, 4, 4], &[4, 4, 4]),
        (64, 64, &[64], &[64]),
        (768, 8, &[4, 2, 96], &[2, 2, 2]),
        (4096, 8, &[64, 1, 1, 1, 1, 1, 1, 1, 64], &[2, 1, 1, 1, 1, 1, 1, 1, 4]),
    ];
    for (k, (r, c, ins, outs)) in cases.iter().enumerate() {
        let plan = plan_shapes(*r, *c, ins, outs, None)?;
        for rep in 0..3 {
            let w = streams.normal("verify-roundtrip", &format!("{k}.{rep}"), &[*r, *c], 1.0);
            worst = worst.max(rel_frobenius_error(&w, &contract(&decompose(&w, &plan)?)?)?);
            count += 1;
        }
    }
    out.push(at_most(S, "round_trip_rel_error", worst, 1e-9, format!("{count} matrices")));

    let plan = plan_shapes(6, 8, &[2, 3], &[2, 4], None)?;
    let mut rng = streams.stream("verify-integer", "0");
    let w = DenseTensor::from_fn(&[6, 8], |_| rng.random_range(-9i32..=9) as f64)?;
    let back = contract(&decompose(&w, &plan)?)?;
    let exact = back.data().iter().zip(w.data()).all(|(b, a)| b.round() == *a);
    let dev = back.sub(&w)?.max_abs();
    out.push(PropertyResult {
        passed: exact && dev < 1e-9,
        ..at_most(S, "integer_round_trip_max_abs", dev, 1e-9, "6x8, plan {2,3}x{2,4}".into())
    });

    let mut rng = streams.stream("verify-plans", "0");
    let mut budget_ok = 0;
    let mut bond_ok = 0;
    let n_plans = 500;
    for _ in 0..n_plans {
        let m = rng.random_range(1..=5);
        let plan = random_plan(&mut rng, m, 5)?;
        let sites: Vec<usize> = plan.in_dims.iter().zip(&plan.out_dims).map(|(i, j)| i * j).collect();
        let brute: Vec<usize> = (0..=m)
            .map(|k| {
                let left: usize = sites[..k].iter().product();
                let right: usize = sites[k..].iter().product();
                if k == 0 || k == m {
                    1
                } else {
                    left.min(right)
                }
            })
            .collect();
        bond_ok += usize::from(brute == plan.bond_dims);
        let stored: usize = (0..m).map(|k| plan.factor_dims(k).iter().product::<usize>()).sum();
        let b = budget(&plan);
        budget_ok += usize::from(stored == b.n_params_chain && b.n_add == stored as i64 - b.n_params_dense as i64);
    }
    out.push(at_least(S, "bond_formula_matches", bond_ok as f64, n_plans as f64, format!("{n_plans} random plans")));
    out.push(at_least(S, "budget_exact", budget_ok as f64, n_plans as f64, format!("{n_plans} random plans")));

    let t5 = budget(&plan_shapes(768, 8, &[24, 32], &[2, 4], None)?);
    out.push(PropertyResult {
        passed: t5.n_add == 2304,
        ..at_most(S, "n_add_768x8", t5.n_add as f64, 2304.0, "plan {24,32}x{2,4}".into())
    });
    let llama = plan_shapes(4096, 8, &[64, 1, 1, 1, 1, 1, 1, 1, 64], &[2, 1, 1, 1, 1, 1, 1, 1, 4], None)?;
    let expected = full_bond_dims(&llama.in_dims, &llama.out_dims);
    out.push(PropertyResult {
        passed: llama.validate().is_ok() && llama.bond_dims == expected,
        ..at_most(S, "nine_factor_plan_4096x8", 0.0, 0.0, format!("bonds {:?}", llama.bond_dims))
    });
    Ok(out)
}

fn bound_suite(streams: &Streams, n: usize) -> Result<Vec<PropertyResult>> {
    let mut rng = streams.stream("verify-bound", "0");
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..n {
        let m = rng.random_range(2..=4);
        let full = random_plan(&mut rng, m, 4)?;
        let caps: Vec<usize> = full.bond_dims[1..m].iter().map(|&d| rng.random_range(1..=d)).collect();
        let plan = plan_shapes(full.rows(), full.cols(), &full.in_dims, &full.out_dims, Some(&caps))?;
        let w = normal_tensor(&mut rng, &[plan.rows(), plan.cols()], 1.0);
        let chain = decompose(&w, &plan)?;
        let measured = w.sub(&contract(&chain)?)?.frobenius_norm();
        let bound = error_bound(&chain);
        // roundoff floor relative to the matrix itself
        let slack = 1e-12 * w.frobenius_norm();
        if measured > bound + slack {
            violations += 1;
        }
        if bound > slack {
            worst_ratio = worst_ratio.max(measured / bound);
        }
    }
    Ok(vec![
        at_most("bound", "violations", violations as f64, 0.0, format!("{n} random truncated decompositions")),
        at_most("bound", "max_error_over_bound", worst_ratio, 1.0 + 1e-8, String::new()),
    ])
}

/// Largest norm-wise relative difference between tape gradients and central
/// differences of `f` over every input.
pub fn finite_difference_error(
    inputs: &[DenseTensor],
    eps: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |xs: &[DenseTensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = match grads.get(v) {
            Some(g) => g.clone(),
            None => DenseTensor::zeros(inputs[k].dims())?,
        };
        let mut xs = inputs.to_vec();
        let mut numeric = vec![0.0; inputs[k].len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = xs[k].data()[e];
            xs[k].data_mut()[e] = orig + eps;
            let up = eval(&xs)?;
            xs[k].data_mut()[e] = orig - eps;
            let down = eval(&xs)?;
            xs[k].data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        let numeric = DenseTensor::new(inputs[k].dims().to_vec(), numeric)?;
        let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
        if scale > 0.0 {
            worst = worst.max(analytic.sub(&numeric)?.frobenius_norm() / scale);
        }
    }
    Ok(worst)
}

fn grad_suite(streams: &Streams) -> Result<Vec<PropertyResult>> {
    const S: &str = "grad";
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-6;
    let n = |id: &str, dims: &[usize]| streams.normal("verify-grad", id, dims, 0.7);
    let mut out = Vec::new();

    let target = n("t23", &[2, 3]);
    let err = finite_difference_error(&[n("a", &[2, 4]), n("b", &[4, 3])], EPS, |t, v| {
        let p = t.matmul(v[0], v[1])?;
        t.mse_loss(p, &target)
    })?;
    out.push(at_most(S, "matmul", err, TOL, String::new()));

    let target = n("t34", &[3, 4]);
    let err = finite_difference_error(&[n("c", &[2, 6]), n("d", &[3, 4])], EPS, |t, v| {
        let r = t.reshape(v[0], &[3, 4])?;
        let s = t.add(r, v[1])?;
        let s = t.scale(s, -1.7);
        let h = t.tanh(s);
        t.mse_loss(h, &target)
    })?;
    out.push(at_most(S, "reshape_add_scale_tanh_mse", err, TOL, String::new()));

    let chains: [(&[usize], &[usize]); 3] = [(&[2, 3], &[3, 2]), (&[2, 2, 2], &[1, 3, 2]), (&[2, 1, 2, 1, 2], &[1, 2, 2, 2, 1])];
    for (ins, outs) in chains {
        let plan = plan_shapes(ins.iter().product(), outs.iter().product(), ins, outs, None)?;
        let factors: Vec<DenseTensor> = (0..plan.len())
            .map(|k| n(&format!("f{}.{k}", plan.len()), &plan.factor_dims(k)))
            .collect();
        let target = n(&format!("tc{}", plan.len()), &[plan.rows(), plan.cols()]);
        let err = finite_difference_error(&factors, EPS, |t, v| {
            let c = t.chain_contract(v, &plan)?;
            let h = t.tanh(c);
            t.mse_loss(h, &target)
        })?;
        out.push(at_most(S, &format!("chain_contract_m{}", plan.len()), err, TOL, format!("{ins:?}x{outs:?}")));
    }

    // whole model: every slot parameter, dense and factored
    let task = SyntheticTask::generate(
        &TaskConfig {
            layers: 1,
            hidden: 4,
            train_size: 8,
            eval_size: 4,
            ..TaskConfig::default()
        },
        streams.seed(),
    )?;
    let mut model = AdaptedModel::with_lora(task.backbone.clone(), LoraConfig { rank: 2, ..LoraConfig::default() })?;
    for id in model.slot_ids() {
        let p = model.slot_mut(&id)?.param_mut(0);
        *p = n(&format!("slot {id}"), p.dims()).scale(0.5);
    }
    let plan = crate::mpo::plan_auto(2, 4, 2, None)?;
    model.over_parameterize(&SlotId::new(0, "proj", Half::A), &plan, streams)?;
    let (x, y) = task.train.all()?;
    let (_, grads) = model.forward_backward(&x, &y)?;
    let mut worst: f64 = 0.0;
    for id in model.slot_ids() {
        for (k, g) in grads[&id].params.iter().enumerate() {
            let mut numeric = g.clone();
            for e in 0..g.len() {
                let mut probe = model.clone();
                let orig = probe.slot(&id)?.params()[k].data()[e];
                probe.slot_mut(&id)?.param_mut(k).data_mut()[e] = orig + EPS;
                let up = probe.loss(&x, &y)?;
                probe.slot_mut(&id)?.param_mut(k).data_mut()[e] = orig - EPS;
                let down = probe.loss(&x, &y)?;
                numeric.data_mut()[e] = (up - down) / (2.0 * EPS);
            }
            let scale = g.frobenius_norm().max(numeric.frobenius_norm());
            if scale > 0.0 {
                worst = worst.max(g.sub(&numeric)?.frobenius_norm() / scale);
            }
        }
    }
    out.push(at_most(S, "model_slots", worst, TOL, "1 block, one factored slot".into()));
    Ok(out)
}

fn small_run(strategy: Strategy, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        strategy,
        task: TaskConfig {
            layers: 2,
            hidden: 16,
            train_size: 512,
            eval_size: 128,
            ..TaskConfig::default()
        },
        train: TrainConfig {
            steps: 120,
            batch_size: 32,
            eval_every: 40,
            ..TrainConfig::default()
        },
        selection: SelectionConfig {
            top_n: 2,
            split: 2,
            interval: 40,
            converge_steps: 80,
            ..SelectionConfig::default()
        },
        ..RunConfig::default()
    }
}

fn merge_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    const S: &str = "merge";
    let mut out = Vec::new();
    let mut worst: f64 = 0.0;
    let mut counts_equal = true;
    for strategy in Strategy::ALL {
        let cfg = small_run(strategy, seed);
        let task = SyntheticTask::generate(&cfg.task, seed)?;
        let run = run_training(&task, &cfg)?;
        let merged = run.model.merged()?;
        counts_equal &= merged.param_count() == task.backbone.param_count();
        let x = Streams::new(seed).normal("verify-merge", strategy.name(), &[cfg.task.hidden, 64], 1.0);
        let factored = run.model.forward(&x)?;
        worst = worst.max(rel_frobenius_error(&factored, &merged.forward(&x)?)?);
    }
    out.push(at_most(S, "merged_vs_factored_rel", worst, 1e-8, "64 inputs per strategy".into()));
    out.push(PropertyResult {
        passed: counts_equal,
        ..at_most(S, "merged_param_count_equals_base", 0.0, 0.0, String::new())
    });

    // swap continuity on a partly trained vanilla model
    let cfg = small_run(Strategy::Lora, seed);
    let task = SyntheticTask::generate(&cfg.task, seed)?;
    let model = run_training(&task, &cfg)?.model;
    let (x, y) = task.eval.all()?;
    let before = model.loss(&x, &y)?;
    let streams = Streams::new(seed);
    let mut rng = streams.stream("verify-swap", "0");
    let ids = model.slot_ids();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let id = ids.choose(&mut rng).expect("slots");
        let (r, c) = model.slot(id)?.shape;
        let m = rng.random_range(2..=4);
        let plan = crate::mpo::plan_auto(r, c, m, None)?;
        let mut swapped = model.clone();
        swapped.over_parameterize(id, &plan, &streams)?;
        worst = worst.max((swapped.loss(&x, &y)? - before).abs() / before);
    }
    out.push(at_most(S, "swap_loss_rel_change", worst, 1e-8, "20 swaps".into()));
    Ok(out)
}

fn selection_suite(seed: u64) -> Result<Vec<PropertyResult>> {
    const S: &str = "selection";
    let mut out = Vec::new();

    let id = SlotId::new(0, "proj", Half::A);
    let mut ledger = ImportanceLedger::new([id.clone()], SelectionMode::Runtime, Grouping::RoleHalf);
    let g = DenseTensor::from_rows(&[vec![1.0, -1.0], vec![0.0, 2.0]])?;
    let w = DenseTensor::from_rows(&[vec![3.0, 0.0], vec![1.0, 1.0]])?;
    let grads = [(
        id.clone(),
        crate::train::SlotGrad {
            matrix: g.clone(),
            params: vec![g],
        },
    )]
    .into_iter()
    .collect();
    ledger.accumulate(&grads, selection::Reduction::AbsAccum)?;
    let hand = ledger.score_runtime(&id, &w, selection::Reduction::AbsAccum)?;
    out.push(at_most(S, "hand_score_2x2", (hand - 5.0).abs(), 0.0, format!("score {hand}")));

    // quota and cardinality
    let ids: Vec<SlotId> = (0..6)
        .flat_map(|l| ["proj", "ffn"].map(move |r| SlotId::new(l, r, Half::A)))
        .collect();
    let mut ledger = ImportanceLedger::new(ids, SelectionMode::Runtime, Grouping::RoleHalf);
    let cfg = SelectionConfig {
        top_n: 4,
        split: 2,
        ..SelectionConfig::default()
    };
    let mut rounds = 0;
    while !ledger.is_complete(cfg.top_n) {
        ledger.select_round(&cfg);
        rounds += 1;
    }
    out.push(at_most(S, "rounds_for_top4_split2", (rounds as f64 - 2.0).abs(), 0.0, format!("{rounds} rounds")));

    // Taylor probe on a trained model
    let cfg = small_run(Strategy::Lora, seed);
    let task = SyntheticTask::generate(&cfg.task, seed)?;
    let model = run_training(&task, &cfg)?.model;
    let (x, y) = task.train.batch(&(0..64).collect::<Vec<_>>())?;
    let eps = [1e-1, 1e-2, 1e-3];
    let mut slopes = Vec::new();
    for id in model.slot_ids() {
        let disc = eps
            .iter()
            .map(|&e| Ok(selection::taylor_consistency_probe(&model, &id, e, &x, &y)?.discrepancy()))
            .collect::<Result<Vec<_>>>()?;
        slopes.push(selection::log_log_slope(&eps, &disc));
    }
    slopes.sort_by(f64::total_cmp);
    let median = slopes[slopes.len() / 2];
    out.push(at_least(S, "taylor_order_median", median, 0.9, format!("{} slots", slopes.len())));

    // the teacher perturbs only proj, so proj-A should outscore ffn-A
    let mut proj = 0.0;
    let mut ffn = 0.0;
    let mut min_score = f64::INFINITY;
    let seeds = 10;
    for s in 0..seeds {
        let cfg = RunConfig {
            seed: seed + s,
            strategy: Strategy::OverRuntime,
            train: TrainConfig {
                steps: 100,
                eval_every: 100,
                ..TrainConfig::default()
            },
            selection: SelectionConfig {
                top_n: 1,
                split: 1,
                interval: 100,
                ..SelectionConfig::default()
            },
            ..RunConfig::default()
        }
        .resolved()?;
        let task = SyntheticTask::generate(&cfg.task, cfg.seed)?;
        let ledger = run_training(&task, &cfg)?.ledger.expect("runtime runs keep a ledger");
        let group_mean = |key: &str| {
            let members = &ledger.groups[key];
            members.iter().map(|id| ledger.scores[id]).sum::<f64>() / members.len() as f64
        };
        proj += group_mean("proj.A") / seeds as f64;
        ffn += group_mean("ffn.A") / seeds as f64;
        min_score = ledger.scores.values().copied().fold(min_score, f64::min);
    }
    out.push(at_least(S, "scores_nonnegative", min_score, 0.0, format!("{seeds} runtime runs")));
    out.push(PropertyResult {
        passed: proj > ffn,
        ..at_least(S, "proj_a_over_ffn_a", proj / ffn, 1.0, format!("mean proj.A {proj:.4e}, ffn.A {ffn:.4e}"))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_checker_catches_wrong_gradient() {
        let x = DenseTensor::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let ok = finite_difference_error(&[x.clone()], 1e-5, |t, v| {
            let s = t.tanh(v[0]);
            t.mse_loss(s, &DenseTensor::zeros(&[1, 2]).unwrap())
        })
        .unwrap();
        assert!(ok < 1e-8);
        // a constant leaf hides the dependence from the tape
        let bad = finite_difference_error(&[x], 1e-5, |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            let s = t.add(c, v[0])?;
            t.mse_loss(s, &DenseTensor::zeros(&[1, 2]).unwrap())
        })
        .unwrap();
        assert!(bad > 0.1);
    }

    #[test]
    fn suite_names() {
        assert_eq!("bound".parse::<Suite>().unwrap(), Suite::Bound);
        assert!("speed".parse::<Suite>().is_err());
    }

    #[test]
    fn bound_and_mpo_suites_pass() {
        let streams = Streams::new(1);
        for p in bound_suite(&streams, 20).unwrap().into_iter().chain(mpo_suite(&streams).unwrap()) {
            assert!(p.passed, "{p:?}");
        }
    }
}
