//! Command-line surface of the `mpo-adapt` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::mpo::{budget, contract, decompose, error_bound, plan_auto, plan_shapes, save_chain, MpoShapePlan};
use crate::run::{run_training, write_run, RunConfig};
use crate::sweep::{run_sweep, thread_count, SweepParam};
use crate::tensor::{read_mpot, rel_frobenius_error};
use crate::train::SyntheticTask;
use crate::verify::{run_suite, Suite};

#[derive(Debug, Parser)]
#[command(name = "mpo-adapt", version, about = "Over-parameterized low-rank adapters via MPO decomposition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print an MPO shape plan and its parameter budget.
    Plan {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, value_delimiter = ',')]
        factors_in: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        factors_out: Option<Vec<usize>>,
        #[arg(long, conflicts_with_all = ["factors_in", "factors_out"])]
        m: Option<usize>,
        /// One cap for every bond, or one per internal bond.
        #[arg(long, value_delimiter = ',')]
        bond_cap: Option<Vec<usize>>,
    },
    /// Decompose an MPOT matrix into a chain directory.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Check the reconstruction error against the truncation bound.
        #[arg(long)]
        verify: bool,
    },
    /// Run one training job and write its run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run self-check suites and print a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one run per (value, seed) cell and report final losses.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the importance ledger of a finished run.
    Importance {
        #[arg(long)]
        run: PathBuf,
    },
}

/// What a command printed and how the process should exit.
#[derive(Debug)]
pub struct Outcome {
    pub report: Value,
    pub exit_code: i32,
}

impl Outcome {
    fn ok(report: Value) -> Self {
        Self { report, exit_code: 0 }
    }
}

/// A plan file: either a bare plan or the output of `plan`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PlanFile {
    Wrapped { plan: MpoShapePlan },
    Bare(MpoShapePlan),
}

#[derive(Debug, Serialize)]
struct PlanReport {
    rows: usize,
    cols: usize,
    plan: MpoShapePlan,
    truncated: bool,
    budget: crate::mpo::BudgetReport,
}

pub fn execute(command: Command) -> Result<Outcome> {
    match command {
        Command::Plan {
            rows,
            cols,
            factors_in,
            factors_out,
            m,
            bond_cap,
        } => cmd_plan(rows, cols, factors_in, factors_out, m, bond_cap.as_deref()),
        Command::Decompose {
            input,
            plan,
            out,
            verify,
        } => cmd_decompose(&input, &plan, &out, verify),
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Verify { suite, seed } => {
            let report = run_suite(suite.parse::<Suite>()?, seed)?;
            Ok(Outcome {
                exit_code: if report.passed { 0 } else { 1 },
                report: serde_json::to_value(report)?,
            })
        }
        Command::Sweep {
            param,
            values,
            seeds,
            config,
            out,
        } => {
            let base = RunConfig::load(&config)?;
            let seeds = seeds.unwrap_or_else(|| vec![base.seed]);
            let report = run_sweep(&base, param.parse::<SweepParam>()?, &values, &seeds, thread_count()?, out.as_deref())?;
            if let Some(dir) = &out {
                fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            }
            Ok(Outcome::ok(serde_json::to_value(report)?))
        }
        Command::Importance { run } => {
            let path = run.join("importance.json");
            if !path.exists() {
                return Err(Error::Config(format!(
                    "{} has no importance.json; only selection strategies record scores",
                    run.display()
                )));
            }
            Ok(Outcome::ok(serde_json::from_slice(&fs::read(&path)?)?))
        }
    }
}

fn cmd_plan(
    rows: usize,
    cols: usize,
    factors_in: Option<Vec<usize>>,
    factors_out: Option<Vec<usize>>,
    m: Option<usize>,
    caps: Option<&[usize]>,
) -> Result<Outcome> {
    let plan = match (factors_in, factors_out, m) {
        (_, _, Some(m)) => plan_auto(rows, cols, m, caps)?,
        (Some(fi), Some(fo), None) => plan_shapes(rows, cols, &fi, &fo, caps)?,
        (Some(fi), None, None) => {
            // the row factors alone already have to match
            let product: usize = fi.iter().product();
            if product != rows {
                return Err(Error::FactorProductMismatch {
                    factors: fi,
                    product,
                    expected: rows,
                });
            }
            return Err(Error::Config("--factors-in needs --factors-out".into()));
        }
        (None, Some(_), None) => return Err(Error::Config("--factors-out needs --factors-in".into())),
        (None, None, None) => return Err(Error::Config("give --m or --factors-in/--factors-out".into())),
    };
    let report = PlanReport {
        rows,
        cols,
        truncated: plan.is_truncated(),
        budget: budget(&plan),
        plan,
    };
    Ok(Outcome::ok(serde_json::to_value(report)?))
}

fn cmd_decompose(input: &Path, plan_path: &Path, out: &Path, verify: bool) -> Result<Outcome> {
    let w = read_mpot(input)?;
    let plan = match serde_json::from_slice::<PlanFile>(&fs::read(plan_path)?) {
        Ok(PlanFile::Wrapped { plan } | PlanFile::Bare(plan)) => plan,
        Err(e) => {
            return Err(Error::Format {
                path: plan_path.to_path_buf(),
                reason: e.to_string(),
            })
        }
    };
    let chain = decompose(&w, &plan)?;
    save_chain(out, &chain)?;
    let bound = error_bound(&chain);
    let mut report = json!({
        "out": out,
        "plan": chain.plan(),
        "truncation_errors": chain.truncation_errors(),
        "error_bound": bound,
        "budget": budget(chain.plan()),
    });
    let mut exit_code = 0;
    if verify {
        let back = contract(&chain)?;
        let measured = w.sub(&back)?.frobenius_norm();
        let norm = w.frobenius_norm();
        // roundoff floor so an exact decomposition (bound 0) is not flagged
        let limit = bound * (1.0 + 1e-8) + 1e-12 * norm;
        let within = measured <= limit;
        report["verify"] = json!({
            "measured_abs": measured,
            "measured_rel": rel_frobenius_error(&w, &back)?,
            "bound_abs": bound,
            "bound_rel": if norm > 0.0 { bound / norm } else { 0.0 },
            "within_bound": within,
        });
        if !within {
            exit_code = 1;
        }
    }
    Ok(Outcome { report, exit_code })
}

fn cmd_train(config: &Path, out: Option<PathBuf>) -> Result<Outcome> {
    let mut cfg = RunConfig::load(config)?;
    if out.is_some() {
        cfg.out_dir = out;
    }
    let Some(dir) = cfg.out_dir.clone() else {
        return Err(Error::Config("no output directory: set out_dir or pass --out".into()));
    };
    let task = SyntheticTask::generate(&cfg.task, cfg.seed)?;
    let outcome = run_training(&task, &cfg)?;
    write_run(&dir, &outcome)?;
    let last = outcome.final_row();
    Ok(Outcome::ok(json!({
        "run_dir": dir,
        "strategy": outcome.config.strategy.name(),
        "seed": outcome.config.seed,
        "final": last,
        "rounds": outcome.rounds(),
    })))
}

/// Parses `args`, runs the command and prints its report; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(outcome) => {
            match serde_json::to_string_pretty(&outcome.report) {
                Ok(text) => println!("{text}"),
                Err(e) => {
                    eprintln!("error: {e}");
                    return 1;
                }
            }
            outcome.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
