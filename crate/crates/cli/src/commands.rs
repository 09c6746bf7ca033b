//! The `plan`, `run` and `fuzz` subcommands.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lightning_core::planner::{export_dot, ExecutionPlan, PlannerOptions};
use lightning_core::runtime::{DiskMode, ReadyOrder, Report};

use crate::fuzz::{registry_for, run_campaign, FuzzConfig};
use crate::oracle::{compare, serial_run};
use crate::scenario::Scenario;
use crate::simulate::{plan_only, simulate, RunError, RunOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_MISMATCH: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lightning-sim", version, about = "Plan and run data-annotated kernels on a simulated multi-GPU cluster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the task graph of a scenario without running it.
    Plan(PlanArgs),
    /// Execute a scenario and optionally check it against the serial reference.
    Run(RunArgs),
    /// Differential testing on random scenarios.
    Fuzz(FuzzArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    pub scenario: PathBuf,
    /// Write the combined task graph as Graphviz.
    #[arg(long)]
    pub dot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub scenario: PathBuf,
    /// Compare every array with the serial reference execution.
    #[arg(long)]
    pub oracle: bool,
    /// Shuffle ready tasks with this seed instead of FIFO order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write counters (and the oracle comparison) as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub devices: Option<usize>,
    /// Bytes per device.
    #[arg(long)]
    pub device_capacity: Option<u64>,
    /// Bytes of host memory per worker.
    #[arg(long)]
    pub host_capacity: Option<u64>,
    /// Bytes that may be staged at once per device and per host.
    #[arg(long)]
    pub throttle: Option<u64>,
    #[arg(long, value_enum)]
    pub disk: Option<DiskArg>,
    /// Seconds without progress before the run is declared stuck.
    #[arg(long, default_value_t = 60)]
    pub watchdog: u64,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum DiskArg {
    File,
    Memory,
}

#[derive(Debug, Args)]
pub struct FuzzArgs {
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drop dependencies between launches (fault injection).
    #[arg(long)]
    pub no_cross_launch_deps: bool,
    /// Save the first failing scenario here.
    #[arg(long)]
    pub save_failure: Option<PathBuf>,
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> i32 {
    let code = match cli.command {
        Command::Plan(a) => plan(&a, out),
        Command::Run(a) => run(&a, out),
        Command::Fuzz(a) => fuzz(&a, out),
    };
    code.unwrap_or_else(|e| {
        let _ = writeln!(out, "error: {e:#}");
        EXIT_INVALID
    })
}

fn load(path: &PathBuf, out: &mut dyn Write) -> Result<Option<Scenario>> {
    match Scenario::load(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) => {
            writeln!(out, "invalid scenario: {e:#}")?;
            Ok(None)
        }
    }
}

pub fn plan(args: &PlanArgs, out: &mut dyn Write) -> Result<i32> {
    let Some(scenario) = load(&args.scenario, out)? else {
        return Ok(EXIT_INVALID);
    };
    let kernels = Arc::new(registry_for(&scenario)?);
    let plans = match plan_only(&scenario, kernels) {
        Ok(p) => p,
        Err(e) => {
            writeln!(out, "{e}")?;
            return Ok(EXIT_INVALID);
        }
    };
    let mut all = ExecutionPlan::default();
    for p in plans {
        all.extend(p);
    }
    writeln!(out, "{} tasks", all.len())?;
    for ((worker, kind), n) in all.counts() {
        writeln!(out, "  worker {:<3} {kind:<8} {n}", worker.0)?;
    }
    if let Some(path) = &args.dot {
        std::fs::write(path, export_dot(&all))?;
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(EXIT_OK)
}

fn apply_overrides(scenario: &mut Scenario, args: &RunArgs) {
    let sys = &mut scenario.system;
    if let Some(w) = args.workers {
        sys.workers = w;
    }
    if let Some(d) = args.devices {
        sys.devices_per_worker = d;
    }
    if let Some(c) = args.device_capacity {
        sys.device_capacity = c;
    }
    if let Some(c) = args.host_capacity {
        sys.host_capacity = c;
    }
    if let Some(t) = args.throttle {
        sys.throttle = t;
    }
    if let Some(d) = args.disk {
        sys.disk = match d {
            DiskArg::File => DiskMode::File,
            DiskArg::Memory => DiskMode::Memory,
        };
    }
    if args.seed.is_some() {
        scenario.seed = args.seed;
    }
}

fn print_counters(report: &Report, out: &mut dyn Write) -> Result<()> {
    let kinds = ["Create", "Delete", "Execute", "Copy", "Send", "Recv", "Reduce"];
    let counts: Vec<String> = kinds.iter().map(|k| format!("{k}={}", report.task_count(k))).collect();
    writeln!(out, "tasks: {}", counts.join(" "))?;
    writeln!(out, "bytes sent: {}  received: {}", report.bytes_sent, report.bytes_received)?;
    writeln!(out, "evictions: {}", report.evictions)?;
    for (k, v) in &report.bytes_moved {
        writeln!(out, "  moved {k}: {v}")?;
    }
    writeln!(
        out,
        "throttle: {} bytes, {} checks, {} violations",
        report.throttle_bytes, report.throttle_checks, report.throttle_violations
    )?;
    Ok(())
}

pub fn run(args: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let Some(mut scenario) = load(&args.scenario, out)? else {
        return Ok(EXIT_INVALID);
    };
    apply_overrides(&mut scenario, args);
    let kernels = registry_for(&scenario)?;
    let expected = if args.oracle {
        match serial_run(&scenario, &kernels) {
            Ok(e) => Some(e),
            Err(e) => {
                writeln!(out, "invalid scenario: {e:#}")?;
                return Ok(EXIT_INVALID);
            }
        }
    } else {
        None
    };
    let options = RunOptions {
        order: scenario.seed.map_or(ReadyOrder::Fifo, ReadyOrder::Random),
        planner: PlannerOptions::default(),
        watchdog: Duration::from_secs(args.watchdog),
    };
    let started = Instant::now();
    let outcome = match simulate(&scenario, Arc::new(kernels), options, false) {
        Ok(o) => o,
        Err(e) => {
            writeln!(out, "{e}")?;
            return Ok(match e {
                RunError::Invalid(_) => EXIT_INVALID,
                RunError::Runtime(_) => EXIT_RUNTIME,
                RunError::Incoherent(_) => EXIT_MISMATCH,
            });
        }
    };
    writeln!(
        out,
        "{}: {} launches on {}x{} in {:.2?}",
        if scenario.name.is_empty() { "scenario" } else { &scenario.name },
        scenario.expanded_launches().len(),
        scenario.system.workers,
        scenario.system.devices_per_worker,
        started.elapsed()
    )?;
    print_counters(&outcome.report, out)?;

    let mut code = EXIT_OK;
    let json = match expected {
        Some(expected) => {
            let cmp = compare(&expected, &outcome.arrays, Some(outcome.report));
            for a in &cmp.arrays {
                writeln!(
                    out,
                    "  {:<12} {} max abs {:.3e} max rel {:.3e}",
                    a.name,
                    if a.pass { "ok      " } else { "MISMATCH" },
                    a.max_abs_error,
                    a.max_rel_error
                )?;
            }
            writeln!(out, "oracle: {}", if cmp.pass { "pass" } else { "FAIL" })?;
            if !cmp.pass {
                code = EXIT_MISMATCH;
            }
            serde_json::to_string_pretty(&cmp)?
        }
        None => outcome.report.to_json(),
    };
    if let Some(path) = &args.report {
        std::fs::write(path, json)?;
    }
    Ok(code)
}

pub fn fuzz(args: &FuzzArgs, out: &mut dyn Write) -> Result<i32> {
    let config = FuzzConfig {
        cases: args.cases,
        seed: args.seed,
        planner: PlannerOptions {
            cross_launch_deps: !args.no_cross_launch_deps,
        },
    };
    let failure = run_campaign(&config, |_, _| {})?;
    match failure {
        None => {
            writeln!(out, "{} cases passed (seed {})", args.cases, args.seed)?;
            Ok(EXIT_OK)
        }
        Some(f) => {
            writeln!(out, "case {} failed (scenario seed {}): {}", f.case, f.seed, f.message)?;
            writeln!(out, "reproduces on rerun: {}", if f.reproduced { "yes" } else { "no" })?;
            if let Some(path) = &args.save_failure {
                f.scenario.save(path)?;
                writeln!(out, "saved {}", path.display())?;
            }
            Ok(EXIT_MISMATCH)
        }
    }
}
