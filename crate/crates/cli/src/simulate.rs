//! Runs a scenario on the simulated cluster.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use lightning_core::annotation::parse_annotation;
use lightning_core::planner::{ExecutionPlan, Launch, LaunchArg, Planner, PlannerOptions};
use lightning_core::runtime::kernel::KernelRegistry;
use lightning_core::runtime::{ReadyOrder, Report, RuntimeError};
use lightning_core::session::{Session, SessionConfig, SessionError};
use lightning_core::types::ArrayId;

use crate::oracle::ArrayContents;
use crate::scenario::{ArgSpec, Scenario};

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub order: ReadyOrder,
    pub planner: PlannerOptions,
    pub watchdog: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            order: ReadyOrder::Fifo,
            planner: PlannerOptions::default(),
            watchdog: Duration::from_secs(30),
        }
    }
}

impl RunOptions {
    pub fn for_scenario(scenario: &Scenario) -> Self {
        Self {
            order: scenario.seed.map_or(ReadyOrder::Fifo, ReadyOrder::Random),
            ..Self::default()
        }
    }
}

/// Why a run did not produce results.
#[derive(Debug)]
pub enum RunError {
    /// The scenario is malformed or rejected by the planner.
    Invalid(anyhow::Error),
    /// The runtime failed while executing a valid plan.
    Runtime(anyhow::Error),
    /// Replicas of an array ended up with different contents.
    Incoherent(anyhow::Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Invalid(e) => write!(f, "invalid scenario: {e:#}"),
            RunError::Runtime(e) => write!(f, "runtime error: {e:#}"),
            RunError::Incoherent(e) => write!(f, "incoherent result: {e:#}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<SessionError> for RunError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Plan(_) | SessionError::Registry(_) => RunError::Invalid(e.into()),
            SessionError::Runtime(RuntimeError::Config(_)) => RunError::Invalid(e.into()),
            SessionError::Runtime(_) => RunError::Runtime(e.into()),
            SessionError::ReplicaMismatch { .. } => RunError::Incoherent(e.into()),
        }
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> RunError {
    RunError::Invalid(e.into())
}

pub struct RunOutcome {
    pub arrays: ArrayContents,
    pub report: Report,
    /// Every submitted plan, when requested.
    pub plans: Vec<ExecutionPlan>,
}

fn resolve_args(args: &[ArgSpec], ids: &HashMap<String, ArrayId>) -> Vec<LaunchArg> {
    args.iter()
        .map(|a| match a {
            ArgSpec::Array(name) => LaunchArg::Array(ids[name]),
            ArgSpec::Scalar(n) => LaunchArg::Scalar(ArgSpec::scalar_value(n)),
        })
        .collect()
}

pub fn simulate(
    scenario: &Scenario,
    kernels: Arc<KernelRegistry>,
    options: RunOptions,
    keep_plans: bool,
) -> Result<RunOutcome, RunError> {
    scenario.validate().map_err(invalid)?;
    let system = scenario.system.info();
    let config = SessionConfig {
        system,
        memory: scenario.system.memory(),
        order: options.order,
        planner: options.planner,
        watchdog: options.watchdog,
    };
    let mut session = Session::new(config, kernels)?;
    session.record_plans(keep_plans);
    let mut ids = HashMap::new();
    for a in &scenario.arrays {
        let dist = a.distribution(&system).map_err(invalid)?;
        let handle = session.create_array(a.domain().map_err(invalid)?, a.dtype, dist, a.fill_value())?;
        ids.insert(a.name.clone(), handle.id);
    }
    for l in scenario.expanded_launches() {
        let annotation = parse_annotation(&l.annotation).map_err(invalid)?;
        let work = l.work(&system).map_err(invalid)?;
        session.launch(&Launch {
            kernel: &l.kernel,
            grid: l.grid().map_err(invalid)?,
            block_size: l.block_size().map_err(invalid)?,
            work: &work,
            args: resolve_args(&l.args, &ids),
            annotation: &annotation,
        })?;
    }
    let mut arrays = ArrayContents::new();
    for a in &scenario.arrays {
        arrays.insert(a.name.clone(), session.read_array(ids[&a.name])?);
    }
    let plans = session.plans().to_vec();
    let report = session.finish()?;
    Ok(RunOutcome { arrays, report, plans })
}

/// Plans every launch without executing anything. The first plan carries
/// the Create tasks of all arrays.
pub fn plan_only(scenario: &Scenario, kernels: Arc<KernelRegistry>) -> Result<Vec<ExecutionPlan>, RunError> {
    scenario.validate().map_err(invalid)?;
    let system = scenario.system.info();
    let mut planner = Planner::new(system, kernels, PlannerOptions::default());
    let mut ids = HashMap::new();
    for a in &scenario.arrays {
        let dist = a.distribution(&system).map_err(invalid)?;
        let handle = planner
            .create_array(a.domain().map_err(invalid)?, a.dtype, dist, a.fill_value())
            .map_err(invalid)?;
        ids.insert(a.name.clone(), handle.id);
    }
    let mut plans = vec![];
    for l in scenario.expanded_launches() {
        let annotation = parse_annotation(&l.annotation).map_err(invalid)?;
        let work = l.work(&system).map_err(invalid)?;
        let plan = planner
            .plan_launch(&Launch {
                kernel: &l.kernel,
                grid: l.grid().map_err(invalid)?,
                block_size: l.block_size().map_err(invalid)?,
                work: &work,
                args: resolve_args(&l.args, &ids),
                annotation: &annotation,
            })
            .map_err(invalid)?;
        plan.validate().map_err(|e| RunError::Runtime(anyhow::anyhow!(e)))?;
        plans.push(plan);
    }
    let rest = planner.flush();
    if !rest.is_empty() {
        plans.push(rest);
    }
    Ok(plans)
}
