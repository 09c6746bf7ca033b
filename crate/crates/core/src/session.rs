//! Driver API: plan launches and run them on a simulated cluster.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::distribution::{DataDistribution, SystemInfo};
use crate::geometry::Rect;
use crate::planner::{ExecutionPlan, Launch, PlanError, Planner, PlannerOptions};
use crate::registry::{ArrayHandle, RegistryError};
use crate::runtime::data::{copy_region, extract_region};
use crate::runtime::kernel::KernelRegistry;
use crate::runtime::{Cluster, ClusterConfig, MemoryConfig, ReadyOrder, Report, RuntimeError};
use crate::types::{ArrayId, Buffer, ChunkId, DType, Value, WorkerId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error(transparent)]
    Plan(#[from] PlanError),

    #[error(transparent)]
    Runtime(#[from] RuntimeError),

    #[error(transparent)]
    Registry(#[from] RegistryError),

    #[error("replicas {first} and {second} of array {array:?} disagree on {region}")]
    ReplicaMismatch {
        array: ArrayId,
        first: ChunkId,
        second: ChunkId,
        region: Rect,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub system: SystemInfo,
    pub memory: MemoryConfig,
    pub order: ReadyOrder,
    pub planner: PlannerOptions,
    pub watchdog: Duration,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let cluster = ClusterConfig::default();
        Self {
            system: cluster.system,
            memory: cluster.memory,
            order: cluster.order,
            planner: PlannerOptions::default(),
            watchdog: cluster.watchdog,
        }
    }
}

pub struct Session {
    planner: Planner,
    cluster: Cluster,
    plans: Vec<ExecutionPlan>,
    keep_plans: bool,
}

impl Session {
    pub fn new(config: SessionConfig, kernels: Arc<KernelRegistry>) -> Result<Self, SessionError> {
        let cluster = Cluster::start(
            ClusterConfig {
                system: config.system,
                memory: config.memory,
                order: config.order,
                watchdog: config.watchdog,
            },
            kernels.clone(),
        )?;
        Ok(Self {
            planner: Planner::new(config.system, kernels, config.planner),
            cluster,
            plans: vec![],
            keep_plans: false,
        })
    }

    /// Keep a copy of every submitted plan, retrievable with [`Session::plans`].
    pub fn record_plans(&mut self, on: bool) {
        self.keep_plans = on;
    }

    pub fn plans(&self) -> &[ExecutionPlan] {
        &self.plans
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    pub fn system(&self) -> SystemInfo {
        self.planner.system()
    }

    fn submit(&mut self, plan: ExecutionPlan) -> Result<(), SessionError> {
        if plan.is_empty() {
            return Ok(());
        }
        if self.keep_plans {
            self.plans.push(plan.clone());
        }
        self.cluster.submit(plan)?;
        Ok(())
    }

    pub fn create_array(
        &mut self,
        domain: Rect,
        dtype: DType,
        distribution: DataDistribution,
        fill: Option<Value>,
    ) -> Result<ArrayHandle, SessionError> {
        Ok(self.planner.create_array(domain, dtype, distribution, fill)?)
    }

    /// Plans a launch and submits it without waiting for completion.
    pub fn launch(&mut self, launch: &Launch<'_>) -> Result<(), SessionError> {
        let plan = self.planner.plan_launch(launch)?;
        self.submit(plan)
    }

    pub fn delete_array(&mut self, id: ArrayId) -> Result<(), SessionError> {
        self.planner.delete_array(id)?;
        let plan = self.planner.flush();
        self.submit(plan)
    }

    pub fn synchronize(&mut self) -> Result<(), SessionError> {
        let plan = self.planner.flush();
        self.submit(plan)?;
        self.cluster.synchronize()?;
        Ok(())
    }

    /// Gathers a whole array after verifying that overlapping chunks hold
    /// identical data.
    pub fn read_array(&mut self, id: ArrayId) -> Result<Buffer, SessionError> {
        self.synchronize()?;
        let handle = self.planner.registry().array(id)?.clone();
        let mut per: BTreeMap<WorkerId, Vec<ChunkId>> = BTreeMap::new();
        for (desc, &c) in handle.distribution.chunks().iter().zip(&handle.chunks) {
            per.entry(desc.home.worker_id()).or_default().push(c);
        }
        let mut parts = vec![];
        for (w, chunks) in per {
            parts.extend(self.cluster.fetch(w, chunks)?);
        }
        parts.sort_by_key(|(m, _)| m.id);
        let mut out = Buffer::zeros(handle.dtype, handle.domain.volume() as usize);
        for (i, (meta, data)) in parts.iter().enumerate() {
            for (other, other_data) in &parts[..i] {
                let overlap = meta.region.intersect(&other.region).expect("same rank");
                if overlap.is_empty() {
                    continue;
                }
                if extract_region(data, &meta.region, &overlap) != extract_region(other_data, &other.region, &overlap) {
                    return Err(SessionError::ReplicaMismatch {
                        array: id,
                        first: other.id,
                        second: meta.id,
                        region: overlap,
                    });
                }
            }
            copy_region(data, &meta.region, &mut out, &handle.domain, &meta.region);
        }
        Ok(out)
    }

    /// Waits for outstanding work, stops the cluster and returns its report.
    pub fn finish(mut self) -> Result<Report, SessionError> {
        let outcome = self.synchronize();
        let report = self.cluster.shutdown();
        outcome.map(|_| report)
    }
}
