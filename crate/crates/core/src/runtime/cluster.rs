use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use super::kernel::KernelRegistry;
use super::memory::MemoryConfig;
use super::report::Report;
use super::worker::{Event, Failure, ReadyOrder, Shared, Snapshot, Worker};
use super::RuntimeError;
use crate::distribution::SystemInfo;
use crate::planner::ExecutionPlan;
use crate::types::{ChunkId, WorkerId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub system: SystemInfo,
    pub memory: MemoryConfig,
    pub order: ReadyOrder,
    /// A synchronization fails once no task has completed for this long.
    pub watchdog: Duration,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            system: SystemInfo {
                workers: 1,
                devices_per_worker: 1,
            },
            memory: MemoryConfig::default(),
            order: ReadyOrder::Fifo,
            watchdog: Duration::from_secs(30),
        }
    }
}

/// Running workers of a simulated cluster.
pub struct Cluster {
    config: ClusterConfig,
    inboxes: Vec<Sender<Event>>,
    threads: Vec<JoinHandle<Report>>,
    failure: Arc<Failure>,
    progress: Arc<AtomicU64>,
}

impl Cluster {
    pub fn start(config: ClusterConfig, kernels: Arc<KernelRegistry>) -> Result<Self, RuntimeError> {
        let sys = config.system;
        if sys.workers == 0 || sys.devices_per_worker == 0 {
            return Err(RuntimeError::Config("need at least one worker and one device".into()));
        }
        if config.memory.granularity == 0 {
            return Err(RuntimeError::Config("allocation granularity must be positive".into()));
        }
        let channels: Vec<(Sender<Event>, Receiver<Event>)> = (0..sys.workers).map(|_| unbounded()).collect();
        let inboxes: Vec<Sender<Event>> = channels.iter().map(|c| c.0.clone()).collect();
        let failure = Arc::new(Failure::default());
        let progress = Arc::new(AtomicU64::new(0));
        let epoch = Instant::now();
        let mut cluster = Cluster {
            config,
            inboxes: inboxes.clone(),
            threads: vec![],
            failure: failure.clone(),
            progress: progress.clone(),
        };
        for (w, (tx, rx)) in channels.into_iter().enumerate() {
            let shared = Shared {
                failure: failure.clone(),
                progress: progress.clone(),
                epoch,
                kernels: kernels.clone(),
            };
            let handle = Worker::spawn(
                WorkerId(w),
                sys.devices_per_worker,
                config.memory,
                config.order,
                rx,
                tx,
                inboxes.clone(),
                shared,
            )?;
            cluster.threads.push(handle);
        }
        Ok(cluster)
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    fn check(&self) -> Result<(), RuntimeError> {
        match self.failure.get() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Hands every task to its worker. Returns immediately.
    pub fn submit(&self, plan: ExecutionPlan) -> Result<(), RuntimeError> {
        self.check()?;
        let mut per: BTreeMap<WorkerId, Vec<_>> = BTreeMap::new();
        for t in plan.tasks {
            per.entry(t.worker).or_default().push(t);
        }
        for (w, tasks) in per {
            let inbox = self
                .inboxes
                .get(w.0)
                .ok_or_else(|| RuntimeError::Protocol(format!("plan targets {w}, which does not exist")))?;
            inbox.send(Event::Submit(tasks)).map_err(|_| RuntimeError::Disconnected(w))?;
        }
        Ok(())
    }

    /// Waits for `rx`, failing on a raised error or a stall.
    fn wait<T>(&self, worker: WorkerId, rx: &Receiver<T>) -> Result<T, RuntimeError> {
        let mut last = self.progress.load(Ordering::SeqCst);
        let mut since = Instant::now();
        loop {
            match rx.recv_timeout(Duration::from_millis(10)) {
                Ok(v) => return Ok(v),
                Err(RecvTimeoutError::Disconnected) => {
                    self.check()?;
                    return Err(RuntimeError::Disconnected(worker));
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.check()?;
                    let now = self.progress.load(Ordering::SeqCst);
                    if now != last {
                        last = now;
                        since = Instant::now();
                    } else if since.elapsed() >= self.config.watchdog {
                        let e = RuntimeError::Stalled(self.config.watchdog);
                        self.failure.raise(e.clone());
                        return Err(e);
                    }
                }
            }
        }
    }

    /// Blocks until every submitted task has finished.
    pub fn synchronize(&self) -> Result<(), RuntimeError> {
        let mut replies = vec![];
        for (w, inbox) in self.inboxes.iter().enumerate() {
            let (tx, rx) = bounded(1);
            inbox
                .send(Event::Sync(tx))
                .map_err(|_| RuntimeError::Disconnected(WorkerId(w)))?;
            replies.push(rx);
        }
        for (w, rx) in replies.iter().enumerate() {
            self.wait(WorkerId(w), rx)?;
        }
        self.check()
    }

    /// Current contents of chunks held by `worker`. Call after `synchronize`.
    pub fn fetch(&self, worker: WorkerId, chunks: Vec<ChunkId>) -> Result<Snapshot, RuntimeError> {
        let (tx, rx) = bounded(1);
        self.inboxes
            .get(worker.0)
            .ok_or_else(|| RuntimeError::Protocol(format!("{worker} does not exist")))?
            .send(Event::Fetch(chunks, tx))
            .map_err(|_| RuntimeError::Disconnected(worker))?;
        self.wait(worker, &rx)?
    }

    /// Stops all workers and merges their statistics.
    pub fn shutdown(mut self) -> Report {
        self.stop()
    }

    fn stop(&mut self) -> Report {
        for inbox in &self.inboxes {
            let _ = inbox.send(Event::Shutdown);
        }
        let mut report = Report {
            throttle_bytes: self.config.memory.throttle,
            ..Report::default()
        };
        for t in self.threads.drain(..) {
            if let Ok(r) = t.join() {
                report.merge(r);
            }
        }
        report
    }

    pub fn error(&self) -> Option<RuntimeError> {
        self.failure.get()
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        if !self.threads.is_empty() {
            self.stop();
        }
    }
}
