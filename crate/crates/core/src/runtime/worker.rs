//! One worker: a scheduler thread that owns the worker's memory and runs
//! Send/Recv/Delete inline, plus one thread per device for compute and
//! on-device data movement.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::{Mutex, RwLockReadGuard, RwLockWriteGuard};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{copy_region, extract_region, reduce_region};
use super::kernel::{KernelArgs, KernelRegistry};
use super::memory::{MemoryConfig, MemoryManager, Need, SharedBuffer};
use super::report::{Report, TaskTiming};
use super::RuntimeError;
use crate::annotation::AccessMode;
use crate::planner::{ExecArg, MessageTag, Task, TaskKind};
use crate::registry::{ChunkMeta, Effect};
use crate::types::{Buffer, ChunkId, TaskId, WorkerId};

/// Order in which a worker starts tasks whose dependencies are satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadyOrder {
    #[default]
    Fifo,
    /// Uniformly random among ready tasks; reproducible from the seed.
    Random(u64),
}

/// First error raised anywhere in the cluster; stops every worker.
#[derive(Debug, Default)]
pub(crate) struct Failure {
    raised: AtomicBool,
    error: Mutex<Option<RuntimeError>>,
}

impl Failure {
    pub(crate) fn raise(&self, error: RuntimeError) {
        let mut slot = self.error.lock();
        if slot.is_none() {
            *slot = Some(error);
        }
        self.raised.store(true, Ordering::SeqCst);
    }

    pub(crate) fn is_raised(&self) -> bool {
        self.raised.load(Ordering::SeqCst)
    }

    pub(crate) fn get(&self) -> Option<RuntimeError> {
        self.error.lock().clone()
    }
}

pub(crate) type Snapshot = Vec<(ChunkMeta, Buffer)>;

pub(crate) enum Event {
    Submit(Vec<Task>),
    Message {
        from: WorkerId,
        tag: MessageTag,
        data: Buffer,
    },
    Done {
        task: TaskId,
        start: Instant,
        outcome: Result<(), RuntimeError>,
    },
    Sync(Sender<()>),
    Fetch(Vec<ChunkId>, Sender<Result<Snapshot, RuntimeError>>),
    Shutdown,
}

pub(crate) struct Shared {
    pub failure: Arc<Failure>,
    /// Completed task count over all workers; the watchdog looks for stalls.
    pub progress: Arc<AtomicU64>,
    pub epoch: Instant,
    pub kernels: Arc<KernelRegistry>,
}

struct DeviceJob {
    task: Task,
    buffers: HashMap<ChunkId, (ChunkMeta, SharedBuffer)>,
}

struct Pending {
    task: Task,
    needs: Vec<(ChunkId, Need)>,
    waiting: usize,
    ready_at: Option<Instant>,
}

pub(crate) struct Worker {
    id: WorkerId,
    memory: MemoryManager,
    inbox: Receiver<Event>,
    peers: Vec<Sender<Event>>,
    devices: Vec<Sender<DeviceJob>>,
    device_threads: Vec<JoinHandle<()>>,
    shared: Shared,
    pending: HashMap<TaskId, Pending>,
    dependents: HashMap<TaskId, Vec<TaskId>>,
    finished: HashSet<TaskId>,
    ready: VecDeque<TaskId>,
    blocked: VecDeque<TaskId>,
    in_flight: HashMap<TaskId, Vec<ChunkId>>,
    mailbox: HashMap<(WorkerId, MessageTag), Buffer>,
    recv_index: HashMap<(WorkerId, MessageTag), TaskId>,
    sync_waiters: Vec<Sender<()>>,
    rng: Option<ChaCha8Rng>,
    timings: Vec<TaskTiming>,
    bytes_sent: u64,
    bytes_received: u64,
}

impl Worker {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn spawn(
        id: WorkerId,
        devices: usize,
        memory: MemoryConfig,
        order: ReadyOrder,
        inbox: Receiver<Event>,
        self_tx: Sender<Event>,
        peers: Vec<Sender<Event>>,
        shared: Shared,
    ) -> Result<JoinHandle<Report>, RuntimeError> {
        let memory = MemoryManager::new(id.0, devices, memory)?;
        let mut device_tx = vec![];
        let mut device_threads = vec![];
        for d in 0..devices {
            let (tx, rx) = unbounded::<DeviceJob>();
            let done = self_tx.clone();
            let kernels = shared.kernels.clone();
            let handle = std::thread::Builder::new()
                .name(format!("w{}-gpu{d}", id.0))
                .spawn(move || {
                    for job in rx {
                        let start = Instant::now();
                        let outcome = run_on_device(&job, &kernels);
                        let _ = done.send(Event::Done {
                            task: job.task.id,
                            start,
                            outcome,
                        });
                    }
                })
                .expect("spawn device thread");
            device_tx.push(tx);
            device_threads.push(handle);
        }
        let rng = match order {
            ReadyOrder::Fifo => None,
            ReadyOrder::Random(seed) => Some(ChaCha8Rng::seed_from_u64(
                seed ^ (id.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            )),
        };
        let worker = Worker {
            id,
            memory,
            inbox,
            peers,
            devices: device_tx,
            device_threads,
            shared,
            pending: HashMap::new(),
            dependents: HashMap::new(),
            finished: HashSet::new(),
            ready: VecDeque::new(),
            blocked: VecDeque::new(),
            in_flight: HashMap::new(),
            mailbox: HashMap::new(),
            recv_index: HashMap::new(),
            sync_waiters: vec![],
            rng,
            timings: vec![],
            bytes_sent: 0,
            bytes_received: 0,
        };
        Ok(std::thread::Builder::new()
            .name(format!("w{}", id.0))
            .spawn(move || worker.run())
            .expect("spawn worker thread"))
    }

    fn run(mut self) -> Report {
        loop {
            if self.shared.failure.is_raised() {
                break;
            }
            let event = match self.inbox.recv_timeout(Duration::from_millis(20)) {
                Ok(e) => e,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => break,
            };
            if matches!(event, Event::Shutdown) {
                break;
            }
            if let Err(e) = self.handle(event).and_then(|_| self.pump()) {
                self.shared.failure.raise(e);
                break;
            }
            if self.pending.is_empty() {
                for w in self.sync_waiters.drain(..) {
                    let _ = w.send(());
                }
            }
        }
        self.devices.clear();
        for t in self.device_threads.drain(..) {
            let _ = t.join();
        }
        self.report()
    }

    fn report(&self) -> Report {
        let stats = self.memory.stats().clone();
        Report {
            tasks: self.timings.clone(),
            evictions: stats.evictions,
            compactions: stats.compactions,
            bytes_moved: stats.bytes_moved,
            bytes_sent: self.bytes_sent,
            bytes_received: self.bytes_received,
            throttle_bytes: self.memory.config().throttle,
            throttle_checks: stats.throttle_checks,
            throttle_violations: stats.throttle_violations,
            peak_staged: stats.peak_staged,
        }
    }

    fn handle(&mut self, event: Event) -> Result<(), RuntimeError> {
        match event {
            Event::Submit(tasks) => self.submit(tasks),
            Event::Message { from, tag, data } => {
                self.mailbox.insert((from, tag), data);
                if let Some(&id) = self.recv_index.get(&(from, tag)) {
                    if self.pending[&id].waiting == 0 {
                        self.mark_ready(id);
                    }
                }
                Ok(())
            }
            Event::Done { task, start, outcome } => {
                outcome?;
                let chunks = self.in_flight.remove(&task).unwrap_or_default();
                self.complete(task, start, &chunks);
                Ok(())
            }
            Event::Sync(reply) => {
                self.sync_waiters.push(reply);
                Ok(())
            }
            Event::Fetch(chunks, reply) => {
                let result = chunks
                    .into_iter()
                    .map(|c| Ok((self.memory.meta(c)?, self.memory.snapshot(c)?)))
                    .collect();
                let _ = reply.send(result);
                Ok(())
            }
            Event::Shutdown => Ok(()),
        }
    }

    fn needs(&self, kind: &TaskKind) -> Result<Vec<(ChunkId, Need)>, RuntimeError> {
        let on_home = |c: ChunkId| -> Result<(ChunkId, Need), RuntimeError> {
            Ok((c, Need::Device(self.memory.meta(c)?.home.device)))
        };
        Ok(match kind {
            TaskKind::Delete { .. } => vec![],
            TaskKind::Send { chunk, .. } | TaskKind::Recv { chunk, .. } => vec![(*chunk, Need::Memory)],
            other => other
                .accesses()
                .into_iter()
                .map(|(c, _)| on_home(c))
                .collect::<Result<_, _>>()?,
        })
    }

    fn submit(&mut self, tasks: Vec<Task>) -> Result<(), RuntimeError> {
        for task in tasks {
            if task.worker != self.id {
                return Err(RuntimeError::Protocol(format!("{} was sent to {}", task.id, self.id)));
            }
            if let TaskKind::Create { chunk, .. } = &task.kind {
                self.memory.register(*chunk);
            }
            let needs = self.needs(&task.kind)?;
            self.memory.check_footprint(&needs)?;
            let mut waiting = 0;
            for d in &task.deps {
                if self.finished.contains(d) {
                    continue;
                }
                if !self.pending.contains_key(d) {
                    return Err(RuntimeError::Protocol(format!(
                        "{} depends on {d}, which this worker never received",
                        task.id
                    )));
                }
                waiting += 1;
                self.dependents.entry(*d).or_default().push(task.id);
            }
            if let TaskKind::Recv { peer, tag, .. } = &task.kind {
                self.recv_index.insert((*peer, *tag), task.id);
            }
            let id = task.id;
            self.pending.insert(
                id,
                Pending {
                    task,
                    needs,
                    waiting,
                    ready_at: None,
                },
            );
            if waiting == 0 {
                self.mark_ready(id);
            }
        }
        Ok(())
    }

    fn mark_ready(&mut self, id: TaskId) {
        let p = self.pending.get_mut(&id).expect("pending task");
        if let TaskKind::Recv { peer, tag, .. } = &p.task.kind {
            if !self.mailbox.contains_key(&(*peer, *tag)) {
                return;
            }
        }
        if p.ready_at.is_none() {
            p.ready_at = Some(Instant::now());
            self.ready.push_back(id);
        }
    }

    fn next_ready(&mut self) -> Option<TaskId> {
        match &mut self.rng {
            None => self.ready.pop_front(),
            Some(_) if self.ready.is_empty() => None,
            Some(rng) => {
                let i = rng.gen_range(0..self.ready.len());
                self.ready.remove(i)
            }
        }
    }

    /// Starts whatever can be staged: blocked tasks first, in FIFO order,
    /// then newly ready ones.
    fn pump(&mut self) -> Result<(), RuntimeError> {
        for _ in 0..self.blocked.len() {
            let id = self.blocked.pop_front().expect("counted");
            if !self.try_start(id)? {
                self.blocked.push_back(id);
            }
        }
        while let Some(id) = self.next_ready() {
            if !self.try_start(id)? {
                self.blocked.push_back(id);
            }
        }
        if let Some(id) = self.blocked.front() {
            if self.in_flight.is_empty() {
                return Err(RuntimeError::Protocol(format!(
                    "{} cannot be staged although nothing else is running on {}",
                    id, self.id
                )));
            }
        }
        Ok(())
    }

    /// Stages and starts one task; `false` if it has to wait for memory.
    fn try_start(&mut self, id: TaskId) -> Result<bool, RuntimeError> {
        let p = &self.pending[&id];
        let Some(staged) = self.memory.stage(&p.needs)? else {
            return Ok(false);
        };
        let chunks: Vec<ChunkId> = p.needs.iter().map(|n| n.0).collect();
        let task = p.task.clone();
        let start = Instant::now();
        match &task.kind {
            TaskKind::Delete { chunk } => {
                self.memory.delete(*chunk)?;
                self.complete(id, start, &chunks);
            }
            TaskKind::Send {
                chunk,
                region,
                peer,
                tag,
            } => {
                let meta = self.memory.meta(*chunk)?;
                let data = {
                    let buf = try_read(&staged[0].1, id, *chunk)?;
                    extract_region(&buf, &meta.region, region)
                };
                self.bytes_sent += data.size_in_bytes() as u64;
                let target = self
                    .peers
                    .get(peer.0)
                    .ok_or_else(|| RuntimeError::Protocol(format!("{id} sends to unknown {peer}")))?;
                if target
                    .send(Event::Message {
                        from: self.id,
                        tag: *tag,
                        data,
                    })
                    .is_err()
                {
                    return Err(RuntimeError::Disconnected(*peer));
                }
                self.complete(id, start, &chunks);
            }
            TaskKind::Recv {
                chunk,
                region,
                peer,
                tag,
            } => {
                let meta = self.memory.meta(*chunk)?;
                let data = self.mailbox.remove(&(*peer, *tag)).expect("ready Recv has its message");
                if data.len() as i64 != region.volume() || data.dtype() != meta.dtype {
                    return Err(RuntimeError::Protocol(format!("{id} received a message of the wrong shape")));
                }
                {
                    let mut buf = try_write(&staged[0].1, id, *chunk)?;
                    copy_region(&data, region, &mut buf, &meta.region, region);
                }
                self.bytes_received += data.size_in_bytes() as u64;
                self.recv_index.remove(&(*peer, *tag));
                self.complete(id, start, &chunks);
            }
            kind => {
                let device = match kind {
                    TaskKind::Execute { device, .. }
                    | TaskKind::Copy { device, .. }
                    | TaskKind::Reduce { device, .. } => device.device,
                    TaskKind::Create { chunk, .. } => chunk.home.device,
                    _ => unreachable!("inline tasks handled above"),
                };
                let mut buffers = HashMap::new();
                for (c, b) in staged {
                    buffers.insert(c, (self.memory.meta(c)?, b));
                }
                self.in_flight.insert(id, chunks);
                self.devices[device]
                    .send(DeviceJob { task, buffers })
                    .map_err(|_| RuntimeError::Protocol(format!("device {device} of {} stopped", self.id)))?;
            }
        }
        Ok(true)
    }

    fn complete(&mut self, id: TaskId, start: Instant, chunks: &[ChunkId]) {
        let end = Instant::now();
        self.memory.unstage(chunks);
        let p = self.pending.remove(&id).expect("completed task was pending");
        self.finished.insert(id);
        self.shared.progress.fetch_add(1, Ordering::SeqCst);
        let us = |t: Instant| t.saturating_duration_since(self.shared.epoch).as_micros() as u64;
        self.timings.push(TaskTiming {
            task: id.0,
            worker: self.id.0,
            kind: p.task.kind.name().to_string(),
            ready_us: us(p.ready_at.unwrap_or(start)),
            start_us: us(start),
            end_us: us(end),
        });
        for d in self.dependents.remove(&id).unwrap_or_default() {
            let dep = self.pending.get_mut(&d).expect("dependent is pending");
            dep.waiting -= 1;
            if dep.waiting == 0 {
                self.mark_ready(d);
            }
        }
    }
}

fn try_read(buf: &SharedBuffer, task: TaskId, chunk: ChunkId) -> Result<RwLockReadGuard<'_, Buffer>, RuntimeError> {
    buf.try_read().ok_or(RuntimeError::ConflictingAccess {
        task,
        chunk,
        access: "read",
    })
}

fn try_write(buf: &SharedBuffer, task: TaskId, chunk: ChunkId) -> Result<RwLockWriteGuard<'_, Buffer>, RuntimeError> {
    buf.try_write().ok_or(RuntimeError::ConflictingAccess {
        task,
        chunk,
        access: "write",
    })
}

enum Guard<'a> {
    Read(RwLockReadGuard<'a, Buffer>),
    Write(RwLockWriteGuard<'a, Buffer>),
}

fn run_on_device(job: &DeviceJob, kernels: &KernelRegistry) -> Result<(), RuntimeError> {
    let id = job.task.id;
    let get = |c: &ChunkId| {
        job.buffers
            .get(c)
            .ok_or_else(|| RuntimeError::Protocol(format!("{id} was started without chunk {c}")))
    };
    match &job.task.kind {
        TaskKind::Create { chunk, fill } => {
            if let Some(v) = fill {
                let (meta, buf) = get(&chunk.id)?;
                let mut b = try_write(buf, id, chunk.id)?;
                *b = Buffer::filled(meta.dtype, meta.region.volume() as usize, *v);
            }
        }
        TaskKind::Copy { src, dst, region, .. } => {
            let (src_meta, src_buf) = get(src)?;
            let (dst_meta, dst_buf) = get(dst)?;
            let s = try_read(src_buf, id, *src)?;
            let mut d = try_write(dst_buf, id, *dst)?;
            copy_region(&s, &src_meta.region, &mut d, &dst_meta.region, region);
        }
        TaskKind::Reduce { op, inputs, output, .. } => {
            let (out_meta, out_buf) = get(output)?;
            let mut out = try_write(out_buf, id, *output)?;
            *out = Buffer::filled(
                out_meta.dtype,
                out_meta.region.volume() as usize,
                op.identity_value(out_meta.dtype),
            );
            for input in inputs {
                let (in_meta, in_buf) = get(input)?;
                let r = try_read(in_buf, id, *input)?;
                let part = in_meta.region.intersect(&out_meta.region).expect("same rank");
                if !part.is_empty() {
                    reduce_region(*op, &r, &in_meta.region, &mut out, &out_meta.region, &part);
                }
            }
        }
        TaskKind::Execute {
            kernel,
            dtype,
            grid,
            block_size,
            superblock,
            args,
            ..
        } => {
            let def = kernels.get(kernel)?;
            let mut effects: BTreeMap<ChunkId, Effect> = BTreeMap::new();
            for (c, e) in job.task.kind.accesses() {
                let slot = effects.entry(c).or_insert(e);
                if e == Effect::Write {
                    *slot = Effect::Write;
                }
            }
            let mut guards = Vec::with_capacity(effects.len());
            for (c, effect) in &effects {
                let (_, buf) = get(c)?;
                guards.push(match effect {
                    Effect::Read => Guard::Read(try_read(buf, id, *c)?),
                    Effect::Write => Guard::Write(try_write(buf, id, *c)?),
                });
            }
            let mut views: HashMap<ChunkId, &mut Guard<'_>> =
                effects.keys().copied().zip(guards.iter_mut()).collect();
            let mut kargs = KernelArgs::new(*dtype);
            for arg in args {
                match arg {
                    ExecArg::Scalar(v) => kargs.push_scalar(*v),
                    ExecArg::Array { chunk, mode, domain } => {
                        let region = get(chunk)?.0.region;
                        let guard = views
                            .remove(chunk)
                            .ok_or_else(|| RuntimeError::Protocol(format!("{id} binds chunk {chunk} twice")))?;
                        match (guard, mode) {
                            (Guard::Read(g), AccessMode::Read) => kargs.push_read(&**g, region, *domain),
                            (Guard::Write(g), mode) => kargs.push_write(&mut **g, region, *domain, *mode),
                            (Guard::Read(_), _) => unreachable!("writes take write guards"),
                        }
                    }
                }
            }
            def.run_superblock(superblock, block_size, grid, &kargs)?;
        }
        TaskKind::Delete { .. } | TaskKind::Send { .. } | TaskKind::Recv { .. } => {
            unreachable!("runs on the worker thread")
        }
    }
    Ok(())
}
