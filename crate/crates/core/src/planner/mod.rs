//! Turns distributed kernel launches into per-worker task graphs.
//!
//! For every superblock the planner evaluates the launch annotation, binds
//! each array argument to a chunk on the executing device (creating and
//! filling a temporary chunk when no local chunk encloses the access
//! region), and emits transfers that keep overlapping chunks coherent after
//! writes. Reductions go through private partial chunks that are combined
//! per device, per worker and finally on worker 0.

mod dot;
mod task;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

pub use self::dot::export_dot;
pub use self::task::{ExecArg, ExecutionPlan, MessageTag, Task, TaskKind};
use crate::annotation::{
    check_write_disjointness, evaluate_region, AccessAnnotation, AccessMode, EvalError, WriteConflict,
};
use crate::distribution::{
    select_enclosing_chunk, superblock_threads, ChunkDescriptor, DataDistribution, DeviceId, SystemInfo,
    WorkDistribution,
};
use crate::geometry::{Point, Rect};
use crate::registry::{ArrayHandle, ChunkMeta, Registry, RegistryError};
use crate::runtime::kernel::{KernelError, KernelRegistry, ParamKind};
use crate::types::{ArrayId, ChunkId, DType, ReduceOp, TaskId, Value, WorkerId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error(transparent)]
    Kernel(#[from] KernelError),

    #[error(transparent)]
    Registry(#[from] RegistryError),

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("overlapping writes to `{}` by superblocks {} and {} on {:?}", .0.argument, .0.first, .0.second, .0.overlap)]
    WriteConflict(WriteConflict),

    #[error("kernel `{kernel}` takes {expected} arguments, got {got}")]
    ArgumentCount { kernel: String, expected: usize, got: usize },

    #[error("argument `{0}`: {1}")]
    Argument(String, String),

    #[error("annotation names `{0}`, which is not an array parameter of the kernel")]
    UnknownAccess(String),

    #[error("array parameter `{0}` has no annotation")]
    MissingAccess(String),

    #[error("array {0:?} is passed more than once")]
    RepeatedArray(ArrayId),

    #[error("argument `{argument}` reads chunk {chunk} before anything was written to it")]
    UninitializedRead { argument: String, chunk: ChunkId },

    #[error("invalid launch: {0}")]
    Launch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannerOptions {
    /// Insert dependencies on tasks of previously returned plans. Turning
    /// this off is a fault-injection switch for testing.
    pub cross_launch_deps: bool,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            cross_launch_deps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LaunchArg {
    Array(ArrayId),
    Scalar(Value),
}

#[derive(Debug, Clone)]
pub struct Launch<'a> {
    pub kernel: &'a str,
    pub grid: Rect,
    pub block_size: Point,
    pub work: &'a WorkDistribution,
    pub args: Vec<LaunchArg>,
    pub annotation: &'a AccessAnnotation,
}

/// How one array argument of one superblock is bound.
#[derive(Debug, Clone)]
enum Binding {
    /// A chunk of the array homed on the executing device.
    Direct(ChunkId),
    /// A temporary chunk over `region` on the executing device.
    Temp {
        region: Rect,
        /// Chunks to fill the temporary from before execution.
        sources: Vec<ChunkDescriptor>,
        identity: Option<ReduceOp>,
    },
}

#[derive(Debug, Clone)]
struct ArgPlan {
    param: usize,
    handle: ArrayHandle,
    mode: AccessMode,
    region: Rect,
    binding: Binding,
}

#[derive(Debug, Clone)]
struct SuperblockPlan {
    blocks: Rect,
    device: DeviceId,
    args: Vec<ArgPlan>,
}

pub struct Planner {
    registry: Registry,
    kernels: Arc<KernelRegistry>,
    system: SystemInfo,
    options: PlannerOptions,
    next_task: u64,
    pending: Vec<Task>,
    plan_first: Option<TaskId>,
    message_seq: HashMap<(WorkerId, WorkerId), u64>,
}

impl Planner {
    pub fn new(system: SystemInfo, kernels: Arc<KernelRegistry>, options: PlannerOptions) -> Self {
        Self {
            registry: Registry::new(),
            kernels,
            system,
            options,
            next_task: 0,
            pending: vec![],
            plan_first: None,
            message_seq: HashMap::new(),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn system(&self) -> SystemInfo {
        self.system
    }

    pub fn kernels(&self) -> &Arc<KernelRegistry> {
        &self.kernels
    }

    /// Registers an array and queues a Create task per chunk for the next plan.
    pub fn create_array(
        &mut self,
        domain: Rect,
        dtype: DType,
        distribution: DataDistribution,
        fill: Option<Value>,
    ) -> Result<ArrayHandle, PlanError> {
        for c in distribution.chunks() {
            if !self.system.contains(&c.home) {
                return Err(PlanError::Launch(format!("chunk home {} is not part of the system", c.home)));
            }
        }
        let handle = self.registry.create_array(domain, dtype, distribution)?;
        let fill = fill.map(|v| Value::from_f64(dtype, v.as_f64()));
        let mut tasks = vec![];
        for &id in &handle.chunks {
            let meta = self.registry.chunk_meta(id)?;
            self.emit(&mut tasks, meta.home.worker_id(), TaskKind::Create { chunk: meta, fill });
            if fill.is_some() {
                self.registry.mark_initialized(id);
            }
        }
        self.pending.extend(tasks);
        Ok(handle)
    }

    /// Queues Delete tasks for every chunk of the array.
    pub fn delete_array(&mut self, id: ArrayId) -> Result<(), PlanError> {
        let chunks = self.registry.delete_array(id)?;
        let mut tasks = vec![];
        for c in chunks {
            let worker = self.registry.chunk_meta(c)?.home.worker_id();
            self.emit(&mut tasks, worker, TaskKind::Delete { chunk: c });
        }
        self.pending.extend(tasks);
        Ok(())
    }

    /// Returns queued Create/Delete tasks as a plan of their own.
    pub fn flush(&mut self) -> ExecutionPlan {
        self.plan_first = None;
        ExecutionPlan {
            tasks: std::mem::take(&mut self.pending),
        }
    }

    fn alloc_id(&mut self) -> TaskId {
        let id = TaskId(self.next_task);
        self.next_task += 1;
        if self.plan_first.is_none() {
            self.plan_first = Some(id);
        }
        id
    }

    fn emit(&mut self, out: &mut Vec<Task>, worker: WorkerId, kind: TaskKind) -> TaskId {
        let id = self.alloc_id();
        let mut deps = vec![];
        for (chunk, effect) in kind.accesses() {
            deps.extend(
                self.registry
                    .record_access(chunk, id, effect)
                    .expect("planner only references registered chunks"),
            );
        }
        if !self.options.cross_launch_deps {
            let first = self.plan_first.unwrap_or(id);
            deps.retain(|d| *d >= first);
        }
        deps.sort();
        deps.dedup();
        out.push(Task { id, worker, kind, deps });
        id
    }

    fn meta(&self, chunk: ChunkId) -> ChunkMeta {
        self.registry.chunk_meta(chunk).expect("registered chunk")
    }

    fn create_temp(&mut self, out: &mut Vec<Task>, region: Rect, dtype: DType, home: DeviceId, fill: Option<Value>) -> ChunkId {
        let id = self.registry.create_temporary(region, dtype, home);
        let meta = self.meta(id);
        self.emit(out, home.worker_id(), TaskKind::Create { chunk: meta, fill });
        if fill.is_some() {
            self.registry.mark_initialized(id);
        }
        id
    }

    fn delete_temp(&mut self, out: &mut Vec<Task>, chunk: ChunkId) {
        let worker = self.meta(chunk).home.worker_id();
        self.emit(out, worker, TaskKind::Delete { chunk });
        self.registry.retire_chunk(chunk);
    }

    /// Moves `region` from `src` into `dst`: a Copy within a worker, a
    /// Send/Recv pair across workers.
    fn transfer(&mut self, out: &mut Vec<Task>, src: ChunkId, dst: ChunkId, region: Rect) {
        let (s, d) = (self.meta(src), self.meta(dst));
        let (sw, dw) = (s.home.worker_id(), d.home.worker_id());
        if sw == dw {
            self.emit(
                out,
                dw,
                TaskKind::Copy {
                    src,
                    dst,
                    region,
                    device: d.home,
                },
            );
        } else {
            let seq = self.message_seq.entry((sw, dw)).or_insert(0);
            let tag = MessageTag { chunk: src, seq: *seq };
            *seq += 1;
            self.emit(
                out,
                sw,
                TaskKind::Send {
                    chunk: src,
                    region,
                    peer: dw,
                    tag,
                },
            );
            self.emit(
                out,
                dw,
                TaskKind::Recv {
                    chunk: dst,
                    region,
                    peer: sw,
                    tag,
                },
            );
        }
        self.registry.mark_initialized(dst);
    }

    /// Plans one launch. Queued Create/Delete tasks are prepended. On error
    /// nothing is emitted.
    pub fn plan_launch(&mut self, launch: &Launch<'_>) -> Result<ExecutionPlan, PlanError> {
        let (dtype, scalars, superblocks) = self.resolve(launch)?;

        let mut tasks = std::mem::take(&mut self.pending);
        let mut temps = vec![];

        // Fill temporaries.
        let mut bound: Vec<Vec<ChunkId>> = vec![];
        for sb in &superblocks {
            let mut chunks = vec![];
            for arg in &sb.args {
                let chunk = match &arg.binding {
                    Binding::Direct(c) => *c,
                    Binding::Temp {
                        region,
                        sources,
                        identity,
                    } => {
                        let fill = identity.map(|op| op.identity_value(arg.handle.dtype));
                        let t = self.create_temp(&mut tasks, *region, arg.handle.dtype, sb.device, fill);
                        for src in sources {
                            let part = src.region.intersect(region).expect("same rank");
                            let src_id = arg.handle.chunks[src.index];
                            self.transfer(&mut tasks, src_id, t, part);
                        }
                        temps.push(t);
                        t
                    }
                };
                chunks.push(chunk);
            }
            bound.push(chunks);
        }

        // Execute.
        let sig_len = self.kernels.get(launch.kernel)?.signature.params.len();
        for (sb, chunks) in superblocks.iter().zip(&bound) {
            let mut args: Vec<Option<ExecArg>> = vec![None; sig_len];
            for (slot, value) in &scalars {
                args[*slot] = Some(ExecArg::Scalar(*value));
            }
            for (arg, chunk) in sb.args.iter().zip(chunks) {
                args[arg.param] = Some(ExecArg::Array {
                    chunk: *chunk,
                    mode: arg.mode,
                    domain: arg.handle.domain,
                });
            }
            let kind = TaskKind::Execute {
                kernel: launch.kernel.to_string(),
                dtype,
                grid: launch.grid,
                block_size: launch.block_size,
                superblock: sb.blocks,
                device: sb.device,
                args: args.into_iter().map(|a| a.expect("every parameter bound")).collect(),
            };
            self.emit(&mut tasks, sb.device.worker_id(), kind);
            for (arg, chunk) in sb.args.iter().zip(chunks) {
                if arg.mode.writes() {
                    self.registry.mark_initialized(*chunk);
                }
            }
        }

        // Propagate writes to every other chunk holding the written region.
        for (sb, chunks) in superblocks.iter().zip(&bound) {
            for (arg, chunk) in sb.args.iter().zip(chunks) {
                if !arg.mode.writes() || arg.region.is_empty() {
                    continue;
                }
                let exclude = match arg.binding {
                    Binding::Direct(c) => Some(c),
                    Binding::Temp { .. } => None,
                };
                for target in arg.handle.distribution.chunks_intersecting(&arg.region) {
                    let target_id = arg.handle.chunks[target.index];
                    if Some(target_id) == exclude {
                        continue;
                    }
                    let part = target.region.intersect(&arg.region).expect("same rank");
                    self.transfer(&mut tasks, *chunk, target_id, part);
                }
            }
        }

        // Combine reduction partials.
        let reduce_params: Vec<usize> = superblocks
            .first()
            .map(|sb| {
                sb.args
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| matches!(a.mode, AccessMode::Reduce(_)))
                    .map(|(k, _)| k)
                    .collect()
            })
            .unwrap_or_default();
        for k in reduce_params {
            let AccessMode::Reduce(op) = superblocks[0].args[k].mode else {
                unreachable!()
            };
            let handle = superblocks[0].args[k].handle.clone();
            let partials: Vec<(DeviceId, ChunkId, Rect)> = superblocks
                .iter()
                .zip(&bound)
                .map(|(sb, chunks)| (sb.device, chunks[k], sb.args[k].region))
                .collect();
            self.plan_reduce(&mut tasks, &mut temps, op, &handle, partials);
        }

        for t in temps {
            self.delete_temp(&mut tasks, t);
        }
        self.plan_first = None;
        Ok(ExecutionPlan { tasks })
    }

    /// Emits the reduction tree for one argument: per device, per worker,
    /// then a final combine on device 0 of worker 0 whose result is copied
    /// into the destination chunks.
    fn plan_reduce(
        &mut self,
        tasks: &mut Vec<Task>,
        temps: &mut Vec<ChunkId>,
        op: ReduceOp,
        handle: &ArrayHandle,
        partials: Vec<(DeviceId, ChunkId, Rect)>,
    ) {
        let hull = |items: &[(DeviceId, ChunkId, Rect)]| {
            items
                .iter()
                .skip(1)
                .fold(items[0].2, |acc, (_, _, r)| acc.hull(r).expect("same rank"))
        };
        let total = hull(&partials);
        if total.is_empty() {
            return;
        }

        let mut per_device: BTreeMap<DeviceId, Vec<(DeviceId, ChunkId, Rect)>> = BTreeMap::new();
        for p in partials {
            per_device.entry(p.0).or_default().push(p);
        }
        let mut per_worker: BTreeMap<usize, Vec<(DeviceId, ChunkId, Rect)>> = BTreeMap::new();
        for (device, items) in per_device {
            let combined = self.combine(tasks, temps, op, handle.dtype, device, &items, hull(&items), false);
            per_worker.entry(device.worker).or_default().push(combined);
        }
        let root = DeviceId::new(0, 0);
        let mut at_root = vec![];
        for (worker, items) in per_worker {
            let lowest = items[0].0;
            let (_, chunk, region) = self.combine(tasks, temps, op, handle.dtype, lowest, &items, hull(&items), false);
            if worker == 0 && lowest == root {
                at_root.push((root, chunk, region));
            } else {
                let t = self.create_temp(tasks, region, handle.dtype, root, None);
                temps.push(t);
                self.transfer(tasks, chunk, t, region);
                at_root.push((root, t, region));
            }
        }
        let (_, result, _) = self.combine(tasks, temps, op, handle.dtype, root, &at_root, total, true);

        for target in handle.distribution.chunks_intersecting(&total) {
            let part = target.region.intersect(&total).expect("same rank");
            self.transfer(tasks, result, handle.chunks[target.index], part);
        }
    }

    /// Reduces `items` into a new temporary on `device`. A single item is
    /// passed through unless `always` is set.
    #[allow(clippy::too_many_arguments)]
    fn combine(
        &mut self,
        tasks: &mut Vec<Task>,
        temps: &mut Vec<ChunkId>,
        op: ReduceOp,
        dtype: DType,
        device: DeviceId,
        items: &[(DeviceId, ChunkId, Rect)],
        region: Rect,
        always: bool,
    ) -> (DeviceId, ChunkId, Rect) {
        if items.len() == 1 && !always {
            return items[0];
        }
        let out = self.create_temp(tasks, region, dtype, device, None);
        temps.push(out);
        self.emit(
            tasks,
            device.worker_id(),
            TaskKind::Reduce {
                op,
                inputs: items.iter().map(|i| i.1).collect(),
                output: out,
                device,
            },
        );
        self.registry.mark_initialized(out);
        (device, out, region)
    }

    /// Validates the launch and decides every binding without emitting tasks.
    #[allow(clippy::type_complexity)]
    fn resolve(&self, launch: &Launch<'_>) -> Result<(DType, Vec<(usize, Value)>, Vec<SuperblockPlan>), PlanError> {
        let def = self.kernels.get(launch.kernel)?;
        let sig = &def.signature;
        if sig.params.len() != launch.args.len() {
            return Err(PlanError::ArgumentCount {
                kernel: sig.name.clone(),
                expected: sig.params.len(),
                got: launch.args.len(),
            });
        }
        if launch.block_size.rank() != launch.grid.rank() {
            return Err(PlanError::Launch(format!(
                "block size {} does not match the grid rank {}",
                launch.block_size,
                launch.grid.rank()
            )));
        }
        launch
            .work
            .validate(&launch.grid, &launch.block_size)
            .map_err(|e| PlanError::Launch(e.to_string()))?;
        for (_, device) in launch.work.superblocks() {
            if !self.system.contains(device) {
                return Err(PlanError::Launch(format!("device {device} is not part of the system")));
            }
        }
        for access in &launch.annotation.accesses {
            match sig.param(&access.argument) {
                Some((_, p)) if p.is_array() => {}
                _ => return Err(PlanError::UnknownAccess(access.argument.clone())),
            }
        }

        // Element type of the kernel instantiation.
        let mut dtype = None;
        let mut arrays: Vec<(usize, String, ArrayHandle, AccessMode)> = vec![];
        let mut scalars = vec![];
        let mut seen = vec![];
        for (k, (param, arg)) in sig.params.iter().zip(&launch.args).enumerate() {
            match (&param.kind, arg) {
                (ParamKind::Array { rank, dtype: fixed }, LaunchArg::Array(id)) => {
                    let handle = self.registry.array(*id)?.clone();
                    if seen.contains(id) {
                        return Err(PlanError::RepeatedArray(*id));
                    }
                    seen.push(*id);
                    if *rank != 0 && *rank != handle.rank() {
                        return Err(PlanError::Argument(
                            param.name.clone(),
                            format!("expected rank {rank}, got {}", handle.rank()),
                        ));
                    }
                    match fixed {
                        Some(d) if *d != handle.dtype => {
                            return Err(PlanError::Argument(
                                param.name.clone(),
                                format!("expected {d}, got {}", handle.dtype),
                            ))
                        }
                        Some(_) => {}
                        None => match dtype {
                            None => dtype = Some(handle.dtype),
                            Some(d) if d != handle.dtype => {
                                return Err(PlanError::Argument(
                                    param.name.clone(),
                                    format!("expected {d} like the other arrays, got {}", handle.dtype),
                                ))
                            }
                            Some(_) => {}
                        },
                    }
                    let access = launch
                        .annotation
                        .access(&param.name)
                        .ok_or_else(|| PlanError::MissingAccess(param.name.clone()))?;
                    arrays.push((k, param.name.clone(), handle, access.mode));
                }
                (ParamKind::Scalar(_), LaunchArg::Scalar(_)) => {}
                (ParamKind::Array { .. }, LaunchArg::Scalar(_)) => {
                    return Err(PlanError::Argument(param.name.clone(), "expected an array, got a scalar".into()))
                }
                (ParamKind::Scalar(_), LaunchArg::Array(_)) => {
                    return Err(PlanError::Argument(param.name.clone(), "expected a scalar, got an array".into()))
                }
            }
        }
        let dtype = dtype
            .or_else(|| arrays.first().map(|a| a.2.dtype))
            .unwrap_or(DType::I64);
        for (k, (param, arg)) in sig.params.iter().zip(&launch.args).enumerate() {
            if let (ParamKind::Scalar(d), LaunchArg::Scalar(v)) = (&param.kind, arg) {
                let target = d.unwrap_or(dtype);
                scalars.push((k, v.convert(target)));
            }
        }

        let domains: HashMap<String, Rect> = arrays.iter().map(|a| (a.1.clone(), a.2.domain)).collect();
        let mut regions = vec![];
        for (blocks, _) in launch.work.superblocks() {
            let threads = superblock_threads(blocks, &launch.block_size, &launch.grid)
                .map_err(|e| PlanError::Launch(e.to_string()))?;
            regions.push(evaluate_region(launch.annotation, &threads, &launch.block_size, &domains)?);
        }
        check_write_disjointness(&regions).map_err(PlanError::WriteConflict)?;

        let mut superblocks = vec![];
        for ((blocks, device), sb_regions) in launch.work.superblocks().iter().zip(&regions) {
            let mut args = vec![];
            for (param, name, handle, mode) in &arrays {
                let region = sb_regions
                    .iter()
                    .find(|r| &r.argument == name)
                    .expect("every annotated argument has a region")
                    .region;
                let binding = self.bind(name, handle, *mode, &region, *device)?;
                args.push(ArgPlan {
                    param: *param,
                    handle: handle.clone(),
                    mode: *mode,
                    region,
                    binding,
                });
            }
            superblocks.push(SuperblockPlan {
                blocks: *blocks,
                device: *device,
                args,
            });
        }
        Ok((dtype, scalars, superblocks))
    }

    fn bind(
        &self,
        name: &str,
        handle: &ArrayHandle,
        mode: AccessMode,
        region: &Rect,
        device: DeviceId,
    ) -> Result<Binding, PlanError> {
        let candidates = handle.distribution.chunks_intersecting(region);
        let initialized = |c: &ChunkDescriptor| -> bool {
            self.registry
                .chunk(handle.chunks[c.index])
                .map(|s| s.initialized)
                .unwrap_or(false)
        };
        let require_initialized = |sources: &[ChunkDescriptor]| -> Result<(), PlanError> {
            for s in sources {
                if !initialized(s) {
                    return Err(PlanError::UninitializedRead {
                        argument: name.to_string(),
                        chunk: handle.chunks[s.index],
                    });
                }
            }
            Ok(())
        };
        let enclosing = if region.is_empty() {
            None
        } else {
            select_enclosing_chunk(&candidates, region, device)
        };

        Ok(match mode {
            AccessMode::Reduce(op) => Binding::Temp {
                region: *region,
                sources: vec![],
                identity: Some(op),
            },
            AccessMode::Read => match enclosing {
                Some(c) if c.home == device => {
                    require_initialized(&[c])?;
                    Binding::Direct(handle.chunks[c.index])
                }
                Some(c) => {
                    require_initialized(&[c])?;
                    Binding::Temp {
                        region: *region,
                        sources: vec![c],
                        identity: None,
                    }
                }
                None => {
                    require_initialized(&candidates)?;
                    Binding::Temp {
                        region: *region,
                        sources: candidates,
                        identity: None,
                    }
                }
            },
            AccessMode::Write | AccessMode::ReadWrite => match enclosing {
                Some(c) if c.home == device => {
                    if mode == AccessMode::ReadWrite {
                        require_initialized(&[c])?;
                    }
                    Binding::Direct(handle.chunks[c.index])
                }
                _ => {
                    let sources = if mode == AccessMode::ReadWrite {
                        require_initialized(&candidates)?;
                        candidates
                    } else {
                        candidates.into_iter().filter(initialized).collect()
                    };
                    Binding::Temp {
                        region: *region,
                        sources,
                        identity: None,
                    }
                }
            },
        })
    }
}

#[cfg(test)]
mod tests;
