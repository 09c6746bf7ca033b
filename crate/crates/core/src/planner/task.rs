use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::annotation::AccessMode;
use crate::distribution::DeviceId;
use crate::geometry::{Point, Rect};
use crate::registry::{ChunkMeta, Effect};
use crate::types::{ChunkId, DType, ReduceOp, TaskId, Value, WorkerId};

/// Matches a Send with its Recv: the source chunk plus a counter private to
/// the (sender, receiver) worker pair.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MessageTag {
    pub chunk: ChunkId,
    pub seq: u64,
}

impl fmt::Display for MessageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.chunk, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExecArg {
    Scalar(Value),
    Array {
        chunk: ChunkId,
        mode: AccessMode,
        /// Domain of the whole array the chunk belongs to.
        domain: Rect,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Create {
        chunk: ChunkMeta,
        fill: Option<Value>,
    },
    Delete {
        chunk: ChunkId,
    },
    Execute {
        kernel: String,
        dtype: DType,
        grid: Rect,
        block_size: Point,
        /// In thread-block index space.
        superblock: Rect,
        device: DeviceId,
        args: Vec<ExecArg>,
    },
    /// Copies `region` (global array coordinates) between chunks of one worker.
    Copy {
        src: ChunkId,
        dst: ChunkId,
        region: Rect,
        device: DeviceId,
    },
    Send {
        chunk: ChunkId,
        region: Rect,
        peer: WorkerId,
        tag: MessageTag,
    },
    Recv {
        chunk: ChunkId,
        region: Rect,
        peer: WorkerId,
        tag: MessageTag,
    },
    /// Overwrites `output` with the identity, then folds in every input in order.
    Reduce {
        op: ReduceOp,
        inputs: Vec<ChunkId>,
        output: ChunkId,
        device: DeviceId,
    },
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Create { .. } => "Create",
            TaskKind::Delete { .. } => "Delete",
            TaskKind::Execute { .. } => "Execute",
            TaskKind::Copy { .. } => "Copy",
            TaskKind::Send { .. } => "Send",
            TaskKind::Recv { .. } => "Recv",
            TaskKind::Reduce { .. } => "Reduce",
        }
    }

    /// Chunks touched by the task with their effect.
    pub fn accesses(&self) -> Vec<(ChunkId, Effect)> {
        match self {
            TaskKind::Create { chunk, .. } => vec![(chunk.id, Effect::Write)],
            TaskKind::Delete { chunk } => vec![(*chunk, Effect::Write)],
            TaskKind::Execute { args, .. } => args
                .iter()
                .filter_map(|a| match a {
                    ExecArg::Array { chunk, mode, .. } => Some((
                        *chunk,
                        if *mode == AccessMode::Read {
                            Effect::Read
                        } else {
                            Effect::Write
                        },
                    )),
                    ExecArg::Scalar(_) => None,
                })
                .collect(),
            TaskKind::Copy { src, dst, .. } => vec![(*src, Effect::Read), (*dst, Effect::Write)],
            TaskKind::Send { chunk, .. } => vec![(*chunk, Effect::Read)],
            TaskKind::Recv { chunk, .. } => vec![(*chunk, Effect::Write)],
            TaskKind::Reduce { inputs, output, .. } => inputs
                .iter()
                .map(|c| (*c, Effect::Read))
                .chain([(*output, Effect::Write)])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: TaskId,
    pub worker: WorkerId,
    pub kind: TaskKind,
    pub deps: Vec<TaskId>,
}

impl Task {
    /// One-line description used in DOT labels and error messages.
    pub fn describe(&self) -> String {
        match &self.kind {
            TaskKind::Create { chunk, fill } => match fill {
                Some(v) => format!("Create {} {} fill={}", chunk.id, chunk.region, v.as_f64()),
                None => format!("Create {} {}", chunk.id, chunk.region),
            },
            TaskKind::Delete { chunk } => format!("Delete {chunk}"),
            TaskKind::Execute {
                kernel,
                superblock,
                device,
                ..
            } => format!("Execute {kernel} {superblock} on {device}"),
            TaskKind::Copy { src, dst, region, .. } => format!("Copy {src}->{dst} {region}"),
            TaskKind::Send { chunk, region, peer, tag } => format!("Send {chunk} {region} to {peer} tag {tag}"),
            TaskKind::Recv { chunk, region, peer, tag } => format!("Recv {chunk} {region} from {peer} tag {tag}"),
            TaskKind::Reduce { op, inputs, output, .. } => {
                let ins: Vec<String> = inputs.iter().map(|c| c.to_string()).collect();
                format!("Reduce({}) [{}] -> {output}", op.symbol(), ins.join(","))
            }
        }
    }
}

/// Tasks of one or more launches, for all workers, in emission order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecutionPlan {
    pub tasks: Vec<Task>,
}

impl ExecutionPlan {
    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn workers(&self) -> Vec<WorkerId> {
        let mut w: Vec<WorkerId> = self.tasks.iter().map(|t| t.worker).collect();
        w.sort();
        w.dedup();
        w
    }

    pub fn for_worker(&self, worker: WorkerId) -> impl Iterator<Item = &Task> {
        self.tasks.iter().filter(move |t| t.worker == worker)
    }

    pub fn extend(&mut self, other: ExecutionPlan) {
        self.tasks.extend(other.tasks);
    }

    /// Task counts keyed by worker and kind name.
    pub fn counts(&self) -> BTreeMap<(WorkerId, &'static str), usize> {
        let mut out = BTreeMap::new();
        for t in &self.tasks {
            *out.entry((t.worker, t.kind.name())).or_insert(0) += 1;
        }
        out
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.tasks.iter().filter(|t| t.kind.name() == kind).count()
    }

    /// Send/Recv pairs as (send task, recv task).
    pub fn message_pairs(&self) -> Vec<(TaskId, TaskId)> {
        let mut sends = HashMap::new();
        for t in &self.tasks {
            if let TaskKind::Send { peer, tag, .. } = &t.kind {
                sends.insert((t.worker, *peer, *tag), t.id);
            }
        }
        let mut out = vec![];
        for t in &self.tasks {
            if let TaskKind::Recv { peer, tag, .. } = &t.kind {
                if let Some(s) = sends.get(&(*peer, t.worker, *tag)) {
                    out.push((*s, t.id));
                }
            }
        }
        out.sort();
        out
    }

    /// Checks structural invariants: deps point to earlier tasks of the same
    /// worker, every Send has exactly one matching Recv, and the graph
    /// (including message edges) is acyclic.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen: HashMap<TaskId, WorkerId> = HashMap::new();
        for t in &self.tasks {
            for d in &t.deps {
                if let Some(w) = seen.get(d) {
                    if *w != t.worker {
                        return Err(format!("{} depends on {d} of another worker", t.id));
                    }
                } else if *d >= t.id {
                    return Err(format!("{} depends on later task {d}", t.id));
                }
            }
            if seen.insert(t.id, t.worker).is_some() {
                return Err(format!("duplicate task id {}", t.id));
            }
        }
        let sends = self.count_kind("Send");
        let recvs = self.count_kind("Recv");
        let pairs = self.message_pairs();
        if pairs.len() != sends || pairs.len() != recvs {
            return Err(format!("{sends} sends and {recvs} receives but {} matched pairs", pairs.len()));
        }
        let mut tags = HashSet::new();
        for t in &self.tasks {
            if let TaskKind::Send { peer, tag, .. } = &t.kind {
                if !tags.insert((t.worker, *peer, *tag)) {
                    return Err(format!("tag {tag} reused between {} and {peer}", t.worker));
                }
            }
        }
        if self.topological_order().is_none() {
            return Err("plan has a cycle".into());
        }
        Ok(())
    }

    /// Kahn's algorithm over dependency and message edges within the plan.
    pub fn topological_order(&self) -> Option<Vec<TaskId>> {
        let ids: HashSet<TaskId> = self.tasks.iter().map(|t| t.id).collect();
        let mut indegree: HashMap<TaskId, usize> = ids.iter().map(|&id| (id, 0)).collect();
        let mut succ: HashMap<TaskId, Vec<TaskId>> = HashMap::new();
        let mut edge = |a: TaskId, b: TaskId| {
            succ.entry(a).or_default().push(b);
            *indegree.get_mut(&b).unwrap() += 1;
        };
        for t in &self.tasks {
            for d in t.deps.iter().filter(|d| ids.contains(d)) {
                edge(*d, t.id);
            }
        }
        for (s, r) in self.message_pairs() {
            edge(s, r);
        }
        let mut ready: Vec<TaskId> = self.tasks.iter().map(|t| t.id).filter(|id| indegree[id] == 0).collect();
        ready.reverse();
        let mut order = vec![];
        while let Some(id) = ready.pop() {
            order.push(id);
            for s in succ.get(&id).into_iter().flatten() {
                let d = indegree.get_mut(s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(*s);
                }
            }
        }
        (order.len() == self.tasks.len()).then_some(order)
    }
}
