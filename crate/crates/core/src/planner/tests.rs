use std::collections::{HashMap, HashSet};

use super::*;
use crate::annotation::parse_annotation;
use crate::distribution::{block_work_dist, col_dist, replicated_dist, row_dist, stencil_dist, tile_dist};

const STENCIL: &str = "global i => read input[i-1:i+1], write output[i]";

fn system22() -> SystemInfo {
    SystemInfo::new(2, 2)
}

fn planner(system: SystemInfo) -> Planner {
    Planner::new(system, Arc::new(KernelRegistry::with_builtins()), PlannerOptions::default())
}

fn pt(c: &[i64]) -> Point {
    Point::new(c).unwrap()
}

struct Stencil {
    planner: Planner,
    a: ArrayHandle,
    b: ArrayHandle,
    work: WorkDistribution,
    n: i64,
}

fn stencil(n: i64, chunk: i64, system: SystemInfo, options: PlannerOptions) -> Stencil {
    let mut planner = Planner::new(system, Arc::new(KernelRegistry::with_builtins()), options);
    let devices = system.devices();
    let domain = Rect::from_extents(&[n]).unwrap();
    let dist = stencil_dist(&domain, &pt(&[chunk]), &pt(&[1]), &devices).unwrap();
    let a = planner
        .create_array(domain, DType::F32, dist.clone(), Some(Value::F32(1.0)))
        .unwrap();
    let b = planner.create_array(domain, DType::F32, dist, Some(Value::F32(0.0))).unwrap();
    let work = block_work_dist(&domain, &pt(&[16]), &pt(&[chunk]), &devices).unwrap();
    Stencil { planner, a, b, work, n }
}

impl Stencil {
    fn iterate(&mut self, swap: bool) -> ExecutionPlan {
        let ann = parse_annotation(STENCIL).unwrap();
        let (input, output) = if swap { (&self.b, &self.a) } else { (&self.a, &self.b) };
        let launch = Launch {
            kernel: "stencil_1d",
            grid: Rect::from_extents(&[self.n]).unwrap(),
            block_size: pt(&[16]),
            work: &self.work,
            args: vec![
                LaunchArg::Scalar(Value::I32(self.n as i32)),
                LaunchArg::Array(output.id),
                LaunchArg::Array(input.id),
            ],
            annotation: &ann,
        };
        self.planner.plan_launch(&launch).unwrap()
    }
}

/// Launch tasks only (drops the queued Create tasks of the first plan).
fn launch_tasks(plan: &ExecutionPlan) -> Vec<&Task> {
    plan.tasks
        .iter()
        .filter(|t| !matches!(t.kind, TaskKind::Create { chunk, .. } if !chunk.is_temporary()))
        .collect()
}

/// Expected halo propagations: every ordered pair of distinct chunks whose
/// regions share cells that the first chunk's superblock writes.
fn expected_propagations(dist: &DataDistribution, writes: &[Rect]) -> Vec<(usize, usize, i64)> {
    let mut out = vec![];
    for (k, w) in writes.iter().enumerate() {
        for c in dist.chunks() {
            if c.index == k {
                continue;
            }
            let cells = w.points().filter(|p| c.region.contains_point(p)).count() as i64;
            if cells > 0 {
                out.push((k, c.index, cells));
            }
        }
    }
    out
}

#[test]
fn million_element_stencil_propagations() {
    let mut s = stencil(1_000_000, 64_000, system22(), PlannerOptions::default());
    let plan = s.iterate(false);
    plan.validate().unwrap();
    let tasks = launch_tasks(&plan);

    // reads are served by the local halo chunk
    assert!(!tasks.iter().any(|t| matches!(t.kind, TaskKind::Create { .. })));
    assert_eq!(plan.count_kind("Execute"), 16);

    let writes: Vec<Rect> = s
        .work
        .superblocks()
        .iter()
        .map(|(b, _)| superblock_threads(b, &pt(&[16]), &Rect::from_extents(&[1_000_000]).unwrap()).unwrap())
        .collect();
    let expected = expected_propagations(&s.b.distribution, &writes);
    assert_eq!(expected.len(), 2 * 15);
    assert!(expected.iter().all(|e| e.2 == 1));

    let worker_of = |k: usize| s.b.distribution.chunks()[k].home.worker;
    let crossing = expected.iter().filter(|e| worker_of(e.0) != worker_of(e.1)).count();
    assert_eq!(plan.count_kind("Send"), crossing);
    assert_eq!(plan.count_kind("Recv"), crossing);
    assert_eq!(plan.count_kind("Copy"), expected.len() - crossing);
    assert_eq!(crossing, 14);
    for t in &plan.tasks {
        if let TaskKind::Copy { region, .. } | TaskKind::Send { region, .. } = &t.kind {
            assert_eq!(region.volume(), 1);
        }
    }
}

#[test]
fn four_superblock_dag_shape() {
    let mut s = stencil(256, 64, system22(), PlannerOptions::default());
    for iteration in 0..4 {
        let plan = s.iterate(iteration % 2 == 1);
        plan.validate().unwrap();
        let tasks = launch_tasks(&plan);
        assert_eq!(tasks.len(), 12, "iteration {iteration}");
        assert_eq!(plan.count_kind("Execute"), 4);
        assert_eq!(plan.count_kind("Copy"), 4);
        assert_eq!(plan.message_pairs().len(), 2);
    }
}

#[test]
fn execute_waits_for_previous_propagation() {
    let mut s = stencil(256, 64, system22(), PlannerOptions::default());
    let first = s.iterate(false);
    let second = s.iterate(true);
    let writers: HashSet<TaskId> = first
        .tasks
        .iter()
        .filter(|t| matches!(t.kind, TaskKind::Copy { .. } | TaskKind::Recv { .. } | TaskKind::Execute { .. }))
        .map(|t| t.id)
        .collect();
    for t in second.tasks.iter().filter(|t| matches!(t.kind, TaskKind::Execute { .. })) {
        assert!(t.deps.iter().any(|d| writers.contains(d)), "{} has no cross-launch dependency", t.id);
    }
}

#[test]
fn disabled_cross_launch_deps() {
    let options = PlannerOptions {
        cross_launch_deps: false,
    };
    let mut s = stencil(256, 64, system22(), options);
    let first = s.iterate(false);
    let first_ids: HashSet<TaskId> = first.tasks.iter().map(|t| t.id).collect();
    // queued Create tasks belong to the first plan and still order it
    assert!(first.tasks.iter().any(|t| !t.deps.is_empty()));
    let second = s.iterate(true);
    for t in &second.tasks {
        assert!(t.deps.iter().all(|d| !first_ids.contains(d)));
    }
}

#[test]
fn matmul_row_distribution_assembles_b() {
    let system = SystemInfo::new(1, 2);
    let mut p = planner(system);
    let devices = system.devices();
    let m = Rect::from_extents(&[8, 8]).unwrap();
    let a = p
        .create_array(m, DType::I64, row_dist(&m, 4, &devices).unwrap(), Some(Value::I64(1)))
        .unwrap();
    let b = p
        .create_array(m, DType::I64, row_dist(&m, 4, &devices).unwrap(), Some(Value::I64(2)))
        .unwrap();
    let c = p.create_array(m, DType::I64, row_dist(&m, 4, &devices).unwrap(), None).unwrap();
    let ann = parse_annotation("global [i, j] => read a[i, :], read b[:, j], write c[i, j]").unwrap();
    let work = block_work_dist(&m, &pt(&[4, 4]), &pt(&[4, 8]), &devices).unwrap();
    let plan = p
        .plan_launch(&Launch {
            kernel: "matmul",
            grid: m,
            block_size: pt(&[4, 4]),
            work: &work,
            args: vec![LaunchArg::Array(a.id), LaunchArg::Array(b.id), LaunchArg::Array(c.id)],
            annotation: &ann,
        })
        .unwrap();
    plan.validate().unwrap();

    let temp_creates: Vec<&ChunkMeta> = plan
        .tasks
        .iter()
        .filter_map(|t| match &t.kind {
            TaskKind::Create { chunk, .. } if chunk.is_temporary() => Some(chunk),
            _ => None,
        })
        .collect();
    assert_eq!(temp_creates.len(), 2);
    assert!(temp_creates.iter().all(|c| c.region == m));
    // each temp B is assembled from both B chunks; one is local, one is on the other device
    assert_eq!(plan.count_kind("Copy"), 4);
    for t in &plan.tasks {
        if let TaskKind::Execute { args, .. } = &t.kind {
            let ExecArg::Array { chunk, .. } = &args[0] else { panic!() };
            assert!(a.chunks.contains(chunk));
            let ExecArg::Array { chunk, .. } = &args[2] else { panic!() };
            assert!(c.chunks.contains(chunk));
        }
    }
}

#[test]
fn column_distribution_touches_every_chunk() {
    let m = Rect::from_extents(&[12, 12]).unwrap();
    let devices = system22().devices();
    let cols = col_dist(&m, 3, &devices).unwrap();
    let row_region = Rect::from_bounds(&[(3, 6), (0, 12)]).unwrap();
    assert_eq!(cols.chunks_intersecting(&row_region).len(), 4);
}

#[test]
fn spmv_replicated_vector_needs_no_transfers_for_reads() {
    let system = system22();
    let devices = system.devices();
    let mut p = planner(system);
    let n = 64;
    let vec_domain = Rect::from_extents(&[n]).unwrap();
    let mat = Rect::from_extents(&[n, 4]).unwrap();
    let vals = p
        .create_array(mat, DType::I64, row_dist(&mat, 16, &devices).unwrap(), Some(Value::I64(1)))
        .unwrap();
    let cols = p
        .create_array(mat, DType::I64, row_dist(&mat, 16, &devices).unwrap(), Some(Value::I64(0)))
        .unwrap();
    let x = p
        .create_array(vec_domain, DType::I64, replicated_dist(&vec_domain, &devices).unwrap(), Some(Value::I64(1)))
        .unwrap();
    let y = p
        .create_array(vec_domain, DType::I64, row_dist(&vec_domain, 16, &devices).unwrap(), None)
        .unwrap();
    let ann = parse_annotation("global i => read vals[i, :], read cols[i, :], read x[:], write y[i]").unwrap();
    let work = block_work_dist(&vec_domain, &pt(&[8]), &pt(&[16]), &devices).unwrap();
    let plan = p
        .plan_launch(&Launch {
            kernel: "spmv_ell",
            grid: vec_domain,
            block_size: pt(&[8]),
            work: &work,
            args: vec![
                LaunchArg::Array(vals.id),
                LaunchArg::Array(cols.id),
                LaunchArg::Array(x.id),
                LaunchArg::Array(y.id),
            ],
            annotation: &ann,
        })
        .unwrap();
    let launch: Vec<_> = launch_tasks(&plan);
    assert_eq!(launch.len(), 4);
    assert!(launch.iter().all(|t| matches!(t.kind, TaskKind::Execute { .. })));
}

fn reduce_plan(superblock_rows: i64, system: SystemInfo) -> (Planner, ExecutionPlan) {
    let mut p = planner(system);
    let devices = system.devices();
    let m = Rect::from_extents(&[8, 8]).unwrap();
    let v = Rect::from_extents(&[8]).unwrap();
    let a = p
        .create_array(m, DType::I32, replicated_dist(&m, &devices).unwrap(), Some(Value::I32(1)))
        .unwrap();
    let sum = p
        .create_array(v, DType::I32, tile_dist(&v, &pt(&[8]), &devices).unwrap(), None)
        .unwrap();
    let ann = parse_annotation("global [i, j] => read a[i, j], reduce(+) out[i]").unwrap();
    let work = block_work_dist(&m, &pt(&[2, 2]), &pt(&[8, superblock_rows]), &devices).unwrap();
    let plan = p
        .plan_launch(&Launch {
            kernel: "row_reduce",
            grid: m,
            block_size: pt(&[2, 2]),
            work: &work,
            args: vec![LaunchArg::Array(a.id), LaunchArg::Array(sum.id)],
            annotation: &ann,
        })
        .unwrap();
    plan.validate().unwrap();
    (p, plan)
}

#[test]
fn single_superblock_reduction() {
    let (_, plan) = reduce_plan(8, SystemInfo::new(1, 1));
    assert_eq!(plan.count_kind("Reduce"), 1);
    let partials = plan
        .tasks
        .iter()
        .filter(|t| matches!(&t.kind, TaskKind::Create { chunk, fill: Some(v) } if chunk.is_temporary() && v.as_i64() == 0))
        .count();
    assert_eq!(partials, 1);
}

#[test]
fn hierarchical_reduction() {
    // two superblocks on two devices of one worker: one per-worker combine
    // and the final combine
    let (_, plan) = reduce_plan(4, SystemInfo::new(1, 2));
    assert_eq!(plan.count_kind("Reduce"), 2);

    // four superblocks over 2x2: one combine per worker, a message to the
    // root and the final combine
    let (_, plan) = reduce_plan(2, system22());
    assert_eq!(plan.count_kind("Reduce"), 3);
    let final_reduce = plan
        .tasks
        .iter()
        .rev()
        .find_map(|t| match &t.kind {
            TaskKind::Reduce { inputs, device, .. } => Some((inputs.len(), *device)),
            _ => None,
        })
        .unwrap();
    assert_eq!(final_reduce, (2, DeviceId::new(0, 0)));
    assert_eq!(plan.count_kind("Send"), 1);
}

#[test]
fn deterministic_plans() {
    let build = || {
        let mut s = stencil(512, 64, system22(), PlannerOptions::default());
        let a = s.iterate(false);
        let b = s.iterate(true);
        (a, b)
    };
    assert_eq!(build(), build());
    let (_, plan) = reduce_plan(2, system22());
    let (_, again) = reduce_plan(2, system22());
    assert_eq!(plan, again);
}

/// Every temporary is created before and deleted after all its other users,
/// as enforced by dependency paths.
fn check_temp_lifecycle(plan: &ExecutionPlan) {
    let by_id: HashMap<TaskId, &Task> = plan.tasks.iter().map(|t| (t.id, t)).collect();
    let reaches = |from: TaskId, to: TaskId| {
        let mut stack = vec![to];
        let mut seen = HashSet::new();
        while let Some(t) = stack.pop() {
            if t == from {
                return true;
            }
            if seen.insert(t) {
                if let Some(task) = by_id.get(&t) {
                    stack.extend(task.deps.iter().copied());
                }
            }
        }
        false
    };
    let mut users: HashMap<ChunkId, Vec<TaskId>> = HashMap::new();
    let mut creates = HashMap::new();
    let mut deletes = HashMap::new();
    for t in &plan.tasks {
        match &t.kind {
            TaskKind::Create { chunk, .. } if chunk.is_temporary() => {
                creates.insert(chunk.id, t.id);
            }
            TaskKind::Delete { chunk } => {
                deletes.insert(*chunk, t.id);
            }
            kind => {
                for (c, _) in kind.accesses() {
                    users.entry(c).or_default().push(t.id);
                }
            }
        }
    }
    assert!(!creates.is_empty());
    for (chunk, create) in &creates {
        let delete = deletes[chunk];
        for u in &users[chunk] {
            assert!(reaches(*create, *u), "{u} does not follow the creation of {chunk}");
            assert!(reaches(*u, delete), "deletion of {chunk} does not follow {u}");
        }
    }
}

#[test]
fn temporaries_are_scoped() {
    let (_, plan) = reduce_plan(2, system22());
    check_temp_lifecycle(&plan);

    let system = SystemInfo::new(2, 1);
    let mut p = planner(system);
    let devices = system.devices();
    let m = Rect::from_extents(&[8, 8]).unwrap();
    let a = p
        .create_array(m, DType::I64, row_dist(&m, 4, &devices).unwrap(), Some(Value::I64(3)))
        .unwrap();
    let b = p
        .create_array(m, DType::I64, col_dist(&m, 4, &devices).unwrap(), Some(Value::I64(2)))
        .unwrap();
    let c = p
        .create_array(m, DType::I64, col_dist(&m, 4, &devices).unwrap(), Some(Value::I64(0)))
        .unwrap();
    let ann = parse_annotation("global [i, j] => read a[i, :], read b[:, j], write c[i, j]").unwrap();
    let work = block_work_dist(&m, &pt(&[2, 2]), &pt(&[4, 4]), &devices).unwrap();
    let plan = p
        .plan_launch(&Launch {
            kernel: "matmul",
            grid: m,
            block_size: pt(&[2, 2]),
            work: &work,
            args: vec![LaunchArg::Array(a.id), LaunchArg::Array(b.id), LaunchArg::Array(c.id)],
            annotation: &ann,
        })
        .unwrap();
    plan.validate().unwrap();
    check_temp_lifecycle(&plan);
    assert!(plan.count_kind("Send") > 0);
}

#[test]
fn reading_unwritten_chunk_is_an_error() {
    let mut p = planner(SystemInfo::new(1, 1));
    let d = Rect::from_extents(&[16]).unwrap();
    let dev = [DeviceId::new(0, 0)];
    let a = p.create_array(d, DType::I32, tile_dist(&d, &pt(&[16]), &dev).unwrap(), None).unwrap();
    let b = p.create_array(d, DType::I32, tile_dist(&d, &pt(&[16]), &dev).unwrap(), None).unwrap();
    let ann = parse_annotation("global i => read x[i], write y[i]").unwrap();
    let work = WorkDistribution::single(&d, &pt(&[4]), dev[0]).unwrap();
    let err = p
        .plan_launch(&Launch {
            kernel: "axpy",
            grid: d,
            block_size: pt(&[4]),
            work: &work,
            args: vec![LaunchArg::Scalar(Value::I32(2)), LaunchArg::Array(a.id), LaunchArg::Array(b.id)],
            annotation: &ann,
        })
        .unwrap_err();
    assert!(matches!(err, PlanError::UninitializedRead { .. }), "{err}");
    // the failed launch left the queued creates in place
    assert_eq!(p.flush().len(), 2);
}

#[test]
fn launch_validation_errors() {
    let mut p = planner(SystemInfo::new(1, 1));
    let d = Rect::from_extents(&[16]).unwrap();
    let dev = [DeviceId::new(0, 0)];
    let a = p
        .create_array(d, DType::I32, tile_dist(&d, &pt(&[8]), &dev).unwrap(), Some(Value::I32(1)))
        .unwrap();
    let b = p
        .create_array(d, DType::I32, tile_dist(&d, &pt(&[8]), &dev).unwrap(), Some(Value::I32(1)))
        .unwrap();
    let work = block_work_dist(&d, &pt(&[4]), &pt(&[8]), &dev).unwrap();
    let launch = |kernel: &'static str, ann: &str, args: Vec<LaunchArg>, p: &mut Planner| {
        let ann = parse_annotation(ann).unwrap();
        p.plan_launch(&Launch {
            kernel,
            grid: d,
            block_size: pt(&[4]),
            work: &work,
            args,
            annotation: &ann,
        })
    };
    let s = LaunchArg::Scalar(Value::I32(2));

    let err = launch("nope", "global i => read x[i]", vec![], &mut p).unwrap_err();
    assert!(matches!(err, PlanError::Kernel(KernelError::Unknown(_))));

    let err = launch(
        "axpy",
        "global i => read x[i], write y[0:15]",
        vec![s.clone(), LaunchArg::Array(a.id), LaunchArg::Array(b.id)],
        &mut p,
    )
    .unwrap_err();
    assert!(matches!(err, PlanError::WriteConflict(_)), "{err}");

    let err = launch(
        "axpy",
        "global i => read x[i], readwrite y[i]",
        vec![s.clone(), LaunchArg::Array(a.id), LaunchArg::Array(a.id)],
        &mut p,
    )
    .unwrap_err();
    assert_eq!(err, PlanError::RepeatedArray(a.id));

    let err = launch(
        "axpy",
        "global i => read x[i]",
        vec![s.clone(), LaunchArg::Array(a.id), LaunchArg::Array(b.id)],
        &mut p,
    )
    .unwrap_err();
    assert_eq!(err, PlanError::MissingAccess("y".into()));

    let err = launch(
        "axpy",
        "global i => read x[i], readwrite y[i], read alpha[i]",
        vec![s.clone(), LaunchArg::Array(a.id), LaunchArg::Array(b.id)],
        &mut p,
    )
    .unwrap_err();
    assert_eq!(err, PlanError::UnknownAccess("alpha".into()));

    p.delete_array(b.id).unwrap();
    let err = launch(
        "axpy",
        "global i => read x[i], readwrite y[i]",
        vec![s, LaunchArg::Array(a.id), LaunchArg::Array(b.id)],
        &mut p,
    )
    .unwrap_err();
    assert!(matches!(err, PlanError::Registry(RegistryError::Deleted(_))));
    assert!(matches!(p.delete_array(b.id), Err(PlanError::Registry(RegistryError::Deleted(_)))));
}

#[test]
fn delete_orders_after_users() {
    let mut s = stencil(256, 64, system22(), PlannerOptions::default());
    let plan = s.iterate(false);
    let executes: HashSet<TaskId> = plan
        .tasks
        .iter()
        .filter(|t| matches!(t.kind, TaskKind::Execute { .. }))
        .map(|t| t.id)
        .collect();
    s.planner.delete_array(s.a.id).unwrap();
    let deletes = s.planner.flush();
    assert_eq!(deletes.count_kind("Delete"), 4);
    for t in &deletes.tasks {
        assert!(t.deps.iter().any(|d| executes.contains(d)));
    }

    let mut p = planner(SystemInfo::new(1, 1));
    let d = Rect::from_extents(&[4]).unwrap();
    let h = p
        .create_array(d, DType::I32, tile_dist(&d, &pt(&[4]), &[DeviceId::new(0, 0)]).unwrap(), None)
        .unwrap();
    let creates = p.flush();
    p.delete_array(h.id).unwrap();
    let del = p.flush();
    assert_eq!(del.tasks[0].deps, vec![creates.tasks[0].id]);
}

#[test]
fn dot_export() {
    assert_eq!(export_dot(&ExecutionPlan::default()).matches("[label=").count(), 0);

    let mut p = planner(SystemInfo::new(1, 1));
    let d = Rect::from_extents(&[4]).unwrap();
    let dev = DeviceId::new(0, 0);
    let h = p
        .create_array(d, DType::I32, tile_dist(&d, &pt(&[4]), &[dev]).unwrap(), None)
        .unwrap();
    let ann = parse_annotation("global i => write out[i]").unwrap();
    let work = WorkDistribution::single(&d, &pt(&[4]), dev).unwrap();
    let plan = p
        .plan_launch(&Launch {
            kernel: "fill",
            grid: d,
            block_size: pt(&[4]),
            work: &work,
            args: vec![LaunchArg::Array(h.id), LaunchArg::Scalar(Value::I32(0))],
            annotation: &ann,
        })
        .unwrap();
    let dot = export_dot(&plan);
    assert_eq!(dot.matches("[label=").count(), 2);
    assert_eq!(dot.matches(" -> ").count(), 1);
    assert_eq!(dot, export_dot(&plan));

    let mut s = stencil(256, 64, system22(), PlannerOptions::default());
    let mut all = ExecutionPlan::default();
    for it in 0..4 {
        all.extend(s.iterate(it % 2 == 1));
    }
    let dot = export_dot(&all);
    assert_eq!(dot.matches("[label=").count(), all.len());
    assert_eq!(dot.matches("style=dashed").count(), 4 * 2);
    assert!(dot.contains("subgraph cluster_0") && dot.contains("subgraph cluster_1"));
}
