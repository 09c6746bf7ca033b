use std::sync::Arc;
use std::time::Duration;

use lightning_core::annotation::parse_annotation;
use lightning_core::distribution::{
    block_work_dist, replicated_dist, row_dist, stencil_dist, tile_dist, DeviceId, SystemInfo,
};
use lightning_core::geometry::{Point, Rect};
use lightning_core::planner::{ExecutionPlan, Launch, LaunchArg, MessageTag, Task, TaskKind};
use lightning_core::registry::ChunkMeta;
use lightning_core::runtime::kernel::{KernelDef, KernelRegistry, Param};
use lightning_core::runtime::kernels::pattern_value;
use lightning_core::runtime::{
    Cluster, ClusterConfig, DiskMode, MemoryConfig, MemoryError, ReadyOrder, RuntimeError,
};
use lightning_core::session::{Session, SessionConfig, SessionError};
use lightning_core::types::{Buffer, ChunkId, DType, TaskId, Value, WorkerId};

fn pt(c: &[i64]) -> Point {
    Point::new(c).unwrap()
}

fn config(workers: usize, devices: usize) -> SessionConfig {
    SessionConfig {
        system: SystemInfo::new(workers, devices),
        memory: MemoryConfig {
            disk: DiskMode::Memory,
            ..MemoryConfig::default()
        },
        watchdog: Duration::from_secs(20),
        ..SessionConfig::default()
    }
}

fn builtins() -> Arc<KernelRegistry> {
    Arc::new(KernelRegistry::with_builtins())
}

/// Serial three-point average with zero padding, same arithmetic as the kernel.
fn serial_stencil(input: &[f32]) -> Vec<f32> {
    let n = input.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { input[i - 1] } else { 0.0 };
            let right = if i + 1 < n { input[i + 1] } else { 0.0 };
            ((left + input[i] + right) as f64 / 3.0) as f32
        })
        .collect()
}

fn run_stencil(cfg: SessionConfig, n: i64, chunk: i64, iterations: usize) -> (Vec<f32>, lightning_core::runtime::Report) {
    let mut s = Session::new(cfg, builtins()).unwrap();
    let devices = cfg.system.devices();
    let domain = Rect::from_extents(&[n]).unwrap();
    let dist = stencil_dist(&domain, &pt(&[chunk]), &pt(&[1]), &devices).unwrap();
    let a = s.create_array(domain, DType::F32, dist.clone(), None).unwrap();
    let b = s.create_array(domain, DType::F32, dist, Some(Value::F32(0.0))).unwrap();
    let work = block_work_dist(&domain, &pt(&[32]), &pt(&[chunk]), &devices).unwrap();
    let init = parse_annotation("global i => write out[i]").unwrap();
    s.launch(&Launch {
        kernel: "init_pattern",
        grid: domain,
        block_size: pt(&[32]),
        work: &work,
        args: vec![LaunchArg::Array(a.id), LaunchArg::Scalar(Value::I64(7))],
        annotation: &init,
    })
    .unwrap();
    let ann = parse_annotation("global i => read input[i-1:i+1], write output[i]").unwrap();
    for it in 0..iterations {
        let (src, dst) = if it % 2 == 0 { (&a, &b) } else { (&b, &a) };
        s.launch(&Launch {
            kernel: "stencil_1d",
            grid: domain,
            block_size: pt(&[32]),
            work: &work,
            args: vec![
                LaunchArg::Scalar(Value::I32(n as i32)),
                LaunchArg::Array(dst.id),
                LaunchArg::Array(src.id),
            ],
            annotation: &ann,
        })
        .unwrap();
    }
    let last = if iterations % 2 == 0 { a.id } else { b.id };
    let out = match s.read_array(last).unwrap() {
        Buffer::F32(v) => v,
        other => panic!("unexpected {:?}", other.dtype()),
    };
    (out, s.finish().unwrap())
}

fn expected_stencil(n: i64, iterations: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..n as u64).map(|i| pattern_value::<f32>(i, 7)).collect();
    for _ in 0..iterations {
        v = serial_stencil(&v);
    }
    v
}

#[test]
fn stencil_matches_serial_oracle() {
    let (got, report) = run_stencil(config(2, 2), 4096, 512, 6);
    assert_eq!(got, expected_stencil(4096, 6));
    assert!(report.bytes_sent > 0);
    assert_eq!(report.bytes_sent, report.bytes_received);
    assert_eq!(report.evictions, 0);
    assert_eq!(report.throttle_violations, 0);
}

#[test]
fn stencil_survives_spilling() {
    let mut cfg = config(2, 2);
    cfg.memory = MemoryConfig {
        device_capacity: 8 * 1024,
        host_capacity: 8 * 1024,
        granularity: 1024,
        throttle: 8 * 1024,
        disk: DiskMode::File,
    };
    let (got, report) = run_stencil(cfg, 8192, 256, 4);
    assert_eq!(got, expected_stencil(8192, 4));
    assert!(report.evictions > 0);
    assert!(report.bytes_moved.get("host->disk").copied().unwrap_or(0) > 0);
    assert_eq!(report.throttle_violations, 0);
}

#[test]
fn random_ready_order_gives_same_result() {
    let expected = expected_stencil(2048, 5);
    for seed in 0..5 {
        let mut cfg = config(2, 2);
        cfg.order = ReadyOrder::Random(seed);
        let (got, _) = run_stencil(cfg, 2048, 128, 5);
        assert_eq!(got, expected, "seed {seed}");
    }
}

#[test]
fn hierarchical_row_sums() {
    let cfg = config(2, 2);
    let devices = cfg.system.devices();
    let mut s = Session::new(cfg, builtins()).unwrap();
    let m = Rect::from_extents(&[16, 16]).unwrap();
    let v = Rect::from_extents(&[16]).unwrap();
    let a = s
        .create_array(m, DType::I64, tile_dist(&m, &pt(&[8, 8]), &devices).unwrap(), None)
        .unwrap();
    let sums = s
        .create_array(v, DType::I64, row_dist(&v, 2, &devices).unwrap(), Some(Value::I64(-5)))
        .unwrap();
    let work = block_work_dist(&m, &pt(&[4, 4]), &pt(&[8, 8]), &devices).unwrap();
    let init = parse_annotation("global [i, j] => write out[i, j]").unwrap();
    s.launch(&Launch {
        kernel: "init_pattern",
        grid: m,
        block_size: pt(&[4, 4]),
        work: &work,
        args: vec![LaunchArg::Array(a.id), LaunchArg::Scalar(Value::I64(3))],
        annotation: &init,
    })
    .unwrap();
    let ann = parse_annotation("global [i, j] => read a[i, j], reduce(+) out[i]").unwrap();
    s.launch(&Launch {
        kernel: "row_reduce",
        grid: m,
        block_size: pt(&[4, 4]),
        work: &work,
        args: vec![LaunchArg::Array(a.id), LaunchArg::Array(sums.id)],
        annotation: &ann,
    })
    .unwrap();
    let got = s.read_array(sums.id).unwrap();
    let expected: Vec<i64> = (0..16u64)
        .map(|i| (0..16u64).map(|j| pattern_value::<i64>(i * 16 + j, 3)).sum())
        .collect();
    assert_eq!(got, Buffer::I64(expected));
    s.finish().unwrap();
}

#[test]
fn replicated_writes_stay_coherent() {
    let cfg = config(2, 1);
    let devices = cfg.system.devices();
    let mut s = Session::new(cfg, builtins()).unwrap();
    let d = Rect::from_extents(&[64]).unwrap();
    let x = s
        .create_array(d, DType::I32, replicated_dist(&d, &devices).unwrap(), Some(Value::I32(0)))
        .unwrap();
    let work = block_work_dist(&d, &pt(&[8]), &pt(&[32]), &devices).unwrap();
    let ann = parse_annotation("global i => write out[i]").unwrap();
    s.launch(&Launch {
        kernel: "fill",
        grid: d,
        block_size: pt(&[8]),
        work: &work,
        args: vec![LaunchArg::Array(x.id), LaunchArg::Scalar(Value::I32(9))],
        annotation: &ann,
    })
    .unwrap();
    assert_eq!(s.read_array(x.id).unwrap(), Buffer::I32(vec![9; 64]));
    s.delete_array(x.id).unwrap();
    s.finish().unwrap();
}

#[test]
fn oversized_chunk_is_a_fatal_error() {
    let mut cfg = config(1, 1);
    cfg.memory.device_capacity = 2 * 1024 * 1024;
    let devices = cfg.system.devices();
    let mut s = Session::new(cfg, builtins()).unwrap();
    let d = Rect::from_extents(&[3 * 1024 * 1024 / 4]).unwrap();
    s.create_array(d, DType::I32, tile_dist(&d, &d.extents(), &devices).unwrap(), None)
        .unwrap();
    match s.synchronize() {
        Err(SessionError::Runtime(RuntimeError::Memory(MemoryError::TooLarge { .. }))) => {}
        other => panic!("expected a capacity error, got {other:?}"),
    }
}

#[test]
fn kernel_panic_surfaces_as_error() {
    let mut kernels = KernelRegistry::with_builtins();
    kernels
        .register(KernelDef::new("explode", vec![Param::array("out", 1, None)], |_, _| {
            panic!("boom")
        }))
        .unwrap();
    let cfg = config(1, 1);
    let devices = cfg.system.devices();
    let mut s = Session::new(cfg, Arc::new(kernels)).unwrap();
    let d = Rect::from_extents(&[16]).unwrap();
    let x = s
        .create_array(d, DType::F64, tile_dist(&d, &pt(&[16]), &devices).unwrap(), None)
        .unwrap();
    let work = block_work_dist(&d, &pt(&[16]), &pt(&[16]), &devices).unwrap();
    let ann = parse_annotation("global i => write out[i]").unwrap();
    s.launch(&Launch {
        kernel: "explode",
        grid: d,
        block_size: pt(&[16]),
        work: &work,
        args: vec![LaunchArg::Array(x.id)],
        annotation: &ann,
    })
    .unwrap();
    let err = s.synchronize().unwrap_err().to_string();
    assert!(err.contains("boom"), "{err}");
}

#[test]
fn unmatched_receive_trips_the_watchdog() {
    let cfg = ClusterConfig {
        system: SystemInfo::new(2, 1),
        watchdog: Duration::from_millis(200),
        ..ClusterConfig::default()
    };
    let cluster = Cluster::start(cfg, builtins()).unwrap();
    let region = Rect::from_extents(&[4]).unwrap();
    let meta = ChunkMeta {
        id: ChunkId(0),
        array: None,
        region,
        dtype: DType::I32,
        home: DeviceId::new(0, 0),
    };
    let plan = ExecutionPlan {
        tasks: vec![
            Task {
                id: TaskId(0),
                worker: WorkerId(0),
                kind: TaskKind::Create { chunk: meta, fill: None },
                deps: vec![],
            },
            Task {
                id: TaskId(1),
                worker: WorkerId(0),
                kind: TaskKind::Recv {
                    chunk: ChunkId(0),
                    region,
                    peer: WorkerId(1),
                    tag: MessageTag { chunk: ChunkId(9), seq: 0 },
                },
                deps: vec![TaskId(0)],
            },
        ],
    };
    cluster.submit(plan).unwrap();
    assert_eq!(cluster.synchronize(), Err(RuntimeError::Stalled(Duration::from_millis(200))));
    let report = cluster.shutdown();
    assert_eq!(report.task_count("Create"), 1);
    assert_eq!(report.task_count("Recv"), 0);
}
