//! Randomized scenarios checked against the serial oracle.
//!
//! Scenarios use probe kernels that do exactly what their annotation
//! declares: each thread hashes every element it may read, writes its
//! declared cells and folds small values into its reduce cells.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Result};
use lightning_core::annotation::{evaluate_region, parse_annotation, AccessMode};
use lightning_core::geometry::Rect;
use lightning_core::planner::{ExecutionPlan, PlannerOptions, TaskKind};
use lightning_core::runtime::kernel::{KernelDef, KernelRegistry, Param};
use lightning_core::runtime::kernels::mix64;
use lightning_core::runtime::{DiskMode, ReadyOrder};
use lightning_core::types::{ChunkId, DType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::{compare, serial_run};
use crate::scenario::{ArgSpec, ArraySpec, DistSpec, LaunchSpec, Scenario, SystemSpec, WorkSpec};
use crate::simulate::{plan_only, simulate, RunOptions};

pub const PROBE_PREFIX: &str = "probe_";

/// A kernel that performs exactly the accesses of `annotation`. Parameters
/// are the annotated arrays in order, then an `i64` salt.
pub fn probe_kernel(name: &str, annotation: &str) -> Result<KernelDef> {
    let ann = parse_annotation(annotation)?;
    let arrays: Vec<String> = ann.accesses.iter().map(|a| a.argument.clone()).collect();
    let mut params: Vec<Param> = arrays.iter().map(|a| Param::array(a, 0, Some(DType::I64))).collect();
    params.push(Param::scalar("salt", Some(DType::I64)));
    let salt_index = arrays.len();
    Ok(KernelDef::new(name, params, move |ctx, args| {
        let views: Vec<_> = (0..arrays.len()).map(|k| args.view::<i64>(k)).collect();
        let domains: HashMap<String, Rect> = arrays.iter().cloned().zip(views.iter().map(|v| *v.domain())).collect();
        let salt = args.scalar::<i64>(salt_index) as u64;
        for t in ctx.threads() {
            let lo = t;
            let hi = lo + lightning_core::geometry::Point::splat(lo.rank(), 1);
            let thread = Rect::new(lo, hi).expect("unit box");
            let regions = evaluate_region(&ann, &thread, &ctx.block_size, &domains).expect("validated annotation");
            let linear = ctx.grid.linear_index(&t).expect("thread inside grid") as u64;
            let mut h = mix64(linear ^ salt);
            for (k, r) in regions.iter().enumerate() {
                if r.mode.reads() {
                    for p in r.region.points() {
                        h = mix64(h ^ views[k].get(p.as_slice()) as u64);
                    }
                }
            }
            for (k, r) in regions.iter().enumerate() {
                for p in r.region.points() {
                    let at = p.as_slice();
                    match r.mode {
                        AccessMode::Read => {}
                        AccessMode::Write => views[k].set(at, (h % 1000) as i64 + k as i64),
                        AccessMode::ReadWrite => {
                            views[k].set(at, views[k].get(at).wrapping_add((h % 10) as i64).rem_euclid(1_000_003))
                        }
                        AccessMode::Reduce(_) => views[k].reduce(at, (h % 7) as i64 + 1),
                    }
                }
            }
        }
    }))
}

/// Built-in kernels plus a probe for every `probe_*` launch of the scenario.
pub fn registry_for(scenario: &Scenario) -> Result<KernelRegistry> {
    let mut reg = KernelRegistry::with_builtins();
    for l in &scenario.launches {
        if l.kernel.starts_with(PROBE_PREFIX) && reg.get(&l.kernel).is_err() {
            reg.register(probe_kernel(&l.kernel, &l.annotation)?)?;
        }
    }
    Ok(reg)
}

struct Gen {
    rng: ChaCha8Rng,
}

const VARS: [&str; 2] = ["i", "j"];
const BLOCK_VARS: [&str; 2] = ["bi", "bj"];

impl Gen {
    fn coefficient(&mut self) -> i64 {
        *[1, 1, 1, 2, 3, -1, -2].choose(&mut self.rng).expect("non-empty")
    }

    fn term(&mut self, var: &str, coefficient: i64, offset: i64) -> String {
        let mut s = match coefficient {
            1 => var.to_string(),
            -1 => format!("-{var}"),
            c => format!("{c}*{var}"),
        };
        if offset > 0 {
            write!(s, "+{offset}").unwrap();
        } else if offset < 0 {
            write!(s, "{offset}").unwrap();
        }
        s
    }

    /// A read/reduce index: constant, variable expression or slice.
    fn loose_index(&mut self, vars: &[&str]) -> String {
        let var = *vars.choose(&mut self.rng).expect("bound variables");
        match self.rng.gen_range(0..6) {
            0 => self.rng.gen_range(0..4).to_string(),
            1 => ":".into(),
            2 => {
                let a = self.rng.gen_range(-2..=1);
                let b = a + self.rng.gen_range(-1..=3);
                format!("{}:{}", self.term(var, 1, a), self.term(var, 1, b))
            }
            _ => {
                let c = self.coefficient();
                let off = self.rng.gen_range(-3..=3);
                self.term(var, c, off)
            }
        }
    }

    fn scenario(&mut self) -> Scenario {
        let rng = &mut self.rng;
        let system = SystemSpec {
            granularity: 256,
            disk: DiskMode::Memory,
            ..SystemSpec::new(rng.gen_range(1..=3), rng.gen_range(1..=3))
        };
        let rank = rng.gen_range(1..=2);
        let grid: Vec<i64> = if rank == 1 {
            vec![rng.gen_range(1..=96)]
        } else {
            vec![rng.gen_range(1..=14), rng.gen_range(1..=14)]
        };
        let block: Vec<i64> = grid.iter().map(|_| rng.gen_range(1..=4)).collect();

        let n_arrays = rng.gen_range(2..=5);
        let mut arrays = vec![];
        for k in 0..n_arrays {
            let arank = if rank == 1 { 1 } else { rng.gen_range(1..=2) };
            let domain: Vec<i64> = (0..arank)
                .map(|_| if rank == 1 { rng.gen_range(1..=110) } else { rng.gen_range(1..=18) })
                .collect();
            let distribution = match rng.gen_range(0..7) {
                0 => DistSpec::Single,
                1 | 2 => DistSpec::Tile {
                    chunk: domain.iter().map(|&d| rng.gen_range(1..=d)).collect(),
                },
                3 => DistSpec::Stencil {
                    chunk: domain.iter().map(|&d| rng.gen_range(1..=d)).collect(),
                    halo: domain.iter().map(|_| rng.gen_range(0..=2)).collect(),
                },
                4 => DistSpec::Rows {
                    rows: rng.gen_range(1..=domain[0]),
                },
                5 if arank == 2 => DistSpec::Cols {
                    cols: rng.gen_range(1..=domain[1]),
                },
                _ => DistSpec::Replicated,
            };
            arrays.push(ArraySpec {
                name: format!("a{k}"),
                domain,
                dtype: DType::I64,
                distribution,
                fill: Some(rng.gen_range(-5..=20) as f64),
            });
        }

        let n_launches = self.rng.gen_range(1..=4);
        let mut launches = vec![];
        for n in 0..n_launches {
            launches.push(self.launch(n, &grid, &block, &arrays));
        }
        Scenario {
            name: "fuzz".into(),
            system,
            arrays,
            launches,
            seed: None,
        }
    }

    fn launch(&mut self, n: usize, grid: &[i64], block: &[i64], arrays: &[ArraySpec]) -> LaunchSpec {
        let rank = grid.len();
        let vars = &VARS[..rank];
        let use_blocks = self.rng.gen_bool(0.2);
        let mut loose: Vec<&str> = vars.to_vec();
        if use_blocks {
            loose.extend(&BLOCK_VARS[..rank]);
        }

        let mut pool: Vec<&ArraySpec> = arrays.iter().collect();
        pool.shuffle(&mut self.rng);
        let count = self.rng.gen_range(1..=pool.len().min(3));
        let mut accesses = vec![];
        let mut args = vec![];
        for (k, a) in pool.into_iter().take(count).enumerate() {
            let arank = a.domain.len();
            // writes need an injective thread-to-cell map
            let can_write = arank == rank;
            let mode = match self.rng.gen_range(0..10) {
                0..=3 => "read".to_string(),
                4..=5 if can_write => "write".into(),
                6 if can_write => "readwrite".into(),
                _ => format!("reduce({})", ["+", "min", "max"].choose(&mut self.rng).expect("non-empty")),
            };
            let indices: Vec<String> = if mode == "write" || mode == "readwrite" {
                let mut order: Vec<&str> = vars.to_vec();
                order.shuffle(&mut self.rng);
                order
                    .iter()
                    .map(|v| {
                        let c = self.coefficient();
                        let off = self.rng.gen_range(-2..=4);
                        self.term(v, c, off)
                    })
                    .collect()
            } else {
                (0..arank).map(|_| self.loose_index(&loose)).collect()
            };
            accesses.push(format!("{mode} p{k}[{}]", indices.join(", ")));
            args.push(ArgSpec::Array(a.name.clone()));
        }
        args.push(ArgSpec::Scalar(self.rng.gen_range(0..1_000_000).into()));

        let bind = |space: &str, names: &[&str]| {
            if names.len() == 1 {
                format!("{space} {}", names[0])
            } else {
                format!("{space} [{}]", names.join(", "))
            }
        };
        let mut binding = bind("global", vars);
        if use_blocks {
            binding = format!("{binding}, {}", bind("block", &BLOCK_VARS[..rank]));
        }
        let work = if self.rng.gen_bool(0.15) {
            WorkSpec::Single
        } else {
            WorkSpec::Blocks {
                threads: block.iter().map(|&b| b * self.rng.gen_range(1..=4)).collect(),
            }
        };
        LaunchSpec {
            kernel: format!("{PROBE_PREFIX}{n}"),
            grid: grid.to_vec(),
            block: block.to_vec(),
            work,
            annotation: format!("{binding} => {}", accesses.join(", ")),
            args,
            repeat: 1,
            swap: None,
        }
    }
}

/// Largest per-device footprint of any task, in granularity-rounded bytes.
fn max_footprint(plans: &[ExecutionPlan], granularity: u64) -> u64 {
    let mut bytes: HashMap<ChunkId, (u64, usize)> = HashMap::new();
    let round = |b: u64| b.div_ceil(granularity) * granularity;
    let mut max = granularity;
    for t in plans.iter().flat_map(|p| &p.tasks) {
        if let TaskKind::Create { chunk, .. } = &t.kind {
            bytes.insert(chunk.id, (round(chunk.size_in_bytes()), chunk.home.device));
        }
        let mut per: HashMap<usize, u64> = HashMap::new();
        let mut chunks: Vec<ChunkId> = t.kind.accesses().into_iter().map(|a| a.0).collect();
        chunks.sort();
        chunks.dedup();
        for c in chunks {
            if let Some(&(b, d)) = bytes.get(&c) {
                *per.entry(d).or_default() += b;
            }
        }
        max = max.max(per.values().copied().max().unwrap_or(0));
    }
    max
}

#[derive(Debug, Clone)]
pub struct FuzzFailure {
    pub case: usize,
    pub seed: u64,
    pub message: String,
    pub scenario: Scenario,
    pub reproduced: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FuzzConfig {
    pub cases: usize,
    pub seed: u64,
    pub planner: PlannerOptions,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        Self {
            cases: 200,
            seed: 0,
            planner: PlannerOptions::default(),
        }
    }
}

/// The scenario of one fuzz case.
pub fn generate(case_seed: u64) -> Result<Scenario> {
    let mut gen = Gen {
        rng: ChaCha8Rng::seed_from_u64(case_seed),
    };
    let mut scenario = gen.scenario();
    let kernels = Arc::new(registry_for(&scenario)?);
    let plans = plan_only(&scenario, kernels).map_err(|e| anyhow!("{e}"))?;
    let need = max_footprint(&plans, scenario.system.granularity);
    let total: u64 = scenario
        .arrays
        .iter()
        .map(|a| a.domain.iter().product::<i64>() as u64 * 8)
        .sum();
    let rng = &mut gen.rng;
    if rng.gen_bool(0.5) {
        scenario.system.device_capacity = rng.gen_range(need..=need * 3);
        scenario.system.host_capacity = rng.gen_range(scenario.system.granularity..=total.max(512) * 2);
    }
    scenario.system.throttle = if rng.gen_bool(0.5) {
        rng.gen_range(need..=need * 2)
    } else {
        lightning_core::runtime::memory::MIB
    };
    scenario.seed = Some(case_seed);
    Ok(scenario)
}

/// Runs one scenario and compares it with the oracle; `Err` describes the
/// first discrepancy.
pub fn check_case(scenario: &Scenario, planner: PlannerOptions) -> Result<(), String> {
    let kernels = registry_for(scenario).map_err(|e| e.to_string())?;
    let expected = serial_run(scenario, &kernels).map_err(|e| format!("oracle failed: {e:#}"))?;
    let options = RunOptions {
        order: scenario.seed.map_or(ReadyOrder::Fifo, ReadyOrder::Random),
        planner,
        watchdog: Duration::from_secs(10),
    };
    let outcome = simulate(scenario, Arc::new(kernels), options, false).map_err(|e| e.to_string())?;
    let report = compare(&expected, &outcome.arrays, None);
    if report.pass {
        return Ok(());
    }
    let bad = report.arrays.iter().find(|a| !a.pass).expect("a failing array");
    Err(format!(
        "array `{}` differs from the oracle at element {} (max abs error {})",
        bad.name,
        bad.first_mismatch.unwrap_or(0),
        bad.max_abs_error
    ))
}

pub fn case_seed(campaign: u64, case: usize) -> u64 {
    mix64(campaign ^ mix64(case as u64))
}

/// Runs `config.cases` cases and stops at the first failure, which is rerun
/// once to see whether it reproduces.
pub fn run_campaign(config: &FuzzConfig, mut progress: impl FnMut(usize, u64)) -> Result<Option<FuzzFailure>> {
    for case in 0..config.cases {
        let seed = case_seed(config.seed, case);
        progress(case, seed);
        let scenario = generate(seed)?;
        if let Err(message) = check_case(&scenario, config.planner) {
            let reproduced = check_case(&scenario, config.planner).is_err();
            return Ok(Some(FuzzFailure {
                case,
                seed,
                message,
                scenario,
                reproduced,
            }));
        }
    }
    Ok(None)
}
