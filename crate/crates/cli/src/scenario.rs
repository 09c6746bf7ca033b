//! Scenario files: a system, some arrays and a sequence of launches.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use lightning_core::distribution::{
    block_work_dist, col_dist, replicated_dist, row_dist, stencil_dist, tile_dist, DataDistribution, DeviceId,
    SystemInfo, WorkDistribution,
};
use lightning_core::geometry::{Point, Rect};
use lightning_core::runtime::{DiskMode, MemoryConfig};
use lightning_core::types::{DType, Value};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub system: SystemSpec,
    pub arrays: Vec<ArraySpec>,
    #[serde(default)]
    pub launches: Vec<LaunchSpec>,
    /// Seeds the ready-queue order; FIFO when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub workers: usize,
    pub devices_per_worker: usize,
    #[serde(default = "defaults::device_capacity")]
    pub device_capacity: u64,
    #[serde(default = "defaults::host_capacity")]
    pub host_capacity: u64,
    #[serde(default = "defaults::throttle")]
    pub throttle: u64,
    #[serde(default = "defaults::granularity")]
    pub granularity: u64,
    #[serde(default = "defaults::disk")]
    pub disk: DiskMode,
}

mod defaults {
    use super::*;

    pub fn device_capacity() -> u64 {
        MemoryConfig::default().device_capacity
    }
    pub fn host_capacity() -> u64 {
        MemoryConfig::default().host_capacity
    }
    pub fn throttle() -> u64 {
        MemoryConfig::default().throttle
    }
    pub fn granularity() -> u64 {
        MemoryConfig::default().granularity
    }
    pub fn disk() -> DiskMode {
        DiskMode::Memory
    }
}

impl SystemSpec {
    pub fn new(workers: usize, devices_per_worker: usize) -> Self {
        Self {
            workers,
            devices_per_worker,
            device_capacity: defaults::device_capacity(),
            host_capacity: defaults::host_capacity(),
            throttle: defaults::throttle(),
            granularity: defaults::granularity(),
            disk: defaults::disk(),
        }
    }

    pub fn info(&self) -> SystemInfo {
        SystemInfo::new(self.workers, self.devices_per_worker)
    }

    pub fn memory(&self) -> MemoryConfig {
        MemoryConfig {
            device_capacity: self.device_capacity,
            host_capacity: self.host_capacity,
            granularity: self.granularity,
            throttle: self.throttle,
            disk: self.disk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub name: String,
    pub domain: Vec<i64>,
    pub dtype: DType,
    pub distribution: DistSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DistSpec {
    /// The whole array as one chunk on the first device.
    Single,
    Tile {
        chunk: Vec<i64>,
    },
    Stencil {
        chunk: Vec<i64>,
        halo: Vec<i64>,
    },
    Rows {
        rows: i64,
    },
    Cols {
        cols: i64,
    },
    Replicated,
    Custom {
        chunks: Vec<Placed>,
    },
}

/// A box `[lo, hi)` on one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placed {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
    pub worker: usize,
    pub device: usize,
}

impl Placed {
    fn resolve(&self) -> Result<(Rect, DeviceId)> {
        let bounds: Vec<(i64, i64)> = self.lo.iter().copied().zip(self.hi.iter().copied()).collect();
        if self.lo.len() != self.hi.len() {
            bail!("box bounds {:?} and {:?} differ in rank", self.lo, self.hi);
        }
        Ok((Rect::from_bounds(&bounds)?, DeviceId::new(self.worker, self.device)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorkSpec {
    /// Every thread block in one superblock on the first device.
    Single,
    /// Tiles of `threads` threads per axis, round-robin over all devices.
    Blocks {
        threads: Vec<i64>,
    },
    /// Explicit superblocks in thread-block index space.
    Custom {
        superblocks: Vec<Placed>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgSpec {
    Array(String),
    Scalar(serde_json::Number),
}

impl ArgSpec {
    pub fn scalar_value(n: &serde_json::Number) -> Value {
        match n.as_i64() {
            Some(i) => Value::I64(i),
            None => Value::F64(n.as_f64().expect("JSON numbers are finite")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchSpec {
    pub kernel: String,
    pub grid: Vec<i64>,
    pub block: Vec<i64>,
    pub work: WorkSpec,
    pub annotation: String,
    pub args: Vec<ArgSpec>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub repeat: usize,
    /// Two array names exchanged in `args` after every repetition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap: Option<(String, String)>,
}

fn one() -> usize {
    1
}

fn is_one(n: &usize) -> bool {
    *n == 1
}

pub fn point(coords: &[i64]) -> Result<Point> {
    Ok(Point::new(coords)?)
}

pub fn extents(coords: &[i64]) -> Result<Rect> {
    Ok(Rect::from_extents(coords)?)
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }

    /// Checks names and shapes; distribution and annotation checks happen
    /// when the scenario is built.
    pub fn validate(&self) -> Result<()> {
        if self.system.workers == 0 || self.system.devices_per_worker == 0 {
            bail!("the system needs at least one worker and one device");
        }
        let mut names = HashMap::new();
        for a in &self.arrays {
            if names.insert(a.name.as_str(), a).is_some() {
                bail!("array `{}` is declared twice", a.name);
            }
        }
        for (n, l) in self.launches.iter().enumerate() {
            if l.grid.len() != l.block.len() {
                bail!("launch {n} (`{}`): grid and block rank differ", l.kernel);
            }
            for arg in &l.args {
                if let ArgSpec::Array(name) = arg {
                    if !names.contains_key(name.as_str()) {
                        bail!("launch {n} (`{}`) uses unknown array `{name}`", l.kernel);
                    }
                }
            }
            if let Some((x, y)) = &l.swap {
                for name in [x, y] {
                    if !names.contains_key(name.as_str()) {
                        bail!("launch {n} swaps unknown array `{name}`");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn with_system(mut self, workers: usize, devices_per_worker: usize) -> Self {
        self.system.workers = workers;
        self.system.devices_per_worker = devices_per_worker;
        self
    }

    pub fn array(&self, name: &str) -> Result<&ArraySpec> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| anyhow!("unknown array `{name}`"))
    }

    /// Launches with repetitions expanded and swaps applied.
    pub fn expanded_launches(&self) -> Vec<LaunchSpec> {
        let mut out = vec![];
        for l in &self.launches {
            let mut args = l.args.clone();
            for _ in 0..l.repeat {
                out.push(LaunchSpec {
                    args: args.clone(),
                    repeat: 1,
                    swap: None,
                    ..l.clone()
                });
                if let Some((x, y)) = &l.swap {
                    for a in &mut args {
                        if let ArgSpec::Array(name) = a {
                            if name == x {
                                *name = y.clone();
                            } else if name == y {
                                *name = x.clone();
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl ArraySpec {
    pub fn domain(&self) -> Result<Rect> {
        extents(&self.domain)
    }

    pub fn fill_value(&self) -> Option<Value> {
        self.fill.map(|v| Value::from_f64(self.dtype, v))
    }

    pub fn distribution(&self, system: &SystemInfo) -> Result<DataDistribution> {
        let domain = self.domain()?;
        let devices = system.devices();
        let dist = match &self.distribution {
            DistSpec::Single => tile_dist(&domain, &domain.extents(), &devices[..1])?,
            DistSpec::Tile { chunk } => tile_dist(&domain, &point(chunk)?, &devices)?,
            DistSpec::Stencil { chunk, halo } => stencil_dist(&domain, &point(chunk)?, &point(halo)?, &devices)?,
            DistSpec::Rows { rows } => row_dist(&domain, *rows, &devices)?,
            DistSpec::Cols { cols } => col_dist(&domain, *cols, &devices)?,
            DistSpec::Replicated => replicated_dist(&domain, &devices)?,
            DistSpec::Custom { chunks } => {
                let chunks = chunks.iter().map(Placed::resolve).collect::<Result<Vec<_>>>()?;
                DataDistribution::custom(&domain, chunks)?
            }
        };
        Ok(dist)
    }
}

impl LaunchSpec {
    pub fn grid(&self) -> Result<Rect> {
        extents(&self.grid)
    }

    pub fn block_size(&self) -> Result<Point> {
        point(&self.block)
    }

    pub fn work(&self, system: &SystemInfo) -> Result<WorkDistribution> {
        let grid = self.grid()?;
        let block = self.block_size()?;
        let devices = system.devices();
        Ok(match &self.work {
            WorkSpec::Single => WorkDistribution::single(&grid, &block, devices[0])?,
            WorkSpec::Blocks { threads } => block_work_dist(&grid, &block, &point(threads)?, &devices)?,
            WorkSpec::Custom { superblocks } => {
                let sbs = superblocks.iter().map(Placed::resolve).collect::<Result<Vec<_>>>()?;
                WorkDistribution::custom(&grid, &block, sbs)?
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "name": "sample",
        "system": {"workers": 2, "devices_per_worker": 2},
        "arrays": [
            {"name": "a", "domain": [64], "dtype": "f32",
             "distribution": {"kind": "stencil", "chunk": [16], "halo": [1]}, "fill": 1.0},
            {"name": "b", "domain": [64], "dtype": "f32",
             "distribution": {"kind": "stencil", "chunk": [16], "halo": [1]}, "fill": 0}
        ],
        "launches": [
            {"kernel": "stencil_1d", "grid": [64], "block": [8],
             "work": {"kind": "blocks", "threads": [16]},
             "annotation": "global i => read input[i-1:i+1], write output[i]",
             "args": [64, "b", "a"], "repeat": 3, "swap": ["a", "b"]}
        ],
        "seed": 5
    }"#;

    #[test]
    fn round_trip() {
        let s = Scenario::parse(SAMPLE).unwrap();
        let again = Scenario::parse(&s.to_json()).unwrap();
        assert_eq!(s, again);
        assert_eq!(again.to_json(), s.to_json());
    }

    #[test]
    fn expansion_swaps_arrays() {
        let s = Scenario::parse(SAMPLE).unwrap();
        let names: Vec<Vec<String>> = s
            .expanded_launches()
            .iter()
            .map(|l| {
                l.args
                    .iter()
                    .filter_map(|a| match a {
                        ArgSpec::Array(n) => Some(n.clone()),
                        ArgSpec::Scalar(_) => None,
                    })
                    .collect()
            })
            .collect();
        assert_eq!(names, vec![vec!["b", "a"], vec!["a", "b"], vec!["b", "a"]]);
    }

    #[test]
    fn builds_distributions() {
        let s = Scenario::parse(SAMPLE).unwrap();
        let sys = s.system.info();
        assert_eq!(s.arrays[0].distribution(&sys).unwrap().len(), 4);
        assert_eq!(s.launches[0].work(&sys).unwrap().len(), 4);
        assert_eq!(s.arrays[1].fill_value(), Some(Value::F32(0.0)));
    }

    #[test]
    fn rejects_unknown_names() {
        let bad = SAMPLE.replace(r#""b", "a"]"#, r#""b", "zz"]"#);
        assert!(Scenario::parse(&bad).unwrap_err().to_string().contains("zz"));
        let dup = SAMPLE.replace(r#""name": "b""#, r#""name": "a""#);
        assert!(Scenario::parse(&dup).is_err());
    }

    #[test]
    fn scalars_keep_integer_precision() {
        let n: serde_json::Number = serde_json::from_str("9007199254740993").unwrap();
        assert_eq!(ArgSpec::scalar_value(&n), Value::I64(9_007_199_254_740_993));
        let f: serde_json::Number = serde_json::from_str("0.25").unwrap();
        assert_eq!(ArgSpec::scalar_value(&f), Value::F64(0.25));
    }
}
