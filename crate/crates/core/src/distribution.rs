//! Work distributions (superblocks over the thread-block grid) and data
//! distributions (chunks over an array domain).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Point, Rect};
use crate::types::WorkerId;

#[derive(Debug, Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId {
    pub worker: usize,
    pub device: usize,
}

impl DeviceId {
    pub fn new(worker: usize, device: usize) -> Self {
        Self { worker, device }
    }

    pub fn worker_id(&self) -> WorkerId {
        WorkerId(self.worker)
    }
}

impl std::fmt::Display for DeviceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gpu{}:{}", self.worker, self.device)
    }
}

/// Shape of the simulated cluster.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemInfo {
    pub workers: usize,
    pub devices_per_worker: usize,
}

impl SystemInfo {
    pub fn new(workers: usize, devices_per_worker: usize) -> Self {
        Self {
            workers,
            devices_per_worker,
        }
    }

    /// All devices, worker-major.
    pub fn devices(&self) -> Vec<DeviceId> {
        (0..self.workers)
            .flat_map(|w| (0..self.devices_per_worker).map(move |d| DeviceId::new(w, d)))
            .collect()
    }

    pub fn contains(&self, device: &DeviceId) -> bool {
        device.worker < self.workers && device.device < self.devices_per_worker
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DistributionError {
    #[error("superblock extent {superblock} on axis {axis} is not a multiple of the block size {block}")]
    NotDivisible { axis: usize, superblock: i64, block: i64 },

    #[error("extent on axis {axis} must be positive, got {value}")]
    NonPositive { axis: usize, value: i64 },

    #[error("halo on axis {axis} must be non-negative, got {value}")]
    NegativeHalo { axis: usize, value: i64 },

    #[error("no devices given")]
    NoDevices,

    #[error("launch grid must start at the origin, got {0:?}")]
    GridOffset(Rect),

    #[error("superblocks do not partition the block grid: {0}")]
    NotAPartition(String),

    #[error("chunks do not cover the domain: {0}")]
    NotCovering(String),

    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Disjoint superblocks, in thread-block index space, each assigned to a device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkDistribution {
    superblocks: Vec<(Rect, DeviceId)>,
}

impl WorkDistribution {
    /// A custom distribution. The superblocks must partition the block grid
    /// of `grid` exactly.
    pub fn custom(
        grid: &Rect,
        block_size: &Point,
        superblocks: Vec<(Rect, DeviceId)>,
    ) -> Result<Self, DistributionError> {
        let dist = Self { superblocks };
        dist.validate(grid, block_size)?;
        Ok(dist)
    }

    /// One superblock covering the whole grid.
    pub fn single(grid: &Rect, block_size: &Point, device: DeviceId) -> Result<Self, DistributionError> {
        let blocks = block_grid(grid, block_size)?;
        Ok(Self {
            superblocks: vec![(blocks, device)],
        })
    }

    pub fn superblocks(&self) -> &[(Rect, DeviceId)] {
        &self.superblocks
    }

    pub fn len(&self) -> usize {
        self.superblocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superblocks.is_empty()
    }

    /// Checks pairwise disjointness and exact coverage by cell counting.
    pub fn validate(&self, grid: &Rect, block_size: &Point) -> Result<(), DistributionError> {
        let blocks = block_grid(grid, block_size)?;
        let mut total = 0;
        for (n, (a, _)) in self.superblocks.iter().enumerate() {
            if !blocks.contains(a)? {
                return Err(DistributionError::NotAPartition(format!(
                    "superblock {n} {a:?} lies outside the block grid {blocks:?}"
                )));
            }
            for (m, (b, _)) in self.superblocks.iter().enumerate().skip(n + 1) {
                if a.overlaps(b)? {
                    return Err(DistributionError::NotAPartition(format!(
                        "superblocks {n} and {m} overlap"
                    )));
                }
            }
            total += a.volume();
        }
        if total != blocks.volume() {
            return Err(DistributionError::NotAPartition(format!(
                "superblocks cover {total} of {} blocks",
                blocks.volume()
            )));
        }
        Ok(())
    }
}

/// Block-index rect covering a thread grid that starts at the origin.
pub fn block_grid(grid: &Rect, block_size: &Point) -> Result<Rect, DistributionError> {
    if grid.lo() != Point::zeros(grid.rank()) {
        return Err(DistributionError::GridOffset(*grid));
    }
    if block_size.rank() != grid.rank() {
        return Err(GeometryError::RankMismatch(block_size.rank(), grid.rank()).into());
    }
    let mut extents = vec![];
    for k in 0..grid.rank() {
        if block_size[k] <= 0 {
            return Err(DistributionError::NonPositive {
                axis: k,
                value: block_size[k],
            });
        }
        extents.push(div_ceil(grid.extent(k), block_size[k]));
    }
    Ok(Rect::from_extents(&extents)?)
}

/// Threads of a block-space superblock, clipped to the grid.
pub fn superblock_threads(superblock: &Rect, block_size: &Point, grid: &Rect) -> Result<Rect, GeometryError> {
    let mut bounds = vec![];
    for k in 0..superblock.rank() {
        bounds.push((superblock.lo()[k] * block_size[k], superblock.hi()[k] * block_size[k]));
    }
    Rect::from_bounds(&bounds)?.intersect(grid)
}

pub(crate) fn div_ceil(a: i64, b: i64) -> i64 {
    (a + b - 1).div_euclid(b)
}

/// Tiles `domain` into boxes of `extents` (ragged at the upper end), in
/// row-major tile order.
fn tiles(domain: &Rect, extents: &Point) -> Result<Vec<Rect>, DistributionError> {
    if extents.rank() != domain.rank() {
        return Err(GeometryError::RankMismatch(extents.rank(), domain.rank()).into());
    }
    let mut counts = vec![];
    for k in 0..domain.rank() {
        if extents[k] <= 0 {
            return Err(DistributionError::NonPositive {
                axis: k,
                value: extents[k],
            });
        }
        counts.push(div_ceil(domain.extent(k), extents[k]).max(0));
    }
    let tile_grid = Rect::from_extents(&counts)?;
    let mut out = vec![];
    for t in tile_grid.points() {
        let mut bounds = vec![];
        for k in 0..domain.rank() {
            let lo = domain.lo()[k] + t[k] * extents[k];
            let hi = (lo + extents[k]).min(domain.hi()[k]);
            bounds.push((lo, hi));
        }
        out.push(Rect::from_bounds(&bounds)?);
    }
    Ok(out)
}

/// Tiles the thread-block grid into superblocks of `threads_per_superblock`
/// threads per axis, assigned round-robin over `devices`.
pub fn block_work_dist(
    grid: &Rect,
    block_size: &Point,
    threads_per_superblock: &Point,
    devices: &[DeviceId],
) -> Result<WorkDistribution, DistributionError> {
    if devices.is_empty() {
        return Err(DistributionError::NoDevices);
    }
    let blocks = block_grid(grid, block_size)?;
    if threads_per_superblock.rank() != grid.rank() {
        return Err(GeometryError::RankMismatch(threads_per_superblock.rank(), grid.rank()).into());
    }
    let mut per_superblock = Point::zeros(grid.rank());
    for k in 0..grid.rank() {
        let (t, b) = (threads_per_superblock[k], block_size[k]);
        if t <= 0 {
            return Err(DistributionError::NonPositive { axis: k, value: t });
        }
        if t % b != 0 {
            return Err(DistributionError::NotDivisible {
                axis: k,
                superblock: t,
                block: b,
            });
        }
        per_superblock[k] = t / b;
    }

    let superblocks = tiles(&blocks, &per_superblock)?
        .into_iter()
        .enumerate()
        .map(|(n, r)| (r, devices[n % devices.len()]))
        .collect();
    Ok(WorkDistribution { superblocks })
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkDescriptor {
    /// Index within the owning distribution.
    pub index: usize,
    pub region: Rect,
    pub home: DeviceId,
}

/// Chunks covering an array domain. Chunks may overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataDistribution {
    chunks: Vec<ChunkDescriptor>,
}

impl DataDistribution {
    /// A custom distribution from explicit `(region, home)` pairs.
    pub fn custom(domain: &Rect, chunks: Vec<(Rect, DeviceId)>) -> Result<Self, DistributionError> {
        let dist = Self {
            chunks: chunks
                .into_iter()
                .enumerate()
                .map(|(index, (region, home))| ChunkDescriptor { index, region, home })
                .collect(),
        };
        dist.validate(domain)?;
        Ok(dist)
    }

    pub fn chunks(&self) -> &[ChunkDescriptor] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Every chunk is non-empty and inside `domain`, and every cell of
    /// `domain` belongs to at least one chunk.
    pub fn validate(&self, domain: &Rect) -> Result<(), DistributionError> {
        for c in &self.chunks {
            if c.region.is_empty() {
                return Err(DistributionError::NotCovering(format!("chunk {} is empty", c.index)));
            }
            if !domain.contains(&c.region)? {
                return Err(DistributionError::NotCovering(format!(
                    "chunk {} {:?} exceeds the domain {domain:?}",
                    c.index, c.region
                )));
            }
        }
        if !covers(domain, self.chunks.iter().map(|c| c.region))? {
            return Err(DistributionError::NotCovering(format!("domain {domain:?} has uncovered cells")));
        }
        Ok(())
    }

    /// All chunks with a non-empty intersection with `region`, by ascending index.
    pub fn chunks_intersecting(&self, region: &Rect) -> Vec<ChunkDescriptor> {
        if region.is_empty() {
            return vec![];
        }
        self.chunks
            .iter()
            .filter(|c| c.region.overlaps(region).unwrap_or(false))
            .copied()
            .collect()
    }
}

/// Exact coverage test without enumerating cells: the domain is split along
/// every chunk boundary and each resulting slab cell is probed once.
fn covers(domain: &Rect, regions: impl Iterator<Item = Rect> + Clone) -> Result<bool, GeometryError> {
    if domain.is_empty() {
        return Ok(true);
    }
    let rank = domain.rank();
    let mut cuts: Vec<Vec<i64>> = (0..rank).map(|k| vec![domain.lo()[k], domain.hi()[k]]).collect();
    for r in regions.clone() {
        for (k, axis) in cuts.iter_mut().enumerate() {
            axis.push(r.lo()[k].clamp(domain.lo()[k], domain.hi()[k]));
            axis.push(r.hi()[k].clamp(domain.lo()[k], domain.hi()[k]));
        }
    }
    for axis in &mut cuts {
        axis.sort_unstable();
        axis.dedup();
    }
    let counts: Vec<i64> = cuts.iter().map(|c| c.len() as i64 - 1).collect();
    for cell in Rect::from_extents(&counts)?.points() {
        let probe = Point::new(&(0..rank).map(|k| cuts[k][cell[k] as usize]).collect::<Vec<_>>())?;
        if !regions.clone().any(|r| r.contains_point(&probe)) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Tiles with `halo` cells added on every side, clipped to the domain, homed
/// round-robin over `devices`.
pub fn stencil_dist(
    domain: &Rect,
    chunk_extents: &Point,
    halo: &Point,
    devices: &[DeviceId],
) -> Result<DataDistribution, DistributionError> {
    if devices.is_empty() {
        return Err(DistributionError::NoDevices);
    }
    if halo.rank() != domain.rank() {
        return Err(GeometryError::RankMismatch(halo.rank(), domain.rank()).into());
    }
    for k in 0..halo.rank() {
        if halo[k] < 0 {
            return Err(DistributionError::NegativeHalo { axis: k, value: halo[k] });
        }
    }
    let mut chunks = vec![];
    for (index, interior) in tiles(domain, chunk_extents)?.into_iter().enumerate() {
        let expanded = Rect::new(interior.lo() - *halo, interior.hi() + *halo)?;
        chunks.push(ChunkDescriptor {
            index,
            region: expanded.clip(domain)?,
            home: devices[index % devices.len()],
        });
    }
    Ok(DataDistribution { chunks })
}

pub fn tile_dist(domain: &Rect, chunk_extents: &Point, devices: &[DeviceId]) -> Result<DataDistribution, DistributionError> {
    stencil_dist(domain, chunk_extents, &Point::zeros(domain.rank()), devices)
}

/// Splits along axis 0 into slabs of `rows`.
pub fn row_dist(domain: &Rect, rows: i64, devices: &[DeviceId]) -> Result<DataDistribution, DistributionError> {
    let mut extents = domain.extents();
    extents[0] = rows;
    tile_dist(domain, &extents, devices)
}

/// Splits along axis 1 into slabs of `cols`.
pub fn col_dist(domain: &Rect, cols: i64, devices: &[DeviceId]) -> Result<DataDistribution, DistributionError> {
    if domain.rank() < 2 {
        return Err(GeometryError::RankMismatch(domain.rank(), 2).into());
    }
    let mut extents = domain.extents();
    extents[1] = cols;
    tile_dist(domain, &extents, devices)
}

/// A full copy of the domain on every device.
pub fn replicated_dist(domain: &Rect, devices: &[DeviceId]) -> Result<DataDistribution, DistributionError> {
    if devices.is_empty() {
        return Err(DistributionError::NoDevices);
    }
    Ok(DataDistribution {
        chunks: devices
            .iter()
            .enumerate()
            .map(|(index, &home)| ChunkDescriptor {
                index,
                region: *domain,
                home,
            })
            .collect(),
    })
}

/// Among enclosing candidates prefer one homed on `executor`, then one on the
/// executor's worker, then the lowest index.
pub fn select_enclosing_chunk(
    candidates: &[ChunkDescriptor],
    region: &Rect,
    executor: DeviceId,
) -> Option<ChunkDescriptor> {
    candidates
        .iter()
        .filter(|c| c.region.contains(region).unwrap_or(false))
        .min_by_key(|c| {
            let rank = if c.home == executor {
                0
            } else if c.home.worker == executor.worker {
                1
            } else {
                2
            };
            (rank, c.index)
        })
        .copied()
}
