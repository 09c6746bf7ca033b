//! Per-worker tiered memory: one pool per device, a host pool and a disk
//! spill area. Chunks are staged (materialized and pinned) in the tier a
//! task needs, all at once; unpinned chunks are evicted down-tier in
//! least-recently-used order to make room.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::ChunkMeta;
use crate::types::{Buffer, ChunkId};

pub type SharedBuffer = Arc<RwLock<Buffer>>;

/// First-fit allocator over `[0, capacity)` with fixed granularity.
#[derive(Debug, Clone)]
pub struct Pool {
    capacity: u64,
    granularity: u64,
    /// Free extents `(offset, len)`, sorted and coalesced.
    free: Vec<(u64, u64)>,
    used: u64,
}

impl Pool {
    pub fn new(capacity: u64, granularity: u64) -> Self {
        assert!(granularity > 0, "granularity must be positive");
        let capacity = capacity / granularity * granularity;
        Self {
            capacity,
            granularity,
            free: if capacity > 0 { vec![(0, capacity)] } else { vec![] },
            used: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn rounded(&self, size: u64) -> u64 {
        size.div_ceil(self.granularity) * self.granularity
    }

    pub fn alloc(&mut self, size: u64) -> Option<u64> {
        let size = self.rounded(size);
        if size == 0 {
            return Some(0);
        }
        let slot = self.free.iter().position(|&(_, len)| len >= size)?;
        let (offset, len) = self.free[slot];
        if len == size {
            self.free.remove(slot);
        } else {
            self.free[slot] = (offset + size, len - size);
        }
        self.used += size;
        Some(offset)
    }

    /// Allocates exactly `[offset, offset + size)` if it is free.
    pub fn claim(&mut self, offset: u64, size: u64) -> bool {
        let size = self.rounded(size);
        if size == 0 {
            return true;
        }
        let Some(slot) = self
            .free
            .iter()
            .position(|&(o, len)| o <= offset && offset + size <= o + len)
        else {
            return false;
        };
        let (o, len) = self.free.remove(slot);
        let mut at = slot;
        if o < offset {
            self.free.insert(at, (o, offset - o));
            at += 1;
        }
        if offset + size < o + len {
            self.free.insert(at, (offset + size, o + len - offset - size));
        }
        self.used += size;
        true
    }

    pub fn free(&mut self, offset: u64, size: u64) {
        let size = self.rounded(size);
        if size == 0 {
            return;
        }
        let at = self.free.partition_point(|&(o, _)| o < offset);
        self.free.insert(at, (offset, size));
        if at + 1 < self.free.len() && offset + size == self.free[at + 1].0 {
            self.free[at].1 += self.free[at + 1].1;
            self.free.remove(at + 1);
        }
        if at > 0 && self.free[at - 1].0 + self.free[at - 1].1 == offset {
            self.free[at - 1].1 += self.free[at].1;
            self.free.remove(at);
        }
        self.used -= size;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiskMode {
    /// A temporary file per worker.
    File,
    /// An in-memory byte vector.
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub device_capacity: u64,
    pub host_capacity: u64,
    pub granularity: u64,
    /// Maximum staged bytes per resource.
    pub throttle: u64,
    pub disk: DiskMode,
}

pub const MIB: u64 = 1 << 20;

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            device_capacity: 1 << 30,
            host_capacity: 4 << 30,
            granularity: 4096,
            throttle: 64 * MIB,
            disk: DiskMode::File,
        }
    }
}

enum DiskStore {
    File(File),
    Memory(Vec<u8>),
}

impl DiskStore {
    fn write_at(&mut self, offset: u64, bytes: &[u8]) -> std::io::Result<()> {
        match self {
            DiskStore::File(f) => {
                f.seek(SeekFrom::Start(offset))?;
                f.write_all(bytes)
            }
            DiskStore::Memory(v) => {
                let end = offset as usize + bytes.len();
                if v.len() < end {
                    v.resize(end, 0);
                }
                v[offset as usize..end].copy_from_slice(bytes);
                Ok(())
            }
        }
    }

    fn read_at(&mut self, offset: u64, len: usize) -> std::io::Result<Vec<u8>> {
        let mut out = vec![0; len];
        match self {
            DiskStore::File(f) => {
                f.seek(SeekFrom::Start(offset))?;
                f.read_exact(&mut out)?;
            }
            DiskStore::Memory(v) => out.copy_from_slice(&v[offset as usize..offset as usize + len]),
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    Device(usize),
    Host,
    Disk,
}

impl Tier {
    fn label(self) -> &'static str {
        match self {
            Tier::Device(_) => "device",
            Tier::Host => "host",
            Tier::Disk => "disk",
        }
    }
}

/// Something the staging throttle is accounted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    Device(usize),
    Host,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::Device(d) => write!(f, "gpu{d}"),
            Resource::Host => f.write_str("host"),
        }
    }
}

/// Where a task needs one of its chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Need {
    Device(usize),
    /// Device or host memory; disk-resident chunks are brought to the host.
    Memory,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("unknown chunk {0}")]
    UnknownChunk(ChunkId),

    #[error("chunk {0} is used before it was created")]
    NotMaterialized(ChunkId),

    #[error("chunk {0} is deleted while in use")]
    DeletePinned(ChunkId),

    #[error("a task needs {need} bytes on {resource} but {limit} is only {available} bytes")]
    TooLarge {
        resource: String,
        limit: &'static str,
        need: u64,
        available: u64,
    },

    #[error("disk i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for MemoryError {
    fn from(e: std::io::Error) -> Self {
        MemoryError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub evictions: u64,
    /// Times a pool was repacked to fit a chunk.
    pub compactions: u64,
    /// Keyed `"from->to"`, e.g. `"device->host"`.
    pub bytes_moved: BTreeMap<String, u64>,
    pub throttle_checks: u64,
    pub throttle_violations: u64,
    pub peak_staged: BTreeMap<String, u64>,
}

#[derive(Debug)]
struct Location {
    tier: Tier,
    offset: u64,
    /// `None` while on disk.
    data: Option<SharedBuffer>,
}

#[derive(Debug)]
struct Entry {
    meta: ChunkMeta,
    bytes: u64,
    location: Option<Location>,
    pins: u32,
    last_use: u64,
}

pub struct MemoryManager {
    config: MemoryConfig,
    devices: Vec<Pool>,
    host: Pool,
    disk_pool: Pool,
    disk: DiskStore,
    chunks: HashMap<ChunkId, Entry>,
    staged: HashMap<Resource, u64>,
    clock: u64,
    stats: MemoryStats,
    worker: usize,
}

impl MemoryManager {
    pub fn new(worker: usize, devices: usize, config: MemoryConfig) -> Result<Self, MemoryError> {
        let disk = match config.disk {
            DiskMode::File => DiskStore::File(tempfile::tempfile()?),
            DiskMode::Memory => DiskStore::Memory(vec![]),
        };
        Ok(Self {
            config,
            devices: (0..devices)
                .map(|_| Pool::new(config.device_capacity, config.granularity))
                .collect(),
            host: Pool::new(config.host_capacity, config.granularity),
            disk_pool: Pool::new(u64::MAX / 4, config.granularity),
            disk,
            chunks: HashMap::new(),
            staged: HashMap::new(),
            clock: 0,
            stats: MemoryStats::default(),
            worker,
        })
    }

    pub fn stats(&self) -> &MemoryStats {
        &self.stats
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn register(&mut self, meta: ChunkMeta) {
        self.chunks.insert(
            meta.id,
            Entry {
                meta,
                bytes: meta.size_in_bytes(),
                location: None,
                pins: 0,
                last_use: 0,
            },
        );
    }

    pub fn meta(&self, chunk: ChunkId) -> Result<ChunkMeta, MemoryError> {
        Ok(self.entry(chunk)?.meta)
    }

    fn entry(&self, chunk: ChunkId) -> Result<&Entry, MemoryError> {
        self.chunks.get(&chunk).ok_or(MemoryError::UnknownChunk(chunk))
    }

    pub fn tier_of(&self, chunk: ChunkId) -> Option<Tier> {
        self.chunks.get(&chunk)?.location.as_ref().map(|l| l.tier)
    }

    pub fn is_pinned(&self, chunk: ChunkId) -> bool {
        self.chunks.get(&chunk).is_some_and(|e| e.pins > 0)
    }

    pub fn staged_bytes(&self, resource: Resource) -> u64 {
        self.staged.get(&resource).copied().unwrap_or(0)
    }

    fn pool(&mut self, tier: Tier) -> &mut Pool {
        match tier {
            Tier::Device(d) => &mut self.devices[d],
            Tier::Host => &mut self.host,
            Tier::Disk => &mut self.disk_pool,
        }
    }

    /// Usable bytes of a tier, rounded down to the granularity.
    fn capacity(&self, tier: Tier) -> u64 {
        match tier {
            Tier::Device(d) => self.devices[d].capacity(),
            Tier::Host => self.host.capacity(),
            Tier::Disk => u64::MAX,
        }
    }

    fn device_capacity(&self) -> u64 {
        self.devices.first().map_or(0, Pool::capacity)
    }

    fn resource_label(&self, r: Resource) -> String {
        format!("w{}/{r}", self.worker)
    }

    /// Target tier of a need, given the chunk's current placement.
    fn target(&self, chunk: ChunkId, need: Need) -> Result<Tier, MemoryError> {
        let entry = self.entry(chunk)?;
        Ok(match need {
            Need::Device(d) => Tier::Device(d),
            Need::Memory => match entry.location.as_ref().map(|l| l.tier) {
                Some(t @ (Tier::Device(_) | Tier::Host)) => t,
                Some(Tier::Disk) if self.host.rounded(entry.bytes) <= self.host.capacity() => Tier::Host,
                Some(Tier::Disk) => Tier::Device(entry.meta.home.device),
                None => return Err(MemoryError::NotMaterialized(chunk)),
            },
        })
    }

    fn resource(tier: Tier) -> Resource {
        match tier {
            Tier::Device(d) => Resource::Device(d),
            _ => Resource::Host,
        }
    }

    /// Rejects tasks that could never be staged: their footprint on one
    /// resource exceeds the tier capacity or the throttle.
    pub fn check_footprint(&self, needs: &[(ChunkId, Need)]) -> Result<(), MemoryError> {
        let mut per: BTreeMap<Resource, u64> = BTreeMap::new();
        for &(chunk, need) in needs {
            let bytes = self.entry(chunk)?.bytes;
            let tier = match need {
                Need::Device(d) => Tier::Device(d),
                Need::Memory => Tier::Host,
            };
            let rounded = self.host.rounded(bytes);
            *per.entry(Self::resource(tier)).or_default() += rounded;
            if need == Need::Memory {
                let largest = self.host.capacity().max(self.device_capacity());
                if rounded > largest {
                    return Err(MemoryError::TooLarge {
                        resource: self.resource_label(Resource::Host),
                        limit: "capacity",
                        need: bytes,
                        available: largest,
                    });
                }
            }
        }
        for (r, bytes) in per {
            let capacity = match r {
                Resource::Device(_) => self.device_capacity(),
                Resource::Host => u64::MAX,
            };
            for (limit, available) in [("capacity", capacity), ("the throttle", self.config.throttle)] {
                if bytes > available {
                    return Err(MemoryError::TooLarge {
                        resource: self.resource_label(r),
                        limit,
                        need: bytes,
                        available,
                    });
                }
            }
        }
        Ok(())
    }

    /// Materializes and pins every chunk of a task in its required tier.
    /// Returns `None` (and changes no pins) if the throttle or capacity
    /// does not allow it right now.
    pub fn stage(&mut self, needs: &[(ChunkId, Need)]) -> Result<Option<Vec<(ChunkId, SharedBuffer)>>, MemoryError> {
        let mut targets = vec![];
        for &(chunk, need) in needs {
            if let Need::Device(_) = need {
                // freshly created chunks have no location yet
                self.entry(chunk)?;
            }
            let tier = match need {
                Need::Device(d) => Tier::Device(d),
                Need::Memory => self.target(chunk, need)?,
            };
            let entry = self.entry(chunk)?;
            if entry.pins > 0 && entry.location.as_ref().map(|l| l.tier) != Some(tier) {
                return Ok(None);
            }
            targets.push((chunk, tier));
        }
        targets.sort();
        targets.dedup();

        // throttle
        let mut extra: HashMap<Resource, u64> = HashMap::new();
        for &(chunk, tier) in &targets {
            let entry = &self.chunks[&chunk];
            if entry.pins == 0 {
                *extra.entry(Self::resource(tier)).or_default() += entry.bytes;
            }
        }
        for (r, bytes) in &extra {
            let current = self.staged_bytes(*r);
            if current + bytes > self.config.throttle {
                if current == 0 {
                    return Err(MemoryError::TooLarge {
                        resource: self.resource_label(*r),
                        limit: "the throttle",
                        need: *bytes,
                        available: self.config.throttle,
                    });
                }
                return Ok(None);
            }
        }

        // reserve space, evicting as needed
        let protect: HashSet<ChunkId> = targets.iter().map(|t| t.0).collect();
        let mut reserved: Vec<(ChunkId, Tier, u64)> = vec![];
        for &(chunk, tier) in &targets {
            if self.tier_of(chunk) == Some(tier) {
                continue;
            }
            let bytes = self.chunks[&chunk].bytes;
            if self.host.rounded(bytes) > self.capacity(tier) {
                for (c, t, off) in reserved {
                    let b = self.chunks[&c].bytes;
                    self.pool(t).free(off, b);
                }
                return Err(MemoryError::TooLarge {
                    resource: self.resource_label(Self::resource(tier)),
                    limit: "capacity",
                    need: bytes,
                    available: self.capacity(tier),
                });
            }
            match self.reserve(tier, bytes, &protect, &mut reserved)? {
                Some(off) => reserved.push((chunk, tier, off)),
                None => {
                    for (c, t, off) in reserved {
                        let b = self.chunks[&c].bytes;
                        self.pool(t).free(off, b);
                    }
                    return Ok(None);
                }
            }
        }

        // commit moves
        for (chunk, tier, offset) in reserved {
            self.move_to(chunk, tier, offset)?;
        }

        let mut out = vec![];
        for &(chunk, tier) in &targets {
            let bytes;
            {
                let entry = self.chunks.get_mut(&chunk).expect("checked above");
                entry.pins += 1;
                bytes = entry.bytes;
                let data = entry.location.as_ref().and_then(|l| l.data.clone()).expect("staged in memory");
                out.push((chunk, data));
                if entry.pins > 1 {
                    continue;
                }
            }
            let r = Self::resource(tier);
            let staged = self.staged.entry(r).or_insert(0);
            *staged += bytes;
            let now = *staged;
            let label = self.resource_label(r);
            let peak = self.stats.peak_staged.entry(label).or_insert(0);
            *peak = (*peak).max(now);
        }
        for r in extra.keys() {
            self.stats.throttle_checks += 1;
            if self.staged_bytes(*r) > self.config.throttle {
                self.stats.throttle_violations += 1;
            }
        }
        Ok(Some(out))
    }

    /// Unpins chunks and refreshes their recency.
    pub fn unstage(&mut self, chunks: &[ChunkId]) {
        let mut chunks = chunks.to_vec();
        chunks.sort();
        chunks.dedup();
        self.clock += 1;
        for chunk in chunks {
            let Some(entry) = self.chunks.get_mut(&chunk) else {
                continue;
            };
            if entry.pins == 0 {
                continue;
            }
            entry.pins -= 1;
            entry.last_use = self.clock;
            if entry.pins == 0 {
                if let Some(loc) = &entry.location {
                    let r = Self::resource(loc.tier);
                    *self.staged.get_mut(&r).expect("pinned chunk accounted") -= entry.bytes;
                }
            }
        }
    }

    /// Space for `bytes` in `tier`, evicting unpinned chunks outside
    /// `protect` in LRU order. `None` if not enough can be freed.
    fn reserve(
        &mut self,
        tier: Tier,
        bytes: u64,
        protect: &HashSet<ChunkId>,
        pending: &mut [(ChunkId, Tier, u64)],
    ) -> Result<Option<u64>, MemoryError> {
        loop {
            if let Some(off) = self.pool(tier).alloc(bytes) {
                return Ok(Some(off));
            }
            let Some(victim) = self.lru_victim(tier, protect) else {
                return Ok(self.compact(tier, bytes, pending));
            };
            self.evict(victim, protect)?;
        }
    }

    /// Packs the unpinned chunks and `pending` reservations of a memory
    /// tier to make one hole of `bytes`. Restores the old layout and returns
    /// `None` if pinned chunks still fragment the space too much.
    fn compact(&mut self, tier: Tier, bytes: u64, pending: &mut [(ChunkId, Tier, u64)]) -> Option<u64> {
        let pool = self.pool(tier);
        if tier == Tier::Disk || pool.capacity() - pool.used() < pool.rounded(bytes) {
            return None;
        }
        // (chunk, offset, bytes, index into `pending`)
        let mut movable: Vec<(ChunkId, u64, u64, Option<usize>)> = self
            .chunks
            .values()
            .filter(|e| e.pins == 0)
            .filter_map(|e| {
                let loc = e.location.as_ref().filter(|l| l.tier == tier)?;
                Some((e.meta.id, loc.offset, e.bytes, None))
            })
            .collect();
        for (k, &(chunk, t, offset)) in pending.iter().enumerate() {
            if t == tier {
                movable.push((chunk, offset, self.chunks[&chunk].bytes, Some(k)));
            }
        }
        movable.sort_by_key(|&(id, _, b, k)| (std::cmp::Reverse(b), id, k));
        let pool = self.pool(tier);
        for &(_, offset, b, _) in &movable {
            pool.free(offset, b);
        }
        let mut placed = vec![];
        let hole = pool.alloc(bytes);
        if hole.is_some() {
            for &(_, _, b, _) in &movable {
                match pool.alloc(b) {
                    Some(off) => placed.push(off),
                    None => break,
                }
            }
        }
        if hole.is_none() || placed.len() < movable.len() {
            if let Some(h) = hole {
                pool.free(h, bytes);
            }
            for (off, &(_, _, b, _)) in placed.iter().zip(&movable) {
                pool.free(*off, b);
            }
            for &(_, offset, b, _) in &movable {
                assert!(pool.claim(offset, b), "old layout is free again");
            }
            return None;
        }
        for ((id, _, _, pending_index), off) in movable.into_iter().zip(placed) {
            match pending_index {
                Some(k) => pending[k].2 = off,
                None => {
                    let loc = self.chunks.get_mut(&id).and_then(|e| e.location.as_mut()).expect("resident chunk");
                    loc.offset = off;
                }
            }
        }
        self.stats.compactions += 1;
        hole
    }

    fn lru_victim(&self, tier: Tier, protect: &HashSet<ChunkId>) -> Option<ChunkId> {
        self.chunks
            .values()
            .filter(|e| e.pins == 0 && !protect.contains(&e.meta.id))
            .filter(|e| e.location.as_ref().is_some_and(|l| l.tier == tier))
            .min_by_key(|e| (e.last_use, e.meta.id))
            .map(|e| e.meta.id)
    }

    /// Moves an unpinned chunk one tier down (skipping the host when it can
    /// never fit there).
    fn evict(&mut self, victim: ChunkId, protect: &HashSet<ChunkId>) -> Result<(), MemoryError> {
        let bytes = self.chunks[&victim].bytes;
        let from = self.tier_of(victim).expect("victims are resident");
        let mut protect = protect.clone();
        protect.insert(victim);
        let (tier, offset) = match from {
            Tier::Device(_) if self.host.rounded(bytes) <= self.host.capacity() => match self.reserve(Tier::Host, bytes, &protect, &mut [])? {
                Some(off) => (Tier::Host, off),
                None => (Tier::Disk, self.disk_pool.alloc(bytes).expect("disk is unbounded")),
            },
            Tier::Device(_) | Tier::Host => (Tier::Disk, self.disk_pool.alloc(bytes).expect("disk is unbounded")),
            Tier::Disk => unreachable!("disk-resident chunks are never evicted"),
        };
        self.stats.evictions += 1;
        self.move_to(victim, tier, offset)
    }

    /// Moves chunk data into already reserved space and frees the old space.
    fn move_to(&mut self, chunk: ChunkId, tier: Tier, offset: u64) -> Result<(), MemoryError> {
        let entry = self.chunks.get_mut(&chunk).expect("known chunk");
        let bytes = entry.bytes;
        let old = entry.location.take();
        let data = match &old {
            None => Some(Arc::new(RwLock::new(Buffer::zeros(
                entry.meta.dtype,
                entry.meta.region.volume() as usize,
            )))),
            Some(Location { data: Some(d), .. }) => Some(d.clone()),
            Some(Location {
                tier: Tier::Disk,
                offset: disk_off,
                ..
            }) => {
                let raw = self.disk.read_at(*disk_off, bytes as usize)?;
                Some(Arc::new(RwLock::new(Buffer::from_le_bytes(entry.meta.dtype, &raw))))
            }
            Some(_) => unreachable!("memory-resident chunks hold data"),
        };
        let data = if tier == Tier::Disk {
            let raw = data.expect("data to spill").read().to_le_bytes();
            self.disk.write_at(offset, &raw)?;
            None
        } else {
            data
        };
        if let Some(old) = &old {
            let key = format!("{}->{}", old.tier.label(), tier.label());
            *self.stats.bytes_moved.entry(key).or_insert(0) += bytes;
            self.pool(old.tier).free(old.offset, bytes);
        }
        self.chunks.get_mut(&chunk).expect("known chunk").location = Some(Location { tier, offset, data });
        Ok(())
    }

    /// Frees a chunk wherever it lives.
    pub fn delete(&mut self, chunk: ChunkId) -> Result<(), MemoryError> {
        let entry = self.entry(chunk)?;
        if entry.pins > 0 {
            return Err(MemoryError::DeletePinned(chunk));
        }
        let entry = self.chunks.remove(&chunk).expect("checked above");
        if let Some(loc) = entry.location {
            self.pool(loc.tier).free(loc.offset, entry.bytes);
        }
        Ok(())
    }

    /// Current contents, read from whichever tier holds the chunk.
    pub fn snapshot(&mut self, chunk: ChunkId) -> Result<Buffer, MemoryError> {
        let entry = self.entry(chunk)?;
        match &entry.location {
            None => Err(MemoryError::NotMaterialized(chunk)),
            Some(Location { data: Some(d), .. }) => Ok(d.read().clone()),
            Some(Location { offset, .. }) => {
                let (offset, bytes, dtype) = (*offset, entry.bytes, entry.meta.dtype);
                let raw = self.disk.read_at(offset, bytes as usize)?;
                Ok(Buffer::from_le_bytes(dtype, &raw))
            }
        }
    }

    pub fn chunk_ids(&self) -> Vec<ChunkId> {
        let mut ids: Vec<ChunkId> = self.chunks.keys().copied().collect();
        ids.sort();
        ids
    }
}
