//! Driver-side bookkeeping of arrays, chunks and per-chunk conflict state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{DataDistribution, DeviceId, DistributionError};
use crate::geometry::{Rect, MAX_RANK};
use crate::types::{ArrayId, ChunkId, DType, TaskId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("array rank must be between 1 and {MAX_RANK}, got {0}")]
    InvalidRank(usize),

    #[error("array domain {0:?} has a zero extent")]
    EmptyDomain(Rect),

    #[error("unknown array {0:?}")]
    UnknownArray(ArrayId),

    #[error("array {0:?} was already deleted")]
    Deleted(ArrayId),

    #[error("unknown chunk {0}")]
    UnknownChunk(ChunkId),

    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayHandle {
    pub id: ArrayId,
    pub domain: Rect,
    pub dtype: DType,
    pub distribution: DataDistribution,
    /// Global chunk ids, parallel to `distribution.chunks()`.
    pub chunks: Vec<ChunkId>,
}

impl ArrayHandle {
    pub fn rank(&self) -> usize {
        self.domain.rank()
    }

    pub fn size_in_bytes(&self) -> u64 {
        self.domain.volume() as u64 * self.dtype.size_in_bytes() as u64
    }
}

/// Static description of a chunk, shared with the workers.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMeta {
    pub id: ChunkId,
    pub array: Option<ArrayId>,
    pub region: Rect,
    pub dtype: DType,
    pub home: DeviceId,
}

impl ChunkMeta {
    pub fn size_in_bytes(&self) -> u64 {
        self.region.volume() as u64 * self.dtype.size_in_bytes() as u64
    }

    pub fn is_temporary(&self) -> bool {
        self.array.is_none()
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum Effect {
    Read,
    Write,
}

#[derive(Debug, Clone)]
pub struct ChunkState {
    pub meta: ChunkMeta,
    pub version: u64,
    pub last_writer: Option<TaskId>,
    pub readers: Vec<TaskId>,
    /// Whether any task has written data into the chunk yet.
    pub initialized: bool,
    pub live: bool,
}

#[derive(Debug)]
struct ArrayEntry {
    handle: ArrayHandle,
    deleted: bool,
}

#[derive(Debug, Default)]
pub struct Registry {
    arrays: BTreeMap<ArrayId, ArrayEntry>,
    chunks: BTreeMap<ChunkId, ChunkState>,
    next_array: u64,
    next_chunk: u64,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an array and its chunks. Chunks start at version 0 and are
    /// uninitialized.
    pub fn create_array(
        &mut self,
        domain: Rect,
        dtype: DType,
        distribution: DataDistribution,
    ) -> Result<ArrayHandle, RegistryError> {
        if domain.rank() == 0 || domain.rank() > MAX_RANK {
            return Err(RegistryError::InvalidRank(domain.rank()));
        }
        if domain.is_empty() {
            return Err(RegistryError::EmptyDomain(domain));
        }
        distribution.validate(&domain)?;

        let id = ArrayId(self.next_array);
        self.next_array += 1;
        let chunks = distribution
            .chunks()
            .iter()
            .map(|c| self.add_chunk(Some(id), c.region, dtype, c.home))
            .collect();
        let handle = ArrayHandle {
            id,
            domain,
            dtype,
            distribution,
            chunks,
        };
        self.arrays.insert(
            id,
            ArrayEntry {
                handle: handle.clone(),
                deleted: false,
            },
        );
        Ok(handle)
    }

    /// Registers a temporary chunk that belongs to no array.
    pub fn create_temporary(&mut self, region: Rect, dtype: DType, home: DeviceId) -> ChunkId {
        self.add_chunk(None, region, dtype, home)
    }

    fn add_chunk(&mut self, array: Option<ArrayId>, region: Rect, dtype: DType, home: DeviceId) -> ChunkId {
        let id = ChunkId(self.next_chunk);
        self.next_chunk += 1;
        self.chunks.insert(
            id,
            ChunkState {
                meta: ChunkMeta {
                    id,
                    array,
                    region,
                    dtype,
                    home,
                },
                version: 0,
                last_writer: None,
                readers: vec![],
                initialized: false,
                live: true,
            },
        );
        id
    }

    /// Marks an array deleted and returns its chunk ids.
    pub fn delete_array(&mut self, id: ArrayId) -> Result<Vec<ChunkId>, RegistryError> {
        let entry = self.arrays.get_mut(&id).ok_or(RegistryError::UnknownArray(id))?;
        if entry.deleted {
            return Err(RegistryError::Deleted(id));
        }
        entry.deleted = true;
        let chunks = entry.handle.chunks.clone();
        for c in &chunks {
            self.retire_chunk(*c);
        }
        Ok(chunks)
    }

    pub fn retire_chunk(&mut self, id: ChunkId) {
        if let Some(state) = self.chunks.get_mut(&id) {
            state.live = false;
        }
    }

    /// A live array.
    pub fn array(&self, id: ArrayId) -> Result<&ArrayHandle, RegistryError> {
        let entry = self.arrays.get(&id).ok_or(RegistryError::UnknownArray(id))?;
        if entry.deleted {
            return Err(RegistryError::Deleted(id));
        }
        Ok(&entry.handle)
    }

    pub fn arrays(&self) -> impl Iterator<Item = &ArrayHandle> {
        self.arrays.values().filter(|e| !e.deleted).map(|e| &e.handle)
    }

    pub fn chunk(&self, id: ChunkId) -> Result<&ChunkState, RegistryError> {
        self.chunks.get(&id).ok_or(RegistryError::UnknownChunk(id))
    }

    pub fn chunk_meta(&self, id: ChunkId) -> Result<ChunkMeta, RegistryError> {
        Ok(self.chunk(id)?.meta)
    }

    pub fn mark_initialized(&mut self, id: ChunkId) {
        if let Some(state) = self.chunks.get_mut(&id) {
            state.initialized = true;
        }
    }

    /// Registers an access of `task` to `chunk` and returns the tasks it
    /// must wait for.
    ///
    /// A read waits for the last writer. A write waits for the last writer
    /// and every reader since, then becomes the new last writer.
    pub fn record_access(&mut self, chunk: ChunkId, task: TaskId, effect: Effect) -> Result<Vec<TaskId>, RegistryError> {
        let state = self.chunks.get_mut(&chunk).ok_or(RegistryError::UnknownChunk(chunk))?;
        let mut deps: Vec<TaskId> = state.last_writer.into_iter().filter(|&t| t != task).collect();
        match effect {
            Effect::Read => {
                if !state.readers.contains(&task) {
                    state.readers.push(task);
                }
            }
            Effect::Write => {
                deps.extend(state.readers.iter().copied().filter(|&t| t != task));
                state.readers.clear();
                state.last_writer = Some(task);
                state.version += 1;
            }
        }
        deps.sort();
        deps.dedup();
        Ok(deps)
    }
}
