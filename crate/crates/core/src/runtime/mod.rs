//! Simulated multi-worker, multi-device execution of planned task graphs.

pub mod cluster;
pub mod data;
pub mod kernel;
pub mod kernels;
pub mod memory;
pub mod report;
pub mod worker;
pub mod wrapper;

use std::time::Duration;

use thiserror::Error;

use crate::types::{ChunkId, TaskId, WorkerId};

pub use self::cluster::{Cluster, ClusterConfig};
pub use self::memory::{DiskMode, MemoryConfig, MemoryError};
pub use self::report::{Report, TaskTiming};
pub use self::worker::ReadyOrder;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Memory(#[from] MemoryError),

    #[error(transparent)]
    Kernel(#[from] kernel::KernelError),

    #[error("{task} cannot take {access} access to {chunk}: another task holds it")]
    ConflictingAccess {
        task: TaskId,
        chunk: ChunkId,
        access: &'static str,
    },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("no task completed for {0:?}; the run is stalled")]
    Stalled(Duration),

    #[error("{0} stopped unexpectedly")]
    Disconnected(WorkerId),

    #[error("invalid configuration: {0}")]
    Config(String),
}
