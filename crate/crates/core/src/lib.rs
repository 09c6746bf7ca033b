//! Planner and simulated multi-device runtime for distributed kernel launches.
//!
//! Kernel launches are split into superblocks, arrays into (possibly
//! overlapping) chunks, and data-access annotations connect the two: for
//! every superblock the planner derives the array regions it touches and
//! emits a per-worker task DAG that moves, replicates and reduces chunks. The
//! runtime executes those DAGs on simulated workers, each with its own
//! scheduler, tiered memory manager and device executors.

pub mod annotation;
pub mod distribution;
pub mod geometry;
pub mod planner;
pub mod registry;
pub mod runtime;
pub mod session;
pub mod types;
