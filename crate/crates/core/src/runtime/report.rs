use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub task: u64,
    pub worker: usize,
    pub kind: String,
    /// Microseconds since the cluster started.
    pub ready_us: u64,
    pub start_us: u64,
    pub end_us: u64,
}

/// Execution statistics of a cluster run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub tasks: Vec<TaskTiming>,
    pub evictions: u64,
    #[serde(default)]
    pub compactions: u64,
    /// Keyed `"from->to"`, e.g. `"device->host"` or `"host->disk"`.
    pub bytes_moved: BTreeMap<String, u64>,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub throttle_bytes: u64,
    pub throttle_checks: u64,
    pub throttle_violations: u64,
    /// Highest staged footprint per resource, keyed like `"w0/gpu1"`.
    pub peak_staged: BTreeMap<String, u64>,
}

impl Report {
    pub fn merge(&mut self, other: Report) {
        self.tasks.extend(other.tasks);
        self.tasks.sort_by_key(|t| t.task);
        self.evictions += other.evictions;
        self.compactions += other.compactions;
        for (k, v) in other.bytes_moved {
            *self.bytes_moved.entry(k).or_insert(0) += v;
        }
        self.bytes_sent += other.bytes_sent;
        self.bytes_received += other.bytes_received;
        self.throttle_bytes = self.throttle_bytes.max(other.throttle_bytes);
        self.throttle_checks += other.throttle_checks;
        self.throttle_violations += other.throttle_violations;
        for (k, v) in other.peak_staged {
            let peak = self.peak_staged.entry(k).or_insert(0);
            *peak = (*peak).max(v);
        }
    }

    pub fn task_count(&self, kind: &str) -> usize {
        self.tasks.iter().filter(|t| t.kind == kind).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
