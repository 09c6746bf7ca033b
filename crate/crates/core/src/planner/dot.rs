use std::collections::HashSet;
use std::fmt::Write;

use super::task::ExecutionPlan;

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering with one cluster per worker. Message edges are dashed;
/// dependencies on tasks outside the plan are left out.
pub fn export_dot(plan: &ExecutionPlan) -> String {
    let mut out = String::from("digraph plan {\n  rankdir=TB;\n  node [shape=box, fontsize=10];\n");
    let ids: HashSet<_> = plan.tasks.iter().map(|t| t.id).collect();
    for w in plan.workers() {
        writeln!(out, "  subgraph cluster_{} {{", w.0).unwrap();
        writeln!(out, "    label=\"worker {}\";", w.0).unwrap();
        for t in plan.for_worker(w) {
            writeln!(out, "    {} [label=\"{}: {}\"];", t.id, t.id, escape(&t.describe())).unwrap();
        }
        out.push_str("  }\n");
    }
    for t in &plan.tasks {
        for d in t.deps.iter().filter(|d| ids.contains(d)) {
            writeln!(out, "  {d} -> {};", t.id).unwrap();
        }
    }
    for (s, r) in plan.message_pairs() {
        writeln!(out, "  {s} -> {r} [style=dashed, color=blue];").unwrap();
    }
    out.push_str("}\n");
    out
}
