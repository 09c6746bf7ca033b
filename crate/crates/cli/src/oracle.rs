//! Serial reference execution and result comparison.
//!
//! The reference runs every launch as one superblock over whole-array
//! buffers, block by block in row-major order, without the planner. Only
//! the reset of reduce destinations looks at the launch's superblocks,
//! since the reset region is the hull of their declared reduce regions.

use std::collections::{BTreeMap, HashMap};

use anyhow::{anyhow, bail, Result};
use lightning_core::annotation::{evaluate_region, parse_annotation, AccessMode};
use lightning_core::distribution::{block_grid, superblock_threads};
use lightning_core::geometry::Rect;
use lightning_core::runtime::kernel::{KernelArgs, KernelRegistry, ParamKind};
use lightning_core::runtime::data::copy_region;
use lightning_core::runtime::Report;
use lightning_core::types::{Buffer, DType, ReduceOp};
use serde::{Deserialize, Serialize};

use crate::scenario::{ArgSpec, Scenario};

/// Largest accepted relative difference between float results.
pub const FLOAT_REL_TOLERANCE: f64 = 1e-6;

/// Final contents of every array, by name.
pub type ArrayContents = BTreeMap<String, Buffer>;

pub fn serial_run(scenario: &Scenario, kernels: &KernelRegistry) -> Result<ArrayContents> {
    let system = scenario.system.info();
    let mut arrays: HashMap<String, (Rect, Buffer)> = HashMap::new();
    for a in &scenario.arrays {
        let domain = a.domain()?;
        let len = domain.volume() as usize;
        let buf = match a.fill_value() {
            Some(v) => Buffer::filled(a.dtype, len, v),
            None => Buffer::zeros(a.dtype, len),
        };
        arrays.insert(a.name.clone(), (domain, buf));
    }

    for (n, launch) in scenario.expanded_launches().iter().enumerate() {
        let def = kernels.get(&launch.kernel)?;
        let sig = &def.signature;
        let annotation = parse_annotation(&launch.annotation)?;
        let grid = launch.grid()?;
        let block = launch.block_size()?;
        let blocks = block_grid(&grid, &block)?;
        if sig.params.len() != launch.args.len() {
            bail!("launch {n}: `{}` takes {} arguments", launch.kernel, sig.params.len());
        }

        let mut dtype = None;
        let mut names: HashMap<String, String> = HashMap::new();
        for (param, arg) in sig.params.iter().zip(&launch.args) {
            if let (ParamKind::Array { dtype: fixed, .. }, ArgSpec::Array(name)) = (&param.kind, arg) {
                if names.values().any(|v| v == name) {
                    bail!("launch {n}: array `{name}` is passed twice");
                }
                if fixed.is_none() && dtype.is_none() {
                    dtype = Some(arrays[name].1.dtype());
                }
                names.insert(param.name.clone(), name.clone());
            }
        }
        let dtype = dtype
            .or_else(|| {
                sig.params
                    .iter()
                    .zip(&launch.args)
                    .find_map(|(_, a)| match a {
                        ArgSpec::Array(name) => Some(arrays[name].1.dtype()),
                        ArgSpec::Scalar(_) => None,
                    })
            })
            .unwrap_or(DType::I64);

        // reduce destinations are reset to the identity over the hull of
        // the per-superblock regions
        let domains: HashMap<String, Rect> = names.iter().map(|(p, a)| (p.clone(), arrays[a].0)).collect();
        let mut reset: HashMap<String, (ReduceOp, Rect)> = HashMap::new();
        for (sb, _) in launch.work(&system)?.superblocks() {
            let threads = superblock_threads(sb, &block, &grid)?;
            for r in evaluate_region(&annotation, &threads, &block, &domains)? {
                if let AccessMode::Reduce(op) = r.mode {
                    let entry = reset.entry(r.argument).or_insert((op, r.region));
                    entry.1 = entry.1.hull(&r.region)?;
                }
            }
        }
        for (param, (op, region)) in reset {
            let (domain, buf) = arrays.get_mut(&names[&param]).expect("bound above");
            let identity = Buffer::filled(buf.dtype(), region.volume() as usize, op.identity_value(buf.dtype()));
            copy_region(&identity, &region, buf, domain, &region);
        }

        let mut taken: Vec<(String, Rect, Buffer)> = vec![];
        for (param, arg) in sig.params.iter().zip(&launch.args) {
            if let ArgSpec::Array(name) = arg {
                let (domain, buf) = arrays.remove(name).ok_or_else(|| anyhow!("unknown array `{name}`"))?;
                taken.push((param.name.clone(), domain, buf));
            }
        }
        {
            let mut args = KernelArgs::new(dtype);
            let mut slots = taken.iter_mut();
            for (param, arg) in sig.params.iter().zip(&launch.args) {
                match arg {
                    ArgSpec::Scalar(v) => {
                        let target = match param.kind {
                            ParamKind::Scalar(Some(d)) => d,
                            _ => dtype,
                        };
                        args.push_scalar(ArgSpec::scalar_value(v).convert(target));
                    }
                    ArgSpec::Array(_) => {
                        let (pname, domain, buf) = slots.next().expect("one slot per array");
                        let mode = annotation
                            .access(pname)
                            .map(|a| a.mode)
                            .ok_or_else(|| anyhow!("launch {n}: `{pname}` has no annotation"))?;
                        if mode == AccessMode::Read {
                            args.push_read(buf, *domain, *domain);
                        } else {
                            args.push_write(buf, *domain, *domain, mode);
                        }
                    }
                }
            }
            def.run_superblock(&blocks, &block, &grid, &args)?;
        }
        for (param, domain, buf) in taken {
            arrays.insert(names[&param].clone(), (domain, buf));
        }
    }
    Ok(arrays.into_iter().map(|(k, (_, b))| (k, b)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayComparison {
    pub name: String,
    pub dtype: DType,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Row-major index of the first element outside tolerance.
    pub first_mismatch: Option<usize>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub pass: bool,
    pub arrays: Vec<ArrayComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counters: Option<Report>,
}

fn relative(a: f64, b: f64) -> f64 {
    if a == b || (a.is_nan() && b.is_nan()) {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Integers must match exactly, floats within [`FLOAT_REL_TOLERANCE`].
pub fn compare_buffers(name: &str, expected: &Buffer, actual: &Buffer) -> ArrayComparison {
    let dtype = expected.dtype();
    let mut cmp = ArrayComparison {
        name: name.to_string(),
        dtype,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        first_mismatch: None,
        pass: true,
    };
    if actual.dtype() != dtype || actual.len() != expected.len() {
        cmp.pass = false;
        cmp.first_mismatch = Some(0);
        cmp.max_abs_error = f64::INFINITY;
        cmp.max_rel_error = f64::INFINITY;
        return cmp;
    }
    for i in 0..expected.len() {
        let (e, a) = (expected.get(i), actual.get(i));
        let ok = if dtype.is_integer() {
            let (e, a) = (e.as_i64(), a.as_i64());
            let diff = (e as i128 - a as i128).unsigned_abs() as f64;
            cmp.max_abs_error = cmp.max_abs_error.max(diff);
            cmp.max_rel_error = cmp.max_rel_error.max(relative(e as f64, a as f64));
            e == a
        } else {
            let (e, a) = (e.as_f64(), a.as_f64());
            let rel = relative(e, a);
            if !(e.is_nan() && a.is_nan()) {
                cmp.max_abs_error = cmp.max_abs_error.max((e - a).abs());
            }
            cmp.max_rel_error = cmp.max_rel_error.max(rel);
            rel <= FLOAT_REL_TOLERANCE
        };
        if !ok && cmp.first_mismatch.is_none() {
            cmp.first_mismatch = Some(i);
            cmp.pass = false;
        }
    }
    cmp
}

pub fn compare(expected: &ArrayContents, actual: &ArrayContents, counters: Option<Report>) -> OracleReport {
    let mut arrays = vec![];
    for (name, e) in expected {
        match actual.get(name) {
            Some(a) => arrays.push(compare_buffers(name, e, a)),
            None => arrays.push(ArrayComparison {
                name: name.clone(),
                dtype: e.dtype(),
                max_abs_error: f64::INFINITY,
                max_rel_error: f64::INFINITY,
                first_mismatch: Some(0),
                pass: false,
            }),
        }
    }
    OracleReport {
        pass: arrays.iter().all(|a| a.pass),
        arrays,
        counters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_tolerance_is_relative() {
        let e = Buffer::F64(vec![1.0, 1000.0, 0.0]);
        let ok = Buffer::F64(vec![1.0 + 5e-7, 1000.0 + 5e-4, 0.0]);
        let bad = Buffer::F64(vec![1.0, 1000.0 + 2e-3, 0.0]);
        assert!(compare_buffers("x", &e, &ok).pass);
        let c = compare_buffers("x", &e, &bad);
        assert!(!c.pass);
        assert_eq!(c.first_mismatch, Some(1));
        assert!((c.max_abs_error - 2e-3).abs() < 1e-9);
    }

    #[test]
    fn integers_must_match_exactly() {
        let c = compare_buffers("x", &Buffer::I64(vec![5, 7]), &Buffer::I64(vec![5, 8]));
        assert!(!c.pass);
        assert_eq!(c.first_mismatch, Some(1));
        assert_eq!(c.max_abs_error, 1.0);
        assert!(compare_buffers("x", &Buffer::I32(vec![1, 2]), &Buffer::I32(vec![1, 2])).pass);
    }

    #[test]
    fn missing_and_mistyped_arrays_fail() {
        let mut e = ArrayContents::new();
        e.insert("a".into(), Buffer::I32(vec![1]));
        e.insert("b".into(), Buffer::I32(vec![1]));
        let mut a = ArrayContents::new();
        a.insert("a".into(), Buffer::F32(vec![1.0]));
        let r = compare(&e, &a, None);
        assert!(!r.pass);
        assert!(r.arrays.iter().all(|c| !c.pass));
    }
}
