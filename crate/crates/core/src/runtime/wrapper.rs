//! CUDA-style source for the per-superblock wrapper kernel: it rebuilds the
//! virtual block index from a block offset and shifts every array pointer
//! by its chunk offset before calling the user kernel.

use std::fmt::Write;

use crate::annotation::AccessMode;
use crate::geometry::Point;
use crate::types::DType;

use super::kernel::{KernelSignature, ParamKind};

/// Placement of one array argument on a device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayPlacement {
    pub name: String,
    pub mode: AccessMode,
    pub offsets: Point,
    pub strides: Point,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// 32 alphanumerics derived from `seed`.
fn suffix(seed: u64) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    let mut h = seed;
    (0..32)
        .map(|_| {
            h = super::kernels::mix64(h);
            ALPHABET[(h % ALPHABET.len() as u64) as usize] as char
        })
        .collect()
}

pub fn generate_wrapper_source(
    signature: &KernelSignature,
    dtype: DType,
    block_offset: &Point,
    arrays: &[ArrayPlacement],
) -> String {
    let elem = |d: Option<DType>| d.unwrap_or(dtype).c_name();
    let placement = |name: &str| arrays.iter().find(|a| a.name == name);

    let mut params = vec![];
    let mut call = vec!["virtual_block_index".to_string()];
    for p in &signature.params {
        match &p.kind {
            ParamKind::Scalar(d) => params.push(format!("{} {}", elem(*d), p.name)),
            ParamKind::Array { dtype: d, .. } => {
                let read_only = placement(&p.name).is_none_or(|a| a.mode == AccessMode::Read);
                let qualifier = if read_only { "const " } else { "" };
                params.push(format!("{qualifier}{} *const {}_ptr", elem(*d), p.name));
            }
        }
        call.push(p.name.clone());
    }

    let mut out = String::new();
    let name = &signature.name;
    let hash = fnv1a(format!("{signature:?}|{dtype}|{block_offset:?}|{arrays:?}").as_bytes());
    writeln!(out, "extern \"C\" __global__ void {name}_wrapper_{}(", suffix(hash)).unwrap();
    for (n, p) in params.iter().enumerate() {
        let sep = if n + 1 < params.len() { ", " } else { "" };
        writeln!(out, "  {p}{sep}").unwrap();
    }
    writeln!(out, ") {{").unwrap();
    writeln!(out, "  // Worker-specific constants").unwrap();
    let b = block_offset.padded(0);
    writeln!(
        out,
        "  const uint32_t block_offset_x = {}, block_offset_y = {}, block_offset_z = {};",
        b[0], b[1], b[2]
    )
    .unwrap();
    let mut sorted: Vec<&ArrayPlacement> = arrays.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for a in &sorted {
        for k in 0..a.offsets.rank() {
            writeln!(
                out,
                "  const size_t {n}_offset_{k} = {}, {n}_strides_{k} = {};",
                a.offsets[k],
                a.strides[k],
                n = a.name
            )
            .unwrap();
        }
    }
    writeln!(out).unwrap();
    writeln!(out, "  // Prepare arguments").unwrap();
    writeln!(out, "  dim3 virtual_block_index(block_offset_x + blockIdx.x, ").unwrap();
    writeln!(out, "    block_offset_y + blockIdx.y, block_offset_z + blockIdx.z);").unwrap();
    for p in &signature.params {
        let ParamKind::Array { dtype: d, .. } = p.kind else {
            continue;
        };
        let Some(a) = placement(&p.name) else {
            continue;
        };
        let rank = a.offsets.rank();
        let n = &a.name;
        let qualifier = if a.mode == AccessMode::Read { "const " } else { "" };
        let shift: Vec<String> = (0..rank).map(|k| format!("{n}_offset_{k} * {n}_strides_{k}")).collect();
        let shift = if rank == 1 {
            shift[0].clone()
        } else {
            format!("({})", shift.join(" + "))
        };
        let strides: Vec<String> = (0..rank).map(|k| format!("{n}_strides_{k}")).collect();
        writeln!(out, "  {qualifier}::lightning::Array<{}, {rank}> {n}(", elem(d)).unwrap();
        writeln!(out, "    {n}_ptr - {shift}, {{{}}});", strides.join(", ")).unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "  // Call user kernel").unwrap();
    writeln!(out, "  {name}({});", call.join(", ")).unwrap();
    writeln!(out, "}}").unwrap();
    out
}
