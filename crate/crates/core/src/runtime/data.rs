//! Region transfers between row-major chunk buffers.

use crate::dispatch_dtype;
use crate::geometry::Rect;
use crate::types::{Buffer, Element, ReduceOp};

/// Calls `f(src_offset, dst_offset, run_length)` for every contiguous run
/// of `region` along the last axis.
fn for_each_run(src_rect: &Rect, dst_rect: &Rect, region: &Rect, mut f: impl FnMut(usize, usize, usize)) {
    if region.is_empty() {
        return;
    }
    let rank = region.rank();
    let last = rank - 1;
    let run = region.extent(last) as usize;
    let mut outer_ext = region.extents();
    outer_ext[last] = 1;
    let outer = Rect::new(region.lo(), region.lo() + outer_ext).expect("run grid");
    for p in outer.points() {
        let s = src_rect.linear_index(&p).expect("region inside source chunk");
        let d = dst_rect.linear_index(&p).expect("region inside destination chunk");
        f(s, d, run);
    }
}

fn check(src_rect: &Rect, dst_rect: &Rect, region: &Rect) {
    assert!(
        src_rect.contains(region).unwrap_or(false) && dst_rect.contains(region).unwrap_or(false),
        "region {region:?} not inside {src_rect:?} and {dst_rect:?}"
    );
}

/// Copies `region` (global coordinates) from `src` to `dst`.
pub fn copy_region(src: &Buffer, src_rect: &Rect, dst: &mut Buffer, dst_rect: &Rect, region: &Rect) {
    check(src_rect, dst_rect, region);
    dispatch_dtype!(src.dtype(), T => {
        let s = T::slice(src).expect("source dtype");
        let d = T::slice_mut(dst).expect("destination dtype matches source");
        for_each_run(src_rect, dst_rect, region, |so, do_, n| {
            d[do_..do_ + n].copy_from_slice(&s[so..so + n]);
        });
    })
}

/// Combines `region` of `src` into `dst` element-wise with `op`.
pub fn reduce_region(op: ReduceOp, src: &Buffer, src_rect: &Rect, dst: &mut Buffer, dst_rect: &Rect, region: &Rect) {
    check(src_rect, dst_rect, region);
    dispatch_dtype!(src.dtype(), T => {
        let s = T::slice(src).expect("source dtype");
        let d = T::slice_mut(dst).expect("destination dtype matches source");
        for_each_run(src_rect, dst_rect, region, |so, do_, n| {
            for k in 0..n {
                d[do_ + k] = op.apply(d[do_ + k], s[so + k]);
            }
        });
    })
}

/// A new buffer holding exactly `region` of `src`.
pub fn extract_region(src: &Buffer, src_rect: &Rect, region: &Rect) -> Buffer {
    let mut out = Buffer::zeros(src.dtype(), region.volume() as usize);
    copy_region(src, src_rect, &mut out, region, region);
    out
}
