//! Kernel definitions, argument views and the kernel registry.
//!
//! A kernel body runs once per thread block. It receives the virtual block
//! index of that block and views of its arguments that are addressed with
//! global array indices; each view subtracts the offset of the chunk it
//! wraps.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::annotation::AccessMode;
use crate::geometry::{Point, Rect};
use crate::types::{Buffer, CellBuffer, DType, Element, ReduceOp, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamKind {
    /// `None` means the kernel's element type.
    Scalar(Option<DType>),
    Array { rank: usize, dtype: Option<DType> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
}

impl Param {
    pub fn scalar(name: &str, dtype: Option<DType>) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Scalar(dtype),
        }
    }

    pub fn array(name: &str, rank: usize, dtype: Option<DType>) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Array { rank, dtype },
        }
    }

    pub fn is_array(&self) -> bool {
        matches!(self.kind, ParamKind::Array { .. })
    }
}

/// Name and parameter list of a kernel. Array ranks of 0 accept any rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSignature {
    pub name: String,
    pub params: Vec<Param>,
}

impl KernelSignature {
    pub fn param(&self, name: &str) -> Option<(usize, &Param)> {
        self.params.iter().enumerate().find(|(_, p)| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("kernel `{0}` is already registered")]
    Duplicate(String),

    #[error("unknown kernel `{0}`")]
    Unknown(String),

    #[error("kernel `{kernel}` parameter `{param}` has rank {rank}; at most 3 is supported")]
    InvalidRank { kernel: String, param: String, rank: usize },

    #[error("kernel `{kernel}` failed: {message}")]
    Failed { kernel: String, message: String },
}

/// Position of one thread block within a launch.
#[derive(Debug, Clone, Copy)]
pub struct BlockContext {
    pub block: Point,
    pub block_size: Point,
    pub grid: Rect,
}

impl BlockContext {
    pub fn rank(&self) -> usize {
        self.grid.rank()
    }

    /// Global thread indices of this block that fall inside the grid.
    pub fn threads(&self) -> impl Iterator<Item = Point> {
        let rank = self.rank();
        let lo: Vec<i64> = (0..rank).map(|k| self.block[k] * self.block_size[k]).collect();
        let hi: Vec<i64> = (0..rank).map(|k| lo[k] + self.block_size[k]).collect();
        let bounds: Vec<(i64, i64)> = lo.into_iter().zip(hi).collect();
        let block = Rect::from_bounds(&bounds).expect("block bounds");
        block.intersect(&self.grid).expect("grid rank").points()
    }
}

enum SlotData<'a> {
    Read(&'a Buffer),
    Write(CellBuffer<'a>),
}

pub struct ArraySlot<'a> {
    data: SlotData<'a>,
    region: Rect,
    domain: Rect,
    mode: AccessMode,
}

pub enum Slot<'a> {
    Scalar(Value),
    Array(ArraySlot<'a>),
}

/// Arguments of one kernel invocation, in signature order.
pub struct KernelArgs<'a> {
    slots: Vec<Slot<'a>>,
    dtype: DType,
}

impl<'a> KernelArgs<'a> {
    pub fn new(dtype: DType) -> Self {
        Self { slots: vec![], dtype }
    }

    /// Element type the kernel body is instantiated with.
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn push_scalar(&mut self, value: Value) {
        self.slots.push(Slot::Scalar(value));
    }

    /// A read-only view of `buffer`, which holds `region` of an array over `domain`.
    pub fn push_read(&mut self, buffer: &'a Buffer, region: Rect, domain: Rect) {
        self.slots.push(Slot::Array(ArraySlot {
            data: SlotData::Read(buffer),
            region,
            domain,
            mode: AccessMode::Read,
        }));
    }

    pub fn push_write(&mut self, buffer: &'a mut Buffer, region: Rect, domain: Rect, mode: AccessMode) {
        self.slots.push(Slot::Array(ArraySlot {
            data: SlotData::Write(buffer.as_cells()),
            region,
            domain,
            mode,
        }));
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn scalar_value(&self, index: usize) -> Value {
        match &self.slots[index] {
            Slot::Scalar(v) => *v,
            Slot::Array(_) => panic!("argument {index} is an array, not a scalar"),
        }
    }

    pub fn scalar<T: Element>(&self, index: usize) -> T {
        self.scalar_value(index).cast::<T>()
    }

    /// Typed view of array argument `index`.
    pub fn view<T: Element>(&self, index: usize) -> ArrayView<'_, T> {
        let slot = match &self.slots[index] {
            Slot::Array(a) => a,
            Slot::Scalar(_) => panic!("argument {index} is a scalar, not an array"),
        };
        let data = match &slot.data {
            SlotData::Read(b) => ViewData::Read(
                T::slice(b).unwrap_or_else(|| panic!("argument {index} holds {}, not {}", b.dtype(), T::DTYPE)),
            ),
            SlotData::Write(c) => ViewData::Write(
                T::cells(c).unwrap_or_else(|| panic!("argument {index} holds {}, not {}", c.dtype(), T::DTYPE)),
            ),
        };
        let reduce = match slot.mode {
            AccessMode::Reduce(op) => Some(op),
            _ => None,
        };
        ArrayView {
            data,
            region: slot.region,
            strides: slot.region.row_major_strides(),
            domain: slot.domain,
            reduce,
        }
    }
}

enum ViewData<'a, T> {
    Read(&'a [T]),
    Write(&'a [Cell<T>]),
}

/// Global-index view over one chunk buffer. Out-of-chunk accesses panic.
pub struct ArrayView<'a, T> {
    data: ViewData<'a, T>,
    region: Rect,
    strides: Point,
    domain: Rect,
    reduce: Option<ReduceOp>,
}

impl<T: Element> ArrayView<'_, T> {
    /// Domain of the whole array, for boundary guards.
    pub fn domain(&self) -> &Rect {
        &self.domain
    }

    /// The part of the array held by the underlying buffer.
    pub fn region(&self) -> &Rect {
        &self.region
    }

    /// Length of axis `axis` of the whole array.
    pub fn len(&self, axis: usize) -> i64 {
        self.domain.extent(axis)
    }

    #[inline]
    fn offset(&self, index: &[i64]) -> usize {
        let lo = self.region.lo();
        let hi = self.region.hi();
        debug_assert_eq!(index.len(), lo.rank());
        let mut at = 0;
        for k in 0..index.len() {
            if index[k] < lo[k] || index[k] >= hi[k] {
                panic!("index {index:?} outside chunk {:?}", self.region);
            }
            at += (index[k] - lo[k]) * self.strides[k];
        }
        at as usize
    }

    #[inline]
    pub fn get(&self, index: &[i64]) -> T {
        let at = self.offset(index);
        match &self.data {
            ViewData::Read(v) => v[at],
            ViewData::Write(c) => c[at].get(),
        }
    }

    #[inline]
    pub fn set(&self, index: &[i64], value: T) {
        let at = self.offset(index);
        match &self.data {
            ViewData::Write(c) => c[at].set(value),
            ViewData::Read(_) => panic!("write through a read-only view at {index:?}"),
        }
    }

    /// Combines `value` into the element with the view's reduction operator.
    #[inline]
    pub fn reduce(&self, index: &[i64], value: T) {
        let op = self.reduce.unwrap_or_else(|| panic!("reduce through a non-reducing view at {index:?}"));
        let at = self.offset(index);
        match &self.data {
            ViewData::Write(c) => c[at].set(op.apply(c[at].get(), value)),
            ViewData::Read(_) => unreachable!("reducing views are writable"),
        }
    }
}

pub type KernelBody = dyn Fn(&BlockContext, &KernelArgs<'_>) + Send + Sync;

#[derive(Clone)]
pub struct KernelDef {
    pub signature: KernelSignature,
    pub body: Arc<KernelBody>,
}

impl KernelDef {
    pub fn new(
        name: &str,
        params: Vec<Param>,
        body: impl Fn(&BlockContext, &KernelArgs<'_>) + Send + Sync + 'static,
    ) -> Self {
        Self {
            signature: KernelSignature {
                name: name.into(),
                params,
            },
            body: Arc::new(body),
        }
    }

    pub fn name(&self) -> &str {
        &self.signature.name
    }

    /// Runs every block of `superblock` (block-index space), catching panics.
    pub fn run_superblock(
        &self,
        superblock: &Rect,
        block_size: &Point,
        grid: &Rect,
        args: &KernelArgs<'_>,
    ) -> Result<(), KernelError> {
        let run = || {
            for block in superblock.points() {
                let ctx = BlockContext {
                    block,
                    block_size: *block_size,
                    grid: *grid,
                };
                (self.body)(&ctx, args);
            }
        };
        std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).map_err(|payload| KernelError::Failed {
            kernel: self.name().to_string(),
            message: panic_message(payload),
        })
    }
}

impl fmt::Debug for KernelDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelDef").field("signature", &self.signature).finish()
    }
}

pub(crate) fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "kernel panicked".into()
    }
}

#[derive(Debug, Clone, Default)]
pub struct KernelRegistry {
    kernels: BTreeMap<String, KernelDef>,
}

impl KernelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding all built-in kernels.
    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        for def in super::kernels::builtins() {
            reg.register(def).expect("built-in kernel names are unique");
        }
        reg
    }

    pub fn register(&mut self, def: KernelDef) -> Result<(), KernelError> {
        for p in &def.signature.params {
            if let ParamKind::Array { rank, .. } = p.kind {
                if rank > crate::geometry::MAX_RANK {
                    return Err(KernelError::InvalidRank {
                        kernel: def.name().into(),
                        param: p.name.clone(),
                        rank,
                    });
                }
            }
        }
        if self.kernels.contains_key(def.name()) {
            return Err(KernelError::Duplicate(def.name().into()));
        }
        self.kernels.insert(def.name().into(), def);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&KernelDef, KernelError> {
        self.kernels.get(name).ok_or_else(|| KernelError::Unknown(name.into()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.kernels.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(bounds: &[(i64, i64)]) -> Rect {
        Rect::from_bounds(bounds).unwrap()
    }

    #[test]
    fn views_subtract_chunk_offset() {
        let src = Buffer::I32(vec![10, 11, 12, 13]);
        let mut dst = Buffer::I32(vec![0; 4]);
        let domain = rect(&[(0, 100)]);
        let mut args = KernelArgs::new(DType::I32);
        args.push_read(&src, rect(&[(1023, 1027)]), domain);
        args.push_write(&mut dst, rect(&[(1024, 1028)]), domain, AccessMode::Write);
        let a = args.view::<i32>(0);
        let b = args.view::<i32>(1);
        b.set(&[1024], a.get(&[1023]) + a.get(&[1026]));
        drop(args);
        assert_eq!(dst, Buffer::I32(vec![23, 0, 0, 0]));
    }

    #[test]
    fn two_dimensional_offsets() {
        let src = Buffer::I64((0..6).collect());
        let mut args = KernelArgs::new(DType::I64);
        args.push_read(&src, rect(&[(4, 6), (10, 13)]), rect(&[(0, 8), (0, 16)]));
        let v = args.view::<i64>(0);
        assert_eq!(v.get(&[4, 10]), 0);
        assert_eq!(v.get(&[5, 11]), 4);
    }

    #[test]
    fn out_of_chunk_access_is_an_error() {
        let def = KernelDef::new("oob", vec![Param::array("a", 1, None)], |ctx, args| {
            let a = args.view::<f32>(0);
            for t in ctx.threads() {
                a.set(&[t[0] + 1], 1.0);
            }
        });
        let mut buf = Buffer::F32(vec![0.0; 4]);
        let mut args = KernelArgs::new(DType::F32);
        let r = rect(&[(0, 4)]);
        args.push_write(&mut buf, r, r, AccessMode::Write);
        let err = def
            .run_superblock(&rect(&[(0, 1)]), &Point::new(&[4]).unwrap(), &r, &args)
            .unwrap_err();
        assert!(err.to_string().contains("outside chunk"));
    }

    #[test]
    fn reduce_views_combine() {
        let mut buf = Buffer::I64(vec![i64::MAX; 2]);
        let mut args = KernelArgs::new(DType::I64);
        let r = rect(&[(0, 2)]);
        args.push_write(&mut buf, r, r, AccessMode::Reduce(ReduceOp::Min));
        let v = args.view::<i64>(0);
        v.reduce(&[1], 7);
        v.reduce(&[1], 9);
        drop(args);
        assert_eq!(buf, Buffer::I64(vec![i64::MAX, 7]));
    }

    #[test]
    fn guarded_threads_of_ragged_block() {
        let ctx = BlockContext {
            block: Point::new(&[2]).unwrap(),
            block_size: Point::new(&[4]).unwrap(),
            grid: rect(&[(0, 10)]),
        };
        let ts: Vec<i64> = ctx.threads().map(|p| p[0]).collect();
        assert_eq!(ts, vec![8, 9]);
    }

    #[test]
    fn duplicate_registration() {
        let mut reg = KernelRegistry::new();
        let def = KernelDef::new("k", vec![], |_, _| {});
        reg.register(def.clone()).unwrap();
        assert_eq!(reg.register(def), Err(KernelError::Duplicate("k".into())));
        assert!(matches!(reg.get("nope"), Err(KernelError::Unknown(_))));
        let bad = KernelDef::new("r4", vec![Param::array("a", 4, None)], |_, _| {});
        assert!(matches!(reg.register(bad), Err(KernelError::InvalidRank { .. })));
    }
}
