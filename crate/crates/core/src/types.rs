//! Element types, scalar values, typed chunk buffers and identifiers.

use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArrayId(pub u64);

#[derive(Debug, Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkId(pub u64);

#[derive(Debug, Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u64);

#[derive(Debug, Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkerId(pub usize);

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    I32,
    I64,
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::I32 | DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, DType::I32 | DType::I64)
    }

    pub fn c_name(self) -> &'static str {
        match self {
            DType::I32 => "int32_t",
            DType::I64 => "int64_t",
            DType::F32 => "float",
            DType::F64 => "double",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::F32 => "f32",
            DType::F64 => "f64",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReduceOp {
    Plus,
    Times,
    Min,
    Max,
}

impl ReduceOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ReduceOp::Plus => "+",
            ReduceOp::Times => "*",
            ReduceOp::Min => "min",
            ReduceOp::Max => "max",
        }
    }

    pub fn identity<T: Element>(self) -> T {
        match self {
            ReduceOp::Plus => T::zero(),
            ReduceOp::Times => T::one(),
            ReduceOp::Min => T::max_value(),
            ReduceOp::Max => T::min_value(),
        }
    }

    pub fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            ReduceOp::Plus => a.add(b),
            ReduceOp::Times => a.mul(b),
            ReduceOp::Min => a.min_of(b),
            ReduceOp::Max => a.max_of(b),
        }
    }

    pub fn identity_value(self, dtype: DType) -> Value {
        match dtype {
            DType::I32 => Value::I32(self.identity()),
            DType::I64 => Value::I64(self.identity()),
            DType::F32 => Value::F32(self.identity()),
            DType::F64 => Value::F64(self.identity()),
        }
    }
}

/// A scalar kernel argument or fill value.
#[derive(Debug, Copy, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    I32(i32),
    I64(i64),
    F32(f32),
    F64(f64),
}

impl Value {
    pub fn dtype(&self) -> DType {
        match self {
            Value::I32(_) => DType::I32,
            Value::I64(_) => DType::I64,
            Value::F32(_) => DType::F32,
            Value::F64(_) => DType::F64,
        }
    }

    pub fn from_f64(dtype: DType, v: f64) -> Value {
        match dtype {
            DType::I32 => Value::I32(v as i32),
            DType::I64 => Value::I64(v as i64),
            DType::F32 => Value::F32(v as f32),
            DType::F64 => Value::F64(v),
        }
    }

    /// Converts to `dtype`, going through `i64` when both sides are integers.
    pub fn convert(&self, dtype: DType) -> Value {
        match (self.dtype().is_integer(), dtype) {
            (true, DType::I32) => Value::I32(self.as_i64() as i32),
            (true, DType::I64) => Value::I64(self.as_i64()),
            _ => Value::from_f64(dtype, self.as_f64()),
        }
    }

    pub fn as_f64(&self) -> f64 {
        match *self {
            Value::I32(v) => v as f64,
            Value::I64(v) => v as f64,
            Value::F32(v) => v as f64,
            Value::F64(v) => v,
        }
    }

    pub fn as_i64(&self) -> i64 {
        match *self {
            Value::I32(v) => v as i64,
            Value::I64(v) => v,
            Value::F32(v) => v as i64,
            Value::F64(v) => v as i64,
        }
    }

    pub fn cast<T: Element>(&self) -> T {
        match *self {
            Value::I32(v) => T::from_i64(v as i64),
            Value::I64(v) => T::from_i64(v),
            Value::F32(v) => T::from_f64(v as f64),
            Value::F64(v) => T::from_f64(v),
        }
    }
}

/// Primitive element type stored in distributed arrays.
///
/// Integer arithmetic wraps so that reductions are associative and
/// order-independent.
pub trait Element: Copy + Send + Sync + PartialEq + PartialOrd + fmt::Debug + 'static {
    const DTYPE: DType;

    fn zero() -> Self;
    fn one() -> Self;
    fn min_value() -> Self;
    fn max_value() -> Self;
    fn add(self, other: Self) -> Self;
    fn sub(self, other: Self) -> Self;
    fn mul(self, other: Self) -> Self;
    fn min_of(self, other: Self) -> Self;
    fn max_of(self, other: Self) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_i64(v: i64) -> Self;
    fn to_i64(self) -> i64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn slice(buf: &Buffer) -> Option<&[Self]>;
    fn slice_mut(buf: &mut Buffer) -> Option<&mut [Self]>;
    fn cells<'a>(buf: &CellBuffer<'a>) -> Option<&'a [Cell<Self>]>;
    fn wrap(values: Vec<Self>) -> Buffer;
    fn value(self) -> Value;
}

macro_rules! impl_int_element {
    ($t:ty, $variant:ident) => {
        impl Element for $t {
            const DTYPE: DType = DType::$variant;

            fn zero() -> Self {
                0
            }
            fn one() -> Self {
                1
            }
            fn min_value() -> Self {
                <$t>::MIN
            }
            fn max_value() -> Self {
                <$t>::MAX
            }
            fn add(self, other: Self) -> Self {
                self.wrapping_add(other)
            }
            fn sub(self, other: Self) -> Self {
                self.wrapping_sub(other)
            }
            fn mul(self, other: Self) -> Self {
                self.wrapping_mul(other)
            }
            fn min_of(self, other: Self) -> Self {
                Ord::min(self, other)
            }
            fn max_of(self, other: Self) -> Self {
                Ord::max(self, other)
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn from_i64(v: i64) -> Self {
                v as $t
            }
            fn to_i64(self) -> i64 {
                self as i64
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
            fn slice(buf: &Buffer) -> Option<&[Self]> {
                match buf {
                    Buffer::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn slice_mut(buf: &mut Buffer) -> Option<&mut [Self]> {
                match buf {
                    Buffer::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn cells<'a>(buf: &CellBuffer<'a>) -> Option<&'a [Cell<Self>]> {
                match buf {
                    CellBuffer::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn wrap(values: Vec<Self>) -> Buffer {
                Buffer::$variant(values)
            }
            fn value(self) -> Value {
                Value::$variant(self)
            }
        }
    };
}

macro_rules! impl_float_element {
    ($t:ty, $variant:ident) => {
        impl Element for $t {
            const DTYPE: DType = DType::$variant;

            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn min_value() -> Self {
                <$t>::MIN
            }
            fn max_value() -> Self {
                <$t>::MAX
            }
            fn add(self, other: Self) -> Self {
                self + other
            }
            fn sub(self, other: Self) -> Self {
                self - other
            }
            fn mul(self, other: Self) -> Self {
                self * other
            }
            fn min_of(self, other: Self) -> Self {
                self.min(other)
            }
            fn max_of(self, other: Self) -> Self {
                self.max(other)
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn from_i64(v: i64) -> Self {
                v as $t
            }
            fn to_i64(self) -> i64 {
                self as i64
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
            fn slice(buf: &Buffer) -> Option<&[Self]> {
                match buf {
                    Buffer::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn slice_mut(buf: &mut Buffer) -> Option<&mut [Self]> {
                match buf {
                    Buffer::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn cells<'a>(buf: &CellBuffer<'a>) -> Option<&'a [Cell<Self>]> {
                match buf {
                    CellBuffer::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn wrap(values: Vec<Self>) -> Buffer {
                Buffer::$variant(values)
            }
            fn value(self) -> Value {
                Value::$variant(self)
            }
        }
    };
}

impl_int_element!(i32, I32);
impl_int_element!(i64, I64);
impl_float_element!(f32, F32);
impl_float_element!(f64, F64);

/// Calls a generic function instantiated for the element type of `$dtype`.
#[macro_export]
macro_rules! dispatch_dtype {
    ($dtype:expr, $T:ident => $body:expr) => {
        match $dtype {
            $crate::types::DType::I32 => {
                type $T = i32;
                $body
            }
            $crate::types::DType::I64 => {
                type $T = i64;
                $body
            }
            $crate::types::DType::F32 => {
                type $T = f32;
                $body
            }
            $crate::types::DType::F64 => {
                type $T = f64;
                $body
            }
        }
    };
}

/// Row-major chunk contents.
#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    I32(Vec<i32>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buffer {
    pub fn filled(dtype: DType, len: usize, value: Value) -> Buffer {
        dispatch_dtype!(dtype, T => T::wrap(vec![value.cast::<T>(); len]))
    }

    pub fn zeros(dtype: DType, len: usize) -> Buffer {
        dispatch_dtype!(dtype, T => T::wrap(vec![T::zero(); len]))
    }

    pub fn dtype(&self) -> DType {
        match self {
            Buffer::I32(_) => DType::I32,
            Buffer::I64(_) => DType::I64,
            Buffer::F32(_) => DType::F32,
            Buffer::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::I32(v) => v.len(),
            Buffer::I64(v) => v.len(),
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size_in_bytes(&self) -> usize {
        self.len() * self.dtype().size_in_bytes()
    }

    pub fn get(&self, index: usize) -> Value {
        match self {
            Buffer::I32(v) => Value::I32(v[index]),
            Buffer::I64(v) => Value::I64(v[index]),
            Buffer::F32(v) => Value::F32(v[index]),
            Buffer::F64(v) => Value::F64(v[index]),
        }
    }

    /// Little-endian serialization in element order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size_in_bytes());
        dispatch_dtype!(self.dtype(), T => {
            for &x in T::slice(self).unwrap() {
                x.write_le(&mut out);
            }
        });
        out
    }

    /// Element-wise interior mutability over the whole buffer.
    pub fn as_cells(&mut self) -> CellBuffer<'_> {
        match self {
            Buffer::I32(v) => CellBuffer::I32(Cell::from_mut(v.as_mut_slice()).as_slice_of_cells()),
            Buffer::I64(v) => CellBuffer::I64(Cell::from_mut(v.as_mut_slice()).as_slice_of_cells()),
            Buffer::F32(v) => CellBuffer::F32(Cell::from_mut(v.as_mut_slice()).as_slice_of_cells()),
            Buffer::F64(v) => CellBuffer::F64(Cell::from_mut(v.as_mut_slice()).as_slice_of_cells()),
        }
    }

    pub fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Buffer {
        let width = dtype.size_in_bytes();
        dispatch_dtype!(dtype, T => T::wrap(bytes.chunks_exact(width).map(T::read_le).collect()))
    }
}

/// A mutably borrowed buffer viewed as cells, so that several views can
/// write through shared references.
#[derive(Debug, Clone, Copy)]
pub enum CellBuffer<'a> {
    I32(&'a [Cell<i32>]),
    I64(&'a [Cell<i64>]),
    F32(&'a [Cell<f32>]),
    F64(&'a [Cell<f64>]),
}

impl CellBuffer<'_> {
    pub fn dtype(&self) -> DType {
        match self {
            CellBuffer::I32(_) => DType::I32,
            CellBuffer::I64(_) => DType::I64,
            CellBuffer::F32(_) => DType::F32,
            CellBuffer::F64(_) => DType::F64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identities() {
        assert_eq!(ReduceOp::Plus.identity::<i32>(), 0);
        assert_eq!(ReduceOp::Times.identity::<f64>(), 1.0);
        assert_eq!(ReduceOp::Min.identity::<i64>(), i64::MAX);
        assert_eq!(ReduceOp::Max.identity::<f32>(), f32::MIN);
    }

    #[test]
    fn integer_ops_wrap() {
        assert_eq!(Element::add(i32::MAX, 1), i32::MIN);
        assert_eq!(Element::mul(i64::MAX, 2), -2);
    }

    proptest! {
        #[test]
        fn le_bytes_roundtrip(v in prop::collection::vec(any::<i64>(), 0..64), f in prop::collection::vec(any::<f32>(), 0..64)) {
            let b = Buffer::I64(v);
            prop_assert_eq!(Buffer::from_le_bytes(DType::I64, &b.to_le_bytes()), b);
            let fb = Buffer::F32(f);
            let back = Buffer::from_le_bytes(DType::F32, &fb.to_le_bytes());
            prop_assert_eq!(back.to_le_bytes(), fb.to_le_bytes());
        }
    }
}
