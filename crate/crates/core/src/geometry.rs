//! Integer points, half-open rectangles and inclusive intervals.
//!
//! Every partitioning concept in the crate (thread grids, superblocks, chunks,
//! access regions) is expressed as a [`Rect`]. Rectangles are half-open: `lo`
//! is inclusive and `hi` exclusive along every axis.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("axis count mismatch: {0} vs {1}")]
    RankMismatch(usize, usize),

    #[error("rank {0} is not supported (expected 1 to {MAX_RANK})")]
    InvalidRank(usize),

    #[error("lower bound {lo} exceeds upper bound {hi} on axis {axis}")]
    Inverted { axis: usize, lo: i64, hi: i64 },
}

/// An integer coordinate with one to three axes.
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    rank: u8,
    coords: [i64; MAX_RANK],
}

impl Point {
    pub fn new(coords: &[i64]) -> Result<Self, GeometryError> {
        if coords.is_empty() || coords.len() > MAX_RANK {
            return Err(GeometryError::InvalidRank(coords.len()));
        }
        let mut c = [0; MAX_RANK];
        c[..coords.len()].copy_from_slice(coords);
        Ok(Self {
            rank: coords.len() as u8,
            coords: c,
        })
    }

    /// Point with `rank` axes all set to `value`.
    pub fn splat(rank: usize, value: i64) -> Self {
        assert!((1..=MAX_RANK).contains(&rank), "invalid rank {rank}");
        let mut coords = [0; MAX_RANK];
        coords[..rank].fill(value);
        Self {
            rank: rank as u8,
            coords,
        }
    }

    pub fn zeros(rank: usize) -> Self {
        Self::splat(rank, 0)
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.coords[..self.rank()]
    }

    /// Coordinates padded with `fill` up to three axes.
    pub fn padded(&self, fill: i64) -> [i64; MAX_RANK] {
        let mut out = [fill; MAX_RANK];
        out[..self.rank()].copy_from_slice(self.as_slice());
        out
    }

    pub fn product(&self) -> i64 {
        self.as_slice().iter().product()
    }

    fn zip_with(&self, other: &Point, f: impl Fn(i64, i64) -> i64) -> Point {
        debug_assert_eq!(self.rank, other.rank);
        let mut out = *self;
        for k in 0..self.rank() {
            out.coords[k] = f(self.coords[k], other.coords[k]);
        }
        out
    }
}

impl std::ops::Index<usize> for Point {
    type Output = i64;

    fn index(&self, axis: usize) -> &i64 {
        &self.as_slice()[axis]
    }
}

impl std::ops::IndexMut<usize> for Point {
    fn index_mut(&mut self, axis: usize) -> &mut i64 {
        let rank = self.rank();
        &mut self.coords[..rank][axis]
    }
}

impl std::ops::Add for Point {
    type Output = Point;

    fn add(self, rhs: Point) -> Point {
        self.zip_with(&rhs, |a, b| a + b)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;

    fn sub(self, rhs: Point) -> Point {
        self.zip_with(&rhs, |a, b| a - b)
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.as_slice())
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, c) in self.as_slice().iter().enumerate() {
            if k > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl Serialize for Point {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<i64>::deserialize(d)?;
        Point::new(&v).map_err(serde::de::Error::custom)
    }
}

/// Half-open n-dimensional box `[lo, hi)`.
///
/// An empty rectangle keeps `lo <= hi` with at least one axis of zero extent.
#[derive(Copy, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    lo: Point,
    hi: Point,
}

impl Rect {
    pub fn new(lo: Point, hi: Point) -> Result<Self, GeometryError> {
        if lo.rank() != hi.rank() {
            return Err(GeometryError::RankMismatch(lo.rank(), hi.rank()));
        }
        for k in 0..lo.rank() {
            if lo[k] > hi[k] {
                return Err(GeometryError::Inverted {
                    axis: k,
                    lo: lo[k],
                    hi: hi[k],
                });
            }
        }
        Ok(Self { lo, hi })
    }

    /// Builds a rect from per-axis `(lo, hi)` pairs.
    pub fn from_bounds(bounds: &[(i64, i64)]) -> Result<Self, GeometryError> {
        let lo: Vec<i64> = bounds.iter().map(|b| b.0).collect();
        let hi: Vec<i64> = bounds.iter().map(|b| b.1).collect();
        Self::new(Point::new(&lo)?, Point::new(&hi)?)
    }

    /// `[0, extents)`.
    pub fn from_extents(extents: &[i64]) -> Result<Self, GeometryError> {
        let hi = Point::new(extents)?;
        Self::new(Point::zeros(hi.rank()), hi)
    }

    pub fn lo(&self) -> Point {
        self.lo
    }

    pub fn hi(&self) -> Point {
        self.hi
    }

    pub fn rank(&self) -> usize {
        self.lo.rank()
    }

    pub fn extents(&self) -> Point {
        self.hi - self.lo
    }

    pub fn extent(&self, axis: usize) -> i64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn volume(&self) -> i64 {
        self.extents().product()
    }

    pub fn is_empty(&self) -> bool {
        (0..self.rank()).any(|k| self.hi[k] <= self.lo[k])
    }

    fn check_rank(&self, other: &Rect) -> Result<(), GeometryError> {
        if self.rank() != other.rank() {
            Err(GeometryError::RankMismatch(self.rank(), other.rank()))
        } else {
            Ok(())
        }
    }

    /// Component-wise max of `lo` and min of `hi`; empty when disjoint.
    pub fn intersect(&self, other: &Rect) -> Result<Rect, GeometryError> {
        self.check_rank(other)?;
        let lo = self.lo.zip_with(&other.lo, i64::max);
        let hi = self.hi.zip_with(&other.hi, i64::min);
        // keep lo <= hi so empty results remain valid rects
        let hi = hi.zip_with(&lo, i64::max);
        Ok(Rect { lo, hi })
    }

    pub fn overlaps(&self, other: &Rect) -> Result<bool, GeometryError> {
        Ok(!self.intersect(other)?.is_empty())
    }

    /// True iff every point of `inner` lies in `self`. Empty rects are
    /// contained in anything of the same rank.
    pub fn contains(&self, inner: &Rect) -> Result<bool, GeometryError> {
        self.check_rank(inner)?;
        if inner.is_empty() {
            return Ok(true);
        }
        Ok((0..self.rank()).all(|k| self.lo[k] <= inner.lo[k] && inner.hi[k] <= self.hi[k]))
    }

    pub fn contains_point(&self, p: &Point) -> bool {
        p.rank() == self.rank() && (0..self.rank()).all(|k| self.lo[k] <= p[k] && p[k] < self.hi[k])
    }

    /// Restricts `self` to `domain`.
    pub fn clip(&self, domain: &Rect) -> Result<Rect, GeometryError> {
        self.intersect(domain)
    }

    /// Smallest rect containing both; empty operands are ignored.
    pub fn hull(&self, other: &Rect) -> Result<Rect, GeometryError> {
        self.check_rank(other)?;
        if self.is_empty() {
            return Ok(*other);
        }
        if other.is_empty() {
            return Ok(*self);
        }
        Ok(Rect {
            lo: self.lo.zip_with(&other.lo, i64::min),
            hi: self.hi.zip_with(&other.hi, i64::max),
        })
    }

    /// Row-major strides of a buffer laid out over this rect.
    pub fn row_major_strides(&self) -> Point {
        let ext = self.extents();
        let mut strides = Point::splat(self.rank(), 1);
        for k in (0..self.rank().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * ext[k + 1];
        }
        strides
    }

    /// Linear offset of `p` in a row-major buffer over this rect.
    pub fn linear_index(&self, p: &Point) -> Option<usize> {
        if !self.contains_point(p) {
            return None;
        }
        let mut idx = 0;
        for k in 0..self.rank() {
            idx = idx * self.extent(k) + (p[k] - self.lo[k]);
        }
        Some(idx as usize)
    }

    /// Iterates all points in row-major order (last axis fastest).
    pub fn points(&self) -> RectPoints {
        RectPoints {
            rect: *self,
            next: if self.is_empty() { None } else { Some(self.lo) },
        }
    }

    pub fn translate(&self, by: Point) -> Rect {
        Rect {
            lo: self.lo + by,
            hi: self.hi + by,
        }
    }
}

impl fmt::Debug for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.rank() {
            if k > 0 {
                write!(f, "×")?;
            }
            write!(f, "[{},{})", self.lo[k], self.hi[k])?;
        }
        Ok(())
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub struct RectPoints {
    rect: Rect,
    next: Option<Point>,
}

impl Iterator for RectPoints {
    type Item = Point;

    fn next(&mut self) -> Option<Point> {
        let current = self.next?;
        let mut p = current;
        let mut axis = self.rect.rank();
        self.next = loop {
            if axis == 0 {
                break None;
            }
            axis -= 1;
            p[axis] += 1;
            if p[axis] < self.rect.hi[axis] {
                break Some(p);
            }
            p[axis] = self.rect.lo[axis];
        };
        Some(current)
    }
}

/// Inclusive integer interval; `lo > hi` means empty.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct Interval {
    pub lo: i64,
    pub hi: i64,
}

impl Interval {
    pub const EMPTY: Interval = Interval { lo: 1, hi: 0 };

    pub fn new(lo: i64, hi: i64) -> Self {
        if lo > hi {
            Self::EMPTY
        } else {
            Self { lo, hi }
        }
    }

    pub fn point(v: i64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    /// Endpoint-wise sum; empty if either side is empty.
    pub fn add(self, other: Interval) -> Interval {
        if self.is_empty() || other.is_empty() {
            return Self::EMPTY;
        }
        Interval::new(self.lo + other.lo, self.hi + other.hi)
    }

    /// Multiplication by a constant; a negative factor swaps the endpoints.
    pub fn scale(self, factor: i64) -> Interval {
        if self.is_empty() {
            return Self::EMPTY;
        }
        let (a, b) = (self.lo * factor, self.hi * factor);
        Interval::new(a.min(b), a.max(b))
    }

    pub fn hull(self, other: Interval) -> Interval {
        match (self.is_empty(), other.is_empty()) {
            (true, _) => other,
            (_, true) => self,
            _ => Interval::new(self.lo.min(other.lo), self.hi.max(other.hi)),
        }
    }

    /// Half-open `(lo, hi + 1)`; empty maps to `(lo, lo)`.
    pub fn to_half_open(self) -> (i64, i64) {
        if self.is_empty() {
            (0, 0)
        } else {
            (self.lo, self.hi + 1)
        }
    }
}
