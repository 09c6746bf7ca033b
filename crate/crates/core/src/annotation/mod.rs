//! Data-access annotations.
//!
//! An annotation binds thread indices to variables and declares, for each
//! array argument, the access mode and the indices touched by one thread:
//!
//! ```text
//! global i => read A[i-1:i+1], write B[i]
//! global [i, j] => read A[i,:], read B[:,j], write C[i,j]
//! global [i, j] => read A[i,j], reduce(+) sum[i]
//! ```
//!
//! Slices are inclusive on both ends. Index expressions must be linear in the
//! bound variables.

mod eval;
mod lexer;
mod parser;

use std::fmt;

use thiserror::Error;

pub use self::eval::{check_write_disjointness, evaluate_region, AccessRegion, WriteConflict};
pub use self::parser::parse_annotation;
use crate::geometry::GeometryError;
use crate::types::ReduceOp;

#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash)]
pub enum BindingSpace {
    Global,
    Block,
    Local,
}

impl BindingSpace {
    fn keyword(self) -> &'static str {
        match self {
            BindingSpace::Global => "global",
            BindingSpace::Block => "block",
            BindingSpace::Local => "local",
        }
    }
}

/// Variables bound to the axes of one index space; the n-th variable binds axis n.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binding {
    pub space: BindingSpace,
    pub variables: Vec<String>,
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash)]
pub enum AccessMode {
    Read,
    Write,
    ReadWrite,
    Reduce(ReduceOp),
}

impl AccessMode {
    pub fn reads(self) -> bool {
        matches!(self, AccessMode::Read | AccessMode::ReadWrite)
    }

    pub fn writes(self) -> bool {
        matches!(self, AccessMode::Write | AccessMode::ReadWrite)
    }
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessMode::Read => f.write_str("read"),
            AccessMode::Write => f.write_str("write"),
            AccessMode::ReadWrite => f.write_str("readwrite"),
            AccessMode::Reduce(op) => write!(f, "reduce({})", op.symbol()),
        }
    }
}

/// `constant + Σ coefficient·variable`, with like terms merged and zero
/// coefficients dropped.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LinearExpr {
    pub constant: i64,
    pub terms: Vec<(String, i64)>,
}

impl LinearExpr {
    pub fn constant(value: i64) -> Self {
        Self {
            constant: value,
            terms: vec![],
        }
    }

    pub fn var(name: &str) -> Self {
        Self::term(name, 1)
    }

    pub fn term(name: &str, coefficient: i64) -> Self {
        let mut e = Self::default();
        e.add_term(name, coefficient);
        e
    }

    /// `var + offset`
    pub fn offset(name: &str, offset: i64) -> Self {
        let mut e = Self::var(name);
        e.constant = offset;
        e
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    fn add_term(&mut self, name: &str, coefficient: i64) {
        if let Some(t) = self.terms.iter_mut().find(|(n, _)| n == name) {
            t.1 += coefficient;
        } else {
            self.terms.push((name.to_string(), coefficient));
        }
        self.terms.retain(|(_, c)| *c != 0);
    }

    pub(crate) fn plus(mut self, other: &LinearExpr, sign: i64) -> LinearExpr {
        self.constant += sign * other.constant;
        for (name, c) in &other.terms {
            self.add_term(name, sign * c);
        }
        self
    }

    pub(crate) fn scaled(mut self, factor: i64) -> LinearExpr {
        self.constant *= factor;
        for t in &mut self.terms {
            t.1 *= factor;
        }
        self.terms.retain(|(_, c)| *c != 0);
        self
    }

    /// Evaluates at concrete variable values.
    pub fn eval_at(&self, lookup: impl Fn(&str) -> i64) -> i64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, (name, c)| acc + c * lookup(name))
    }
}

impl fmt::Display for LinearExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (name, c) in &self.terms {
            let (sign, mag) = if *c < 0 { ("-", -c) } else { ("+", *c) };
            match (first, sign) {
                (true, "-") => f.write_str("-")?,
                (true, _) => {}
                (false, s) => write!(f, " {s} ")?,
            }
            if mag == 1 {
                f.write_str(name)?;
            } else {
                write!(f, "{mag}*{name}")?;
            }
            first = false;
        }
        if first {
            write!(f, "{}", self.constant)
        } else if self.constant > 0 {
            write!(f, " + {}", self.constant)
        } else if self.constant < 0 {
            write!(f, " - {}", -(self.constant as i128))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndexSpec {
    Single(LinearExpr),
    Slice {
        lower: Option<LinearExpr>,
        upper: Option<LinearExpr>,
    },
}

impl IndexSpec {
    pub fn full() -> Self {
        IndexSpec::Slice {
            lower: None,
            upper: None,
        }
    }

    pub fn slice(lower: LinearExpr, upper: LinearExpr) -> Self {
        IndexSpec::Slice {
            lower: Some(lower),
            upper: Some(upper),
        }
    }
}

impl fmt::Display for IndexSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexSpec::Single(e) => write!(f, "{e}"),
            IndexSpec::Slice { lower, upper } => {
                if let Some(l) = lower {
                    write!(f, "{l}")?;
                }
                f.write_str(":")?;
                if let Some(u) = upper {
                    write!(f, "{u}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Access {
    pub argument: String,
    pub mode: AccessMode,
    pub indices: Vec<IndexSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessAnnotation {
    pub bindings: Vec<Binding>,
    pub accesses: Vec<Access>,
}

impl AccessAnnotation {
    pub fn access(&self, argument: &str) -> Option<&Access> {
        self.accesses.iter().find(|a| a.argument == argument)
    }

    /// Where a variable is bound: its index space and axis.
    pub fn lookup_variable(&self, name: &str) -> Option<(BindingSpace, usize)> {
        self.bindings.iter().find_map(|b| {
            b.variables
                .iter()
                .position(|v| v == name)
                .map(|axis| (b.space, axis))
        })
    }
}

impl fmt::Display for AccessAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, b) in self.bindings.iter().enumerate() {
            if n > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{} ", b.space.keyword())?;
            if b.variables.len() == 1 {
                f.write_str(&b.variables[0])?;
            } else {
                write!(f, "[{}]", b.variables.join(", "))?;
            }
        }
        f.write_str(" =>")?;
        for (n, a) in self.accesses.iter().enumerate() {
            if n > 0 {
                f.write_str(",")?;
            }
            write!(f, " {} {}[", a.mode, a.argument)?;
            for (k, idx) in a.indices.iter().enumerate() {
                if k > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{idx}")?;
            }
            f.write_str("]")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnnotationErrorKind {
    Syntax,
    Nonlinear,
    UnboundVariable(String),
    DuplicateVariable(String),
    DuplicateArgument(String),
}

/// Parse failure with a 1-based source position.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {message}")]
pub struct AnnotationError {
    pub kind: AnnotationErrorKind,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("argument `{argument}` has {indices} indices but the array has rank {rank}")]
    RankMismatch {
        argument: String,
        indices: usize,
        rank: usize,
    },

    #[error("no array domain given for argument `{0}`")]
    MissingArgument(String),

    #[error("superblock {0:?} is empty")]
    EmptySuperblock(crate::geometry::Rect),

    #[error("variable `{name}` binds axis {axis} but the launch grid has rank {rank}")]
    AxisOutOfRange {
        name: String,
        axis: usize,
        rank: usize,
    },

    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
