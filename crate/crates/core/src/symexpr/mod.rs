//! Symbolic index and condition expressions.
//!
//! Expressions are immutable and hash-consed through a process-wide table, so
//! structural equality is pointer equality. The same language describes
//! domains, dependence expressions (`[t+1]`, `[t:min(t+5, T)]`) and branch
//! conditions (`((i+1) % 5) == 0`).

mod affine;
mod eval;
mod invert;
mod parse;
mod presburger;
mod simplify;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, LazyLock, Mutex};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use affine::{classify_affine, AffineClass, LinExpr};
pub use eval::{eval_components, Env, IndexComp, IndexSet, Value};
pub use invert::{invert, Inverse};
pub use parse::parse;
pub use presburger::{
    cond_to_presburger, index_to_presburger, to_presburger, Conjunction, Constraint,
    ConstraintSet, ExistDef, Rel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymError {
    #[error("syntax error at byte {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("unbound symbol `{0}`")]
    Unbound(String),
    #[error("division or modulo by zero")]
    DivByZero,
    #[error("type error: {0}")]
    Type(String),
    #[error("unsupported expression `{0}`: {1}")]
    Unsupported(String, String),
}

/// A symbolic dimension: loop symbol and its upper bound symbol.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub bound: String,
}

impl Dim {
    pub fn new(name: impl Into<String>, bound: impl Into<String>) -> Self {
        Dim { name: name.into(), bound: bound.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    FloorDiv,
    Mod,
    Eq,
    Le,
    Lt,
    Ge,
    Gt,
    And,
    Or,
    Min,
    Max,
}

impl BinOp {
    fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Le | BinOp::Lt | BinOp::Ge | BinOp::Gt)
    }
}

#[derive(Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Int(i64),
    Bool(bool),
    Sym(Arc<str>),
    Neg(SymExpr),
    Not(SymExpr),
    Bin(BinOp, SymExpr, SymExpr),
    Slice(SymExpr, SymExpr),
    Tuple(Vec<SymExpr>),
}

/// An interned symbolic expression.
#[derive(Clone)]
pub struct SymExpr(Arc<Node>);

static INTERNER: LazyLock<Mutex<HashSet<Arc<Node>>>> = LazyLock::new(|| Mutex::new(HashSet::new()));

fn intern(node: Node) -> SymExpr {
    let mut table = INTERNER.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(existing) = table.get(&node) {
        return SymExpr(existing.clone());
    }
    let arc = Arc::new(node);
    table.insert(arc.clone());
    SymExpr(arc)
}

impl PartialEq for SymExpr {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}
impl Eq for SymExpr {}

impl Hash for SymExpr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        (Arc::as_ptr(&self.0) as usize).hash(state)
    }
}

impl SymExpr {
    pub fn node(&self) -> &Node {
        &self.0
    }

    pub fn int(v: i64) -> Self {
        intern(Node::Int(v))
    }
    pub fn bool(v: bool) -> Self {
        intern(Node::Bool(v))
    }
    pub fn sym(name: &str) -> Self {
        intern(Node::Sym(Arc::from(name)))
    }
    pub fn neg(e: SymExpr) -> Self {
        intern(Node::Neg(e))
    }
    pub fn not(e: SymExpr) -> Self {
        intern(Node::Not(e))
    }
    pub fn bin(op: BinOp, a: SymExpr, b: SymExpr) -> Self {
        intern(Node::Bin(op, a, b))
    }
    pub fn slice(lo: SymExpr, hi: SymExpr) -> Self {
        intern(Node::Slice(lo, hi))
    }
    pub fn tuple(items: Vec<SymExpr>) -> Self {
        intern(Node::Tuple(items))
    }

    pub fn add(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Add, a, b)
    }
    pub fn sub(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Sub, a, b)
    }
    pub fn mul(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Mul, a, b)
    }
    pub fn floordiv(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::FloorDiv, a, b)
    }
    pub fn modulo(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Mod, a, b)
    }
    pub fn min(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Min, a, b)
    }
    pub fn max(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Max, a, b)
    }
    pub fn eq(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Eq, a, b)
    }
    pub fn lt(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Lt, a, b)
    }
    pub fn le(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Le, a, b)
    }
    pub fn ge(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Ge, a, b)
    }
    pub fn gt(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Gt, a, b)
    }
    pub fn and(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::And, a, b)
    }
    pub fn or(a: SymExpr, b: SymExpr) -> Self {
        Self::bin(BinOp::Or, a, b)
    }

    /// `sym + c`, simplified.
    pub fn offset(e: SymExpr, c: i64) -> Self {
        Self::add(e, Self::int(c)).simplify()
    }

    pub fn as_int(&self) -> Option<i64> {
        match self.node() {
            Node::Int(v) => Some(*v),
            _ => None,
        }
    }
    pub fn as_bool(&self) -> Option<bool> {
        match self.node() {
            Node::Bool(v) => Some(*v),
            _ => None,
        }
    }
    pub fn as_sym(&self) -> Option<&str> {
        match self.node() {
            Node::Sym(s) => Some(s),
            _ => None,
        }
    }
    pub fn as_slice(&self) -> Option<(&SymExpr, &SymExpr)> {
        match self.node() {
            Node::Slice(lo, hi) => Some((lo, hi)),
            _ => None,
        }
    }
    pub fn is_slice(&self) -> bool {
        matches!(self.node(), Node::Slice(..))
    }

    /// The components of a top-level tuple, or the expression itself.
    pub fn components(&self) -> Vec<SymExpr> {
        match self.node() {
            Node::Tuple(items) => items.clone(),
            _ => vec![self.clone()],
        }
    }

    pub fn children(&self) -> Vec<SymExpr> {
        match self.node() {
            Node::Int(_) | Node::Bool(_) | Node::Sym(_) => vec![],
            Node::Neg(a) | Node::Not(a) => vec![a.clone()],
            Node::Bin(_, a, b) | Node::Slice(a, b) => vec![a.clone(), b.clone()],
            Node::Tuple(items) => items.clone(),
        }
    }

    pub fn free_symbols(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols(&self, out: &mut BTreeSet<String>) {
        if let Node::Sym(s) = self.node() {
            out.insert(s.to_string());
        }
        for c in self.children() {
            c.collect_symbols(out);
        }
    }

    pub fn mentions(&self, name: &str) -> bool {
        match self.node() {
            Node::Sym(s) => &**s == name,
            _ => self.children().iter().any(|c| c.mentions(name)),
        }
    }

    /// Replace symbols by expressions. Unmapped symbols are kept.
    pub fn substitute(&self, f: &dyn Fn(&str) -> Option<SymExpr>) -> SymExpr {
        match self.node() {
            Node::Int(_) | Node::Bool(_) => self.clone(),
            Node::Sym(s) => f(s).unwrap_or_else(|| self.clone()),
            Node::Neg(a) => Self::neg(a.substitute(f)),
            Node::Not(a) => Self::not(a.substitute(f)),
            Node::Bin(op, a, b) => Self::bin(*op, a.substitute(f), b.substitute(f)),
            Node::Slice(a, b) => Self::slice(a.substitute(f), b.substitute(f)),
            Node::Tuple(items) => Self::tuple(items.iter().map(|e| e.substitute(f)).collect()),
        }
    }

    pub fn substitute_one(&self, name: &str, with: &SymExpr) -> SymExpr {
        self.substitute(&|s| (s == name).then(|| with.clone()))
    }

    pub fn simplify(&self) -> SymExpr {
        simplify::simplify(self)
    }

    fn precedence(&self) -> u8 {
        match self.node() {
            Node::Bin(BinOp::Or, ..) => 1,
            Node::Bin(BinOp::And, ..) => 2,
            Node::Not(_) => 3,
            Node::Bin(op, ..) if op.is_comparison() => 4,
            Node::Bin(BinOp::Add | BinOp::Sub, ..) => 5,
            Node::Bin(BinOp::Mul | BinOp::FloorDiv | BinOp::Mod, ..) => 6,
            Node::Neg(_) => 7,
            Node::Slice(..) | Node::Tuple(_) => 0,
            _ => 8,
        }
    }
}

/// Build an index tuple from components, keeping a single component bare.
pub fn index_tuple(items: Vec<SymExpr>) -> SymExpr {
    SymExpr::tuple(items)
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &SymExpr, min_prec: u8) -> fmt::Result {
    if e.precedence() < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Int(v) => write!(f, "{v}"),
            Node::Bool(true) => write!(f, "True"),
            Node::Bool(false) => write!(f, "False"),
            Node::Sym(s) => write!(f, "{s}"),
            Node::Neg(a) => {
                write!(f, "-")?;
                write_child(f, a, 7)
            }
            Node::Not(a) => {
                write!(f, "!")?;
                write_child(f, a, 3)
            }
            Node::Bin(op @ (BinOp::Min | BinOp::Max), a, b) => {
                let name = if *op == BinOp::Min { "min" } else { "max" };
                write!(f, "{name}({a}, {b})")
            }
            Node::Bin(op, a, b) => {
                let p = self.precedence();
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::FloorDiv => "/",
                    BinOp::Mod => " % ",
                    BinOp::Eq => " == ",
                    BinOp::Le => " <= ",
                    BinOp::Lt => " < ",
                    BinOp::Ge => " >= ",
                    BinOp::Gt => " > ",
                    BinOp::And => " & ",
                    BinOp::Or => " | ",
                    BinOp::Min | BinOp::Max => unreachable!(),
                };
                // comparisons are non-associative; arithmetic is left-associative
                let left_min = if op.is_comparison() { p + 1 } else { p };
                write_child(f, a, left_min)?;
                write!(f, "{sym}")?;
                write_child(f, b, p + 1)
            }
            Node::Slice(lo, hi) => {
                write_child(f, lo, 1)?;
                write!(f, ":")?;
                write_child(f, hi, 1)
            }
            Node::Tuple(items) => {
                for (k, e) in items.iter().enumerate() {
                    if k > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{e}")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Debug for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{self}`")
    }
}

impl Serialize for SymExpr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SymExpr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Render an index tuple as `[a, b, c]`.
pub fn fmt_index(items: &[SymExpr]) -> String {
    let parts: Vec<String> = items.iter().map(|e| e.to_string()).collect();
    format!("[{}]", parts.join(", "))
}
