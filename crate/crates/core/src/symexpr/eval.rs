use std::collections::BTreeMap;

use super::{BinOp, Node, SymError, SymExpr};

/// Symbol bindings used for evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Env {
    bindings: BTreeMap<String, i64>,
}

impl Env {
    pub fn new() -> Self {
        Env::default()
    }

    pub fn with(mut self, name: &str, v: i64) -> Self {
        self.bind(name, v);
        self
    }

    pub fn bind(&mut self, name: &str, v: i64) {
        self.bindings.insert(name.to_string(), v);
    }

    pub fn unbind(&mut self, name: &str) {
        self.bindings.remove(name);
    }

    pub fn get(&self, name: &str) -> Option<i64> {
        self.bindings.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &i64)> {
        self.bindings.iter()
    }
}

impl<const N: usize> From<[(&str, i64); N]> for Env {
    fn from(items: [(&str, i64); N]) -> Self {
        let mut env = Env::new();
        for (k, v) in items {
            env.bind(k, v);
        }
        env
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Bool(bool),
    /// Half-open integer range `[lo, hi)`; empty when `lo >= hi`.
    Range(i64, i64),
}

/// One evaluated index component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndexComp {
    Point(i64),
    Range(i64, i64),
}

impl IndexComp {
    pub fn len(&self) -> usize {
        match *self {
            IndexComp::Point(_) => 1,
            IndexComp::Range(lo, hi) => (hi - lo).max(0) as usize,
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn contains(&self, v: i64) -> bool {
        match *self {
            IndexComp::Point(p) => p == v,
            IndexComp::Range(lo, hi) => lo <= v && v < hi,
        }
    }
    pub fn values(&self) -> impl Iterator<Item = i64> {
        let (lo, hi) = match *self {
            IndexComp::Point(p) => (p, p + 1),
            IndexComp::Range(lo, hi) => (lo, hi.max(lo)),
        };
        lo..hi
    }
}

/// Cartesian product of evaluated index components.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexSet {
    pub comps: Vec<IndexComp>,
}

impl IndexSet {
    pub fn len(&self) -> usize {
        self.comps.iter().map(IndexComp::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, point: &[i64]) -> bool {
        point.len() == self.comps.len() && self.comps.iter().zip(point).all(|(c, v)| c.contains(*v))
    }

    /// Extents of the range components, in order.
    pub fn slice_extents(&self) -> Vec<usize> {
        self.comps
            .iter()
            .filter_map(|c| match c {
                IndexComp::Range(..) => Some(c.len()),
                IndexComp::Point(_) => None,
            })
            .collect()
    }

    /// All points in lexicographic order.
    pub fn points(&self) -> Vec<Vec<i64>> {
        let mut out = vec![Vec::with_capacity(self.comps.len())];
        for c in &self.comps {
            let mut next = Vec::new();
            for prefix in &out {
                for v in c.values() {
                    let mut p = prefix.clone();
                    p.push(v);
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }
}

impl SymExpr {
    pub fn eval(&self, env: &Env) -> Result<Value, SymError> {
        match self.node() {
            Node::Int(v) => Ok(Value::Int(*v)),
            Node::Bool(b) => Ok(Value::Bool(*b)),
            Node::Sym(s) => env.get(s).map(Value::Int).ok_or_else(|| SymError::Unbound(s.to_string())),
            Node::Neg(a) => Ok(Value::Int(-a.eval_int(env)?)),
            Node::Not(a) => Ok(Value::Bool(!a.eval_bool(env)?)),
            Node::Slice(lo, hi) => Ok(Value::Range(lo.eval_int(env)?, hi.eval_int(env)?)),
            Node::Tuple(_) => Err(SymError::Type(format!("tuple `{self}` is not a scalar"))),
            Node::Bin(op, a, b) => match op {
                BinOp::And => Ok(Value::Bool(a.eval_bool(env)? && b.eval_bool(env)?)),
                BinOp::Or => Ok(Value::Bool(a.eval_bool(env)? || b.eval_bool(env)?)),
                _ => {
                    let x = a.eval_int(env)?;
                    let y = b.eval_int(env)?;
                    Ok(match op {
                        BinOp::Add => Value::Int(x + y),
                        BinOp::Sub => Value::Int(x - y),
                        BinOp::Mul => Value::Int(x * y),
                        BinOp::FloorDiv => {
                            if y == 0 {
                                return Err(SymError::DivByZero);
                            }
                            Value::Int(x.div_euclid(y))
                        }
                        BinOp::Mod => {
                            if y == 0 {
                                return Err(SymError::DivByZero);
                            }
                            Value::Int(x.rem_euclid(y))
                        }
                        BinOp::Min => Value::Int(x.min(y)),
                        BinOp::Max => Value::Int(x.max(y)),
                        BinOp::Eq => Value::Bool(x == y),
                        BinOp::Le => Value::Bool(x <= y),
                        BinOp::Lt => Value::Bool(x < y),
                        BinOp::Ge => Value::Bool(x >= y),
                        BinOp::Gt => Value::Bool(x > y),
                        BinOp::And | BinOp::Or => unreachable!(),
                    })
                }
            },
        }
    }

    pub fn eval_int(&self, env: &Env) -> Result<i64, SymError> {
        match self.eval(env)? {
            Value::Int(v) => Ok(v),
            other => Err(SymError::Type(format!("`{self}` evaluated to {other:?}, expected integer"))),
        }
    }

    pub fn eval_bool(&self, env: &Env) -> Result<bool, SymError> {
        match self.eval(env)? {
            Value::Bool(v) => Ok(v),
            other => Err(SymError::Type(format!("`{self}` evaluated to {other:?}, expected boolean"))),
        }
    }

    /// Evaluate a (possibly tuple) index expression to a set of points.
    pub fn eval_index(&self, env: &Env) -> Result<IndexSet, SymError> {
        eval_components(&self.components(), env)
    }
}

pub fn eval_components(items: &[SymExpr], env: &Env) -> Result<IndexSet, SymError> {
    let comps = items
        .iter()
        .map(|c| match c.eval(env)? {
            Value::Int(v) => Ok(IndexComp::Point(v)),
            Value::Range(lo, hi) => Ok(IndexComp::Range(lo, hi)),
            Value::Bool(_) => Err(SymError::Type(format!("index component `{c}` is boolean"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IndexSet { comps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symexpr::parse;

    #[test]
    fn evaluates_offset() {
        assert_eq!(parse("t+3").unwrap().eval(&Env::from([("t", 2)])).unwrap(), Value::Int(5));
    }

    #[test]
    fn evaluates_window_slice() {
        let e = parse("t:min(t+5, T)").unwrap();
        let set = e.eval_index(&Env::from([("t", 2), ("T", 4)])).unwrap();
        assert_eq!(set.points(), vec![vec![2], vec![3]]);
    }

    #[test]
    fn empty_slice_is_not_an_error() {
        let set = parse("t:T").unwrap().eval_index(&Env::from([("t", 4), ("T", 4)])).unwrap();
        assert!(set.is_empty());
        assert!(set.points().is_empty());
    }

    #[test]
    fn errors() {
        assert_eq!(parse("t+1").unwrap().eval(&Env::new()), Err(SymError::Unbound("t".into())));
        assert_eq!(parse("t % 0").unwrap().eval(&Env::from([("t", 1)])), Err(SymError::DivByZero));
        assert_eq!(parse("-7 % 3").unwrap().eval(&Env::new()).unwrap(), Value::Int(2));
        assert_eq!(parse("-7 / 3").unwrap().eval(&Env::new()).unwrap(), Value::Int(-3));
    }

    #[test]
    fn tuple_is_cartesian_product() {
        let set = parse("0:2, t").unwrap().eval_index(&Env::from([("t", 7)])).unwrap();
        assert_eq!(set.points(), vec![vec![0, 7], vec![1, 7]]);
        assert_eq!(set.slice_extents(), vec![2]);
    }
}
