use std::collections::BTreeMap;
use std::fmt;

use super::{BinOp, Node, SymExpr};

/// An integer linear form `Σ cᵢ·xᵢ + k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct LinExpr {
    pub terms: BTreeMap<String, i64>,
    pub constant: i64,
}

impl LinExpr {
    pub fn constant(k: i64) -> Self {
        LinExpr { terms: BTreeMap::new(), constant: k }
    }

    pub fn var(name: &str) -> Self {
        Self::term(name, 1)
    }

    pub fn term(name: &str, coef: i64) -> Self {
        let mut e = LinExpr::default();
        e.add_term(name, coef);
        e
    }

    pub fn add_term(&mut self, name: &str, coef: i64) {
        let c = self.terms.entry(name.to_string()).or_insert(0);
        *c += coef;
        if *c == 0 {
            self.terms.remove(name);
        }
    }

    pub fn coef(&self, name: &str) -> i64 {
        self.terms.get(name).copied().unwrap_or(0)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = &String> {
        self.terms.keys()
    }

    pub fn add(&self, other: &LinExpr) -> LinExpr {
        let mut out = self.clone();
        for (k, v) in &other.terms {
            out.add_term(k, *v);
        }
        out.constant += other.constant;
        out
    }

    pub fn sub(&self, other: &LinExpr) -> LinExpr {
        self.add(&other.scale(-1))
    }

    pub fn scale(&self, k: i64) -> LinExpr {
        if k == 0 {
            return LinExpr::constant(0);
        }
        LinExpr {
            terms: self.terms.iter().map(|(n, c)| (n.clone(), c * k)).collect(),
            constant: self.constant * k,
        }
    }

    pub fn plus(&self, k: i64) -> LinExpr {
        let mut out = self.clone();
        out.constant += k;
        out
    }

    /// Replace `name` by `with` (scaled by its coefficient).
    pub fn substitute(&self, name: &str, with: &LinExpr) -> LinExpr {
        let c = self.coef(name);
        if c == 0 {
            return self.clone();
        }
        let mut out = self.clone();
        out.terms.remove(name);
        out.add(&with.scale(c))
    }

    /// GCD of the variable coefficients (0 when constant).
    pub fn coef_gcd(&self) -> i64 {
        self.terms.values().fold(0, |g, c| gcd(g, c.abs()))
    }

    pub fn eval(&self, lookup: &dyn Fn(&str) -> Option<i64>) -> Option<i64> {
        let mut acc = self.constant;
        for (n, c) in &self.terms {
            acc += c * lookup(n)?;
        }
        Some(acc)
    }

    /// Parse a purely affine expression (no min/max/div/mod).
    pub fn from_expr(e: &SymExpr) -> Option<LinExpr> {
        match e.node() {
            Node::Int(v) => Some(LinExpr::constant(*v)),
            Node::Sym(s) => Some(LinExpr::var(s)),
            Node::Neg(a) => Some(LinExpr::from_expr(a)?.scale(-1)),
            Node::Bin(BinOp::Add, a, b) => Some(LinExpr::from_expr(a)?.add(&LinExpr::from_expr(b)?)),
            Node::Bin(BinOp::Sub, a, b) => Some(LinExpr::from_expr(a)?.sub(&LinExpr::from_expr(b)?)),
            Node::Bin(BinOp::Mul, a, b) => {
                let la = LinExpr::from_expr(a)?;
                let lb = LinExpr::from_expr(b)?;
                if la.is_constant() {
                    Some(lb.scale(la.constant))
                } else if lb.is_constant() {
                    Some(la.scale(lb.constant))
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    pub fn to_expr(&self) -> SymExpr {
        let atoms: Vec<(SymExpr, i64)> = self.terms.iter().map(|(n, c)| (SymExpr::sym(n), *c)).collect();
        build_sum(&atoms, self.constant)
    }
}

pub(crate) fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Rebuild `Σ cᵢ·atomᵢ + k` with positive terms first and the constant last.
pub(crate) fn build_sum(atoms: &[(SymExpr, i64)], constant: i64) -> SymExpr {
    let scaled = |atom: &SymExpr, c: i64| {
        if c == 1 {
            atom.clone()
        } else {
            SymExpr::mul(SymExpr::int(c), atom.clone())
        }
    };
    let pos: Vec<_> = atoms.iter().filter(|(_, c)| *c > 0).collect();
    let neg: Vec<_> = atoms.iter().filter(|(_, c)| *c < 0).collect();
    let mut acc: Option<SymExpr> = None;
    for (a, c) in &pos {
        let t = scaled(a, *c);
        acc = Some(match acc {
            None => t,
            Some(x) => SymExpr::add(x, t),
        });
    }
    let mut constant_used = false;
    if acc.is_none() && !neg.is_empty() && constant > 0 {
        acc = Some(SymExpr::int(constant));
        constant_used = true;
    }
    for (a, c) in &neg {
        let t = scaled(a, -*c);
        acc = Some(match acc {
            None => SymExpr::neg(t),
            Some(x) => SymExpr::sub(x, t),
        });
    }
    match acc {
        None => SymExpr::int(constant),
        Some(x) if constant_used || constant == 0 => x,
        Some(x) if constant > 0 => SymExpr::add(x, SymExpr::int(constant)),
        Some(x) => SymExpr::sub(x, SymExpr::int(-constant)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AffineClass {
    Linear,
    Affine,
    SliceAffine,
    NonAffine,
}

impl fmt::Display for AffineClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AffineClass::Linear => "linear",
            AffineClass::Affine => "affine",
            AffineClass::SliceAffine => "slice-affine",
            AffineClass::NonAffine => "non-affine",
        };
        f.write_str(s)
    }
}

/// Affine in the wide sense: sums, constant multiples, min/max, and
/// floordiv/mod by a positive constant.
pub fn is_quasi_affine(e: &SymExpr) -> bool {
    match e.node() {
        Node::Int(_) | Node::Sym(_) => true,
        Node::Neg(a) => is_quasi_affine(a),
        Node::Bin(BinOp::Add | BinOp::Sub | BinOp::Min | BinOp::Max, a, b) => {
            is_quasi_affine(a) && is_quasi_affine(b)
        }
        Node::Bin(BinOp::Mul, a, b) => {
            let (a, b) = (a.simplify(), b.simplify());
            (a.as_int().is_some() && is_quasi_affine(&b)) || (b.as_int().is_some() && is_quasi_affine(&a))
        }
        Node::Bin(BinOp::FloorDiv | BinOp::Mod, a, b) => {
            b.simplify().as_int().is_some_and(|c| c > 0) && is_quasi_affine(a)
        }
        _ => false,
    }
}

/// Classify an index tuple against the dims of the tensor it indexes.
pub fn classify_affine(phi: &[SymExpr], src_dims: &[&str]) -> AffineClass {
    let linear = phi.len() == src_dims.len() && phi.iter().zip(src_dims).all(|(c, d)| c.as_sym() == Some(*d));
    if linear {
        return AffineClass::Linear;
    }
    let mut sliced = false;
    for c in phi {
        match c.node() {
            Node::Slice(lo, hi) => {
                if !is_quasi_affine(lo) || !is_quasi_affine(hi) {
                    return AffineClass::NonAffine;
                }
                sliced = true;
            }
            _ if is_quasi_affine(c) => {}
            _ => return AffineClass::NonAffine,
        }
    }
    if sliced {
        AffineClass::SliceAffine
    } else {
        AffineClass::Affine
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symexpr::parse;

    fn class(text: &str, dims: &[&str]) -> AffineClass {
        classify_affine(&parse(text).unwrap().components(), dims)
    }

    #[test]
    fn classification() {
        assert_eq!(class("b, i, t", &["b", "i", "t"]), AffineClass::Linear);
        assert_eq!(class("b, i, t+1", &["b", "i", "t"]), AffineClass::Affine);
        assert_eq!(class("b, i, t:T", &["b", "i", "t"]), AffineClass::SliceAffine);
        assert_eq!(class("t*t", &["t"]), AffineClass::NonAffine);
        assert_eq!(class("0", &["t"]), AffineClass::Affine);
        assert_eq!(class("t:min(t+5, T)", &["t"]), AffineClass::SliceAffine);
        assert_eq!(class("t / 2", &["t"]), AffineClass::Affine);
        assert_eq!(class("i, t", &["t", "i"]), AffineClass::Affine);
    }

    #[test]
    fn linexpr_round_trip() {
        let e = parse("2*t - (i - 3) + t").unwrap();
        let l = LinExpr::from_expr(&e).unwrap();
        assert_eq!(l.coef("t"), 3);
        assert_eq!(l.coef("i"), -1);
        assert_eq!(l.constant, 3);
        assert_eq!(l.to_expr().to_string(), "3*t-i+3");
        assert_eq!(LinExpr::var("t").plus(-3).to_expr().to_string(), "t-3");
        assert_eq!(LinExpr::term("t", -1).plus(4).to_expr().to_string(), "4-t");
        assert_eq!(LinExpr::term("t", -1).to_expr().to_string(), "-t");
    }
}
