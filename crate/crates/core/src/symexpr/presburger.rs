//! Translation of index expressions and conditions into unions of
//! conjunctions of affine constraints.
//!
//! Sink symbols keep their names, source symbols are primed (`t'`), and
//! bound parameters appear by name. Floor division and modulo introduce
//! existential variables defined by their numerator and denominator.

use std::collections::BTreeMap;
use std::fmt;

use super::affine::LinExpr;
use super::{BinOp, Dim, Node, SymError, SymExpr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rel {
    /// `expr >= 0`
    Ge0,
    /// `expr == 0`
    Eq0,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Constraint {
    pub expr: LinExpr,
    pub rel: Rel,
}

impl Constraint {
    pub fn ge0(expr: LinExpr) -> Self {
        Constraint { expr, rel: Rel::Ge0 }
    }
    pub fn eq0(expr: LinExpr) -> Self {
        Constraint { expr, rel: Rel::Eq0 }
    }
    /// `a >= b`
    pub fn ge(a: &LinExpr, b: &LinExpr) -> Self {
        Self::ge0(a.sub(b))
    }
    /// `a < b`
    pub fn lt(a: &LinExpr, b: &LinExpr) -> Self {
        Self::ge0(b.sub(a).plus(-1))
    }

    pub fn holds(&self, lookup: &dyn Fn(&str) -> Option<i64>) -> Option<bool> {
        let v = self.expr.eval(lookup)?;
        Some(match self.rel {
            Rel::Ge0 => v >= 0,
            Rel::Eq0 => v == 0,
        })
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = if self.rel == Rel::Ge0 { ">=" } else { "==" };
        write!(f, "{} {op} 0", self.expr.to_expr())
    }
}

/// `name = floor(numer / denom)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExistDef {
    pub numer: LinExpr,
    pub denom: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Conjunction {
    pub constraints: Vec<Constraint>,
    pub exists: Vec<(String, ExistDef)>,
}

impl Conjunction {
    fn and(&self, other: &Conjunction) -> Conjunction {
        let mut out = self.clone();
        out.constraints.extend(other.constraints.iter().cloned());
        out.exists.extend(other.exists.iter().cloned());
        out
    }

    pub fn contains(&self, assignment: &BTreeMap<String, i64>) -> bool {
        let mut vals = assignment.clone();
        for (name, def) in &self.exists {
            let Some(n) = def.numer.eval(&|s| vals.get(s).copied()) else {
                return false;
            };
            vals.insert(name.clone(), n.div_euclid(def.denom));
        }
        self.constraints.iter().all(|c| c.holds(&|s| vals.get(s).copied()) == Some(true))
    }

    pub fn vars(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.constraints {
            for v in c.expr.vars() {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
        }
        out
    }
}

/// A union of conjunctions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintSet {
    pub pieces: Vec<Conjunction>,
}

impl ConstraintSet {
    pub fn universe() -> Self {
        ConstraintSet { pieces: vec![Conjunction::default()] }
    }
    pub fn empty() -> Self {
        ConstraintSet { pieces: vec![] }
    }
    pub fn single(c: Constraint) -> Self {
        ConstraintSet { pieces: vec![Conjunction { constraints: vec![c], exists: vec![] }] }
    }

    pub fn and(&self, other: &ConstraintSet) -> ConstraintSet {
        let mut pieces = Vec::new();
        for a in &self.pieces {
            for b in &other.pieces {
                pieces.push(a.and(b));
            }
        }
        ConstraintSet { pieces }
    }

    pub fn or(&self, other: &ConstraintSet) -> ConstraintSet {
        let mut pieces = self.pieces.clone();
        pieces.extend(other.pieces.iter().cloned());
        ConstraintSet { pieces }
    }

    pub fn contains(&self, assignment: &BTreeMap<String, i64>) -> bool {
        self.pieces.iter().any(|p| p.contains(assignment))
    }
}

impl fmt::Display for ConstraintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .pieces
            .iter()
            .map(|p| {
                let cs: Vec<String> = p.constraints.iter().map(|c| c.to_string()).collect();
                format!("{{{}}}", cs.join(", "))
            })
            .collect();
        if parts.is_empty() {
            return f.write_str("{}");
        }
        f.write_str(&parts.join(" | "))
    }
}

static FRESH: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

fn fresh() -> String {
    format!("q{}", FRESH.fetch_add(1, std::sync::atomic::Ordering::Relaxed))
}

/// Piecewise-linear decomposition: each piece is a guard and a value.
fn pieces(e: &SymExpr) -> Result<Vec<(Conjunction, LinExpr)>, SymError> {
    let unsupported = || SymError::Unsupported(e.to_string(), "not quasi-affine".into());
    Ok(match e.node() {
        Node::Int(v) => vec![(Conjunction::default(), LinExpr::constant(*v))],
        Node::Sym(s) => vec![(Conjunction::default(), LinExpr::var(s))],
        Node::Neg(a) => pieces(a)?.into_iter().map(|(g, v)| (g, v.scale(-1))).collect(),
        Node::Bin(op @ (BinOp::Add | BinOp::Sub), a, b) => {
            let (pa, pb) = (pieces(a)?, pieces(b)?);
            let mut out = Vec::new();
            for (ga, va) in &pa {
                for (gb, vb) in &pb {
                    let v = if *op == BinOp::Add { va.add(vb) } else { va.sub(vb) };
                    out.push((ga.and(gb), v));
                }
            }
            out
        }
        Node::Bin(BinOp::Mul, a, b) => {
            let (pa, pb) = (pieces(a)?, pieces(b)?);
            let mut out = Vec::new();
            for (ga, va) in &pa {
                for (gb, vb) in &pb {
                    let v = if va.is_constant() {
                        vb.scale(va.constant)
                    } else if vb.is_constant() {
                        va.scale(vb.constant)
                    } else {
                        return Err(unsupported());
                    };
                    out.push((ga.and(gb), v));
                }
            }
            out
        }
        Node::Bin(op @ (BinOp::Min | BinOp::Max), a, b) => {
            let (pa, pb) = (pieces(a)?, pieces(b)?);
            let mut out = Vec::new();
            for (ga, va) in &pa {
                for (gb, vb) in &pb {
                    let g = ga.and(gb);
                    // a chosen when a <= b (min) / a >= b (max); ties go to a
                    let (first, second) = if *op == BinOp::Min {
                        (Constraint::ge(vb, va), Constraint::lt(vb, va))
                    } else {
                        (Constraint::ge(va, vb), Constraint::lt(va, vb))
                    };
                    let mut g1 = g.clone();
                    g1.constraints.push(first);
                    out.push((g1, va.clone()));
                    let mut g2 = g;
                    g2.constraints.push(second);
                    out.push((g2, vb.clone()));
                }
            }
            out
        }
        Node::Bin(op @ (BinOp::FloorDiv | BinOp::Mod), a, b) => {
            let c = b.simplify().as_int().filter(|c| *c > 0).ok_or_else(unsupported)?;
            let mut out = Vec::new();
            for (g, va) in pieces(a)? {
                let q = fresh();
                let qv = LinExpr::var(&q);
                let mut g = g;
                // c*q <= va < c*q + c
                g.constraints.push(Constraint::ge(&va, &qv.scale(c)));
                g.constraints.push(Constraint::lt(&va, &qv.scale(c).plus(c)));
                g.exists.push((q.clone(), ExistDef { numer: va.clone(), denom: c }));
                let v = if *op == BinOp::FloorDiv { qv } else { va.sub(&qv.scale(c)) };
                out.push((g, v));
            }
            out
        }
        _ => return Err(unsupported()),
    })
}

/// Relation `{(p, p') : p' ∈ phi(p)}` with sink symbols unprimed and source
/// symbols primed.
pub fn to_presburger(phi: &[SymExpr], _sink_dims: &[Dim], src_dims: &[Dim]) -> Result<ConstraintSet, SymError> {
    let mut set = ConstraintSet::universe();
    for (comp, d) in phi.iter().zip(src_dims) {
        let sp = LinExpr::var(&format!("{}'", d.name));
        let part = match comp.node() {
            Node::Slice(lo, hi) => {
                let lo_set = bound_set(lo, BinOp::Max, &|v| Constraint::ge(&sp, v))?;
                let hi_set = bound_set(hi, BinOp::Min, &|v| Constraint::lt(&sp, v))?;
                lo_set.and(&hi_set)
            }
            _ => ConstraintSet {
                pieces: pieces(comp)?
                    .into_iter()
                    .map(|(mut g, v)| {
                        g.constraints.push(Constraint::eq0(sp.sub(&v)));
                        g
                    })
                    .collect(),
            },
        };
        set = set.and(&part);
    }
    Ok(set)
}

/// `x >= max(a, b)` is `x >= a & x >= b` (likewise `x < min(..)`), so those
/// aggregations stay convex; anything else is split into pieces.
fn bound_set(e: &SymExpr, convex: BinOp, mk: &dyn Fn(&LinExpr) -> Constraint) -> Result<ConstraintSet, SymError> {
    if let Node::Bin(op, a, b) = e.node() {
        if *op == convex {
            return Ok(bound_set(a, convex, mk)?.and(&bound_set(b, convex, mk)?));
        }
    }
    Ok(ConstraintSet {
        pieces: pieces(e)?
            .into_iter()
            .map(|(mut g, v)| {
                g.constraints.push(mk(&v));
                g
            })
            .collect(),
    })
}

/// Points of a sink domain (unprimed symbols) as a constraint set.
pub fn index_to_presburger(dims: &[Dim], primed: bool) -> ConstraintSet {
    let mut c = Conjunction::default();
    for d in dims {
        let name = if primed { format!("{}'", d.name) } else { d.name.clone() };
        let v = LinExpr::var(&name);
        c.constraints.push(Constraint::ge0(v.clone()));
        c.constraints.push(Constraint::lt(&v, &LinExpr::var(&d.bound)));
    }
    ConstraintSet { pieces: vec![c] }
}

/// Boolean condition to disjunctive normal form over affine constraints.
pub fn cond_to_presburger(cond: &SymExpr) -> Result<ConstraintSet, SymError> {
    dnf(cond, false)
}

fn dnf(e: &SymExpr, negate: bool) -> Result<ConstraintSet, SymError> {
    match e.node() {
        Node::Bool(b) => Ok(if *b != negate { ConstraintSet::universe() } else { ConstraintSet::empty() }),
        Node::Not(a) => dnf(a, !negate),
        Node::Bin(BinOp::And, a, b) => {
            let (x, y) = (dnf(a, negate)?, dnf(b, negate)?);
            Ok(if negate { x.or(&y) } else { x.and(&y) })
        }
        Node::Bin(BinOp::Or, a, b) => {
            let (x, y) = (dnf(a, negate)?, dnf(b, negate)?);
            Ok(if negate { x.and(&y) } else { x.or(&y) })
        }
        Node::Bin(op, a, b) if op.is_comparison() => {
            let op = if negate {
                match op {
                    BinOp::Le => BinOp::Gt,
                    BinOp::Lt => BinOp::Ge,
                    BinOp::Ge => BinOp::Lt,
                    BinOp::Gt => BinOp::Le,
                    _ => BinOp::Eq,
                }
            } else {
                *op
            };
            let negated_eq = negate && matches!(e.node(), Node::Bin(BinOp::Eq, ..));
            let mut out = ConstraintSet::empty();
            for (ga, va) in pieces(a)? {
                for (gb, vb) in pieces(b)? {
                    let g = ga.and(&gb);
                    let cs: Vec<Constraint> = if negated_eq {
                        vec![Constraint::lt(&va, &vb), Constraint::lt(&vb, &va)]
                    } else {
                        vec![match op {
                            BinOp::Eq => Constraint::eq0(va.sub(&vb)),
                            BinOp::Le => Constraint::ge(&vb, &va),
                            BinOp::Lt => Constraint::lt(&va, &vb),
                            BinOp::Ge => Constraint::ge(&va, &vb),
                            BinOp::Gt => Constraint::lt(&vb, &va),
                            _ => unreachable!(),
                        }]
                    };
                    for c in cs {
                        let mut piece = g.clone();
                        piece.constraints.push(c);
                        out.pieces.push(piece);
                    }
                }
            }
            Ok(out)
        }
        _ => Err(SymError::Unsupported(e.to_string(), "not a condition".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symexpr::{parse, Env};

    fn t() -> Vec<Dim> {
        vec![Dim::new("t", "T")]
    }

    fn assignment(t: i64, t2: i64, big_t: i64) -> BTreeMap<String, i64> {
        [("t".to_string(), t), ("t'".to_string(), t2), ("T".to_string(), big_t)].into()
    }

    #[test]
    fn point_offset() {
        let set = to_presburger(&[parse("t+1").unwrap()], &t(), &t()).unwrap();
        assert_eq!(set.to_string(), "{t'-t-1 == 0}");
    }

    #[test]
    fn anti_causal_slice() {
        let set = to_presburger(&[parse("t:T").unwrap()], &t(), &t()).unwrap();
        assert_eq!(set.to_string(), "{t'-t >= 0, T-t'-1 >= 0}");
    }

    #[test]
    fn pieces_match_enumeration() {
        for text in ["t:min(t+5, T)", "max(0, t-3):t+1", "t / 2", "(t+1) % 3", "min(t, 4)"] {
            let phi = parse(text).unwrap();
            let set = to_presburger(&[phi.clone()], &t(), &t()).unwrap();
            for t_ in 0..10 {
                let fwd = phi.eval_index(&Env::from([("t", t_), ("T", 10)])).unwrap();
                for t2 in 0..10 {
                    assert_eq!(set.contains(&assignment(t_, t2, 10)), fwd.contains(&[t2]), "{text} t={t_} t'={t2}");
                }
            }
        }
    }

    #[test]
    fn conditions_match_evaluation() {
        for text in ["((t+1) % 5) == 0", "!(t == 0)", "t >= 1 & t < 7 | t == 9", "!(t < 3 | t > 6)", "min(t, 4) == 4"] {
            let c = parse(text).unwrap();
            let set = cond_to_presburger(&c).unwrap();
            for t_ in 0..12 {
                let env = Env::from([("t", t_), ("T", 12)]);
                assert_eq!(set.contains(&assignment(t_, 0, 12)), c.eval_bool(&env).unwrap(), "{text} t={t_}");
            }
        }
    }
}
