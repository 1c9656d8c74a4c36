use std::collections::BTreeMap;

use super::affine::build_sum;
use super::{BinOp, Node, SymExpr};

/// Sum of atoms with integer coefficients plus a constant.
#[derive(Default)]
struct Sum {
    atoms: BTreeMap<String, (SymExpr, i64)>,
    constant: i64,
}

impl Sum {
    fn push(&mut self, atom: SymExpr, coef: i64) {
        let entry = self.atoms.entry(atom.to_string()).or_insert((atom, 0));
        entry.1 += coef;
    }

    fn pairs(&self) -> Vec<(SymExpr, i64)> {
        self.atoms.values().filter(|(_, c)| *c != 0).cloned().collect()
    }

    fn build(&self) -> SymExpr {
        build_sum(&self.pairs(), self.constant)
    }

    fn is_constant(&self) -> bool {
        self.atoms.values().all(|(_, c)| *c == 0)
    }
}

fn is_arith(e: &SymExpr) -> bool {
    matches!(
        e.node(),
        Node::Int(_) | Node::Sym(_) | Node::Neg(_) | Node::Bin(BinOp::Add | BinOp::Sub | BinOp::Mul, ..)
    )
}

fn linearize(e: &SymExpr, scale: i64, acc: &mut Sum) {
    match e.node() {
        Node::Int(v) => acc.constant += scale * v,
        Node::Sym(_) => acc.push(e.clone(), scale),
        Node::Neg(a) => linearize(a, -scale, acc),
        Node::Bin(BinOp::Add, a, b) => {
            linearize(a, scale, acc);
            linearize(b, scale, acc);
        }
        Node::Bin(BinOp::Sub, a, b) => {
            linearize(a, scale, acc);
            linearize(b, -scale, acc);
        }
        Node::Bin(BinOp::Mul, a, b) => {
            let (sa, sb) = (simplify(a), simplify(b));
            if let Some(k) = sa.as_int() {
                linearize(&sb, scale * k, acc);
            } else if let Some(k) = sb.as_int() {
                linearize(&sa, scale * k, acc);
            } else {
                acc.push(SymExpr::mul(sa, sb), scale);
            }
        }
        _ => {
            let s = simplify(e);
            if is_arith(&s) {
                linearize(&s, scale, acc);
            } else {
                acc.push(s, scale);
            }
        }
    }
}

fn sum_of(e: &SymExpr) -> Sum {
    let mut s = Sum::default();
    linearize(e, 1, &mut s);
    s
}

/// Constant difference `a - b`, if any.
fn const_diff(a: &SymExpr, b: &SymExpr) -> Option<i64> {
    let mut s = Sum::default();
    linearize(a, 1, &mut s);
    linearize(b, -1, &mut s);
    s.is_constant().then_some(s.constant)
}

fn flatten(op: BinOp, e: &SymExpr, out: &mut Vec<SymExpr>) {
    match e.node() {
        Node::Bin(o, a, b) if *o == op => {
            flatten(op, a, out);
            flatten(op, b, out);
        }
        _ => out.push(e.clone()),
    }
}

fn simplify_minmax(op: BinOp, a: &SymExpr, b: &SymExpr) -> SymExpr {
    let mut args = Vec::new();
    flatten(op, &simplify(a), &mut args);
    flatten(op, &simplify(b), &mut args);
    let mut flat = Vec::new();
    for x in args {
        flatten(op, &x, &mut flat);
    }
    let mut kept: Vec<SymExpr> = Vec::new();
    'outer: for x in flat {
        let mut k = 0;
        while k < kept.len() {
            if let Some(d) = const_diff(&x, &kept[k]) {
                let x_wins = if op == BinOp::Min { d < 0 } else { d > 0 };
                if x_wins {
                    kept.remove(k);
                    continue;
                }
                continue 'outer;
            }
            k += 1;
        }
        kept.push(x);
    }
    let mut it = kept.into_iter();
    let first = it.next().expect("min/max has arguments");
    it.fold(first, |acc, x| SymExpr::bin(op, acc, x))
}

fn simplify_cmp(op: BinOp, a: &SymExpr, b: &SymExpr) -> SymExpr {
    let (sa, sb) = (simplify(a), simplify(b));
    if let Some(d) = const_diff(&sa, &sb) {
        return SymExpr::bool(match op {
            BinOp::Eq => d == 0,
            BinOp::Le => d <= 0,
            BinOp::Lt => d < 0,
            BinOp::Ge => d >= 0,
            BinOp::Gt => d > 0,
            _ => unreachable!(),
        });
    }
    if is_arith(&sa) && is_arith(&sb) && (sa.as_int().is_some() || sb.as_int().is_some()) {
        let mut s = Sum::default();
        linearize(&sa, 1, &mut s);
        linearize(&sb, -1, &mut s);
        let rhs = -s.constant;
        s.constant = 0;
        return SymExpr::bin(op, s.build(), SymExpr::int(rhs));
    }
    SymExpr::bin(op, sa, sb)
}

pub fn simplify(e: &SymExpr) -> SymExpr {
    match e.node() {
        Node::Int(_) | Node::Bool(_) | Node::Sym(_) => e.clone(),
        Node::Neg(_) | Node::Bin(BinOp::Add | BinOp::Sub | BinOp::Mul, ..) => sum_of(e).build(),
        Node::Bin(BinOp::FloorDiv, a, b) => {
            let (sa, sb) = (simplify(a), simplify(b));
            match (sa.as_int(), sb.as_int()) {
                (_, Some(0)) => SymExpr::floordiv(sa, sb),
                (Some(x), Some(y)) => SymExpr::int(x.div_euclid(y)),
                (_, Some(1)) => sa,
                (_, Some(c)) if c > 0 => {
                    let s = sum_of(&sa);
                    if s.pairs().iter().all(|(_, k)| k % c == 0) {
                        let pairs: Vec<_> = s.pairs().into_iter().map(|(x, k)| (x, k / c)).collect();
                        build_sum(&pairs, s.constant.div_euclid(c))
                    } else {
                        SymExpr::floordiv(sa, sb)
                    }
                }
                _ => SymExpr::floordiv(sa, sb),
            }
        }
        Node::Bin(BinOp::Mod, a, b) => {
            let (sa, sb) = (simplify(a), simplify(b));
            match (sa.as_int(), sb.as_int()) {
                (_, Some(0)) => SymExpr::modulo(sa, sb),
                (Some(x), Some(y)) => SymExpr::int(x.rem_euclid(y)),
                (_, Some(c)) => {
                    let m = c.abs();
                    let s = sum_of(&sa);
                    let pairs: Vec<_> = s
                        .pairs()
                        .into_iter()
                        .map(|(x, k)| (x, k.rem_euclid(m)))
                        .filter(|(_, k)| *k != 0)
                        .collect();
                    let k = s.constant.rem_euclid(m);
                    if pairs.is_empty() {
                        SymExpr::int(k)
                    } else {
                        SymExpr::modulo(build_sum(&pairs, k), sb)
                    }
                }
                _ => SymExpr::modulo(sa, sb),
            }
        }
        Node::Bin(op @ (BinOp::Min | BinOp::Max), a, b) => simplify_minmax(*op, a, b),
        Node::Bin(op @ (BinOp::Eq | BinOp::Le | BinOp::Lt | BinOp::Ge | BinOp::Gt), a, b) => {
            simplify_cmp(*op, a, b)
        }
        Node::Bin(BinOp::And, a, b) => {
            let (sa, sb) = (simplify(a), simplify(b));
            match (sa.as_bool(), sb.as_bool()) {
                (Some(false), _) | (_, Some(false)) => SymExpr::bool(false),
                (Some(true), _) => sb,
                (_, Some(true)) => sa,
                _ if sa == sb => sa,
                _ => SymExpr::and(sa, sb),
            }
        }
        Node::Bin(BinOp::Or, a, b) => {
            let (sa, sb) = (simplify(a), simplify(b));
            match (sa.as_bool(), sb.as_bool()) {
                (Some(true), _) | (_, Some(true)) => SymExpr::bool(true),
                (Some(false), _) => sb,
                (_, Some(false)) => sa,
                _ if sa == sb => sa,
                _ => SymExpr::or(sa, sb),
            }
        }
        Node::Not(a) => {
            let sa = simplify(a);
            match sa.node() {
                Node::Bool(v) => SymExpr::bool(!v),
                Node::Not(inner) => inner.clone(),
                _ => SymExpr::not(sa),
            }
        }
        Node::Slice(lo, hi) => SymExpr::slice(simplify(lo), simplify(hi)),
        Node::Tuple(items) => SymExpr::tuple(items.iter().map(simplify).collect()),
    }
}
