use std::collections::BTreeMap;

use super::affine::LinExpr;
use super::{BinOp, Dim, Node, SymError, SymExpr};

/// Inverse of a dependence expression.
///
/// `index` has one component per sink dim, written over the source point's
/// symbols; a sink point `p` depends on source point `p'` iff `cond(p')`
/// holds and `p ∈ index(p')`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inverse {
    pub index: Vec<SymExpr>,
    pub cond: SymExpr,
}

impl Inverse {
    pub fn is_unconditional(&self) -> bool {
        self.cond.as_bool() == Some(true)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Rel {
    /// `s == e`
    Eq,
    /// `s >= e`
    Ge,
    /// `s < e`
    Lt,
}

struct Raw {
    src: usize,
    rel: Rel,
    expr: SymExpr,
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

fn sink_name(d: &Dim) -> String {
    format!("@{}", d.name)
}

/// Invert `phi` (one component per source dim, over sink symbols).
pub fn invert(phi: &[SymExpr], sink_dims: &[Dim], src_dims: &[Dim]) -> Result<Inverse, SymError> {
    let unsupported = |why: &str| {
        let parts: Vec<String> = phi.iter().map(|e| e.to_string()).collect();
        SymError::Unsupported(format!("[{}]", parts.join(", ")), why.to_string())
    };
    if phi.len() != src_dims.len() {
        return Err(unsupported("arity does not match the source domain"));
    }
    let renamed: BTreeMap<String, SymExpr> =
        sink_dims.iter().map(|d| (d.name.clone(), SymExpr::sym(&sink_name(d)))).collect();
    let rename = |e: &SymExpr| e.substitute(&|s| renamed.get(s).cloned()).simplify();

    let mut raws = Vec::new();
    for (k, comp) in phi.iter().enumerate() {
        match comp.node() {
            Node::Slice(lo, hi) => {
                let mut los = Vec::new();
                flatten(BinOp::Max, &rename(lo), &mut los);
                let mut his = Vec::new();
                flatten(BinOp::Min, &rename(hi), &mut his);
                raws.extend(los.into_iter().map(|e| Raw { src: k, rel: Rel::Ge, expr: e }));
                raws.extend(his.into_iter().map(|e| Raw { src: k, rel: Rel::Lt, expr: e }));
            }
            _ => raws.push(Raw { src: k, rel: Rel::Eq, expr: rename(comp) }),
        }
    }

    let sink_syms: Vec<String> = sink_dims.iter().map(sink_name).collect();
    // per raw constraint: the sink symbol it constrains, with its linear form
    let mut per_sink: BTreeMap<String, Vec<(usize, LinExpr)>> = BTreeMap::new();
    let mut conds: Vec<SymExpr> = Vec::new();
    for (r, raw) in raws.iter().enumerate() {
        let mentioned: Vec<&String> = sink_syms.iter().filter(|s| raw.expr.mentions(s)).collect();
        match mentioned.len() {
            0 => {
                let s = SymExpr::sym(&src_dims[raw.src].name);
                let trivial = match raw.rel {
                    Rel::Ge => raw.expr.as_int().is_some_and(|v| v <= 0),
                    Rel::Lt => raw.expr.as_sym() == Some(src_dims[raw.src].bound.as_str()),
                    Rel::Eq => false,
                };
                if !trivial {
                    conds.push(relate(raw.rel, s, raw.expr.clone()));
                }
            }
            1 => {
                let lin = LinExpr::from_expr(&raw.expr).ok_or_else(|| unsupported("not affine in the sink symbols"))?;
                if lin.vars().any(|v| v.starts_with('@') && v != mentioned[0]) {
                    return Err(unsupported("couples several sink dims"));
                }
                per_sink.entry(mentioned[0].clone()).or_default().push((r, lin));
            }
            _ => return Err(unsupported("couples several sink dims")),
        }
    }

    let src_bounds: BTreeMap<&str, &str> = src_dims.iter().map(|d| (d.name.as_str(), d.bound.as_str())).collect();
    let mut index = Vec::new();
    let mut solved: BTreeMap<String, SymExpr> = BTreeMap::new();
    for (d, u) in sink_dims.iter().zip(&sink_syms) {
        let items = per_sink.remove(u).unwrap_or_default();
        let eq = items.iter().find(|(r, _)| raws[*r].rel == Rel::Eq);
        if let Some((r, lin)) = eq {
            let s = LinExpr::var(&src_dims[raws[*r].src].name);
            let a = lin.coef(u);
            let mut rest = lin.clone();
            rest.terms.remove(u);
            // a*u + rest == s
            let numer = if a > 0 { s.sub(&rest) } else { rest.sub(&s) };
            let den = a.abs();
            let value = SymExpr::floordiv(numer.to_expr(), SymExpr::int(den)).simplify();
            if den > 1 {
                conds.push(SymExpr::eq(SymExpr::modulo(numer.to_expr(), SymExpr::int(den)), SymExpr::int(0)));
            }
            for (r2, lin2) in &items {
                if r2 == r {
                    continue;
                }
                let s2 = SymExpr::sym(&src_dims[raws[*r2].src].name);
                let e2 = lin2.to_expr().substitute_one(u, &value);
                conds.push(relate(raws[*r2].rel, s2, e2));
            }
            solved.insert(u.clone(), value.clone());
            index.push(value);
            continue;
        }
        let mut lowers = vec![SymExpr::int(0)];
        let mut uppers = vec![SymExpr::sym(&d.bound)];
        for (r, lin) in &items {
            let raw = &raws[*r];
            let s = LinExpr::var(&src_dims[raw.src].name);
            let a = lin.coef(u);
            let mut rest = lin.clone();
            rest.terms.remove(u);
            let den = SymExpr::int(a.abs());
            match (raw.rel, a > 0) {
                // s >= a*u + rest  =>  u <= (s-rest)/a
                (Rel::Ge, true) => uppers.push(SymExpr::add(SymExpr::floordiv(s.sub(&rest).to_expr(), den), SymExpr::int(1))),
                // s >= -|a|*u + rest  =>  u >= ceil((rest-s)/|a|)
                (Rel::Ge, false) => lowers.push(ceil_div(&rest.sub(&s), a.abs())),
                // s < a*u + rest  =>  u >= (s-rest)/a + 1
                (Rel::Lt, true) => lowers.push(SymExpr::add(SymExpr::floordiv(s.sub(&rest).to_expr(), den), SymExpr::int(1))),
                // s < -|a|*u + rest  =>  u < ceil((rest-s)/|a|)
                (Rel::Lt, false) => uppers.push(ceil_div(&rest.sub(&s), a.abs())),
                (Rel::Eq, _) => unreachable!(),
            }
        }
        let lowers: Vec<SymExpr> = lowers.iter().map(SymExpr::simplify).collect();
        let uppers: Vec<SymExpr> = uppers.iter().map(SymExpr::simplify).collect();
        let lo = prune(lowers, BinOp::Max, &src_bounds, &d.bound);
        let hi = prune(uppers, BinOp::Min, &src_bounds, &d.bound);
        index.push(SymExpr::slice(lo, hi));
    }

    let cond = conds
        .into_iter()
        .map(|c| c.simplify())
        .fold(SymExpr::bool(true), |acc, c| SymExpr::and(acc, c))
        .simplify();
    Ok(Inverse { index, cond })
}

fn relate(rel: Rel, s: SymExpr, e: SymExpr) -> SymExpr {
    match rel {
        Rel::Eq => SymExpr::eq(s, e),
        Rel::Ge => SymExpr::ge(s, e),
        Rel::Lt => SymExpr::lt(s, e),
    }
}

fn ceil_div(numer: &LinExpr, den: i64) -> SymExpr {
    SymExpr::floordiv(numer.plus(den - 1).to_expr(), SymExpr::int(den))
}

/// Range of a linear form over source points `0 <= s < S`; `hi` is the
/// largest value. Parameters stay symbolic.
fn extreme(e: &SymExpr, src_bounds: &BTreeMap<&str, &str>, hi: bool) -> Option<LinExpr> {
    let lin = LinExpr::from_expr(e)?;
    let mut out = LinExpr::constant(lin.constant);
    for (v, c) in &lin.terms {
        match src_bounds.get(v.as_str()) {
            Some(bound) => {
                if (*c > 0) == hi {
                    out = out.add(&LinExpr::term(bound, *c)).plus(-c);
                }
            }
            None => out.add_term(v, *c),
        }
    }
    Some(out)
}

fn provably_nonneg(e: &LinExpr) -> bool {
    e.is_constant() && e.constant >= 0
}

/// Combine candidate bounds, dropping the domain clamp (the first entry)
/// when another candidate already implies it.
fn prune(cands: Vec<SymExpr>, op: BinOp, src_bounds: &BTreeMap<&str, &str>, bound: &str) -> SymExpr {
    let clamp = cands[0].clone();
    let mut rest: Vec<SymExpr> = cands[1..].to_vec();
    let clamp_lin = LinExpr::from_expr(&clamp).unwrap_or_else(|| LinExpr::var(bound));
    // a candidate that never tightens past the clamp is dropped
    rest.retain(|e| {
        let tight = match op {
            BinOp::Max => extreme(e, src_bounds, true).map(|ub| provably_nonneg(&clamp_lin.sub(&ub))),
            _ => extreme(e, src_bounds, false).map(|lb| provably_nonneg(&lb.sub(&clamp_lin))),
        };
        tight != Some(true)
    });
    let clamp_needed = rest.is_empty()
        || !rest.iter().any(|e| match op {
            BinOp::Max => extreme(e, src_bounds, false).is_some_and(|lb| provably_nonneg(&lb.sub(&clamp_lin))),
            _ => extreme(e, src_bounds, true).is_some_and(|ub| provably_nonneg(&clamp_lin.sub(&ub))),
        });
    let mut items = Vec::new();
    if clamp_needed {
        items.push(clamp);
    }
    items.extend(rest);
    let mut it = items.into_iter();
    let first = it.next().unwrap();
    it.fold(first, |acc, e| SymExpr::bin(op, acc, e)).simplify()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symexpr::{parse, Env};
    use proptest::prelude::*;

    fn t_dim() -> Vec<Dim> {
        vec![Dim::new("t", "T")]
    }

    fn inv(text: &str) -> Inverse {
        invert(&parse(text).unwrap().components(), &t_dim(), &t_dim()).unwrap()
    }

    #[test]
    fn inversion_table() {
        assert_eq!(inv("t+3").index[0].to_string(), "t-3");
        assert_eq!(inv("t").index[0].to_string(), "t");
        assert_eq!(inv("t:T").index[0].to_string(), "0:t+1");
        assert_eq!(inv("0:T").index[0].to_string(), "0:T");
        assert_eq!(inv("t:min(t+5, T)").index[0].to_string(), "max(0, t-4):t+1");
        for text in ["t+3", "t:T", "0:T", "t:min(t+5, T)"] {
            assert!(inv(text).is_unconditional(), "{text}");
        }
    }

    #[test]
    fn constant_index_attaches_condition() {
        let i = inv("0");
        assert_eq!(i.index[0].to_string(), "0:T");
        assert_eq!(i.cond.to_string(), "t == 0");
    }

    #[test]
    fn non_affine_is_unsupported() {
        let r = invert(&[parse("t*t").unwrap()], &t_dim(), &t_dim());
        assert!(matches!(r, Err(SymError::Unsupported(..))));
    }

    #[test]
    fn window_matches_brute_force_table() {
        let phi = parse("t:min(t+5, T)").unwrap();
        let i = inv("t:min(t+5, T)");
        for t in 0..10 {
            for t2 in 0..10 {
                let fwd = phi.eval_index(&Env::from([("t", t), ("T", 10)])).unwrap().contains(&[t2]);
                let back = i.index[0].eval_index(&Env::from([("t", t2), ("T", 10)])).unwrap().contains(&[t]);
                assert_eq!(fwd, back, "t={t} t'={t2}");
            }
        }
    }

    /// Random dependence expressions in the invertible class.
    fn arb_phi() -> impl Strategy<Value = (Vec<Dim>, Vec<Dim>, Vec<SymExpr>)> {
        let all = vec![Dim::new("i", "I"), Dim::new("t", "T")];
        (1usize..=2, 1usize..=2, any::<u64>()).prop_map(move |(ns, nt, seed)| {
            let sink: Vec<Dim> = all[2 - ns..].to_vec();
            let src: Vec<Dim> = all[2 - nt..].to_vec();
            let mut rng = seed;
            let mut next = |m: u64| {
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((rng >> 33) % m) as i64
            };
            let phi = src
                .iter()
                .map(|sd| {
                    let u = SymExpr::sym(&sink[next(sink.len() as u64) as usize].name);
                    let c = next(7) - 3;
                    let a = [1, 1, 2, -1][next(4) as usize];
                    let affine = SymExpr::add(SymExpr::mul(SymExpr::int(a), u.clone()), SymExpr::int(c)).simplify();
                    let pos = SymExpr::add(SymExpr::mul(SymExpr::int(a.abs()), u.clone()), SymExpr::int(c)).simplify();
                    match next(7) {
                        0 => SymExpr::int(next(4)),
                        1 | 2 => affine,
                        3 => SymExpr::slice(pos, SymExpr::sym(&sd.bound)),
                        4 => SymExpr::slice(SymExpr::int(0), SymExpr::sym(&sd.bound)),
                        5 => SymExpr::slice(
                            SymExpr::max(SymExpr::int(0), SymExpr::offset(u.clone(), -next(4))),
                            SymExpr::offset(u.clone(), 1),
                        ),
                        _ => SymExpr::slice(
                            u.clone(),
                            SymExpr::min(SymExpr::offset(u.clone(), 1 + next(5)), SymExpr::sym(&sd.bound)),
                        ),
                    }
                })
                .collect();
            (sink, src, phi)
        })
    }

    fn points(dims: &[Dim], bounds: &BTreeMap<String, i64>) -> Vec<Vec<i64>> {
        let mut out = vec![vec![]];
        for d in dims {
            let n = bounds[&d.bound];
            out = out.into_iter().flat_map(|p| (0..n).map(move |v| [p.clone(), vec![v]].concat())).collect();
        }
        out
    }

    fn env_for(dims: &[Dim], p: &[i64], bounds: &BTreeMap<String, i64>) -> Env {
        let mut env = Env::new();
        for (k, v) in bounds {
            env.bind(k, *v);
        }
        for (d, v) in dims.iter().zip(p) {
            env.bind(&d.name, *v);
        }
        env
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip((sink, src, phi) in arb_phi(), bi in 1i64..=16, bt in 1i64..=16) {
            let (bi, bt) = if sink.len() + src.len() > 2 { (bi.min(6), bt.min(6)) } else { (bi, bt) };
            let bounds: BTreeMap<String, i64> = [("I".to_string(), bi), ("T".to_string(), bt)].into();
            let inverse = invert(&phi, &sink, &src).unwrap();
            for p in points(&sink, &bounds) {
                let fwd = crate::symexpr::eval::eval_components(&phi, &env_for(&sink, &p, &bounds)).unwrap();
                for q in points(&src, &bounds) {
                    let env = env_for(&src, &q, &bounds);
                    let back = inverse.cond.eval_bool(&env).unwrap()
                        && crate::symexpr::eval::eval_components(&inverse.index, &env).unwrap().contains(&p);
                    prop_assert_eq!(fwd.contains(&q), back, "phi={:?} inv={:?} p={:?} q={:?}", phi, inverse, p, q);
                }
            }
        }
    }
}
