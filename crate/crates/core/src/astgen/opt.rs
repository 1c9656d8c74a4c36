//! Loop peeling, promotion of memory-only loops, and removal of redundant
//! transfers.

use std::collections::{BTreeMap, BTreeSet};

use super::{mem_target, Ast, Stmt};
use crate::frontend::ops::OpKind;
use crate::pdg::Pdg;
use crate::symexpr::{BinOp, LinExpr, Node, SymExpr};

/// Lower bounds on symbols, used to decide guards.
pub type Minimums = BTreeMap<String, i64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptOptions {
    /// Most iterations peeled from each end of a loop; 0 disables peeling.
    pub peel: usize,
    pub promote: bool,
    pub elide: bool,
}

impl Default for OptOptions {
    fn default() -> Self {
        OptOptions { peel: 8, promote: true, elide: true }
    }
}

const LO_GAP: &str = "@lo";
const HI_GAP: &str = "@hi";

/// Truth of `a op b` when every symbol is at least its minimum, if that
/// alone settles it.
fn decide_cmp(op: BinOp, a: &SymExpr, b: &SymExpr, mins: &Minimums) -> Option<bool> {
    let diff = LinExpr::from_expr(&SymExpr::sub(a.clone(), b.clone()).simplify())?;
    let mut lo = diff.constant;
    let mut pos = true;
    let mut neg = true;
    for v in diff.vars() {
        let k = diff.coef(v);
        lo += k * *mins.get(v)?;
        pos &= k >= 0;
        neg &= k <= 0;
    }
    // `lo` is the least value of a - b when all coefficients are positive
    // and the greatest when all are negative.
    match op {
        BinOp::Ge if pos && lo >= 0 => Some(true),
        BinOp::Ge if neg && lo < 0 => Some(false),
        BinOp::Gt if pos && lo > 0 => Some(true),
        BinOp::Gt if neg && lo <= 0 => Some(false),
        BinOp::Lt if pos && lo >= 0 => Some(false),
        BinOp::Lt if neg && lo < 0 => Some(true),
        BinOp::Le if pos && lo > 0 => Some(false),
        BinOp::Le if neg && lo <= 0 => Some(true),
        BinOp::Eq if (pos && lo > 0) || (neg && lo < 0) => Some(false),
        _ => None,
    }
}

fn decide_atom(atom: &SymExpr, mins: &Minimums) -> Option<bool> {
    match atom.node() {
        Node::Bin(op @ (BinOp::Ge | BinOp::Gt | BinOp::Lt | BinOp::Le | BinOp::Eq), a, b) => decide_cmp(*op, a, b, mins),
        _ => atom.as_bool(),
    }
}

/// Loop ranges in scope: counter, first value, end (exclusive).
type Ranges = Vec<(String, SymExpr, SymExpr)>;

/// Decide `atom` for every value the enclosing counters can take: from
/// the lower end (`var = lo + gap`) or from the upper end
/// (`var = hi - 1 - gap`), with `gap >= 0`.
fn decide_in(atom: &SymExpr, ranges: &Ranges, mins: &Minimums) -> Option<bool> {
    if let Some(v) = decide_atom(atom, mins) {
        return Some(v);
    }
    let (var, lo, hi) = ranges.iter().rev().find(|(v, ..)| atom.mentions(v))?;
    let mut m = mins.clone();
    m.insert(LO_GAP.into(), 0);
    m.insert(HI_GAP.into(), 0);
    let from_lo = atom.substitute_one(var, &SymExpr::add(lo.clone(), SymExpr::sym(LO_GAP)));
    let from_hi = atom.substitute_one(var, &SymExpr::sub(SymExpr::offset(hi.clone(), -1), SymExpr::sym(HI_GAP)));
    let rest: Ranges = ranges.iter().filter(|(v, ..)| v != var).cloned().collect();
    decide_in(&from_lo, &rest, &m).or_else(|| decide_in(&from_hi, &rest, &m))
}

/// `cond` with every comparison that `decide` settles replaced by a constant.
fn settle_cond(cond: &SymExpr, decide: &dyn Fn(&SymExpr) -> Option<bool>) -> SymExpr {
    let r = match cond.node() {
        Node::Bin(op @ (BinOp::And | BinOp::Or), a, b) => SymExpr::bin(*op, settle_cond(a, decide), settle_cond(b, decide)),
        Node::Not(a) => SymExpr::not(settle_cond(a, decide)),
        _ => decide(cond).map_or_else(|| cond.clone(), SymExpr::bool),
    };
    r.simplify()
}

fn flatten(ss: Vec<Stmt>) -> Vec<Stmt> {
    let mut out = Vec::new();
    for s in ss {
        match s {
            Stmt::Sequence(inner) => out.extend(flatten(inner)),
            s => out.push(s),
        }
    }
    out
}

/// Drop guards that always hold, statements that never run, and empty
/// loops, and flatten sequences.
pub fn settle(s: &Stmt, mins: &Minimums) -> Stmt {
    fn go(s: &Stmt, mins: &Minimums, ranges: &mut Ranges) -> Stmt {
        match s {
            Stmt::Sequence(ss) => {
                let ss: Vec<Stmt> = ss.iter().map(|s| go(s, mins, ranges)).collect();
                Stmt::Sequence(flatten(ss))
            }
            Stmt::If { cond, body } => {
                let cond = settle_cond(cond, &|a| decide_in(a, ranges, mins));
                match cond.as_bool() {
                    Some(true) => go(body, mins, ranges),
                    Some(false) => Stmt::Sequence(vec![]),
                    None => Stmt::If { cond, body: Box::new(go(body, mins, ranges)) },
                }
            }
            Stmt::Loop { var, dim, parallel, lo, hi, body } => {
                if decide_in(&SymExpr::ge(lo.clone(), hi.clone()), ranges, mins) == Some(true) {
                    return Stmt::Sequence(vec![]);
                }
                ranges.push((var.clone(), lo.clone(), hi.clone()));
                let body = go(body, mins, ranges);
                ranges.pop();
                if matches!(&body, Stmt::Sequence(ss) if ss.is_empty()) {
                    return body;
                }
                Stmt::Loop { var: var.clone(), dim: dim.clone(),
                parallel: *parallel, lo: lo.clone(), hi: hi.clone(), body: Box::new(body) }
            }
            leaf => leaf.clone(),
        }
    }
    go(s, mins, &mut Vec::new())
}

fn atoms(cond: &SymExpr, out: &mut Vec<SymExpr>) {
    match cond.node() {
        Node::Bin(BinOp::And | BinOp::Or, a, b) => {
            atoms(a, out);
            atoms(b, out);
        }
        Node::Not(a) => atoms(a, out),
        _ => out.push(cond.clone()),
    }
}

/// Iterations to peel from the front and back of a loop so that every
/// guard on its counter is settled in the remaining middle part.
fn peel_counts(var: &str, lo: &SymExpr, hi: &SymExpr, body: &Stmt, max: i64, mins: &Minimums) -> (i64, i64) {
    let mut found = Vec::new();
    body.visit(&mut |s| {
        if let Stmt::If { cond, .. } = s {
            atoms(cond, &mut found);
        }
    });
    let (mut front, mut back) = (0, 0);
    for a in found.iter().filter(|a| a.mentions(var)) {
        let at = |k: i64, from_lo: bool| {
            let lo = if from_lo { SymExpr::offset(lo.clone(), k) } else { lo.clone() };
            let hi = if from_lo { hi.clone() } else { SymExpr::offset(hi.clone(), -k) };
            let ranges = vec![(var.to_string(), lo, hi)];
            let mut m = mins.clone();
            m.insert(LO_GAP.into(), 0);
            m.insert(HI_GAP.into(), 0);
            let var_e = if from_lo {
                SymExpr::add(ranges[0].1.clone(), SymExpr::sym(LO_GAP))
            } else {
                SymExpr::sub(SymExpr::offset(ranges[0].2.clone(), -1), SymExpr::sym(HI_GAP))
            };
            decide_atom(&a.substitute_one(var, &var_e), &m).is_some()
        };
        let kf = (0..=max).find(|&k| at(k, true));
        let kb = (0..=max).find(|&k| at(k, false));
        match (kf, kb) {
            (Some(f), Some(b)) if f <= b => front = front.max(f),
            (_, Some(b)) => back = back.max(b),
            (Some(f), None) => front = front.max(f),
            (None, None) => {}
        }
    }
    (front, back)
}

fn has_transfer(s: &Stmt, want_fetch: bool) -> bool {
    let mut hit = false;
    s.visit(&mut |t| hit |= if want_fetch { matches!(t, Stmt::Fetch { .. }) } else { matches!(t, Stmt::Offload { .. }) });
    hit
}

/// `hi` as `bound + c`.
fn bound_plus(hi: &SymExpr) -> Option<(String, i64)> {
    let l = LinExpr::from_expr(hi)?;
    let vars: Vec<&String> = l.vars().collect();
    match vars.as_slice() {
        [v] if l.coef(v) == 1 => Some(((*v).clone(), l.constant)),
        _ => None,
    }
}

/// Peel iterations off the ends of loops over static bounds until the
/// guards on their counters hold throughout the remaining loop, and one
/// more at an end that moves data so transfers across loops line up.
/// Records in `assume` the bound values the split needs.
pub fn partial_unroll(s: &Stmt, max: usize, dynamic: &BTreeSet<String>, assume: &mut Minimums) -> Stmt {
    match s {
        Stmt::Sequence(ss) => Stmt::Sequence(ss.iter().map(|s| partial_unroll(s, max, dynamic, assume)).collect()),
        Stmt::If { cond, body } => Stmt::If { cond: cond.clone(), body: Box::new(partial_unroll(body, max, dynamic, assume)) },
        Stmt::Loop { var, dim, parallel, lo, hi, body } => {
            let body = partial_unroll(body, max, dynamic, assume);
            let rebuilt = Stmt::Loop { var: var.clone(), dim: dim.clone(),
                parallel: *parallel, lo: lo.clone(), hi: hi.clone(), body: Box::new(body.clone()) };
            let (Some(l), Some((b, c))) = (lo.as_int(), bound_plus(hi)) else { return rebuilt };
            if max == 0 || dynamic.contains(&b) {
                return rebuilt;
            }
            let max = max as i64;
            let mins: Minimums = [(b.clone(), 1)].into();
            let (mut front, mut back) = peel_counts(var, lo, hi, &body, max, &mins);
            if has_transfer(&body, true) {
                front = (front + 1).min(max);
            }
            if has_transfer(&body, false) {
                back = (back + 1).min(max);
            }
            if front == 0 && back == 0 {
                return rebuilt;
            }
            // The peeled ends must not overlap: b + c - l >= front + back.
            let need = (front + back - (c - l)).max(1);
            let e = assume.entry(b).or_insert(1);
            *e = (*e).max(need);
            let mut out = Vec::new();
            for j in 0..front {
                out.push(body.substitute(var, &SymExpr::int(l + j)));
            }
            out.push(Stmt::Loop {
                var: var.clone(),
                dim: dim.clone(),
                parallel: *parallel,
                lo: SymExpr::int(l + front),
                hi: SymExpr::offset(hi.clone(), -back),
                body: Box::new(body.clone()),
            });
            for j in 0..back {
                out.push(body.substitute(var, &SymExpr::offset(hi.clone(), j - back)));
            }
            Stmt::Sequence(out)
        }
        leaf => leaf.clone(),
    }
}

/// The memory statement inside `s`, looking through guards.
fn memory_leaf(s: &Stmt) -> Option<&Stmt> {
    match s {
        Stmt::If { body, .. } => memory_leaf(body),
        Stmt::Dealloc { .. } | Stmt::Fetch { .. } | Stmt::Offload { .. } => Some(s),
        _ => None,
    }
}

/// Replace a loop over a static bound holding only memory statements, at
/// most one per tensor, by the same statements over slices of points.
/// Guards may be dropped because memory statements clip to the domain.
pub fn promote_memory_loops(g: &Pdg, s: &Stmt, dynamic: &BTreeSet<String>) -> Stmt {
    match s {
        Stmt::Sequence(ss) => Stmt::Sequence(ss.iter().map(|s| promote_memory_loops(g, s, dynamic)).collect()),
        Stmt::If { cond, body } => Stmt::If { cond: cond.clone(), body: Box::new(promote_memory_loops(g, body, dynamic)) },
        Stmt::Loop { var, dim, parallel, lo, hi, body } => {
            let body = promote_memory_loops(g, body, dynamic);
            let rebuilt = Stmt::Loop { var: var.clone(), dim: dim.clone(),
                parallel: *parallel, lo: lo.clone(), hi: hi.clone(), body: Box::new(body.clone()) };
            if hi.free_symbols().iter().chain(lo.free_symbols().iter()).any(|b| dynamic.contains(b)) {
                return rebuilt;
            }
            let items = match &body {
                Stmt::Sequence(ss) => ss.iter().collect::<Vec<_>>(),
                s => vec![s],
            };
            let mut out = Vec::new();
            let mut seen = BTreeSet::new();
            for it in items {
                let Some(leaf) = memory_leaf(it) else { return rebuilt };
                let (m, point) = leaf.instance().unwrap();
                let OpKind::Memory { tensor, .. } = g.node(m).kind else { return rebuilt };
                if !seen.insert(tensor) {
                    return rebuilt;
                }
                let mut pts = Vec::new();
                for c in point {
                    if !c.mentions(var) {
                        pts.push(c.clone());
                        continue;
                    }
                    let Some(l) = LinExpr::from_expr(c) else { return rebuilt };
                    let at = |v: &SymExpr| c.substitute_one(var, v).simplify();
                    let last = SymExpr::offset(hi.clone(), -1);
                    match l.coef(var) {
                        1 => pts.push(SymExpr::slice(at(lo), SymExpr::offset(at(&last), 1))),
                        -1 => pts.push(SymExpr::slice(at(&last), SymExpr::offset(at(lo), 1))),
                        _ => return rebuilt,
                    }
                }
                out.push(match leaf {
                    Stmt::Dealloc { .. } => Stmt::Dealloc { node: m, point: pts },
                    Stmt::Fetch { .. } => Stmt::Fetch { node: m, point: pts },
                    _ => Stmt::Offload { node: m, point: pts },
                });
            }
            Stmt::Sequence(out)
        }
        leaf => leaf.clone(),
    }
}

fn touches(g: &Pdg, s: &Stmt, x: usize) -> bool {
    let mut hit = false;
    s.visit(&mut |t| {
        if let Some(leaf) = memory_leaf(t) {
            let (m, p) = leaf.instance().unwrap();
            hit |= mem_target(g, m, p).is_some_and(|(y, _)| y == x);
        }
    });
    hit
}

/// Whether index `b` contains every point of index `a`.
fn covers(a: &[SymExpr], b: &[SymExpr], mins: &Minimums) -> bool {
    let yes = |op, x: &SymExpr, y: &SymExpr| decide_cmp(op, x, y, mins) == Some(true);
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x == y
                || match (x.as_slice(), y.as_slice()) {
                    (None, Some((lo, hi))) => yes(BinOp::Ge, x, lo) && yes(BinOp::Lt, x, hi),
                    (Some((xl, xh)), Some((lo, hi))) => yes(BinOp::Ge, xl, lo) && yes(BinOp::Le, xh, hi),
                    _ => false,
                }
        })
}

/// Remove an offload followed in the same sequence, with no other
/// transfer of that tensor in between, by a fetch of the same points (both
/// go) or by a dealloc covering them (the offload goes). Also remove every
/// fetch of a tensor that is never offloaded. Returns the number of
/// offload/fetch pairs removed.
pub fn elide(g: &Pdg, s: &Stmt, mins: &Minimums) -> (Stmt, usize) {
    let mut offloaded = BTreeSet::new();
    s.visit(&mut |t| {
        if let Stmt::Offload { node, point } = t {
            if let Some((x, _)) = mem_target(g, *node, point) {
                offloaded.insert(x);
            }
        }
    });
    let mut pairs = 0;
    let out = elide_in(g, s, &offloaded, mins, &mut pairs);
    (out, pairs)
}

fn elide_in(g: &Pdg, s: &Stmt, offloaded: &BTreeSet<usize>, mins: &Minimums, pairs: &mut usize) -> Stmt {
    match s {
        Stmt::Sequence(ss) => {
            let ss: Vec<Stmt> = ss.iter().map(|s| elide_in(g, s, offloaded, mins, pairs)).collect();
            let mut drop = vec![false; ss.len()];
            for i in 0..ss.len() {
                let Stmt::Offload { node, point } = &ss[i] else { continue };
                let Some((x, idx)) = mem_target(g, *node, point) else { continue };
                for j in i + 1..ss.len() {
                    if drop[j] {
                        continue;
                    }
                    match &ss[j] {
                        Stmt::Fetch { node, point } => {
                            if mem_target(g, *node, point) == Some((x, idx.clone())) {
                                drop[i] = true;
                                drop[j] = true;
                                *pairs += 1;
                                break;
                            }
                        }
                        Stmt::Dealloc { node, point } => {
                            if let Some((y, cover)) = mem_target(g, *node, point) {
                                if y == x && covers(&idx, &cover, mins) {
                                    drop[i] = true;
                                    break;
                                }
                            }
                        }
                        _ => {}
                    }
                    if touches(g, &ss[j], x) {
                        break;
                    }
                }
            }
            Stmt::Sequence(ss.into_iter().zip(drop).filter(|(_, d)| !d).map(|(s, _)| s).collect())
        }
        Stmt::If { cond, body } => Stmt::If { cond: cond.clone(), body: Box::new(elide_in(g, body, offloaded, mins, pairs)) },
        Stmt::Loop { var, dim, parallel, lo, hi, body } => Stmt::Loop {
            var: var.clone(),
            dim: dim.clone(),
                parallel: *parallel,
            lo: lo.clone(),
            hi: hi.clone(),
            body: Box::new(elide_in(g, body, offloaded, mins, pairs)),
        },
        Stmt::Fetch { node, point } if mem_target(g, *node, point).is_some_and(|(x, _)| !offloaded.contains(&x)) => {
            Stmt::Sequence(vec![])
        }
        leaf => leaf.clone(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OptReport {
    pub elided_pairs: usize,
}

/// Run the enabled passes in the order unroll, promote, elide. The
/// general program is kept as a fallback when peeling assumed a minimum
/// size for some bound.
pub fn optimize(g: &Pdg, s: &Stmt, opts: &OptOptions) -> (Ast, OptReport) {
    let dynamic: BTreeSet<String> = g.dynamic_bounds().into_iter().collect();
    let mut assume = Minimums::new();
    let mut body = partial_unroll(s, opts.peel, &dynamic, &mut assume);
    let mut mins: Minimums = g.bounds.keys().map(|b| (b.clone(), 1)).collect();
    mins.extend(assume.iter().map(|(k, v)| (k.clone(), *v)));
    if opts.peel > 0 {
        body = settle(&body, &mins);
    }
    if opts.promote {
        body = promote_memory_loops(g, &body, &dynamic);
    }
    let mut report = OptReport::default();
    if opts.elide {
        let (b, n) = elide(g, &body, &mins);
        body = b;
        report.elided_pairs = n;
    }
    let body = Stmt::Sequence(flatten(vec![body]));
    let general = (!assume.is_empty()).then(|| s.clone());
    (Ast { body, assume, general }, report)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{instances, PROGRAMS};
    use super::super::{dump, generate};
    use super::*;
    use crate::frontend::dsl::parse_program;
    use crate::pdg::build;
    use crate::polysched::memory::{augment, MemoryOptions};
    use crate::polysched::schedule;
    use crate::symexpr::{parse, Dim, Env};

    fn compiled(i: usize) -> (Pdg, Stmt) {
        let mut g = build(&parse_program(PROGRAMS[i]).unwrap()).unwrap();
        let s = schedule(&g).unwrap();
        let swap = if i == 2 { Some(1) } else { None };
        let (tree, _) = augment(&mut g, s.tree, &MemoryOptions { swap_threshold: swap, bounds: Env::new().with("T", 4).with("B", 2) });
        let ast = generate(&g, &tree);
        (g, ast)
    }

    fn run(s: &Stmt, env: &Env) -> Vec<(usize, Vec<i64>)> {
        let mut out = Vec::new();
        instances(s, &mut env.clone(), &mut out);
        out
    }

    fn count_ifs_in_loops(s: &Stmt) -> usize {
        let mut n = 0;
        s.visit(&mut |t| {
            if let Stmt::Loop { body, .. } = t {
                body.visit(&mut |u| n += matches!(u, Stmt::If { .. }) as usize);
            }
        });
        n
    }

    #[test]
    fn guards_settle_under_minimums() {
        let mins: Minimums = [("T".to_string(), 3)].into();
        let d = |c: &str| settle_cond(&parse(c).unwrap(), &|a| decide_atom(a, &mins));
        assert_eq!(d("T-1 >= 0 & T-1 < T"), SymExpr::bool(true));
        assert!(d("T-5 >= 0").as_bool().is_none());
        assert_eq!(d("2-T >= 0"), SymExpr::bool(false));
    }

    #[test]
    fn first_iteration_guard_is_peeled() {
        let g = build(&parse_program("dims t;\n bounds T=4;\n a = const(1.0) over (t);\n out a;").unwrap()).unwrap();
        let exec = |p: &str| Stmt::Execute { node: 0, point: vec![parse(p).unwrap()] };
        let s = Stmt::Loop {
            var: "_t".into(),
            dim: Dim::new("t", "T"),
            parallel: false,
            lo: SymExpr::int(0),
            hi: SymExpr::sym("T"),
            body: Box::new(Stmt::Sequence(vec![
                Stmt::If { cond: parse("_t == 0").unwrap(), body: Box::new(exec("0")) },
                Stmt::If { cond: parse("_t >= 1").unwrap(), body: Box::new(exec("_t")) },
            ])),
        };
        let (ast, _) = optimize(&g, &s, &OptOptions::default());
        assert_eq!(count_ifs_in_loops(&ast.body), 0, "{}", dump(&g, &ast.body));
        assert_eq!(ast.assume["T"], 1);
        for t in 1..6 {
            let env = Env::new().with("T", t);
            assert_eq!(run(ast.select(&env), &env), run(&s, &env));
        }
    }

    #[test]
    fn loop_without_guards_is_unchanged() {
        let g = build(&parse_program("dims t;\n bounds T=4;\n a = const(1.0) over (t);\n out a;").unwrap()).unwrap();
        let s = generate(&g, &schedule(&g).unwrap().tree);
        let (ast, _) = optimize(&g, &s, &OptOptions::default());
        assert_eq!(ast.body, Stmt::Sequence(flatten(vec![s])));
        assert!(ast.general.is_none());
    }

    #[test]
    fn memory_only_loop_becomes_a_slice() {
        let (g, _) = compiled(2);
        let (m, x) = g
            .nodes
            .values()
            .find_map(|n| match n.kind {
                OpKind::Memory { op: crate::frontend::ops::MemOp::Offload, tensor, .. } => Some((n.id, tensor)),
                _ => None,
            })
            .unwrap();
        let s = Stmt::Loop {
            var: "_t".into(),
            dim: Dim::new("t", "T"),
            parallel: false,
            lo: SymExpr::int(0),
            hi: SymExpr::int(4),
            body: Box::new(Stmt::Offload { node: m, point: vec![SymExpr::sym("_t")] }),
        };
        let p = promote_memory_loops(&g, &s, &BTreeSet::new());
        let Stmt::Sequence(ss) = &p else { panic!("{p:?}") };
        assert_eq!(ss.len(), 1);
        let (n, pt) = ss[0].instance().unwrap();
        assert_eq!(mem_target(&g, n, pt).unwrap(), (x, vec![parse("0:4").unwrap()]));
        let with_exec = Stmt::Loop {
            var: "_t".into(),
            dim: Dim::new("t", "T"),
            parallel: false,
            lo: SymExpr::int(0),
            hi: SymExpr::int(4),
            body: Box::new(Stmt::Execute { node: x, point: vec![SymExpr::sym("_t")] }),
        };
        assert_eq!(promote_memory_loops(&g, &with_exec, &BTreeSet::new()), with_exec);
    }

    #[test]
    fn peeling_keeps_the_instance_order() {
        for i in 0..PROGRAMS.len() {
            let (g, s) = compiled(i);
            for peel in [1, 2, 8] {
                let (ast, _) = optimize(&g, &s, &OptOptions { peel, promote: false, elide: false });
                for t in 1..=12 {
                    let env = Env::new().with("T", t).with("B", 2);
                    assert_eq!(run(ast.select(&env), &env), run(&s, &env), "program {i} peel {peel} T={t}\n{}", dump(&g, ast.select(&env)));
                }
            }
        }
    }

    #[test]
    fn elision_drops_a_transfer_pair_and_keeps_executes() {
        let (g, s) = compiled(2);
        let (ast, rep) = optimize(&g, &s, &OptOptions::default());
        assert!(rep.elided_pairs >= 1, "{}", dump(&g, &ast.body));
        let execs = |v: Vec<(usize, Vec<i64>)>| -> Vec<(usize, Vec<i64>)> {
            v.into_iter().filter(|(n, _)| !g.node(*n).kind.is_memory()).collect()
        };
        for t in 1..=12 {
            let env = Env::new().with("T", t);
            assert_eq!(execs(run(ast.select(&env), &env)), execs(run(&s, &env)), "T={t}");
        }
    }

    #[test]
    fn offload_before_covering_dealloc_goes() {
        let mins: Minimums = [("T".to_string(), 8)].into();
        let a = vec![parse("2:4").unwrap()];
        assert!(covers(&a, &[parse("0:T").unwrap()], &mins));
        assert!(!covers(&a, &[parse("3:T").unwrap()], &mins));
        assert!(covers(&[parse("T-1").unwrap()], &[parse("0:T").unwrap()], &mins));
    }
}
