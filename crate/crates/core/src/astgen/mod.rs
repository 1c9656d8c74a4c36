//! Loop programs generated from schedule trees.

pub mod opt;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::frontend::ops::{MemOp, OpKind};
use crate::pdg::Pdg;
use crate::polysched::{Band, Tree};
use crate::symexpr::{fmt_index, Dim, SymExpr};

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Sequence(Vec<Stmt>),
    /// Runs `body` with `var` = lo, lo+1, ... while `var < hi`. `hi` is
    /// re-evaluated before every iteration, so it may follow a dynamic bound.
    Loop { var: String, dim: Dim, parallel: bool, lo: SymExpr, hi: SymExpr, body: Box<Stmt> },
    If { cond: SymExpr, body: Box<Stmt> },
    Execute { node: usize, point: Vec<SymExpr> },
    Dealloc { node: usize, point: Vec<SymExpr> },
    Fetch { node: usize, point: Vec<SymExpr> },
    Offload { node: usize, point: Vec<SymExpr> },
}

impl Stmt {
    pub fn visit(&self, f: &mut dyn FnMut(&Stmt)) {
        f(self);
        match self {
            Stmt::Sequence(ss) => ss.iter().for_each(|s| s.visit(f)),
            Stmt::Loop { body, .. } | Stmt::If { body, .. } => body.visit(f),
            _ => {}
        }
    }

    /// Node and point of a leaf statement.
    pub fn instance(&self) -> Option<(usize, &[SymExpr])> {
        match self {
            Stmt::Execute { node, point }
            | Stmt::Dealloc { node, point }
            | Stmt::Fetch { node, point }
            | Stmt::Offload { node, point } => Some((*node, point)),
            _ => None,
        }
    }

    fn map_points(&self, f: &dyn Fn(&SymExpr) -> SymExpr) -> Stmt {
        let pts = |p: &[SymExpr]| p.iter().map(f).collect::<Vec<_>>();
        match self {
            Stmt::Sequence(ss) => Stmt::Sequence(ss.iter().map(|s| s.map_points(f)).collect()),
            Stmt::Loop { var, dim, parallel, lo, hi, body } => Stmt::Loop {
                var: var.clone(),
                dim: dim.clone(),
                parallel: *parallel,
                lo: f(lo),
                hi: f(hi),
                body: Box::new(body.map_points(f)),
            },
            Stmt::If { cond, body } => Stmt::If { cond: f(cond), body: Box::new(body.map_points(f)) },
            Stmt::Execute { node, point } => Stmt::Execute { node: *node, point: pts(point) },
            Stmt::Dealloc { node, point } => Stmt::Dealloc { node: *node, point: pts(point) },
            Stmt::Fetch { node, point } => Stmt::Fetch { node: *node, point: pts(point) },
            Stmt::Offload { node, point } => Stmt::Offload { node: *node, point: pts(point) },
        }
    }

    /// Replace `var` everywhere and simplify.
    pub fn substitute(&self, var: &str, with: &SymExpr) -> Stmt {
        self.map_points(&|e| e.substitute_one(var, with).simplify())
    }
}

/// A generated program. When `assume` holds for the bounds the optimized
/// `body` runs; otherwise `general`, if present.
#[derive(Debug, Clone, PartialEq)]
pub struct Ast {
    pub body: Stmt,
    /// Lower bounds on bound values that `body` relies on.
    pub assume: BTreeMap<String, i64>,
    pub general: Option<Stmt>,
}

impl Ast {
    pub fn select(&self, bounds: &crate::symexpr::Env) -> &Stmt {
        let holds = self.assume.iter().all(|(b, lo)| bounds.get(b).is_some_and(|v| v >= *lo));
        match &self.general {
            Some(g) if !holds => g,
            _ => &self.body,
        }
    }
}

pub fn loop_var(d: &Dim) -> String {
    format!("_{}", d.name)
}

fn leaf_stmt(g: &Pdg, n: usize, point: Vec<SymExpr>) -> Stmt {
    match g.node(n).kind {
        OpKind::Memory { op: MemOp::Dealloc, .. } => Stmt::Dealloc { node: n, point },
        OpKind::Memory { op: MemOp::Offload, .. } => Stmt::Offload { node: n, point },
        OpKind::Memory { op: MemOp::Fetch, .. } => Stmt::Fetch { node: n, point },
        _ => Stmt::Execute { node: n, point },
    }
}

/// Statement for `n` inside the bands of `stack`, guarded by its domain.
fn guarded(g: &Pdg, n: usize, stack: &[&Band]) -> Stmt {
    let node = g.node(n);
    let mut conds = Vec::new();
    let mut coord: BTreeMap<&str, SymExpr> = BTreeMap::new();
    for b in stack {
        let s = b.shifts.get(&n).copied().unwrap_or(0);
        let r = SymExpr::offset(SymExpr::sym(&loop_var(&b.dim)), -s);
        if node.has_dim(&b.dim.name) {
            let ext = SymExpr::sym(&b.dim.bound);
            // The loop range already implies these at the extreme shifts.
            if s > b.min_shift() {
                conds.push(SymExpr::ge(r.clone(), SymExpr::int(0)));
            }
            if s < b.max_shift() {
                conds.push(SymExpr::lt(r.clone(), ext.clone()));
            }
            let t = if b.sign > 0 { r } else { SymExpr::sub(SymExpr::offset(ext, -1), r).simplify() };
            coord.insert(&b.dim.name, t);
        } else {
            conds.push(SymExpr::eq(r, SymExpr::int(0)));
        }
    }
    let point = node.domain.iter().map(|d| coord.get(d.name.as_str()).cloned().unwrap_or_else(|| SymExpr::int(0))).collect();
    let stmt = leaf_stmt(g, n, point);
    match conds.into_iter().reduce(SymExpr::and).map(|c| c.simplify()) {
        None => stmt,
        Some(c) if c.as_bool() == Some(true) => stmt,
        Some(cond) => Stmt::If { cond, body: Box::new(stmt) },
    }
}

/// Loop program running the instances of `tree` in schedule order.
pub fn generate(g: &Pdg, tree: &Tree) -> Stmt {
    fn go<'a>(g: &Pdg, t: &'a Tree, stack: &mut Vec<&'a Band>) -> Stmt {
        match t {
            Tree::Seq(cs) => Stmt::Sequence(cs.iter().map(|c| go(g, c, stack)).collect()),
            Tree::Leaf(ns) => {
                let mut ss: Vec<Stmt> = ns.iter().map(|&n| guarded(g, n, stack)).collect();
                if ss.len() == 1 {
                    ss.pop().unwrap()
                } else {
                    Stmt::Sequence(ss)
                }
            }
            Tree::Band(b) => {
                stack.push(b);
                let body = go(g, &b.body, stack);
                stack.pop();
                Stmt::Loop {
                    var: loop_var(&b.dim),
                    dim: b.dim.clone(),
                    parallel: b.parallel,
                    lo: SymExpr::int(b.min_shift()),
                    hi: SymExpr::offset(SymExpr::sym(&b.dim.bound), b.max_shift()),
                    body: Box::new(body),
                }
            }
        }
    }
    go(g, tree, &mut Vec::new())
}

/// Tensor and index touched by a memory op at `point`.
pub fn mem_target(g: &Pdg, m: usize, point: &[SymExpr]) -> Option<(usize, Vec<SymExpr>)> {
    let node = g.node(m);
    let OpKind::Memory { tensor, .. } = node.kind else { return None };
    let e = g.in_edges(m).into_iter().next()?;
    let map: BTreeMap<&str, &SymExpr> = node.domain.iter().map(|d| d.name.as_str()).zip(point).collect();
    let idx = e.phi.iter().map(|c| c.substitute(&|s| map.get(s).map(|x| (*x).clone())).simplify()).collect();
    Some((tensor, idx))
}

pub fn dump(g: &Pdg, s: &Stmt) -> String {
    fn go(g: &Pdg, s: &Stmt, depth: usize, out: &mut String) {
        let pad = "  ".repeat(depth);
        match s {
            Stmt::Sequence(ss) => ss.iter().for_each(|s| go(g, s, depth, out)),
            Stmt::Loop { var, parallel, lo, hi, body, .. } => {
                let par = if *parallel { " parallel" } else { "" };
                let _ = writeln!(out, "{pad}for {var} in {lo}..{hi}{par}");
                go(g, body, depth + 1, out);
            }
            Stmt::If { cond, body } => {
                let _ = writeln!(out, "{pad}if {cond}");
                go(g, body, depth + 1, out);
            }
            Stmt::Execute { node, point } => {
                let _ = writeln!(out, "{pad}exec {}{}", g.node(*node).name, fmt_index(point));
            }
            Stmt::Dealloc { node, point } | Stmt::Fetch { node, point } | Stmt::Offload { node, point } => {
                let word = match s {
                    Stmt::Dealloc { .. } => "dealloc",
                    Stmt::Fetch { .. } => "fetch",
                    _ => "offload",
                };
                match mem_target(g, *node, point) {
                    Some((x, idx)) => {
                        let _ = writeln!(out, "{pad}{word} {}{}", g.node(x).name, fmt_index(&idx));
                    }
                    None => {
                        let _ = writeln!(out, "{pad}{word} ?");
                    }
                }
            }
        }
    }
    let mut out = String::new();
    go(g, s, 0, &mut out);
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::frontend::dsl::parse_program;
    use crate::pdg::build;
    use crate::polysched::memory::{augment, MemoryOptions};
    use crate::polysched::schedule;
    use crate::polysched::verify::walk;
    use crate::symexpr::Env;

    /// Instances in the order a straight interpretation of `s` runs them.
    pub(crate) fn instances(s: &Stmt, env: &mut Env, out: &mut Vec<(usize, Vec<i64>)>) {
        match s {
            Stmt::Sequence(ss) => ss.iter().for_each(|s| instances(s, env, out)),
            Stmt::Loop { var, lo, hi, body, .. } => {
                let mut i = lo.eval_int(env).unwrap();
                while i < hi.eval_int(env).unwrap() {
                    env.bind(var, i);
                    instances(body, env, out);
                    i += 1;
                }
                env.unbind(var);
            }
            Stmt::If { cond, body } => {
                if cond.eval_bool(env).unwrap() {
                    instances(body, env, out);
                }
            }
            _ => {
                let (n, p) = s.instance().unwrap();
                out.push((n, p.iter().map(|e| e.eval_int(env).unwrap()).collect()));
            }
        }
    }

    pub(crate) const PROGRAMS: [&str; 4] = [
        "dims t;\n bounds T=4;\n x = const(2.0) over (t);\n rec s over (t) f64;\n s[0] = x[0];\n s[t+1] = s + x[t+1];\n out s;",
        "dims t;\n bounds T=4;\n r = rand(()) over (t);\n g = sum(r[t:min(t+3, T)]);\n h = g + r[t];\n out h;",
        "dims t;\n bounds T=4;\n noise = rand((3)) over (t);\n rec x over (t) shape (3) f64;\n x[0] = noise[0];\n x[t+1] = x * 0.5 + noise[t+1];\n g = sum(x[t:T]);\n out g;",
        "dims b, t;\n bounds B=2, T=4;\n r = rand(()) over (b, t);\n g = sum(r[b, t:min(t+2, T)]);\n out g;",
    ];

    #[test]
    fn order_matches_the_schedule() {
        for (i, src) in PROGRAMS.iter().enumerate() {
            let mut g = build(&parse_program(src).unwrap()).unwrap();
            let s = schedule(&g).unwrap();
            let swap = if i == 2 { Some(1) } else { None };
            let (tree, _) = augment(&mut g, s.tree, &MemoryOptions { swap_threshold: swap, bounds: Env::new().with("T", 4).with("B", 2) });
            let ast = generate(&g, &tree);
            for t in [1, 2, 5, 8] {
                let env = Env::new().with("T", t).with("B", 2);
                let mut want = Vec::new();
                walk(&g, &tree, &env, &mut |n, p| want.push((n, p)));
                let mut got = Vec::new();
                instances(&ast, &mut env.clone(), &mut got);
                assert_eq!(got, want, "{src} T={t}");
            }
        }
    }

    #[test]
    fn dump_shows_guards() {
        let g = build(&parse_program(PROGRAMS[1]).unwrap()).unwrap();
        let s = schedule(&g).unwrap();
        let text = dump(&g, &generate(&g, &s.tree));
        assert!(text.starts_with("for _t in "), "{text}");
        assert!(text.contains("if "), "{text}");
        assert!(text.contains("exec g["), "{text}");
    }
}
