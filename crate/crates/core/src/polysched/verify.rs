//! Exhaustive checking of a schedule at concrete bounds.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use super::{Band, Tree};
use crate::frontend::ops::{MemOp, OpKind};
use crate::pdg::Pdg;
use crate::runtime::access::{resolve, Read};
use crate::runtime::oracle::domain_points;
use crate::symexpr::Env;

impl Band {
    pub fn min_shift(&self) -> i64 {
        self.shifts.values().copied().min().unwrap_or(0)
    }
}

/// Point of `n` run at the current iterations of the enclosing bands, if
/// it lies inside the domain.
pub fn point_at(g: &Pdg, n: usize, stack: &[(&Band, i64)], bounds: &Env) -> Option<Vec<i64>> {
    let node = g.node(n);
    let mut p = Vec::with_capacity(node.domain.len());
    // Pinned into a band over a dim it lacks: runs at its first iteration.
    for (b, tau) in stack {
        if !node.has_dim(&b.dim.name) && b.shifts.get(&n).is_some_and(|s| tau - s != 0) {
            return None;
        }
    }
    for d in &node.domain {
        let (b, tau) = stack.iter().find(|(b, _)| &b.dim == d)?;
        let ext = bounds.get(&d.bound)?;
        let r = tau - b.shifts.get(&n)?;
        if r < 0 || r >= ext {
            return None;
        }
        p.push(if b.sign > 0 { r } else { ext - 1 - r });
    }
    Some(p)
}

/// Every instance in execution order.
pub fn walk(g: &Pdg, tree: &Tree, bounds: &Env, f: &mut dyn FnMut(usize, Vec<i64>)) {
    fn go<'a>(g: &Pdg, t: &'a Tree, bounds: &Env, stack: &mut Vec<(&'a Band, i64)>, f: &mut dyn FnMut(usize, Vec<i64>)) {
        match t {
            Tree::Seq(cs) => cs.iter().for_each(|c| go(g, c, bounds, stack, f)),
            Tree::Band(b) => {
                let ext = bounds.get(&b.dim.bound).unwrap_or(0);
                for tau in b.min_shift()..ext + b.max_shift() {
                    stack.push((b, tau));
                    go(g, &b.body, bounds, stack, f);
                    stack.pop();
                }
            }
            Tree::Leaf(ns) => {
                for &n in ns {
                    if let Some(p) = point_at(g, n, stack, bounds) {
                        f(n, p);
                    }
                }
            }
        }
    }
    go(g, tree, bounds, &mut Vec::new(), f)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn env_at(g: &Pdg, n: usize, p: &[i64], bounds: &Env) -> Env {
    let mut env = bounds.clone();
    for (d, v) in g.node(n).domain.iter().zip(p) {
        env.bind(&d.name, *v);
    }
    env
}

/// Check that every point runs once, every read follows its source, and
/// every read finds its source resident on the device.
pub fn verify_schedule(g: &Pdg, tree: &Tree, bounds: &Env) -> Vec<Violation> {
    let mut order: Vec<(usize, Vec<i64>)> = Vec::new();
    walk(g, tree, bounds, &mut |n, p| order.push((n, p)));
    let mut out = Vec::new();
    let mut ts: HashMap<(usize, Vec<i64>), usize> = HashMap::new();
    for (i, k) in order.iter().enumerate() {
        if ts.insert(k.clone(), i).is_some() {
            out.push(Violation(format!("`{}` at {:?} runs twice", g.node(k.0).name, k.1)));
        }
    }
    let scheduled: BTreeSet<usize> = tree.nodes().into_iter().collect();
    for n in g.nodes.values() {
        if !scheduled.contains(&n.id) {
            out.push(Violation(format!("`{}` is not scheduled", n.name)));
            continue;
        }
        let ext: Option<Vec<i64>> = n.domain.iter().map(|d| bounds.get(&d.bound)).collect();
        for p in domain_points(&ext.unwrap_or_default()) {
            if !ts.contains_key(&(n.id, p.clone())) {
                out.push(Violation(format!("`{}` at {p:?} never runs", n.name)));
            }
        }
    }
    let managed: HashSet<usize> = g.nodes.values().filter_map(|n| match n.kind {
        OpKind::Memory { tensor, .. } => Some(tensor),
        _ => None,
    }).collect();
    let mut device: HashSet<(usize, Vec<i64>)> = HashSet::new();
    let mut host: HashSet<(usize, Vec<i64>)> = HashSet::new();
    let mut freed: HashSet<(usize, Vec<i64>)> = HashSet::new();
    for (i, (n, q)) in order.iter().enumerate() {
        let env = env_at(g, *n, q, bounds);
        let node = g.node(*n);
        for e in g.in_edges(*n) {
            let set = match resolve(g, e, &env) {
                Ok(Read::Points(s)) => s,
                Ok(_) => continue,
                Err(err) => {
                    out.push(Violation(format!("`{}` at {q:?}: {err}", node.name)));
                    continue;
                }
            };
            for p in set.points() {
                let key = (e.src, p.clone());
                match ts.get(&key) {
                    Some(&j) if j < i => {}
                    _ => out.push(Violation(format!(
                        "`{}` at {q:?} reads `{}` at {p:?} before it is computed",
                        node.name,
                        g.node(e.src).name
                    ))),
                }
                match &node.kind {
                    OpKind::Memory { op, .. } => {
                        let ok = match op {
                            MemOp::Dealloc => {
                                let was = device.remove(&key) | host.remove(&key);
                                freed.insert(key.clone());
                                was
                            }
                            MemOp::Offload => {
                                let was = device.remove(&key);
                                host.insert(key.clone());
                                was
                            }
                            MemOp::Fetch => {
                                let was = host.contains(&key);
                                device.insert(key.clone());
                                was
                            }
                        };
                        if !ok {
                            out.push(Violation(format!("{} of `{}` at {p:?} finds nothing to move", node.name, g.node(e.src).name)));
                        }
                    }
                    _ => {
                        if managed.contains(&e.src) && !device.contains(&key) {
                            out.push(Violation(format!("`{}` at {q:?} reads `{}` at {p:?} while it is not resident", node.name, g.node(e.src).name)));
                        }
                    }
                }
            }
        }
        if !node.kind.is_memory() {
            let key = (*n, q.clone());
            if freed.contains(&key) {
                out.push(Violation(format!("`{}` at {q:?} written after release", node.name)));
            }
            device.insert(key);
        }
    }
    for n in &managed {
        let has_dealloc = g.nodes.values().any(|m| matches!(m.kind, OpKind::Memory { op: MemOp::Dealloc, tensor, .. } if tensor == *n));
        if has_dealloc {
            if let Some(k) = device.iter().chain(host.iter()).find(|k| k.0 == *n) {
                out.push(Violation(format!("`{}` at {:?} is never released", g.node(*n).name, k.1)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::dsl::parse_program;
    use crate::pdg::build;
    use crate::polysched::schedule;

    #[test]
    fn scheduled_programs_verify() {
        let srcs = [
            "dims t;\n bounds T=4;\n x = const(2.0) over (t);\n rec s over (t) f64;\n s[0] = x[0];\n s[t+1] = s + x[t+1];\n out s;",
            "dims t;\n bounds T=4;\n r = rand(()) over (t);\n g = sum(r[t:T]);\n out g;",
            "dims t;\n bounds T=4;\n r = rand(()) over (t);\n g = sum(r[t:min(t+3, T)]);\n h = g + r[t];\n out h;",
        ];
        for src in srcs {
            let g = build(&parse_program(src).unwrap()).unwrap();
            let s = schedule(&g).unwrap();
            for t in [1, 2, 5, 8] {
                let v = verify_schedule(&g, &s.tree, &Env::new().with("T", t));
                assert!(v.is_empty(), "{src}\nT={t}: {v:?}");
            }
        }
    }

    #[test]
    fn reversed_band_is_caught() {
        let src = "dims t;\n bounds T=4;\n x = const(2.0) over (t);\n rec s over (t) f64;\n s[0] = x[0];\n s[t+1] = s + x[t+1];\n out s;";
        let g = build(&parse_program(src).unwrap()).unwrap();
        let mut s = schedule(&g).unwrap();
        if let Tree::Band(b) = &mut s.tree {
            b.sign = -1;
        }
        assert!(!verify_schedule(&g, &s.tree, &Env::new().with("T", 4)).is_empty());
    }
}
