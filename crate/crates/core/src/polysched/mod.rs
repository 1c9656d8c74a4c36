//! Schedules: a tree of sequences and shifted bands over the symbolic dims,
//! chosen so that every dependence runs forward in time.

pub mod donation;
pub mod dump;
pub mod memory;
pub mod verify;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use thiserror::Error;

use crate::pdg::{Edge, Pdg};
use crate::symexpr::{BinOp, Dim, LinExpr, Node, SymExpr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("no schedule for the cycle through `{0}`")]
    Unschedulable(String),
    #[error("cycle through `{0}` mixes domains")]
    MixedCycle(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub dim: Dim,
    /// +1 runs the dim forward, -1 backward.
    pub sign: i64,
    /// Node `n` runs point `r` at iteration `r + shifts[n]`, where `r` is
    /// the dim value (forward) or its distance from the end (backward).
    pub shifts: BTreeMap<usize, i64>,
    pub parallel: bool,
    pub body: Box<Tree>,
}

impl Band {
    pub fn max_shift(&self) -> i64 {
        self.shifts.values().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tree {
    Seq(Vec<Tree>),
    Band(Band),
    Leaf(Vec<usize>),
}

impl Tree {
    /// Nodes in statement order.
    pub fn nodes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit(&mut |t| {
            if let Tree::Leaf(ns) = t {
                out.extend(ns.iter().copied());
            }
        });
        out
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Tree)) {
        f(self);
        match self {
            Tree::Seq(cs) => cs.iter().for_each(|c| c.visit(f)),
            Tree::Band(b) => b.body.visit(f),
            Tree::Leaf(_) => {}
        }
    }

    pub fn bands(&self) -> Vec<&Band> {
        let mut out = Vec::new();
        collect_bands(self, &mut out);
        out
    }

    /// Top-level children, in order.
    pub fn top(&self) -> Vec<&Tree> {
        match self {
            Tree::Seq(cs) => cs.iter().collect(),
            t => vec![t],
        }
    }
}

fn collect_bands<'a>(t: &'a Tree, out: &mut Vec<&'a Band>) {
    match t {
        Tree::Seq(cs) => cs.iter().for_each(|c| collect_bands(c, out)),
        Tree::Band(b) => {
            out.push(b);
            collect_bands(&b.body, out);
        }
        Tree::Leaf(_) => {}
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub tree: Tree,
    /// Number of unbounded look-ahead reads on the longest path into a node.
    pub phase: BTreeMap<usize, usize>,
}

impl Schedule {
    pub fn phase_count(&self) -> usize {
        self.phase.values().max().map_or(0, |p| p + 1)
    }
}

fn min_opt(a: Option<i64>, b: Option<i64>) -> Option<i64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) | (None, x) => x,
    }
}

fn max_opt(a: Option<i64>, b: Option<i64>) -> Option<i64> {
    Some(a?.max(b?))
}

/// Largest `f(d) - d` over `d >= 0`; `None` when unbounded.
fn ahead(f: &SymExpr, d: &str) -> Option<i64> {
    match f.node() {
        Node::Bin(BinOp::Min, a, b) => min_opt(ahead(a, d), ahead(b, d)),
        Node::Bin(BinOp::Max, a, b) => max_opt(ahead(a, d), ahead(b, d)),
        _ => {
            let l = LinExpr::from_expr(f)?;
            if l.vars().any(|v| v != d) || l.coef(d) > 1 {
                return None;
            }
            Some(l.constant)
        }
    }
}

/// Largest `d - f(d)` over the dim; `None` when unbounded.
fn behind(f: &SymExpr, d: &str) -> Option<i64> {
    match f.node() {
        Node::Bin(BinOp::Min, a, b) => max_opt(behind(a, d), behind(b, d)),
        Node::Bin(BinOp::Max, a, b) => min_opt(behind(a, d), behind(b, d)),
        _ => {
            let l = LinExpr::from_expr(f)?;
            if l.vars().any(|v| v != d) || l.coef(d) < 1 {
                return None;
            }
            Some(-l.constant)
        }
    }
}

/// Smallest shift difference `s(sink) - s(src)` that keeps every read of
/// `e` along `d` at or before the reading iteration, in direction `sign`.
pub fn delta(g: &Pdg, e: &Edge, d: &Dim, sign: i64) -> Option<i64> {
    let Some(k) = g.node(e.src).domain.iter().position(|x| x == d) else {
        // A pinned source runs before the sink's first iteration.
        return Some(0);
    };
    let c = &e.phi[k];
    match (c.as_slice(), sign > 0) {
        (Some((_, hi)), true) => ahead(hi, &d.name).map(|v| v - 1),
        (Some((lo, _)), false) => behind(lo, &d.name),
        (None, true) => ahead(c, &d.name),
        (None, false) => behind(c, &d.name),
    }
}

/// Longest-path shifts for `members` in direction `sign`.
fn shifts(g: &Pdg, members: &BTreeSet<usize>, edges: &[&Edge], d: &Dim, sign: i64) -> Option<BTreeMap<usize, i64>> {
    let inner: Vec<(&Edge, i64)> = edges
        .iter()
        .filter(|e| members.contains(&e.src) && members.contains(&e.sink))
        .map(|e| delta(g, e, d, sign).map(|x| (*e, x)))
        .collect::<Option<_>>()?;
    let mut s: BTreeMap<usize, i64> = members.iter().map(|&n| (n, 0)).collect();
    for _ in 0..=members.len() {
        let mut changed = false;
        for (e, dl) in &inner {
            let want = s[&e.src] + dl;
            if s[&e.sink] < want {
                s.insert(e.sink, want);
                changed = true;
            }
        }
        if !changed {
            return Some(s);
        }
    }
    None
}

/// Components of the dependence graph on `nodes`, in topological order,
/// lowest id first among ready ones.
fn ordered_sccs(nodes: &BTreeSet<usize>, edges: &[&Edge]) -> (Vec<Vec<usize>>, BTreeMap<usize, usize>) {
    let mut dg: DiGraph<usize, ()> = DiGraph::new();
    let idx: BTreeMap<usize, _> = nodes.iter().map(|&n| (n, dg.add_node(n))).collect();
    for e in edges {
        dg.add_edge(idx[&e.src], idx[&e.sink], ());
    }
    let mut comps: Vec<Vec<usize>> = tarjan_scc(&dg).into_iter().map(|c| {
        let mut v: Vec<usize> = c.into_iter().map(|i| dg[i]).collect();
        v.sort();
        v
    }).collect();
    comps.sort_by_key(|c| c[0]);
    let comp_of: BTreeMap<usize, usize> = comps.iter().enumerate().flat_map(|(i, c)| c.iter().map(move |&n| (n, i))).collect();
    let mut preds: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); comps.len()];
    let mut succs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); comps.len()];
    for e in edges {
        let (a, b) = (comp_of[&e.src], comp_of[&e.sink]);
        if a != b {
            preds[b].insert(a);
            succs[a].insert(b);
        }
    }
    let mut indeg: Vec<usize> = preds.iter().map(|p| p.len()).collect();
    let mut ready: BinaryHeap<Reverse<usize>> = (0..comps.len()).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::new();
    while let Some(Reverse(c)) = ready.pop() {
        order.push(c);
        for &s in &succs[c] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    let sorted: Vec<Vec<usize>> = order.iter().map(|&c| comps[c].clone()).collect();
    let comp_of = sorted.iter().enumerate().flat_map(|(i, c)| c.iter().map(move |&n| (n, i))).collect();
    (sorted, comp_of)
}

struct Group {
    members: BTreeSet<usize>,
    signs: Vec<i64>,
}

fn leaf(g: &Pdg, nodes: &BTreeSet<usize>, edges: &[&Edge], prio: &BTreeMap<usize, i64>) -> Result<Tree, ScheduleError> {
    let mut indeg: BTreeMap<usize, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    for e in edges {
        *indeg.get_mut(&e.sink).unwrap() += 1;
    }
    // Lagging work first, so reads of old points retire before new ones land.
    let key = |n: usize| (prio.get(&n).copied().unwrap_or(0), Reverse(n));
    let mut ready: BinaryHeap<(i64, Reverse<usize>)> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| key(n)).collect();
    let mut order = Vec::new();
    while let Some((_, Reverse(n))) = ready.pop() {
        order.push(n);
        for e in edges.iter().filter(|e| e.src == n) {
            let d = indeg.get_mut(&e.sink).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(key(e.sink));
            }
        }
    }
    if order.len() < nodes.len() {
        let stuck = nodes.iter().find(|n| !order.contains(n)).unwrap();
        return Err(ScheduleError::Unschedulable(g.node(*stuck).name.clone()));
    }
    Ok(Tree::Leaf(order))
}

fn level(g: &Pdg, nodes: &BTreeSet<usize>, edges: &[&Edge], dims: &[Dim], prio: &BTreeMap<usize, i64>) -> Result<Tree, ScheduleError> {
    let edges: Vec<&Edge> = edges.iter().copied().filter(|e| nodes.contains(&e.src) && nodes.contains(&e.sink)).collect();
    let Some(pos) = dims.iter().position(|d| nodes.iter().any(|&n| g.node(n).has_dim(&d.name))) else {
        return leaf(g, nodes, &edges, prio);
    };
    let d = &dims[pos];
    let rest = &dims[pos + 1..];
    let has = |n: usize| g.node(n).has_dim(&d.name);
    let (sccs, comp_of) = ordered_sccs(nodes, &edges);

    let mut label: Vec<usize> = vec![0; sccs.len()];
    let mut groups: BTreeMap<usize, Group> = BTreeMap::new();
    for (ci, comp) in sccs.iter().enumerate() {
        let with_d = comp.iter().filter(|&&n| has(n)).count();
        if with_d != 0 && with_d != comp.len() {
            return Err(ScheduleError::MixedCycle(g.node(comp[0]).name.clone()));
        }
        let banded = with_d > 0;
        // Dim-less nodes may be pinned into a band at its first iteration.
        let mut l = 0;
        for e in edges.iter().filter(|e| comp_of[&e.sink] == ci && comp_of[&e.src] != ci) {
            let pl = label[comp_of[&e.src]];
            l = l.max(if banded && pl % 2 == 0 { pl + 1 } else { pl });
        }
        if banded && l % 2 == 0 {
            l += 1;
        }
        let set: BTreeSet<usize> = comp.iter().copied().collect();
        let allowed: Vec<i64> = [1, -1].into_iter().filter(|&s| shifts(g, &set, &edges, d, s).is_some()).collect();
        if banded && allowed.is_empty() {
            return Err(ScheduleError::Unschedulable(g.node(comp[0]).name.clone()));
        }
        loop {
            if l % 2 == 0 {
                groups.entry(l).or_insert_with(|| Group { members: BTreeSet::new(), signs: vec![] }).members.extend(comp);
                break;
            }
            let grp = groups.entry(l).or_insert_with(|| Group { members: BTreeSet::new(), signs: vec![1, -1] });
            let mut merged = grp.members.clone();
            merged.extend(&set);
            let ok: Vec<i64> = grp
                .signs
                .iter()
                .copied()
                .filter(|s| allowed.contains(s) && shifts(g, &merged, &edges, d, *s).is_some())
                .collect();
            if !ok.is_empty() {
                grp.members = merged;
                grp.signs = ok;
                break;
            }
            l += if banded { 2 } else { 1 };
        }
        label[ci] = l;
    }

    let mut out = Vec::new();
    for (l, grp) in &groups {
        if l % 2 == 0 {
            out.push(level(g, &grp.members, &edges, rest, prio)?);
            continue;
        }
        // Prefer the direction that reads earlier groups a bounded window
        // at a time, so their points can be fetched and freed as it goes.
        let unbounded = |sign| {
            edges
                .iter()
                .filter(|e| grp.members.contains(&e.sink) && !grp.members.contains(&e.src) && has(e.src))
                .filter(|e| delta(g, e, d, sign).is_none())
                .count()
        };
        let sign = match grp.signs.as_slice() {
            [_, _] if unbounded(-1) < unbounded(1) => -1,
            s if s.contains(&1) => 1,
            _ => -1,
        };
        let sh = shifts(g, &grp.members, &edges, d, sign).expect("feasible group");
        let inner: Vec<&Edge> = edges
            .iter()
            .copied()
            .filter(|e| grp.members.contains(&e.src) && grp.members.contains(&e.sink))
            .filter(|e| delta(g, e, d, sign).unwrap() >= sh[&e.sink] - sh[&e.src])
            .collect();
        let parallel = inner.iter().all(|e| delta(g, e, d, 1) == Some(0) && delta(g, e, d, -1) == Some(0))
            && sh.values().all(|&s| s == 0)
            && grp.members.iter().all(|&n| has(n))
            && inner.len() == edges.iter().filter(|e| grp.members.contains(&e.src) && grp.members.contains(&e.sink)).count();
        let mut p = prio.clone();
        for (n, s) in &sh {
            *p.entry(*n).or_insert(0) += s;
        }
        let body = level(g, &grp.members, &inner, rest, &p)?;
        out.push(Tree::Band(Band { dim: d.clone(), sign, shifts: sh, parallel, body: Box::new(body) }));
    }
    Ok(if out.len() == 1 { out.pop().unwrap() } else { Tree::Seq(out) })
}

/// Look-ahead count per node: how many reads of unbounded future data
/// lie on the longest path into it.
fn phases(g: &Pdg, nodes: &BTreeSet<usize>, edges: &[&Edge]) -> BTreeMap<usize, usize> {
    let (sccs, comp_of) = ordered_sccs(nodes, edges);
    let mut ph = vec![0usize; sccs.len()];
    for ci in 0..sccs.len() {
        for e in edges.iter().filter(|e| comp_of[&e.sink] == ci && comp_of[&e.src] != ci) {
            let (u, v) = (g.node(e.src), g.node(e.sink));
            let future = u.domain.iter().any(|d| v.has_dim(&d.name) && delta(g, e, d, 1).is_none());
            ph[ci] = ph[ci].max(ph[comp_of[&e.src]] + future as usize);
        }
    }
    nodes.iter().map(|&n| (n, ph[comp_of[&n]])).collect()
}

/// Schedule every non-memory node of `g`.
pub fn schedule(g: &Pdg) -> Result<Schedule, ScheduleError> {
    let nodes: BTreeSet<usize> = g.nodes.values().filter(|n| !n.kind.is_memory()).map(|n| n.id).collect();
    let edges: Vec<&Edge> = g.edges.iter().filter(|e| nodes.contains(&e.src) && nodes.contains(&e.sink)).collect();
    let tree = level(g, &nodes, &edges, &g.dims, &BTreeMap::new())?;
    Ok(Schedule { tree, phase: phases(g, &nodes, &edges) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::dsl::parse_program;
    use crate::pdg::build;
    use crate::symexpr::parse;

    fn graph(src: &str) -> Pdg {
        build(&parse_program(src).unwrap()).unwrap()
    }

    #[test]
    fn distances_of_common_reads() {
        let cases = [("t-1", 1, Some(-1)), ("t+2", 1, Some(2)), ("t+2", -1, Some(-2)), ("t:T", 1, None), ("t:T", -1, Some(0)), ("0:t+1", 1, Some(0)), ("0:t+1", -1, None), ("t:min(t+3, T)", 1, Some(2)), ("0", 1, Some(0)), ("0", -1, None)];
        for (src, sign, want) in cases {
            let f = parse(src).unwrap();
            let got = match f.as_slice() {
                Some((_, hi)) if sign > 0 => ahead(hi, "t").map(|v| v - 1),
                Some((lo, _)) => behind(lo, "t"),
                None if sign > 0 => ahead(&f, "t"),
                None => behind(&f, "t"),
            };
            assert_eq!(got, want, "{src} sign {sign}");
        }
    }

    #[test]
    fn recurrence_is_one_forward_band() {
        let g = graph("dims t;\n bounds T=4;\n x = const(2.0) over (t);\n rec s over (t) f64;\n s[0] = x[0];\n s[t+1] = s + x[t+1];\n out s;");
        let s = schedule(&g).unwrap();
        let Tree::Band(b) = &s.tree else { panic!("{:?}", s.tree) };
        assert_eq!(b.sign, 1);
        assert!(!b.parallel);
        assert_eq!(s.phase_count(), 1);
    }

    #[test]
    fn look_ahead_splits_phases() {
        let g = graph("dims t;\n bounds T=4;\n rec r over (t) f64;\n r[0] = const(1.0);\n r[t+1] = r * 0.5;\n g = sum(r[t:T]);\n out g;");
        let s = schedule(&g).unwrap();
        assert_eq!(s.phase_count(), 2);
        let bands = s.tree.bands();
        assert_eq!(bands.len(), 2);
    }

    #[test]
    fn bounded_look_ahead_pipelines() {
        let g = graph("dims t;\n bounds T=8;\n r = rand(()) over (t);\n g = sum(r[t:min(t+3, T)]);\n out g;");
        let s = schedule(&g).unwrap();
        let Tree::Band(b) = &s.tree else { panic!("{:?}", s.tree) };
        assert_eq!(b.sign, 1);
        let gid = g.output("g").unwrap();
        assert_eq!(b.shifts[&gid], 2);
    }

    #[test]
    fn independent_points_are_parallel() {
        let g = graph("dims t;\n bounds T=4;\n x = rand(()) over (t);\n y = exp(x);\n out y;");
        let s = schedule(&g).unwrap();
        let Tree::Band(b) = &s.tree else { panic!() };
        assert!(b.parallel);
    }
}
