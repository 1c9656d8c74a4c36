//! Placement of deallocation, offload and fetch operations.
//!
//! Each memory op gets the domain of the bands it lands in and releases or
//! moves the points of its tensor selected by its single input edge. Its
//! shift in a band puts it at the last (or first) iteration that reads the
//! point, found from the inverse of each reader's index.

use std::collections::{BTreeMap, BTreeSet};

use super::{ahead, behind, Tree};
use crate::frontend::ops::{MemOp, OpKind};
use crate::pdg::{extent_product, Edge, Pdg};
use crate::symexpr::{invert, BinOp, Dim, Env, LinExpr, Node, SymExpr};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    After,
    Before,
}

#[derive(Debug, Clone)]
struct Crit {
    node: usize,
    /// The read of the tensor; `None` for the producer itself.
    edge: Option<Edge>,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryOptions {
    /// Tensors at least this large with readers in later top-level groups
    /// are offloaded between uses; `None` disables swapping.
    pub swap_threshold: Option<u64>,
    /// Bound values used to size tensors.
    pub bounds: Env,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryPlan {
    /// Swapped tensors.
    pub managed: Vec<usize>,
    /// Added memory nodes, in creation order.
    pub added: Vec<usize>,
}

/// Wrap the root and every band body in a sequence.
pub fn normalize(t: Tree) -> Tree {
    fn inner(t: Tree) -> Tree {
        match t {
            Tree::Seq(cs) => Tree::Seq(cs.into_iter().map(inner).collect()),
            Tree::Band(mut b) => {
                let body = inner(*b.body);
                b.body = Box::new(match body {
                    Tree::Seq(_) => body,
                    other => Tree::Seq(vec![other]),
                });
                Tree::Band(b)
            }
            leaf => leaf,
        }
    }
    match inner(t) {
        Tree::Seq(cs) => Tree::Seq(cs),
        other => Tree::Seq(vec![other]),
    }
}

fn contains(t: &Tree, n: usize) -> bool {
    match t {
        Tree::Leaf(ns) => ns.contains(&n),
        Tree::Seq(cs) => cs.iter().any(|c| contains(c, n)),
        Tree::Band(b) => contains(&b.body, n),
    }
}

/// Offset from the tensor point's iteration to the last (or first)
/// iteration of `c` that reads it, for a band over `d`.
fn offset(g: &Pdg, x: usize, c: &Crit, d: &Dim, sign: i64, side: Side) -> Option<i64> {
    let Some(e) = &c.edge else { return Some(0) };
    let v = g.node(c.node);
    let xk = g.node(x).domain.iter().position(|y| y == d)?;
    if !v.has_dim(&d.name) {
        // Pinned reader at its band's first iteration reads constant points.
        if sign < 0 {
            return None;
        }
        let comp = &e.phi[xk];
        let (lo, hi) = match comp.as_slice() {
            Some((lo, hi)) => (lo.as_int()?, hi.as_int()? - 1),
            None => (comp.as_int()?, comp.as_int()?),
        };
        return Some(match side {
            Side::After => -lo,
            Side::Before => -hi,
        });
    }
    let inv = invert(&e.phi, &v.domain, &g.node(x).domain).ok()?;
    let vk = v.domain.iter().position(|y| y == d)?;
    let f = &inv.index[vk];
    let (lo, hi) = match f.as_slice() {
        Some((lo, hi)) => (lo.clone(), SymExpr::offset(hi.clone(), -1)),
        None => (f.clone(), f.clone()),
    };
    match (side, sign > 0) {
        (Side::After, true) => ahead(&hi, &d.name),
        (Side::After, false) => behind(&lo, &d.name),
        (Side::Before, true) => behind(&lo, &d.name).map(|v| -v),
        (Side::Before, false) => ahead(&hi, &d.name).map(|v| -v),
    }
}

/// Whether `c` selects `[a·d + lo, min(a·d + hi, n))` with `hi - lo <= a`,
/// so distinct iterations of `d` touch disjoint points.
fn disjoint_blocks(c: &SymExpr, d: &str) -> bool {
    let Some((lo, hi)) = c.as_slice() else { return false };
    let hi = match hi.node() {
        Node::Bin(BinOp::Min, a, b) => {
            if a.mentions(d) {
                a.clone()
            } else {
                b.clone()
            }
        }
        _ => hi.clone(),
    };
    let (Some(lo), Some(hi)) = (LinExpr::from_expr(lo), LinExpr::from_expr(&hi)) else { return false };
    let a = lo.coef(d);
    let w = hi.sub(&lo);
    a > 0 && w.is_constant() && w.constant <= a
}

/// Components of the block of `x` every reader in `crit` takes at one
/// iteration of band `d`, keyed by the axis of `x`.
fn borrowed(g: &Pdg, x: usize, crit: &[Crit], d: &Dim, landed: &[Dim]) -> Option<BTreeMap<usize, SymExpr>> {
    let xn = g.node(x);
    let dims: BTreeSet<&str> = g.dims.iter().map(|d| d.name.as_str()).collect();
    let mut out: Option<BTreeMap<usize, SymExpr>> = None;
    for c in crit {
        let e = c.edge.as_ref()?;
        let mut comps = BTreeMap::new();
        for (k, comp) in e.phi.iter().enumerate() {
            if landed.contains(&xn.domain[k]) {
                continue;
            }
            let free = comp.free_symbols();
            if free.iter().any(|s| dims.contains(s.as_str()) && *s != d.name && !landed.iter().any(|l| &l.name == s)) {
                return None;
            }
            if comp.mentions(&d.name) {
                if !disjoint_blocks(comp, &d.name) {
                    return None;
                }
                comps.insert(k, comp.clone());
            }
        }
        if comps.is_empty() || out.as_ref().is_some_and(|o| *o != comps) {
            return None;
        }
        out = Some(comps);
    }
    out
}

/// Insert `m` into `t` after (or before) every instance in `crit`,
/// recording in `dims` the bands it lands in and in `blocks` the reader
/// blocks it follows in bands over dims `x` lacks.
#[allow(clippy::too_many_arguments)]
fn place(g: &Pdg, t: &mut Tree, x: usize, m: usize, crit: Vec<Crit>, side: Side, dims: &mut Vec<Dim>, blocks: &mut BTreeMap<usize, SymExpr>) {
    let Tree::Seq(cs) = t else { unreachable!("normalized tree") };
    let holding: Vec<usize> = (0..cs.len()).filter(|&i| crit.iter().any(|c| contains(&cs[i], c.node))).collect();
    let Some(&i) = (match side {
        Side::After => holding.last(),
        Side::Before => holding.first(),
    }) else {
        cs.insert(if side == Side::After { cs.len() } else { 0 }, Tree::Leaf(vec![m]));
        return;
    };
    let crit: Vec<Crit> = crit.into_iter().filter(|c| contains(&cs[i], c.node)).collect();
    let sibling = if side == Side::After { i + 1 } else { i };
    match &mut cs[i] {
        Tree::Leaf(ns) => {
            let pos = match side {
                Side::After => ns.iter().rposition(|n| crit.iter().any(|c| c.node == *n)).unwrap() + 1,
                Side::Before => ns.iter().position(|n| crit.iter().any(|c| c.node == *n)).unwrap(),
            };
            ns.insert(pos, m);
        }
        Tree::Seq(_) => place(g, &mut cs[i], x, m, crit, side, dims, blocks),
        Tree::Band(b) => {
            let inside = g.node(x).has_dim(&b.dim.name);
            let offs: Option<Vec<i64>> = if inside {
                crit.iter().map(|c| Some(b.shifts[&c.node] + offset(g, x, c, &b.dim, b.sign, side)?)).collect()
            } else {
                None
            };
            match offs {
                Some(offs) => {
                    let s = match side {
                        Side::After => *offs.iter().max().unwrap(),
                        Side::Before => *offs.iter().min().unwrap(),
                    };
                    let crit: Vec<Crit> = crit.into_iter().zip(&offs).filter(|(_, o)| **o == s).map(|(c, _)| c).collect();
                    b.shifts.insert(m, s);
                    dims.push(b.dim.clone());
                    place(g, &mut b.body, x, m, crit, side, dims, blocks);
                }
                None => match borrowed(g, x, &crit, &b.dim, dims) {
                    Some(comps) if !inside => {
                        let shifts: Vec<i64> = crit.iter().map(|c| b.shifts[&c.node]).collect();
                        let s = match side {
                            Side::After => *shifts.iter().max().unwrap(),
                            Side::Before => *shifts.iter().min().unwrap(),
                        };
                        let crit: Vec<Crit> = crit.into_iter().zip(&shifts).filter(|(_, o)| **o == s).map(|(c, _)| c).collect();
                        b.shifts.insert(m, s);
                        dims.push(b.dim.clone());
                        blocks.extend(comps);
                        place(g, &mut b.body, x, m, crit, side, dims, blocks);
                    }
                    _ => cs.insert(sibling, Tree::Leaf(vec![m])),
                },
            }
        }
    }
}

fn add_mem(g: &mut Pdg, tree: &mut Tree, x: usize, op: MemOp, stage: usize, crit: Vec<Crit>, side: Side) -> usize {
    let xn = g.node(x).clone();
    let prefix = match op {
        MemOp::Dealloc => "dealloc".to_string(),
        MemOp::Offload => format!("offload{stage}"),
        MemOp::Fetch => format!("fetch{stage}"),
    };
    let m = g.add_node(&format!("{prefix}_{}", xn.name), OpKind::Memory { op, tensor: x, stage }, vec![], xn.shape.clone(), xn.dtype);
    let mut dims = Vec::new();
    let mut blocks = BTreeMap::new();
    place(g, tree, x, m, crit, side, &mut dims, &mut blocks);
    let phi: Vec<SymExpr> = xn
        .domain
        .iter()
        .enumerate()
        .map(|(k, d)| match blocks.get(&k) {
            Some(c) => c.clone(),
            None if dims.contains(d) => SymExpr::sym(&d.name),
            None => SymExpr::slice(SymExpr::int(0), SymExpr::sym(&d.bound)),
        })
        .collect();
    let mut domain: Vec<Dim> = xn.domain.iter().filter(|d| dims.contains(d)).cloned().collect();
    domain.extend(dims.iter().filter(|d| !xn.domain.contains(d)).cloned());
    g.nodes.get_mut(&m).unwrap().domain = domain;
    g.add_edge(m, 0, x, phi, None);
    m
}

/// Total bytes of every point of `n`.
pub fn tensor_bytes(g: &Pdg, n: usize, bounds: &Env) -> u64 {
    let node = g.node(n);
    let pts: u64 = node.domain.iter().map(|d| bounds.get(&d.bound).unwrap_or(1).max(0) as u64).product();
    pts * extent_product(&node.shape, bounds, &node.domain) * node.dtype.size_bytes()
}

/// Add memory ops for every non-output tensor of `g` into `tree`, which
/// must already schedule every compute node.
pub fn augment(g: &mut Pdg, tree: Tree, opts: &MemoryOptions) -> (Tree, MemoryPlan) {
    let mut tree = normalize(tree);
    let mut plan = MemoryPlan::default();
    let top_of = |tree: &Tree, n: usize| tree.top().iter().position(|c| contains(c, n));
    let compute: Vec<usize> = g.nodes.values().filter(|n| !n.kind.is_memory()).map(|n| n.id).collect();
    for x in compute {
        if g.is_output(x) {
            continue;
        }
        let readers: Vec<Crit> = g
            .out_edges(x)
            .into_iter()
            .filter(|e| !g.node(e.sink).kind.is_memory())
            .map(|e| Crit { node: e.sink, edge: Some(e.clone()) })
            .collect();
        let me = Crit { node: x, edge: None };
        let home = top_of(&tree, x).unwrap();
        let later: BTreeSet<usize> = readers.iter().filter_map(|c| top_of(&tree, c.node)).filter(|&i| i > home).collect();
        let big = opts.swap_threshold.is_some_and(|th| !g.node(x).domain.is_empty() && tensor_bytes(g, x, &opts.bounds) >= th);
        if !big || later.is_empty() {
            let mut crit = readers.clone();
            crit.push(me);
            let m = add_mem(g, &mut tree, x, MemOp::Dealloc, 0, crit, Side::After);
            plan.added.push(m);
            continue;
        }
        plan.managed.push(x);
        let in_group = |tree: &Tree, i: usize| -> Vec<Crit> { readers.iter().filter(|c| top_of(tree, c.node) == Some(i)).cloned().collect() };
        let mut crit = in_group(&tree, home);
        crit.push(me);
        let m = add_mem(g, &mut tree, x, MemOp::Offload, 0, crit, Side::After);
        plan.added.push(m);
        // Group indices shift as memory-only groups get inserted, so track
        // each group by one of its readers.
        let anchors: BTreeMap<usize, usize> = later.iter().map(|&i| (i, in_group(&tree, i)[0].node)).collect();
        let last = *later.iter().last().unwrap();
        for (k, (&i, &anchor)) in anchors.iter().enumerate() {
            let stage = k + 1;
            let gi = top_of(&tree, anchor).unwrap();
            let crit = in_group(&tree, gi);
            let m = add_mem(g, &mut tree, x, MemOp::Fetch, stage, crit, Side::Before);
            plan.added.push(m);
            let gi = top_of(&tree, anchor).unwrap();
            let op = if i == last { MemOp::Dealloc } else { MemOp::Offload };
            let crit = in_group(&tree, gi);
            let m = add_mem(g, &mut tree, x, op, stage, crit, Side::After);
            plan.added.push(m);
        }
    }
    (tree, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::dsl::parse_program;
    use crate::pdg::build;
    use crate::polysched::schedule;
    use crate::polysched::verify::verify_schedule;

    fn check(src: &str, swap: Option<u64>) -> (Pdg, Tree, MemoryPlan) {
        let mut g = build(&parse_program(src).unwrap()).unwrap();
        let s = schedule(&g).unwrap();
        let opts = MemoryOptions { swap_threshold: swap, bounds: Env::new().with("T", 8) };
        let (tree, plan) = augment(&mut g, s.tree, &opts);
        for t in [1, 2, 5, 8] {
            let v = verify_schedule(&g, &tree, &Env::new().with("T", t));
            assert!(v.is_empty(), "T={t}: {v:?}\n{}", crate::polysched::dump::dump_tree(&g, &tree));
        }
        (g, tree, plan)
    }

    const WINDOW: &str = "dims t;\n bounds T=8;\n rec r over (t) f64;\n r[0] = const(1.0);\n r[t+1] = r * 0.5;\n g = sum(r[t:min(t+3, T)]);\n h = g + r[t];\n out h;";
    const ANTI: &str = "dims t;\n bounds T=8;\n rec r over (t) shape (4) f64;\n r[0] = const(1.0, (4));\n r[t+1] = r * 0.5;\n g = sum(r[t:T]);\n l = sum(sum(g[0:T]));\n out l;";

    #[test]
    fn deallocs_verify() {
        let (g, tree, plan) = check(WINDOW, None);
        assert!(plan.managed.is_empty());
        assert!(plan.added.iter().all(|m| matches!(g.node(*m).kind, OpKind::Memory { op: MemOp::Dealloc, .. })));
        let r = g.nodes.values().find(|n| n.name == "r").unwrap().id;
        let d = plan.added.iter().find(|m| matches!(g.node(**m).kind, OpKind::Memory { tensor, .. } if tensor == r)).unwrap();
        assert_eq!(g.node(*d).domain.len(), 1, "{}", crate::polysched::dump::dump_tree(&g, &tree));
    }

    #[test]
    fn swapping_verifies() {
        let (g, _, plan) = check(ANTI, Some(1));
        assert!(!plan.managed.is_empty());
        let kinds: Vec<String> = plan.added.iter().map(|m| g.node(*m).name.clone()).collect();
        assert!(kinds.iter().any(|k| k.starts_with("fetch1_")), "{kinds:?}");
    }

    #[test]
    fn block_readers_fetch_one_block_at_a_time() {
        let src = "dims t, k;\n bounds T=8, K=4;\n r = rand((3)) over (t);\n g = dsum(r[t:T], 0.9);\n l = sum(sum(g[k*2:min(k*2+2, T)]));\n out l;";
        let mut g = build(&parse_program(src).unwrap()).unwrap();
        let s = schedule(&g).unwrap();
        let opts = MemoryOptions { swap_threshold: Some(1), bounds: Env::new().with("T", 8).with("K", 4) };
        let (tree, plan) = augment(&mut g, s.tree, &opts);
        for t in [1, 2, 5, 8] {
            let v = verify_schedule(&g, &tree, &Env::new().with("T", t).with("K", 4));
            assert!(v.is_empty(), "T={t}: {v:?}\n{}", crate::polysched::dump::dump_tree(&g, &tree));
        }
        let gid = g.nodes.values().find(|n| n.name == "g").unwrap().id;
        let fetch = plan.added.iter().map(|m| g.node(*m)).find(|m| matches!(m.kind, OpKind::Memory { op: MemOp::Fetch, tensor, .. } if tensor == gid)).unwrap();
        assert_eq!(fetch.domain.iter().map(|d| d.name.as_str()).collect::<Vec<_>>(), ["k"]);
        assert!(disjoint_blocks(&g.in_edges(fetch.id)[0].phi[0], "k"));
    }

    #[test]
    fn overlapping_blocks_are_not_disjoint() {
        let c = crate::symexpr::parse("k*2:min(k*2+3, T)").unwrap();
        assert!(!disjoint_blocks(&c, "k"));
        let c = crate::symexpr::parse("k*2:min(k*2+2, T)").unwrap();
        assert!(disjoint_blocks(&c, "k"));
    }

    #[test]
    fn no_swap_below_threshold() {
        let (_, _, plan) = check(ANTI, Some(u64::MAX));
        assert!(plan.managed.is_empty());
    }
}
