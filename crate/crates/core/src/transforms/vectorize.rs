//! Turning a symbolic dimension into a leading tensor axis.
//!
//! A vectorized node drops `d` from its domain and computes all of its
//! points at once, with the points stacked on a new leading axis of extent
//! `D`. Readers that stay per-point go through an `IndexSelect` that picks
//! their point back out.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use thiserror::Error;

use crate::frontend::ops::OpKind;
use crate::frontend::Bound;
use crate::pdg::{Edge, Pdg};
use crate::runtime::access::{resolve, Read};
use crate::symexpr::{BinOp, Dim, Env, Node, SymExpr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorizeError {
    #[error("unknown dim `{0}`")]
    UnknownDim(String),
    #[error("dim `{0}` has a dynamic bound")]
    Dynamic(String),
    #[error("`{0}` is not in a vectorizable position")]
    Plan(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VecPlan {
    pub dim: Dim,
    pub nodes: BTreeSet<usize>,
    /// Strongly connected groups whose cycles only read `d` at `d` or at
    /// constants. Each is wholly in `nodes` or wholly out.
    pub classes: Vec<BTreeSet<usize>>,
}

/// Every symbolic parameter of an op.
pub(crate) fn kind_exprs(kind: &OpKind) -> Vec<&SymExpr> {
    match kind {
        OpKind::Const { shape, .. } | OpKind::Udf { shape, .. } => shape.iter().collect(),
        OpKind::Reshape { shape, .. } | OpKind::Expand { shape, .. } => shape.iter().collect(),
        OpKind::Slice { start, end, .. } => vec![start, end],
        OpKind::IndexSelect { index, .. } => vec![index],
        _ => Vec::new(),
    }
}

fn supported(kind: &OpKind) -> bool {
    matches!(
        kind,
        OpKind::Const { .. }
            | OpKind::Unary { .. }
            | OpKind::Pow { .. }
            | OpKind::Binary { .. }
            | OpKind::AddN { .. }
            | OpKind::Sum { .. }
            | OpKind::Max { .. }
            | OpKind::CumSum { .. }
            | OpKind::DSum { .. }
            | OpKind::DScan { .. }
            | OpKind::Matmul { .. }
            | OpKind::Reshape { .. }
            | OpKind::Permute { .. }
            | OpKind::Squeeze { .. }
            | OpKind::Unsqueeze { .. }
            | OpKind::Expand { .. }
            | OpKind::Slice { .. }
            | OpKind::IndexSelect { .. }
            | OpKind::Stack { .. }
            | OpKind::Concat { .. }
            | OpKind::Conv { .. }
            | OpKind::Identity
    )
}

fn position(g: &Pdg, n: usize, d: &str) -> Option<usize> {
    g.node(n).domain.iter().position(|x| x.name == d)
}

/// Whether a vectorized sink can take this input: the read must not slice
/// and must reach `d` of the source only at `d` itself.
fn edge_ok(g: &Pdg, e: &Edge, d: &str) -> bool {
    if e.cond.is_some() || e.has_slice() {
        return false;
    }
    let k = position(g, e.src, d);
    e.phi.iter().enumerate().all(|(i, c)| if Some(i) == k { c.as_sym() == Some(d) } else { !c.mentions(d) })
}

/// Whether some branch of a one-dim Merge is active and in bounds at every
/// point, checked over bounds up to 16.
fn merge_covers(g: &Pdg, n: usize) -> bool {
    let node = g.node(n);
    let [d] = node.domain.as_slice() else { return false };
    let ins = g.in_edges(n);
    (1..=16).all(|ext| {
        (0..ext).all(|p| {
            let mut env = Env::new().with(&d.bound, ext).with(&d.name, p);
            for other in g.bounds.keys() {
                if env.get(other).is_none() {
                    env.bind(other, ext);
                }
            }
            for e in &ins {
                match resolve(g, e, &env) {
                    Ok(Read::Inactive) => continue,
                    Ok(Read::Points(_)) => return true,
                    _ => return false,
                }
            }
            false
        })
    })
}

/// Nodes whose every point is defined: each read stays inside its source
/// and every source is itself total. Recurrences count as total when their
/// base case is, so this starts from all nodes and removes failures until
/// nothing changes.
pub(crate) fn totality(g: &Pdg) -> BTreeSet<usize> {
    let local = |n: usize| -> bool {
        let node = g.node(n);
        if node.kind == OpKind::Merge {
            return merge_covers(g, n);
        }
        g.in_edges(n).iter().all(|e| {
            let src = g.node(e.src);
            e.cond.is_none()
                && e.phi.iter().zip(&src.domain).all(|(c, sd)| {
                    let own = |x: &SymExpr| x.as_sym() == Some(sd.name.as_str()) && node.has_dim(&sd.name);
                    let end = |x: &SymExpr| match x.node() {
                        Node::Bin(BinOp::Min, a, b) => [a, b].iter().any(|y| y.as_sym() == Some(sd.bound.as_str())),
                        _ => x.as_sym() == Some(sd.bound.as_str()),
                    };
                    match c.as_slice() {
                        Some((lo, hi)) => (lo.as_int() == Some(0) || own(lo)) && end(hi),
                        None => own(c) || c.as_int() == Some(0),
                    }
                })
        })
    };
    let mut set: BTreeSet<usize> = g.ids().into_iter().filter(|&n| local(n)).collect();
    loop {
        let next: BTreeSet<usize> = set.iter().copied().filter(|&n| g.in_edges(n).iter().all(|e| set.contains(&e.src))).collect();
        if next == set {
            return set;
        }
        set = next;
    }
}

fn node_ok(g: &Pdg, n: usize, d: &str, total: &BTreeSet<usize>) -> bool {
    let node = g.node(n);
    node.has_dim(d)
        && supported(&node.kind)
        && !node.shape.iter().any(|s| s.mentions(d))
        && !kind_exprs(&node.kind).iter().any(|s| s.mentions(d))
        && g.in_edges(n).iter().all(|e| edge_ok(g, e, d) && (!g.node(e.src).has_dim(d) || total.contains(&e.src)))
}

fn dim_symbols(g: &Pdg) -> BTreeSet<String> {
    g.dims.iter().map(|d| d.name.clone()).collect()
}

pub fn find_vectorizable(g: &Pdg, d: &Dim) -> VecPlan {
    let dims = dim_symbols(g);
    let total = totality(g);
    let mut nodes: BTreeSet<usize> = g.ids().into_iter().filter(|&n| node_ok(g, n, &d.name, &total)).collect();
    let mut graph = DiGraph::<usize, ()>::new();
    let idx: BTreeMap<usize, _> = g.ids().into_iter().map(|n| (n, graph.add_node(n))).collect();
    for e in &g.edges {
        graph.add_edge(idx[&e.src], idx[&e.sink], ());
    }
    let mut classes = Vec::new();
    let mut looped = BTreeSet::new();
    for scc in tarjan_scc(&graph) {
        let members: BTreeSet<usize> = scc.iter().map(|i| graph[*i]).collect();
        let cyclic = members.len() > 1 || g.edges.iter().any(|e| e.src == e.sink && members.contains(&e.src));
        if !cyclic {
            continue;
        }
        let trivial = g.edges.iter().filter(|e| members.contains(&e.src) && members.contains(&e.sink)).all(|e| match position(g, e.src, &d.name) {
            Some(k) => {
                let c = &e.phi[k];
                c.as_sym() == Some(d.name.as_str()) || c.free_symbols().is_disjoint(&dims)
            }
            None => true,
        });
        if trivial && members.iter().all(|m| nodes.contains(m)) {
            classes.push(members);
        } else {
            looped.extend(members);
        }
    }
    // Readers of a recurrence along `d` stay per point so they can stream
    // with it instead of waiting for every step.
    let mut changed = true;
    while changed {
        changed = false;
        for e in &g.edges {
            if looped.contains(&e.src) && g.node(e.sink).has_dim(&d.name) && looped.insert(e.sink) {
                changed = true;
            }
        }
    }
    nodes.retain(|n| !looped.contains(n));
    classes.retain(|c| c.iter().all(|n| nodes.contains(n)));
    VecPlan { dim: d.clone(), nodes, classes }
}

fn vectorized_kind(kind: &OpKind, extent: &SymExpr) -> OpKind {
    let mut k = kind.clone();
    match &mut k {
        OpKind::Const { shape, .. } => shape.insert(0, extent.clone()),
        OpKind::Unary { batch, .. }
        | OpKind::Pow { batch, .. }
        | OpKind::Binary { batch, .. }
        | OpKind::AddN { batch }
        | OpKind::Matmul { batch }
        | OpKind::Reshape { batch, .. }
        | OpKind::Expand { batch, .. } => *batch += 1,
        OpKind::Sum { dim }
        | OpKind::Max { dim }
        | OpKind::CumSum { dim, .. }
        | OpKind::DSum { dim, .. }
        | OpKind::DScan { dim, .. }
        | OpKind::Squeeze { dim }
        | OpKind::Unsqueeze { dim }
        | OpKind::Slice { dim, .. }
        | OpKind::IndexSelect { dim, .. }
        | OpKind::Stack { dim }
        | OpKind::Concat { dim }
        | OpKind::Conv { dim, .. } => *dim += 1,
        OpKind::Permute { perm } => {
            *perm = std::iter::once(0).chain(perm.iter().map(|p| p + 1)).collect();
        }
        _ => {}
    }
    k
}

/// Rewrite the nodes of `plan` to compute every point of `plan.dim` at once.
pub fn vectorize(g: &mut Pdg, plan: &VecPlan) -> Result<(), VectorizeError> {
    let d = &plan.dim;
    match g.bounds.get(&d.bound) {
        None if !g.dims.contains(d) => return Err(VectorizeError::UnknownDim(d.name.clone())),
        Some(Bound::Dynamic { .. }) => return Err(VectorizeError::Dynamic(d.name.clone())),
        _ => {}
    }
    let total = totality(g);
    if let Some(&n) = plan.nodes.iter().find(|&&n| !node_ok(g, n, &d.name, &total)) {
        return Err(VectorizeError::Plan(g.node(n).name.clone()));
    }
    let extent = SymExpr::sym(&d.bound);
    let vec = &plan.nodes;
    let old: BTreeMap<usize, crate::pdg::Node> = vec.iter().map(|&n| (n, g.node(n).clone())).collect();
    // Per-point views of vectorized nodes, for readers left behind.
    let mut views: BTreeMap<usize, usize> = BTreeMap::new();
    let needs_view: BTreeSet<usize> = g
        .edges
        .iter()
        .filter(|e| vec.contains(&e.src) && !vec.contains(&e.sink))
        .map(|e| e.src)
        .chain(g.outputs.iter().map(|(_, o)| *o).filter(|o| vec.contains(o)))
        .collect();
    for &n in &needs_view {
        let node = &old[&n];
        let v = g.add_node(&format!("{}@{}", node.name, d.name), OpKind::IndexSelect { dim: 0, index: SymExpr::sym(&d.name) }, node.domain.clone(), node.shape.clone(), node.dtype);
        views.insert(n, v);
    }
    let mut expands: BTreeMap<usize, usize> = BTreeMap::new();
    let edges = std::mem::take(&mut g.edges);
    let mut out = Vec::with_capacity(edges.len());
    for mut e in edges {
        let (sv, kv) = (vec.contains(&e.src), vec.contains(&e.sink));
        match (sv, kv) {
            (true, true) => {
                let k = position(g, e.src, &d.name).unwrap();
                e.phi.remove(k);
            }
            (true, false) => e.src = views[&e.src],
            (false, true) => match position(g, e.src, &d.name) {
                Some(k) => e.phi[k] = SymExpr::slice(SymExpr::int(0), extent.clone()),
                None => {
                    let src = g.node(e.src).clone();
                    let x = *expands.entry(e.src).or_insert_with(|| {
                        let mut shape = vec![extent.clone()];
                        shape.extend(src.shape.iter().cloned());
                        let kind = OpKind::Expand { shape: shape.clone(), batch: 0 };
                        let x = g.add_node(&format!("{}^{}", src.name, d.name), kind, src.domain.clone(), shape, src.dtype);
                        out.push(Edge { sink: x, iid: 0, src: e.src, phi: src.identity(), cond: None });
                        x
                    });
                    e.src = x;
                }
            },
            (false, false) => {}
        }
        out.push(e);
    }
    for (&n, &v) in &views {
        let mut phi = old[&n].identity();
        phi.remove(position(g, n, &d.name).unwrap());
        out.push(Edge { sink: v, iid: 0, src: n, phi, cond: None });
    }
    g.edges = out;
    for (_, o) in &mut g.outputs {
        if let Some(v) = views.get(o) {
            *o = *v;
        }
    }
    for &n in vec {
        let node = g.nodes.get_mut(&n).unwrap();
        node.domain.retain(|x| x != d);
        node.shape.insert(0, extent.clone());
        node.kind = vectorized_kind(&node.kind, &extent);
    }
    Ok(())
}

/// Vectorize every dim that has a non-dynamic bound, innermost first.
/// Returns the number of nodes vectorized per dim.
pub fn vectorize_all(g: &mut Pdg) -> Vec<(String, usize)> {
    let mut done = Vec::new();
    for d in g.dims.clone().iter().rev() {
        if matches!(g.bounds.get(&d.bound), Some(Bound::Dynamic { .. })) {
            continue;
        }
        let plan = find_vectorizable(g, d);
        if plan.nodes.is_empty() {
            continue;
        }
        vectorize(g, &plan).expect("plan checked by find_vectorizable");
        done.push((d.name.clone(), plan.nodes.len()));
    }
    done
}
