//! Structural checks on a dependence graph. Never mutates.

use std::collections::BTreeSet;
use std::fmt;

use petgraph::algo::{is_cyclic_directed, tarjan_scc};
use petgraph::graph::DiGraph;

use super::{Edge, Pdg};
use crate::frontend::ops::{infer, OpKind};
use crate::frontend::{Bound, OVERLAP_CHECK_EXTENT};
use crate::symexpr::{Env, LinExpr};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: usize,
    pub msg: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {}: {}", self.node, self.msg)
    }
}

/// Whether `e` reads strictly earlier or strictly later along the first dim
/// where it is not the identity (`t-1`, `0:t`, `t+1`, `t+1:T`).
pub fn edge_progresses(g: &Pdg, e: &Edge) -> bool {
    let src = g.node(e.src);
    let sink = g.node(e.sink);
    for d in &g.dims {
        let Some(k) = src.domain.iter().position(|x| x == d) else { continue };
        if !sink.has_dim(&d.name) {
            continue;
        }
        let c = &e.phi[k];
        if c.as_sym() == Some(d.name.as_str()) {
            continue;
        }
        let offset = |x| LinExpr::from_expr(x).filter(|l: &LinExpr| l.coef(&d.name) == 1 && l.vars().count() == 1).map(|l| l.constant);
        if let Some((lo, hi)) = c.as_slice() {
            return offset(hi).is_some_and(|o| o <= 0) || offset(lo).is_some_and(|o| o > 0);
        }
        return offset(c).is_some_and(|o| o != 0);
    }
    false
}

pub fn validate(g: &Pdg) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |node: usize, msg: String| out.push(Diagnostic { node, msg });
    let bound_names: BTreeSet<&str> = g.bounds.keys().map(|s| s.as_str()).collect();
    for e in &g.edges {
        let (Some(src), Some(sink)) = (g.nodes.get(&e.src), g.nodes.get(&e.sink)) else {
            diag(e.sink, format!("edge references a missing node ({} -> {})", e.src, e.sink));
            continue;
        };
        if e.phi.len() != src.domain.len() {
            diag(e.sink, format!("input {} reads `{}` with {} components, domain has {}", e.iid, src.name, e.phi.len(), src.domain.len()));
        }
        let allowed = |s: &String| sink.has_dim(s) || bound_names.contains(s.as_str());
        for c in e.phi.iter().chain(e.cond.iter()) {
            if let Some(s) = c.free_symbols().iter().find(|s| !allowed(s)) {
                diag(e.sink, format!("input {} uses `{s}` outside the sink domain", e.iid));
            }
        }
    }
    for n in g.nodes.values() {
        let ins = g.in_edges(n.id);
        for (k, e) in ins.iter().enumerate() {
            if e.iid != k {
                diag(n.id, format!("input slots are not contiguous at {k}"));
                break;
            }
        }
        if matches!(n.kind, OpKind::Merge) {
            if ins.is_empty() {
                diag(n.id, "merge without branches".into());
            }
            if let Some(p) = merge_overlap(g, n.id) {
                diag(n.id, format!("branch conditions overlap at {p}"));
            }
        }
        let checked = !matches!(
            n.kind,
            OpKind::GradGather { .. } | OpKind::Dataflow { .. } | OpKind::Memory { .. } | OpKind::Merge | OpKind::Udf { .. }
        );
        if checked {
            let shapes: Vec<_> = ins.iter().map(|e| (g.edge_shape(e), g.node(e.src).dtype)).collect();
            match infer(&n.kind, &shapes) {
                Ok((s, _)) => {
                    let same = s.len() == n.shape.len() && s.iter().zip(&n.shape).all(|(a, b)| a.simplify() == b.simplify());
                    if !same {
                        diag(n.id, format!("shape {} does not match inferred {}", crate::frontend::ops::fmt_shape(&n.shape), crate::frontend::ops::fmt_shape(&s)));
                    }
                }
                Err(e) => diag(n.id, e.to_string()),
            }
        }
    }
    // Cycles must make progress along some dim.
    let mut dg: DiGraph<usize, ()> = DiGraph::new();
    let idx: std::collections::BTreeMap<usize, _> = g.nodes.keys().map(|&n| (n, dg.add_node(n))).collect();
    for e in &g.edges {
        if let (Some(a), Some(b)) = (idx.get(&e.src), idx.get(&e.sink)) {
            if !edge_progresses(g, e) {
                dg.add_edge(*a, *b, ());
            }
        }
    }
    if is_cyclic_directed(&dg) {
        for scc in tarjan_scc(&dg) {
            let self_loop = scc.len() == 1 && dg.contains_edge(scc[0], scc[0]);
            if scc.len() > 1 || self_loop {
                diag(dg[scc[0]], "unschedulable cycle".into());
            }
        }
    }
    out
}

/// First point where two branch conditions of a Merge hold.
fn merge_overlap(g: &Pdg, n: usize) -> Option<String> {
    let node = g.node(n);
    let conds: Vec<_> = g.in_edges(n).iter().map(|e| e.cond.clone()).collect();
    if conds.len() < 2 {
        return None;
    }
    let mut env = Env::new();
    for d in &g.dims {
        let e = match g.bounds.get(&d.bound) {
            Some(Bound::Static(v)) => (*v).min(OVERLAP_CHECK_EXTENT),
            _ => OVERLAP_CHECK_EXTENT,
        };
        env.bind(&d.bound, e);
    }
    let ext: Vec<i64> = node.domain.iter().map(|d| env.get(&d.bound).unwrap_or(1)).collect();
    let total: i64 = ext.iter().product();
    for flat in 0..total {
        let mut r = flat;
        for (k, d) in node.domain.iter().enumerate().rev() {
            env.bind(&d.name, r % ext[k]);
            r /= ext[k];
        }
        let hits = conds.iter().filter(|c| c.as_ref().map(|c| c.eval_bool(&env).unwrap_or(false)).unwrap_or(true)).count();
        if hits > 1 {
            let pt: Vec<String> = node.domain.iter().map(|d| format!("{}={}", d.name, env.get(&d.name).unwrap())).collect();
            return Some(format!("({})", pt.join(", ")));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::dsl::parse_program;
    use crate::frontend::ops::{DType, UnaryOp};
    use crate::pdg::build;
    use crate::symexpr::{Dim, SymExpr};

    #[test]
    fn accepts_progressing_self_loop() {
        let p = parse_program("dims t;\n bounds T=4;\n rec y over (t) f64;\n y[0] = const(1.0);\n y[t+1] = y + 1;\n out y;").unwrap();
        let g = build(&p).unwrap();
        assert!(validate(&g).is_empty(), "{:?}", validate(&g));
    }

    #[test]
    fn accepts_backward_self_loop() {
        let mut g = Pdg::default();
        g.dims = vec![Dim::new("t", "T")];
        g.bounds.insert("T".into(), Bound::Static(4));
        let n = g.add_node("y", OpKind::Unary { op: UnaryOp::Neg, batch: 0 }, g.dims.clone(), vec![], DType::F64);
        g.add_edge(n, 0, n, vec![SymExpr::add(SymExpr::sym("t"), SymExpr::int(1))], None);
        assert!(!validate(&g).iter().any(|x| x.msg == "unschedulable cycle"));
    }

    #[test]
    fn rejects_cycle_without_progress() {
        let mut g = Pdg::default();
        g.dims = vec![Dim::new("t", "T")];
        g.bounds.insert("T".into(), Bound::Static(4));
        let n = g.add_node("y", OpKind::Unary { op: UnaryOp::Neg, batch: 0 }, g.dims.clone(), vec![], DType::F64);
        g.add_linear(n, 0, n);
        let d = validate(&g);
        assert!(d.iter().any(|x| x.msg == "unschedulable cycle"), "{d:?}");
    }

    #[test]
    fn reports_arity() {
        let mut g = Pdg::default();
        g.dims = vec![Dim::new("t", "T")];
        g.bounds.insert("T".into(), Bound::Static(4));
        let a = g.add_node("a", OpKind::Const { value: 1.0, shape: vec![] }, g.dims.clone(), vec![], DType::F64);
        let b = g.add_node("b", OpKind::Identity, g.dims.clone(), vec![], DType::F64);
        g.add_edge(b, 0, a, vec![SymExpr::sym("t"), SymExpr::int(0)], None);
        assert!(validate(&g).iter().any(|x| x.msg.contains("components")));
    }
}
