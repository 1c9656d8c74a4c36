//! Replacing per-point scans and windows with whole-axis ops.
//!
//! Recognized forms, each over a dim `d` with bound `D` whose summed input
//! does not depend on any recurrence:
//!
//! ```text
//! s[0] = y[0]; s[d+1] = s + y[d+1]        -> cumsum(y[0:D])[d]
//!   same, with s only read at [D-1]       -> sum(y[0:D])
//! sum(y[d:D])                             -> rcumsum(y[0:D])[d]
//! dsum(y[d:D], g)                         -> rdscan(y[0:D], g)[d]
//! sum(y[d:min(d+n, D)]), dsum(.., g)      -> conv(y[0:D], w)[d]
//! ```

use std::collections::BTreeSet;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use super::vectorize::totality;
use crate::frontend::ops::{BinaryOp, OpKind};
use crate::frontend::Bound;
use crate::pdg::{Edge, Pdg};
use crate::symexpr::{BinOp, Dim, Env, Node, SymExpr};

/// Nodes that lie on a cycle or read from one.
fn carried(g: &Pdg) -> BTreeSet<usize> {
    let mut graph = DiGraph::<usize, ()>::new();
    let idx: std::collections::BTreeMap<usize, _> = g.ids().into_iter().map(|n| (n, graph.add_node(n))).collect();
    for e in &g.edges {
        graph.add_edge(idx[&e.src], idx[&e.sink], ());
    }
    let mut out = BTreeSet::new();
    for scc in tarjan_scc(&graph) {
        let members: Vec<usize> = scc.iter().map(|i| graph[*i]).collect();
        if members.len() > 1 || g.edges.iter().any(|e| e.src == e.sink && e.src == members[0]) {
            out.extend(members);
        }
    }
    let mut changed = true;
    while changed {
        changed = false;
        for e in &g.edges {
            if out.contains(&e.src) && out.insert(e.sink) {
                changed = true;
            }
        }
    }
    out
}

/// Follow reads through plain `Identity` nodes back to the tensor that
/// holds the data, composing the index on the way.
fn through(g: &Pdg, mut src: usize, mut phi: Vec<SymExpr>) -> (usize, Vec<SymExpr>) {
    loop {
        let node = g.node(src);
        let ins = g.in_edges(src);
        if node.kind != OpKind::Identity || ins.len() != 1 || ins[0].cond.is_some() || phi.iter().any(|c| c.is_slice()) {
            return (src, phi);
        }
        let dims: Vec<String> = node.domain.iter().map(|d| d.name.clone()).collect();
        let at = phi.clone();
        phi = ins[0].phi.iter().map(|c| c.substitute(&|s| dims.iter().position(|x| x == s).map(|i| at[i].clone())).simplify()).collect();
        src = ins[0].src;
    }
}

/// `phi` is the identity on every dim but `k`.
fn identity_except(phi: &[SymExpr], domain: &[Dim], k: usize) -> bool {
    phi.len() == domain.len() && phi.iter().zip(domain).enumerate().all(|(i, (c, d))| i == k || c.as_sym() == Some(d.name.as_str()))
}

/// `e - d` as a constant.
fn shift(e: &SymExpr, d: &str) -> Option<i64> {
    SymExpr::sub(e.clone(), SymExpr::sym(d)).simplify().as_int()
}

fn holds_only_at_zero(c: &Option<SymExpr>, g: &Pdg, d: &Dim, zero: bool) -> bool {
    let Some(c) = c else { return false };
    (0..16).all(|p| {
        let mut env = Env::new().with(&d.name, p);
        for b in g.bounds.keys() {
            env.bind(b, 16);
        }
        c.eval_bool(&env).ok() == Some((p == 0) == zero)
    })
}

/// What a lifted op may read whole: defined everywhere, not fed by a
/// recurrence, and over a dim whose extent is known before it runs.
struct Inputs {
    carried: BTreeSet<usize>,
    total: BTreeSet<usize>,
}

impl Inputs {
    fn usable(&self, g: &Pdg, y: usize, d: &Dim) -> bool {
        !self.carried.contains(&y) && self.total.contains(&y) && !matches!(g.bounds.get(&d.bound), Some(Bound::Dynamic { .. }))
    }
}

struct Scan {
    target: usize,
    input: usize,
    k: usize,
    kind: OpKind,
    /// Readers of `target`, when they all read only its last point.
    final_only: Option<Vec<usize>>,
}

fn match_prefix(g: &Pdg, s: usize, ok: &Inputs) -> Option<Scan> {
    let node = g.node(s);
    let ins = g.in_edges(s);
    if node.kind != OpKind::Merge || ins.len() != 2 {
        return None;
    }
    let (e0, e1) = (ins[0], ins[1]);
    let k = (0..node.domain.len()).find(|&k| shift(&e1.phi[k], &node.domain[k].name) == Some(-1))?;
    let d = &node.domain[k];
    if !identity_except(&e1.phi, &node.domain, k) || !holds_only_at_zero(&e0.cond, g, d, true) || !holds_only_at_zero(&e1.cond, g, d, false) {
        return None;
    }
    let a = g.node(e1.src);
    let is_add = matches!(a.kind, OpKind::Binary { op: BinaryOp::Add, batch: 0 } | OpKind::AddN { batch: 0 });
    let a_ins = g.in_edges(a.id);
    if !is_add || a.domain != node.domain || a_ins.len() != 2 || a_ins.iter().any(|e| e.cond.is_some()) {
        return None;
    }
    let rec = a_ins.iter().position(|e| e.src == s && e.phi == node.identity())?;
    let (y, step) = through(g, a_ins[1 - rec].src, a_ins[1 - rec].phi.clone());
    let (y0, base) = through(g, e0.src, e0.phi.clone());
    let yn = g.node(y);
    if y != y0 || yn.domain != node.domain || yn.shape != node.shape || !ok.usable(g, y, d) {
        return None;
    }
    if !identity_except(&step, &node.domain, k) || shift(&step[k], &d.name) != Some(1) {
        return None;
    }
    // The base case may sit in a node over the other dims only.
    let base_ok = base.len() == node.domain.len() && base[k].as_int() == Some(0) && identity_except(&base, &node.domain, k);
    if !base_ok {
        return None;
    }
    let last = SymExpr::offset(SymExpr::sym(&d.bound), -1).simplify();
    let readers: Vec<&Edge> = g.out_edges(s).into_iter().filter(|e| e.sink != a.id).collect();
    let final_only = (!g.is_output(s) && readers.iter().all(|e| e.cond.is_none() && e.phi[k].simplify() == last && identity_except(&e.phi, &node.domain, k)))
        .then(|| readers.iter().map(|e| e.sink).collect());
    Some(Scan { target: s, input: y, k, kind: OpKind::CumSum { dim: 0, reverse: false }, final_only })
}

fn match_window(g: &Pdg, w: usize, ok: &Inputs) -> Option<Scan> {
    let node = g.node(w);
    let gamma = match node.kind {
        OpKind::Sum { dim: 0 } => None,
        OpKind::DSum { gamma, dim: 0 } => Some(gamma),
        _ => return None,
    };
    let ins = g.in_edges(w);
    let [e] = ins.as_slice() else { return None };
    let y = g.node(e.src);
    if e.cond.is_some() || y.domain != node.domain || y.shape.iter().any(|s| node.domain.iter().any(|d| s.mentions(&d.name))) {
        return None;
    }
    let k = e.phi.iter().position(|c| c.is_slice())?;
    let d = &node.domain[k];
    if !ok.usable(g, y.id, d) {
        return None;
    }
    let (lo, hi) = e.phi[k].as_slice()?;
    if !identity_except(&e.phi, &node.domain, k) || lo.as_sym() != Some(d.name.as_str()) {
        return None;
    }
    let width = match hi.node() {
        _ if hi.as_sym() == Some(d.bound.as_str()) => None,
        Node::Bin(BinOp::Min, a, b) => {
            let (n, bound) = if b.as_sym() == Some(d.bound.as_str()) { (a, b) } else { (b, a) };
            if bound.as_sym() != Some(d.bound.as_str()) {
                return None;
            }
            Some(usize::try_from(shift(n, &d.name)?).ok().filter(|n| *n >= 1)?)
        }
        _ => return None,
    };
    let kind = match (width, gamma) {
        (None, None) => OpKind::CumSum { dim: 0, reverse: true },
        (None, Some(gamma)) => OpKind::DScan { gamma, dim: 0, reverse: true },
        (Some(n), gamma) => OpKind::Conv { dim: 0, weights: (0..n).map(|i| gamma.map_or(1.0, |g| g.powi(i as i32))).collect() },
    };
    Some(Scan { target: w, input: y.id, k, kind, final_only: None })
}

fn rewrite(g: &mut Pdg, m: Scan) -> String {
    let node = g.node(m.target).clone();
    let d = node.domain[m.k].clone();
    let extent = SymExpr::sym(&d.bound);
    let mut rest = node.domain.clone();
    rest.remove(m.k);
    let mut shape = vec![extent.clone()];
    shape.extend(node.shape.iter().cloned());
    let mut phi = g.node(m.input).identity();
    phi[m.k] = SymExpr::slice(SymExpr::int(0), extent);
    let mut lowered = node.identity();
    lowered.remove(m.k);
    if let Some(readers) = m.final_only {
        let f = g.add_node(&format!("{}_total", node.name), OpKind::Sum { dim: 0 }, rest, node.shape.clone(), node.dtype);
        g.add_edge(f, 0, m.input, phi, None);
        for e in g.edges.iter_mut().filter(|e| e.src == m.target && readers.contains(&e.sink)) {
            e.src = f;
            e.phi.remove(m.k);
        }
        return format!("lift {}: sum over {}", node.name, d.name);
    }
    let what = m.kind.name();
    let scan = g.add_node(&format!("{}_scan", node.name), m.kind, rest, shape, node.dtype);
    g.add_edge(scan, 0, m.input, phi, None);
    let pick = g.add_node(&format!("{}@{}", node.name, d.name), OpKind::IndexSelect { dim: 0, index: SymExpr::sym(&d.name) }, node.domain.clone(), node.shape.clone(), node.dtype);
    g.add_edge(pick, 0, scan, lowered, None);
    g.replace_uses(m.target, pick);
    format!("lift {}: {what} over {}", node.name, d.name)
}

/// Rewrite every recognized pattern, returning one line per rewrite.
pub fn lift_incremental_patterns(g: &mut Pdg) -> Vec<String> {
    let mut log = Vec::new();
    let mut done = BTreeSet::new();
    loop {
        let ok = Inputs { carried: carried(g), total: totality(g) };
        let found = g.ids().into_iter().filter(|n| !done.contains(n)).find_map(|n| match_prefix(g, n, &ok).or_else(|| match_window(g, n, &ok)));
        match found {
            Some(m) => {
                done.insert(m.target);
                log.push(rewrite(g, m));
            }
            None => return log,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::dsl::parse_program;
    use crate::pdg::build;
    use crate::pdg::passes::cleanup;
    use crate::pdg::validate::validate;
    use crate::runtime::compare_outputs;
    use crate::runtime::oracle::{reference_execute, OracleOptions};

    fn lifted(src: &str) -> (Pdg, Pdg, Vec<String>) {
        let g = build(&parse_program(src).unwrap()).unwrap();
        let mut h = g.clone();
        let log = lift_incremental_patterns(&mut h);
        cleanup(&mut h);
        assert!(validate(&h).is_empty(), "{:?}", validate(&h));
        (g, h, log)
    }

    fn same(a: &Pdg, b: &Pdg, t: i64) {
        let opts = OracleOptions { bindings: [("T".to_string(), t)].into(), seed: 2, ..Default::default() };
        compare_outputs(&reference_execute(a, &opts).unwrap(), &reference_execute(b, &opts).unwrap(), 1e-12).unwrap();
    }

    fn kinds(g: &Pdg) -> Vec<String> {
        g.nodes.values().map(|n| n.kind.name()).collect()
    }

    #[test]
    fn prefix_merge_becomes_cumsum() {
        let src = "dims t;\n bounds T=4;\n x = const(2.0) over (t);\n m = x * sym(t);\n rec s over (t) f64;\n s[0] = m[0];\n s[t+1] = s + m[t+1];\n out s;";
        let (g, h, log) = lifted(src);
        assert_eq!(log.len(), 1, "{log:?}");
        assert!(kinds(&h).contains(&"CumSum".to_string()));
        assert!(!kinds(&h).contains(&"Merge".to_string()));
        for t in 1..=8 {
            same(&g, &h, t);
        }
    }

    #[test]
    fn final_only_prefix_becomes_sum() {
        let src = "dims t;\n bounds T=8;\n x = rand(()) over (t);\n rec s over (t) f64;\n s[0] = x[0];\n s[t+1] = s + x[t+1];\n y = s[T-1] * 2;\n out y;";
        let (g, h, log) = lifted(src);
        assert!(log[0].contains("sum"), "{log:?}");
        assert!(kinds(&h).contains(&"Sum".to_string()));
        assert!(!kinds(&h).contains(&"CumSum".to_string()));
        for t in 1..=8 {
            same(&g, &h, t);
        }
    }

    #[test]
    fn arbitrary_branch_is_left_alone() {
        let src = "dims t;\n bounds T=4;\n x = rand(()) over (t);\n rec s over (t) f64;\n s[0] = x[0];\n s[t+1] = s * x[t+1];\n out s;";
        let (_, h, log) = lifted(src);
        assert!(log.is_empty());
        assert!(kinds(&h).contains(&"Merge".to_string()));
    }

    #[test]
    fn windows_become_scans_and_convolutions() {
        let src = "dims t;\n bounds T=6;\n r = rand(()) over (t);\n a = sum(r[t:min(t+3, T)]);\n b = dsum(r[t:min(t+2, T)], 0.5);\n c = sum(r[t:T]);\n e = dsum(r[t:T], 0.9);\n out a, b, c, e;";
        let (g, h, log) = lifted(src);
        assert_eq!(log.len(), 4, "{log:?}");
        let ks = kinds(&h);
        assert_eq!(ks.iter().filter(|k| *k == "Conv").count(), 2);
        assert!(ks.contains(&"DScan".to_string()) && ks.contains(&"CumSum".to_string()));
        for t in 1..=8 {
            same(&g, &h, t);
        }
    }

    #[test]
    fn recurrent_input_is_not_lifted() {
        let src = "dims t;\n bounds T=6;\n rec r over (t) f64;\n r[0] = const(1.0);\n r[t+1] = r * 0.5;\n g = sum(r[t:min(t+2, T)]);\n out g;";
        let (_, _, log) = lifted(src);
        assert!(log.is_empty());
    }

    #[test]
    fn partial_input_is_not_lifted() {
        let src = "dims t;\n bounds T=6;\n x = rand(()) over (t);\n y = x[t-1] * 2;\n g = sum(y[t:T]);\n out g;";
        let (_, _, log) = lifted(src);
        assert!(log.is_empty());
    }

    #[test]
    fn batched_prefix() {
        let src = "dims b, t;\n bounds B=2, T=5;\n x = rand((3)) over (b, t);\n rec s over (b, t) shape (3) f64;\n s[b, 0] = x[b, 0];\n s[b, t+1] = s + x[b, t+1];\n out s;";
        let (g, h, log) = lifted(src);
        assert_eq!(log.len(), 1, "{log:?}");
        for t in [1, 5] {
            same(&g, &h, t);
        }
    }
}
