//! Polyhedral dependence graph: domain-tagged ops joined by symbolic
//! dependence edges.

pub mod dot;
pub mod passes;
pub mod validate;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::frontend::ops::{DType, OpKind, Shape};
use crate::frontend::{Bound, Def, Program};
use crate::symexpr::{Dim, Env, SymExpr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdgError {
    #[error("`{0}` has no definition")]
    Unfilled(String),
    #[error("dynamic bound `{bound}`: {msg}")]
    Dynamic { bound: String, msg: String },
    #[error("unbound {0}")]
    Unbound(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub name: String,
    pub kind: OpKind,
    pub domain: Vec<Dim>,
    pub shape: Shape,
    pub dtype: DType,
}

impl Node {
    pub fn dim_names(&self) -> Vec<&str> {
        self.domain.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn has_dim(&self, d: &str) -> bool {
        self.domain.iter().any(|x| x.name == d)
    }

    pub fn identity(&self) -> Vec<SymExpr> {
        self.domain.iter().map(|d| SymExpr::sym(&d.name)).collect()
    }
}

/// `sink` reads `src` at `phi` (one component per dim of `src`, over the
/// sink's symbols) into input slot `iid`, when `cond` holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub sink: usize,
    pub iid: usize,
    pub src: usize,
    pub phi: Vec<SymExpr>,
    pub cond: Option<SymExpr>,
}

impl Edge {
    pub fn is_linear(&self, g: &Pdg) -> bool {
        let (s, k) = (&g.nodes[&self.src], &g.nodes[&self.sink]);
        self.cond.is_none() && s.domain == k.domain && self.phi == s.identity()
    }

    pub fn has_slice(&self) -> bool {
        self.phi.iter().any(|c| c.is_slice())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pdg {
    pub dims: Vec<Dim>,
    pub bounds: BTreeMap<String, Bound>,
    pub nodes: BTreeMap<usize, Node>,
    pub edges: Vec<Edge>,
    pub outputs: Vec<(String, usize)>,
    pub next_id: usize,
}

impl Pdg {
    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[&id]
    }

    pub fn add_node(&mut self, name: &str, kind: OpKind, domain: Vec<Dim>, shape: Shape, dtype: DType) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        let name = if name.is_empty() { format!("%{id}") } else { name.to_string() };
        self.nodes.insert(id, Node { id, name, kind, domain, shape, dtype });
        id
    }

    pub fn add_edge(&mut self, sink: usize, iid: usize, src: usize, phi: Vec<SymExpr>, cond: Option<SymExpr>) {
        self.edges.push(Edge { sink, iid, src, phi, cond });
    }

    /// Linear edge: the sink reads `src` at its own point.
    pub fn add_linear(&mut self, sink: usize, iid: usize, src: usize) {
        let phi = self.nodes[&src].identity();
        self.add_edge(sink, iid, src, phi, None);
    }

    /// Input edges of `n`, ordered by slot.
    pub fn in_edges(&self, n: usize) -> Vec<&Edge> {
        let mut v: Vec<&Edge> = self.edges.iter().filter(|e| e.sink == n).collect();
        v.sort_by_key(|e| e.iid);
        v
    }

    pub fn out_edges(&self, n: usize) -> Vec<&Edge> {
        self.edges.iter().filter(|e| e.src == n).collect()
    }

    pub fn consumers(&self, n: usize) -> BTreeSet<usize> {
        self.edges.iter().filter(|e| e.src == n).map(|e| e.sink).collect()
    }

    pub fn is_output(&self, n: usize) -> bool {
        self.outputs.iter().any(|(_, o)| *o == n)
    }

    pub fn output(&self, name: &str) -> Option<usize> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn remove_node(&mut self, n: usize) {
        self.nodes.remove(&n);
        self.edges.retain(|e| e.sink != n && e.src != n);
    }

    /// Point every read of `old` at `new`; both must share a domain.
    pub fn replace_uses(&mut self, old: usize, new: usize) {
        for e in &mut self.edges {
            if e.src == old {
                e.src = new;
            }
        }
        for (_, o) in &mut self.outputs {
            if *o == old {
                *o = new;
            }
        }
    }

    /// Static bound values; dynamic bounds take `cap`.
    pub fn bound_env(&self, overrides: &BTreeMap<String, i64>, cap: i64) -> Result<Env, PdgError> {
        let mut env = Env::new();
        for (b, v) in &self.bounds {
            let val = match (overrides.get(b), v) {
                (_, Bound::Derived(_)) => continue,
                (Some(x), _) => *x,
                (None, Bound::Static(x)) => *x,
                (None, Bound::Dynamic { .. }) => cap,
                (None, Bound::Unbound) => return Err(PdgError::Unbound(b.clone())),
            };
            env.bind(b, val);
        }
        for (b, v) in &self.bounds {
            if let Bound::Derived(e) = v {
                let val = e.eval_int(&env).map_err(|_| PdgError::Unbound(b.clone()))?;
                env.bind(b, val);
            }
        }
        Ok(env)
    }

    pub fn dynamic_bounds(&self) -> Vec<String> {
        self.bounds.iter().filter(|(_, b)| matches!(b, Bound::Dynamic { .. })).map(|(k, _)| k.clone()).collect()
    }

    /// Shape seen through `e`: leading slice extents, then the source shape.
    pub fn edge_shape(&self, e: &Edge) -> Shape {
        let mut s: Shape = e
            .phi
            .iter()
            .filter_map(|c| c.as_slice().map(|(lo, hi)| SymExpr::sub(hi.clone(), lo.clone()).simplify()))
            .collect();
        s.extend(self.nodes[&e.src].shape.iter().cloned());
        s
    }

    pub fn ids(&self) -> Vec<usize> {
        self.nodes.keys().copied().collect()
    }

    /// Estimated bytes of one point of `n`, with symbolic extents replaced
    /// by their largest value under `bounds`.
    pub fn point_bytes(&self, n: usize, bounds: &Env) -> u64 {
        let node = &self.nodes[&n];
        extent_product(&node.shape, bounds, &node.domain) * node.dtype.size_bytes()
    }
}

/// Product of extents, with dim symbols inside extents set to 0 (the
/// largest value for the usual `D-d` pattern).
pub fn extent_product(shape: &[SymExpr], bounds: &Env, domain: &[Dim]) -> u64 {
    let mut env = bounds.clone();
    for d in domain {
        env.bind(&d.name, 0);
    }
    shape.iter().map(|e| e.eval_int(&env).unwrap_or(1).max(0) as u64).product()
}

/// Lower a program to its dependence graph.
pub fn build(p: &Program) -> Result<Pdg, PdgError> {
    let mut g = Pdg { dims: p.dims.clone(), bounds: p.bounds.clone(), ..Default::default() };
    for t in &p.tensors {
        let kind = match &t.def {
            Def::Op { kind, .. } => kind.clone(),
            Def::Branches(bs) if bs.is_empty() => return Err(PdgError::Unfilled(t.name.clone())),
            Def::Branches(_) => OpKind::Merge,
        };
        g.nodes.insert(t.id, Node { id: t.id, name: t.name.clone(), kind, domain: t.domain.clone(), shape: t.shape.clone(), dtype: t.dtype });
    }
    g.next_id = p.tensors.len();
    for t in &p.tensors {
        let inputs = match &t.def {
            Def::Op { inputs, .. } => inputs,
            Def::Branches(bs) => bs,
        };
        for (k, a) in inputs.iter().enumerate() {
            let phi = a.index.clone().unwrap_or_else(|| p.tensors[a.tensor].identity_index());
            let cond = a.cond.clone().filter(|c| c.as_bool() != Some(true));
            g.add_edge(t.id, k, a.tensor, phi, cond);
        }
    }
    for (bound, b) in &p.bounds {
        if let Bound::Dynamic { done } = b {
            let err = |msg: &str| PdgError::Dynamic { bound: bound.clone(), msg: msg.into() };
            let d = p.dim_of_bound(bound).ok_or_else(|| err("not a declared bound"))?.clone();
            let src = p.find(done).ok_or_else(|| err(&format!("unknown tensor `{done}`")))?;
            if p.tensor(src).domain != vec![d.clone()] || !p.tensor(src).shape.is_empty() {
                return Err(err(&format!("`{done}` must be a scalar over ({})", d.name)));
            }
            let s = g.add_node(&format!("set_{bound}"), OpKind::SetSymbol { bound: bound.clone() }, vec![d], vec![], DType::Bool);
            g.add_linear(s, 0, src);
        }
    }
    for &o in &p.outputs {
        g.outputs.push((p.tensor(o).name.clone(), o));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::dsl::parse_program;

    pub(crate) const PREFIX_SUM: &str = "dims t;\n bounds T=4;\n x = const(2.0) over (t);\n m = x * sym(t);\n rec s over (t) f64;\n s[0] = m[0];\n s[t+1] = s + m[t+1];\n out s;";

    #[test]
    fn builds_merge_with_self_loop() {
        let p = parse_program(PREFIX_SUM).unwrap();
        let g = build(&p).unwrap();
        let s = g.output("s").unwrap();
        assert_eq!(g.node(s).kind, OpKind::Merge);
        let ins = g.in_edges(s);
        assert_eq!(ins.len(), 2);
        assert_eq!(ins[1].cond.as_ref().unwrap().to_string(), "t >= 1");
        let rhs = ins[1].src;
        let self_loop = g.in_edges(rhs).into_iter().find(|e| e.src == s).unwrap();
        assert_eq!(self_loop.phi[0].to_string(), "t");
        assert_eq!(ins[1].phi[0].to_string(), "t-1");
    }

    #[test]
    fn single_constant() {
        let p = parse_program("x = const(1.0);\n out x;").unwrap();
        let g = build(&p).unwrap();
        assert_eq!(g.nodes.len(), 1);
    }

    #[test]
    fn dynamic_bound_gets_set_symbol() {
        let p = parse_program("dims t;\n d = sym(t) >= 3;\n bounds T=dyn(d);\n out d;").unwrap();
        let g = build(&p).unwrap();
        assert!(g.nodes.values().any(|n| matches!(n.kind, OpKind::SetSymbol { .. })));
    }
}
