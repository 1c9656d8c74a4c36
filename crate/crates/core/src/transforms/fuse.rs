//! Collapsing same-domain regions joined by linear edges into one
//! `Dataflow` node.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::frontend::ops::{BodyInput, BodyNode, OpKind};
use crate::pdg::{Edge, Pdg};

fn fusible(kind: &OpKind) -> bool {
    !matches!(
        kind,
        OpKind::Merge
            | OpKind::Udf { .. }
            | OpKind::Rand { .. }
            | OpKind::Param { .. }
            | OpKind::EvalSymbol { .. }
            | OpKind::SetSymbol { .. }
            | OpKind::GradGather { .. }
            | OpKind::Dataflow { .. }
            | OpKind::Memory { .. }
    )
}

fn layout(kind: &OpKind) -> bool {
    matches!(
        kind,
        OpKind::Const { .. } | OpKind::Reshape { .. } | OpKind::Permute { .. } | OpKind::Squeeze { .. } | OpKind::Unsqueeze { .. } | OpKind::Expand { .. }
    )
}

struct Groups<'a> {
    g: &'a Pdg,
    of: BTreeMap<usize, usize>,
    members: BTreeMap<usize, BTreeSet<usize>>,
    domains: BTreeMap<usize, Vec<crate::symexpr::Dim>>,
}

impl<'a> Groups<'a> {
    fn new(g: &'a Pdg) -> Self {
        let of = g.ids().into_iter().map(|n| (n, n)).collect();
        let members = g.ids().into_iter().map(|n| (n, BTreeSet::from([n]))).collect();
        let domains = g.ids().into_iter().map(|n| (n, g.node(n).domain.clone())).collect();
        Groups { g, of, members, domains }
    }

    /// Members read from outside the group or by the program.
    fn exits(&self, set: &BTreeSet<usize>) -> usize {
        set.iter().filter(|&&n| self.g.is_output(n) || self.g.out_edges(n).iter().any(|e| !set.contains(&e.sink))).count()
    }

    /// Whether some path leaves `from` and reaches `to` through other groups.
    fn detour(&self, from: &BTreeSet<usize>, to: &BTreeSet<usize>) -> bool {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<usize> = from.iter().flat_map(|&n| self.g.out_edges(n)).map(|e| e.sink).filter(|s| !from.contains(s) && !to.contains(s)).collect();
        while let Some(n) = queue.pop_front() {
            if !seen.insert(n) {
                continue;
            }
            for e in self.g.out_edges(n) {
                if to.contains(&e.sink) {
                    return true;
                }
                if !from.contains(&e.sink) {
                    queue.push_back(e.sink);
                }
            }
        }
        false
    }

    fn domain(&self, gid: usize) -> &[crate::symexpr::Dim] {
        &self.domains[&gid]
    }

    fn can_merge(&self, a: usize, b: usize) -> bool {
        let (ma, mb) = (&self.members[&a], &self.members[&b]);
        if self.domain(a) != self.domain(b) || !ma.iter().chain(mb).all(|&n| fusible(&self.g.node(n).kind)) {
            return false;
        }
        let between = self.g.edges.iter().filter(|e| (ma.contains(&e.src) && mb.contains(&e.sink)) || (mb.contains(&e.src) && ma.contains(&e.sink)));
        if !between.into_iter().all(|e| e.is_linear(self.g)) {
            return false;
        }
        let union: BTreeSet<usize> = ma.union(mb).copied().collect();
        self.exits(&union) <= 1 && !self.detour(ma, mb) && !self.detour(mb, ma)
    }

    /// A constant or layout op over fewer dims whose readers all sit in one
    /// larger group can be computed inside it.
    fn absorbable(&self, n: usize) -> Option<usize> {
        let node = self.g.node(n);
        if !layout(&node.kind) || self.members[&self.of[&n]].len() != 1 || self.g.is_output(n) {
            return None;
        }
        let outs = self.g.out_edges(n);
        let gid = self.of[&outs.first()?.sink];
        let dom = self.domain(gid);
        let ok = dom.len() > node.domain.len()
            && node.domain.iter().all(|d| dom.contains(d))
            && self.members[&gid].iter().all(|&m| fusible(&self.g.node(m).kind))
            && outs.iter().all(|e| self.of[&e.sink] == gid && e.cond.is_none() && e.phi == node.identity());
        ok.then_some(gid)
    }

    fn merge(&mut self, a: usize, b: usize) {
        let mb = self.members.remove(&b).unwrap();
        self.domains.remove(&b);
        for n in &mb {
            self.of.insert(*n, a);
        }
        self.members.get_mut(&a).unwrap().extend(mb);
    }

    fn step(&mut self) -> bool {
        for e in &self.g.edges {
            let (a, b) = (self.of[&e.src], self.of[&e.sink]);
            if a != b && self.can_merge(a, b) {
                self.merge(a, b);
                return true;
            }
        }
        for n in self.g.ids() {
            if let Some(gid) = self.absorbable(n) {
                let own = self.of[&n];
                self.merge(gid, own);
                return true;
            }
        }
        false
    }
}

/// Members of a group in an order where every internal input comes first.
fn topo(g: &Pdg, set: &BTreeSet<usize>) -> Vec<usize> {
    let mut order = Vec::new();
    let mut placed = BTreeSet::new();
    while order.len() < set.len() {
        let next = set.iter().copied().find(|n| !placed.contains(n) && g.in_edges(*n).iter().all(|e| !set.contains(&e.src) || placed.contains(&e.src))).expect("group has no internal cycle");
        placed.insert(next);
        order.push(next);
    }
    order
}

fn build(g: &mut Pdg, set: &BTreeSet<usize>) -> usize {
    let order = topo(g, set);
    let pos: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let exit = order.iter().copied().find(|&n| g.is_output(n) || g.out_edges(n).iter().any(|e| !set.contains(&e.sink))).unwrap_or(*order.last().unwrap());
    let mut externals: Vec<Edge> = Vec::new();
    let mut body = Vec::new();
    for &n in &order {
        let node = g.node(n);
        let inputs = g
            .in_edges(n)
            .into_iter()
            .map(|e| match pos.get(&e.src) {
                Some(&k) => BodyInput::Internal(k),
                None => {
                    let k = externals.iter().position(|x| x.src == e.src && x.phi == e.phi && x.cond == e.cond).unwrap_or_else(|| {
                        externals.push(e.clone());
                        externals.len() - 1
                    });
                    BodyInput::External(k)
                }
            })
            .collect();
        body.push(BodyNode { kind: node.kind.clone(), inputs, name: node.name.clone() });
    }
    let out = g.node(exit).clone();
    let kind = OpKind::Dataflow { body, output: pos[&exit] };
    let d = g.add_node(&out.name, kind, out.domain.clone(), out.shape.clone(), out.dtype);
    for (k, e) in externals.into_iter().enumerate() {
        g.add_edge(d, k, e.src, e.phi, e.cond);
    }
    g.replace_uses(exit, d);
    for n in set {
        g.remove_node(*n);
    }
    d
}

/// Fuse to a fixed point; returns the new `Dataflow` nodes.
pub fn fuse(g: &mut Pdg) -> Vec<usize> {
    let mut groups = Groups::new(g);
    while groups.step() {}
    let sets: Vec<BTreeSet<usize>> = groups.members.into_values().filter(|m| m.len() > 1).collect();
    sets.iter().map(|s| build(g, s)).collect()
}
