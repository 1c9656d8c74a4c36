//! Splitting large reductions into blocks along a new dimension.
//!
//! A reduction over axis `i` of extent `n` becomes a per-block reduction
//! over a new dim `di` with `DI = ceil(n / bs)` points, followed by a final
//! reduction over `[0:DI]`. Producers of the reduced input are rewritten to
//! compute one block at a time where the axis can be traced through them;
//! elsewhere the block is sliced out of the full tensor.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::frontend::ops::OpKind;
use crate::frontend::Bound;
use crate::pdg::{Edge, Pdg};
use crate::runtime::DYNAMIC_BOUND_CAP;
use crate::symexpr::{Dim, Env, SymExpr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IncError {
    #[error("`{0}` is not a single-input reduction")]
    NotReduction(String),
    #[error("`{0}`: reduced axis extent depends on a dim or a dynamic bound")]
    Extent(String),
    #[error("block size must be at least 1")]
    Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncPlan {
    pub target: usize,
    /// Elements of the reduced axis per block.
    pub block: i64,
    pub dim: Dim,
    /// Number of blocks at the declared bound values.
    pub blocks: i64,
}

/// Default largest reduction input, in bytes, left untiled.
pub const DEFAULT_BLOCK_BYTES: u64 = 64 << 20;

fn reduced_axis(kind: &OpKind) -> Option<usize> {
    match kind {
        OpKind::Sum { dim } | OpKind::Max { dim } => Some(*dim),
        _ => None,
    }
}

fn fresh_dim(g: &Pdg) -> Dim {
    let k = (0..).find(|k| !g.dims.iter().any(|d| d.name == format!("blk{k}"))).unwrap();
    Dim::new(format!("blk{k}"), format!("BLK{k}"))
}

fn estimate_env(g: &Pdg) -> Env {
    g.bound_env(&BTreeMap::new(), DYNAMIC_BOUND_CAP).unwrap_or_default()
}

/// Extents may name static bounds, which can be rebound at run time; the
/// block count then follows them.
fn usable_extent(g: &Pdg, n: &SymExpr) -> bool {
    n.free_symbols().iter().all(|s| matches!(g.bounds.get(s), Some(Bound::Static(_))))
}

/// Bytes read by a reduction at one point, and the extent of its axis with
/// its value at the declared bounds.
fn input_size(g: &Pdg, o: usize) -> Option<(u64, SymExpr, i64)> {
    let ins = g.in_edges(o);
    let [e] = ins.as_slice() else { return None };
    let i = reduced_axis(&g.node(o).kind)?;
    let shape = g.edge_shape(e);
    let n = shape.get(i)?.clone();
    if !usable_extent(g, &n) {
        return None;
    }
    let env = estimate_env(g);
    let at = n.eval_int(&env).ok()?;
    let elems: u64 = shape.iter().map(|s| s.eval_int(&env).unwrap_or(1).max(0) as u64).product();
    Some((elems * g.node(e.src).dtype.size_bytes(), n, at))
}

/// Plan blocks for `o` so one block of its input stays within `block_bytes`,
/// or `None` when the input already fits.
pub fn plan(g: &Pdg, o: usize, block_bytes: u64) -> Option<IncPlan> {
    let (bytes, _, n) = input_size(g, o)?;
    if bytes <= block_bytes || n <= 1 {
        return None;
    }
    let row = (bytes / n as u64).max(1);
    let block = ((block_bytes / row) as i64).clamp(1, n);
    let blocks = (n + block - 1) / block;
    (blocks > 1).then(|| IncPlan { target: o, block, dim: fresh_dim(g), blocks })
}

struct Tiler<'a> {
    g: &'a mut Pdg,
    plan: &'a IncPlan,
    /// Domain of the reduction; new nodes get it plus the block dim.
    outer: Vec<Dim>,
    memo: BTreeMap<(usize, usize), usize>,
}

impl Tiler<'_> {
    fn start(&self) -> SymExpr {
        SymExpr::mul(SymExpr::sym(&self.plan.dim.name), SymExpr::int(self.plan.block))
    }

    fn end(&self, n: &SymExpr) -> SymExpr {
        SymExpr::min(SymExpr::add(self.start(), SymExpr::int(self.plan.block)), n.clone()).simplify()
    }

    fn extent_of(&self, n: &SymExpr) -> SymExpr {
        SymExpr::sub(self.end(n), self.start()).simplify()
    }

    fn domain(&self) -> Vec<Dim> {
        let mut d = self.outer.clone();
        d.push(self.plan.dim.clone());
        d
    }

    fn blocked_shape(&self, shape: &[SymExpr], axis: usize, n: &SymExpr) -> Vec<SymExpr> {
        let mut s = shape.to_vec();
        s[axis] = self.extent_of(n);
        s
    }

    /// Node over the block domain whose value is block `di` of what `e`
    /// reads, split along `axis` of extent `n`.
    fn block(&mut self, e: &Edge, axis: usize, n: &SymExpr) -> usize {
        let outer_id: Vec<SymExpr> = self.outer.iter().map(|d| SymExpr::sym(&d.name)).collect();
        let src = self.g.node(e.src).clone();
        let linear = e.cond.is_none() && src.domain == self.outer && e.phi == outer_id;
        if linear {
            if let Some(&b) = self.memo.get(&(e.src, axis)) {
                return b;
            }
            if let Some(b) = self.traced(&src, axis, n) {
                self.memo.insert((e.src, axis), b);
                return b;
            }
        }
        let shape = self.g.edge_shape(e);
        let dom = self.domain();
        // An axis that comes from a slice in the read narrows that slice.
        if let Some((k, (lo, hi))) = e.phi.iter().enumerate().filter_map(|(k, c)| c.as_slice().map(|s| (k, s))).nth(axis) {
            let from = SymExpr::add(lo.clone(), self.start());
            let to = SymExpr::min(SymExpr::add(from.clone(), SymExpr::int(self.plan.block)), hi.clone());
            let mut phi = e.phi.clone();
            phi[k] = SymExpr::slice(from.simplify(), to.simplify());
            let s = self.g.add_node(&format!("{}_blk", src.name), OpKind::Identity, dom, self.blocked_shape(&shape, axis, n), src.dtype);
            self.g.add_edge(s, 0, e.src, phi, e.cond.clone());
            return s;
        }
        let kind = OpKind::Slice { dim: axis, start: self.start(), end: self.end(n) };
        let s = self.g.add_node(&format!("{}_blk", src.name), kind, dom, self.blocked_shape(&shape, axis, n), src.dtype);
        self.g.add_edge(s, 0, e.src, e.phi.clone(), e.cond.clone());
        s
    }

    /// Copy `src` onto the block domain when the axis can be followed
    /// through it.
    fn traced(&mut self, src: &crate::pdg::Node, axis: usize, n: &SymExpr) -> Option<usize> {
        let ins: Vec<Edge> = self.g.in_edges(src.id).into_iter().cloned().collect();
        let one = SymExpr::int(1);
        // For each input: the axis it carries, if any.
        let follow: Vec<Option<usize>> = match &src.kind {
            OpKind::Const { .. } => vec![],
            OpKind::Unary { batch, .. } | OpKind::Pow { batch, .. } | OpKind::Binary { batch, .. } | OpKind::AddN { batch } => {
                let r = src.shape.len();
                ins.iter()
                    .map(|e| {
                        let s = self.g.edge_shape(e);
                        let k = if axis < *batch { Some(axis) } else { (axis + s.len()).checked_sub(r).filter(|k| *k >= *batch) };
                        k.filter(|&k| s[k] != one)
                    })
                    .collect()
            }
            OpKind::Permute { perm } => vec![Some(perm[axis])],
            OpKind::Squeeze { dim } => vec![Some(if axis >= *dim { axis + 1 } else { axis })],
            OpKind::Unsqueeze { dim } if axis != *dim => vec![Some(if axis > *dim { axis - 1 } else { axis })],
            OpKind::Sum { dim } | OpKind::Max { dim } => vec![Some(if axis >= *dim { axis + 1 } else { axis })],
            OpKind::Expand { batch, .. } if axis >= *batch => {
                let s = self.g.edge_shape(&ins[0]);
                let k = (axis + s.len()).checked_sub(src.shape.len());
                vec![k.filter(|&k| s[k] != one)]
            }
            _ => return None,
        };
        let kind = match &src.kind {
            OpKind::Const { value, shape } => OpKind::Const { value: *value, shape: self.blocked_shape(shape, axis, n) },
            OpKind::Expand { shape, batch } => OpKind::Expand { shape: self.blocked_shape(shape, axis - batch, n), batch: *batch },
            k => k.clone(),
        };
        let dom = self.domain();
        let b = self.g.add_node(&format!("{}_blk", src.name), kind, dom, self.blocked_shape(&src.shape, axis, n), src.dtype);
        for (e, k) in ins.iter().zip(follow) {
            match k {
                Some(k) => {
                    let child = self.block(e, k, n);
                    self.g.add_linear(b, e.iid, child);
                }
                None => self.g.add_edge(b, e.iid, e.src, e.phi.clone(), e.cond.clone()),
            }
        }
        Some(b)
    }
}

/// Rewrite the target of `plan` into per-block reductions and a final
/// reduction over the blocks. Returns the final node.
pub fn incrementalize(g: &mut Pdg, plan: &IncPlan) -> Result<usize, IncError> {
    if plan.block < 1 {
        return Err(IncError::Block);
    }
    let node = g.node(plan.target).clone();
    let ins: Vec<Edge> = g.in_edges(plan.target).into_iter().cloned().collect();
    let (Some(axis), [e]) = (reduced_axis(&node.kind), ins.as_slice()) else {
        return Err(IncError::NotReduction(node.name.clone()));
    };
    let n = g.edge_shape(e).get(axis).cloned().filter(|n| usable_extent(g, n)).ok_or_else(|| IncError::Extent(node.name.clone()))?;
    let count = match n.as_int() {
        Some(k) => Bound::Static((k + plan.block - 1) / plan.block),
        None => Bound::Derived(SymExpr::floordiv(SymExpr::add(n.clone(), SymExpr::int(plan.block - 1)), SymExpr::int(plan.block)).simplify()),
    };
    g.dims.push(plan.dim.clone());
    g.bounds.insert(plan.dim.bound.clone(), count);
    let mut t = Tiler { g, plan, outer: node.domain.clone(), memo: BTreeMap::new() };
    let input = t.block(e, axis, &n);
    let dom = t.domain();
    let g = t.g;
    let part = g.add_node(&format!("{}_part", node.name), node.kind.clone(), dom, node.shape.clone(), node.dtype);
    g.add_linear(part, 0, input);
    let whole = match node.kind {
        OpKind::Max { .. } => OpKind::Max { dim: 0 },
        _ => OpKind::Sum { dim: 0 },
    };
    let fin = g.add_node(&format!("{}_all", node.name), whole, node.domain.clone(), node.shape.clone(), node.dtype);
    let mut phi = node.identity();
    phi.push(SymExpr::slice(SymExpr::int(0), SymExpr::sym(&plan.dim.bound)));
    g.add_edge(fin, 0, part, phi, None);
    g.replace_uses(plan.target, fin);
    Ok(fin)
}

/// Tile every reduction whose input exceeds `block_bytes`.
pub fn incrementalize_all(g: &mut Pdg, block_bytes: u64) -> Vec<String> {
    let targets: Vec<usize> = g.ids().into_iter().filter(|&n| reduced_axis(&g.node(n).kind).is_some()).collect();
    let mut log = Vec::new();
    for o in targets {
        let Some(p) = plan(g, o, block_bytes) else { continue };
        if incrementalize(g, &p).is_ok() {
            log.push(format!("incrementalize {}: {} blocks of {} along {}", g.node(o).name, p.blocks, p.block, p.dim.name));
        }
    }
    log
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

    fn graph(src: &str) -> Pdg {
        build(&parse_program(src).unwrap()).unwrap()
    }

    fn tiled(src: &str, block_bytes: u64) -> (Pdg, Pdg, Vec<String>) {
        let g = graph(src);
        let mut h = g.clone();
        let log = incrementalize_all(&mut h, block_bytes);
        cleanup(&mut h);
        assert!(validate(&h).is_empty(), "{:?}", validate(&h));
        (g, h, log)
    }

    fn same(a: &Pdg, b: &Pdg) {
        let opts = OracleOptions { seed: 4, ..Default::default() };
        compare_outputs(&reference_execute(a, &opts).unwrap(), &reference_execute(b, &opts).unwrap(), 1e-10).unwrap();
    }

    #[test]
    fn sum_in_four_blocks() {
        let src = "x = rand((1024));\n y = exp(x) * 2;\n s = sum(y);\n out s;";
        let g = graph(src);
        let s = g.output("s").unwrap();
        let p = plan(&g, s, 256 * 8).unwrap();
        assert_eq!((p.block, p.blocks), (256, 4));
        let (g, h, log) = tiled(src, 256 * 8);
        assert_eq!(log.len(), 1);
        assert!(h.nodes.values().any(|n| n.name == "y_blk" && n.domain.len() == 1));
        same(&g, &h);
    }

    #[test]
    fn small_input_is_left_alone() {
        let (_, _, log) = tiled("x = rand((16));\n s = sum(x);\n out s;", 1 << 20);
        assert!(log.is_empty());
    }

    #[test]
    fn constant_input_keeps_its_value() {
        let src = "c = const(0.5);\n x = rand((100));\n y = x * c;\n s = sum(y);\n out s;";
        let (g, h, _) = tiled(src, 80);
        assert!(h.nodes.values().any(|n| matches!(n.kind, OpKind::Const { .. }) && n.domain.is_empty()));
        same(&g, &h);
    }

    #[test]
    fn axis_followed_through_permute() {
        let src = "x = rand((6, 40));\n y = permute(x, (1, 0));\n z = y * 3;\n s = sum(z, 0);\n out s;";
        let (g, h, log) = tiled(src, 6 * 8 * 10);
        assert_eq!(log.len(), 1, "{log:?}");
        let p = h.nodes.values().find(|n| matches!(n.kind, OpKind::Permute { .. })).unwrap();
        assert_eq!(p.domain.len(), 1);
        same(&g, &h);
    }

    #[test]
    fn uneven_blocks_and_max() {
        let src = "x = rand((10, 3));\n y = x - 0.5;\n s = rmax(y, 0);\n out s;";
        let (g, h, log) = tiled(src, 3 * 8 * 4);
        assert!(log[0].contains("3 blocks of 4"), "{log:?}");
        same(&g, &h);
    }

    #[test]
    fn extent_from_a_bound_follows_rebinding() {
        let src = "dims t;\n bounds T=12;\n x = rand((4)) over (t);\n y = x * 2;\n s = sum(sum(y[0:T]));\n out s;";
        let (g, h, log) = tiled(src, 4 * 8 * 5);
        assert!(log.iter().any(|l| l.contains("3 blocks of 5")), "{log:?}");
        for t in [1, 5, 6, 12, 17] {
            let opts = OracleOptions { bindings: [("T".to_string(), t)].into(), seed: 4, ..Default::default() };
            compare_outputs(&reference_execute(&g, &opts).unwrap(), &reference_execute(&h, &opts).unwrap(), 1e-10).unwrap();
        }
    }

    #[test]
    fn over_time() {
        let src = "dims t;\n bounds T=3;\n x = rand((64)) over (t);\n y = x * x;\n s = sum(y);\n out s;";
        let (g, h, _) = tiled(src, 128);
        same(&g, &h);
    }
}
