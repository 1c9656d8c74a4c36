//! Cleanup passes: dead code, duplicates, algebraic identities.

use std::collections::{BTreeSet, VecDeque};

use super::Pdg;
use crate::frontend::ops::{BinaryOp, OpKind, UnaryOp};

/// Drop nodes that no output or bound-setting node reads.
pub fn eliminate_dead(g: &mut Pdg) -> usize {
    let mut live: BTreeSet<usize> = g.outputs.iter().map(|(_, o)| *o).collect();
    live.extend(g.nodes.values().filter(|n| matches!(n.kind, OpKind::SetSymbol { .. })).map(|n| n.id));
    let mut queue: VecDeque<usize> = live.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        for e in g.edges.iter().filter(|e| e.sink == n) {
            if live.insert(e.src) {
                queue.push_back(e.src);
            }
        }
        if let OpKind::Memory { tensor, .. } = g.nodes[&n].kind {
            if live.insert(tensor) {
                queue.push_back(tensor);
            }
        }
    }
    let dead: Vec<usize> = g.ids().into_iter().filter(|n| !live.contains(n)).collect();
    for n in &dead {
        g.remove_node(*n);
    }
    dead.len()
}

fn signature(g: &Pdg, n: usize) -> Option<String> {
    let node = &g.nodes[&n];
    if matches!(node.kind, OpKind::SetSymbol { .. } | OpKind::Memory { .. }) {
        return None;
    }
    let ins: Vec<String> = g
        .in_edges(n)
        .iter()
        .map(|e| format!("{}:{}:{:?}:{:?}", e.iid, e.src, e.phi, e.cond))
        .collect();
    Some(format!("{:?}|{:?}|{:?}|{:?}|{}", node.kind, node.domain, node.shape, node.dtype, ins.join(";")))
}

/// Merge nodes with identical kind, domain and inputs.
pub fn deduplicate(g: &mut Pdg) -> usize {
    let mut merged = 0;
    loop {
        let mut seen: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
        let mut pair = None;
        for n in g.ids() {
            let Some(sig) = signature(g, n) else { continue };
            if let Some(&rep) = seen.get(&sig) {
                pair = Some((rep, n));
                break;
            }
            seen.insert(sig, n);
        }
        let Some((rep, dup)) = pair else { return merged };
        g.replace_uses(dup, rep);
        g.remove_node(dup);
        merged += 1;
    }
}

fn const_value(g: &Pdg, n: usize) -> Option<f64> {
    match &g.nodes[&n].kind {
        OpKind::Const { value, shape } if shape.is_empty() => Some(*value),
        _ => None,
    }
}

/// `x*1`, `x+0`, `x-0`, `--x` become `x`; nested Expands collapse.
pub fn simplify_algebraic(g: &mut Pdg) -> usize {
    let mut changed = 0;
    loop {
        let mut rewrite: Option<(usize, usize)> = None;
        let mut collapse: Option<(usize, usize)> = None;
        for n in g.ids() {
            let node = &g.nodes[&n];
            let ins = g.in_edges(n);
            let same = |k: usize| ins[k].is_linear(g) && g.nodes[&ins[k].src].shape == node.shape;
            match &node.kind {
                OpKind::Binary { op, .. } if ins.len() == 2 => {
                    let (a, b) = (ins[0].src, ins[1].src);
                    let (ca, cb) = (const_value(g, a), const_value(g, b));
                    let hit = match op {
                        BinaryOp::Mul if cb == Some(1.0) && same(0) => Some(a),
                        BinaryOp::Mul if ca == Some(1.0) && same(1) => Some(b),
                        BinaryOp::Add if cb == Some(0.0) && same(0) => Some(a),
                        BinaryOp::Add if ca == Some(0.0) && same(1) => Some(b),
                        BinaryOp::Sub if cb == Some(0.0) && same(0) => Some(a),
                        BinaryOp::Div if cb == Some(1.0) && same(0) => Some(a),
                        _ => None,
                    };
                    if let Some(x) = hit {
                        if g.nodes[&x].dtype == node.dtype || node.dtype.is_float() {
                            rewrite = Some((n, x));
                        }
                    }
                }
                OpKind::Unary { op: UnaryOp::Neg, .. } if ins.len() == 1 && ins[0].is_linear(g) => {
                    let inner = ins[0].src;
                    if matches!(g.nodes[&inner].kind, OpKind::Unary { op: UnaryOp::Neg, .. }) {
                        let ii = g.in_edges(inner);
                        if ii.len() == 1 && ii[0].is_linear(g) {
                            rewrite = Some((n, ii[0].src));
                        }
                    }
                }
                OpKind::Expand { batch, .. } if ins.len() == 1 && ins[0].is_linear(g) => {
                    let inner = ins[0].src;
                    if let OpKind::Expand { batch: b2, .. } = g.nodes[&inner].kind {
                        if b2 == *batch {
                            collapse = Some((n, inner));
                        }
                    }
                }
                _ => {}
            }
            if rewrite.is_some() || collapse.is_some() {
                break;
            }
        }
        if let Some((n, x)) = rewrite {
            let keep_name = g.nodes[&n].name.clone();
            g.replace_uses(n, x);
            g.remove_node(n);
            if g.is_output(x) && g.nodes[&x].name.starts_with('%') {
                g.nodes.get_mut(&x).unwrap().name = keep_name;
            }
        } else if let Some((outer, inner)) = collapse {
            let src = g.in_edges(inner)[0].clone();
            g.edges.retain(|e| e.sink != outer);
            g.add_edge(outer, 0, src.src, src.phi, src.cond);
        } else {
            return changed;
        }
        changed += 1;
    }
}

/// Run all cleanup passes to a fixed point.
pub fn cleanup(g: &mut Pdg) {
    loop {
        let n = simplify_algebraic(g) + deduplicate(g) + eliminate_dead(g);
        if n == 0 {
            return;
        }
    }
}
