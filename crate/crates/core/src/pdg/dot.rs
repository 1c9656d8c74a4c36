//! Graphviz text for a dependence graph.

use std::fmt::Write;

use super::Pdg;
use crate::symexpr::fmt_index;

fn esc(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn to_dot(g: &Pdg) -> String {
    let mut s = String::from("digraph pdg {\n  node [shape=box];\n");
    for n in g.nodes.values() {
        let dom: Vec<&str> = n.dim_names();
        let out = if g.is_output(n.id) { ", peripheries=2" } else { "" };
        let label = format!("{}: {}\\n{} ({})", n.id, esc(&n.name), esc(&n.kind.name()), dom.join(", "));
        writeln!(s, "  n{} [label=\"{label}\"{out}];", n.id).unwrap();
    }
    let mut edges: Vec<_> = g.edges.iter().collect();
    edges.sort_by_key(|e| (e.sink, e.iid));
    for e in edges {
        let mut label = format!("{}: {}", e.iid, fmt_index(&e.phi));
        if let Some(c) = &e.cond {
            label.push_str(&format!(" if {c}"));
        }
        writeln!(s, "  n{} -> n{} [label=\"{}\"];", e.src, e.sink, esc(&label)).unwrap();
    }
    s.push_str("}\n");
    s
}
