//! Text form of a schedule tree.

use std::fmt::Write;

use super::{Schedule, Tree};
use crate::pdg::Pdg;

pub fn dump_tree(g: &Pdg, tree: &Tree) -> String {
    fn go(g: &Pdg, t: &Tree, depth: usize, out: &mut String) {
        let pad = "  ".repeat(depth);
        match t {
            Tree::Seq(cs) => {
                writeln!(out, "{pad}seq").unwrap();
                cs.iter().for_each(|c| go(g, c, depth + 1, out));
            }
            Tree::Band(b) => {
                let dir = if b.sign > 0 { "+" } else { "-" };
                let par = if b.parallel { " parallel" } else { "" };
                let sh: Vec<String> = b.shifts.iter().filter(|(_, s)| **s != 0).map(|(n, s)| format!("{}:{s}", g.node(*n).name)).collect();
                let sh = if sh.is_empty() { String::new() } else { format!(" shifts {}", sh.join(" ")) };
                writeln!(out, "{pad}band {}{dir}{par}{sh}", b.dim.name).unwrap();
                go(g, &b.body, depth + 1, out);
            }
            Tree::Leaf(ns) => {
                for n in ns {
                    let node = g.node(*n);
                    writeln!(out, "{pad}{} = {}", node.name, node.kind.name()).unwrap();
                }
            }
        }
    }
    let mut out = String::new();
    go(g, tree, 0, &mut out);
    out
}

/// Tree dump preceded by the phase of every top-level group.
pub fn dump_schedule(g: &Pdg, s: &Schedule) -> String {
    let mut out = format!("phases {}\n", s.phase_count());
    for (i, t) in s.tree.top().into_iter().enumerate() {
        let ph = t.nodes().iter().filter_map(|n| s.phase.get(n)).min().copied().unwrap_or(0);
        writeln!(out, "group {i} phase {ph}").unwrap();
        out.push_str(&dump_tree(g, t));
    }
    out
}
