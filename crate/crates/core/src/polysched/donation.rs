//! Buffer donation: a point whose only reader is a single point of one
//! consumer can hand its storage to that consumer's output.

use std::collections::BTreeSet;

use crate::frontend::ops::{MemOp, OpKind};
use crate::pdg::{Edge, Pdg};
use crate::runtime::exec::Donations;
use crate::symexpr::LinExpr;

/// Whether distinct sink points always read distinct source points: every
/// component is a different sink dim plus a constant, covering all of them.
fn injective(g: &Pdg, e: &Edge) -> bool {
    let sink = g.node(e.sink);
    if e.phi.len() != sink.domain.len() {
        return false;
    }
    let mut used = BTreeSet::new();
    for c in &e.phi {
        let Some(l) = LinExpr::from_expr(c) else { return false };
        let mut vars = l.terms.iter().filter(|(_, k)| **k != 0);
        let Some((v, k)) = vars.next() else { return false };
        if *k != 1 || vars.next().is_some() || !sink.domain.iter().any(|d| &d.name == v) || !used.insert(v.clone()) {
            return false;
        }
    }
    true
}

fn swapped(g: &Pdg, d: usize) -> bool {
    g.nodes.values().any(|n| matches!(n.kind, OpKind::Memory { op: MemOp::Offload | MemOp::Fetch, tensor, .. } if tensor == d))
}

/// Donation pairs for `g`, after memory ops have been placed.
pub fn find_donations(g: &Pdg) -> Donations {
    let mut out = Donations::new();
    for d in g.ids() {
        let node = g.node(d);
        if g.is_output(d) || matches!(node.kind, OpKind::Memory { .. } | OpKind::SetSymbol { .. }) || swapped(g, d) {
            continue;
        }
        let readers: Vec<Edge> = g.out_edges(d).into_iter().filter(|e| !matches!(g.node(e.sink).kind, OpKind::Memory { .. })).cloned().collect();
        let [e] = readers.as_slice() else { continue };
        let user = g.node(e.sink);
        if e.cond.is_some() || e.has_slice() || e.sink == d || out.contains_key(&e.sink) {
            continue;
        }
        if matches!(user.kind, OpKind::Memory { .. } | OpKind::SetSymbol { .. } | OpKind::GradGather { .. }) || !injective(g, e) {
            continue;
        }
        out.insert(e.sink, (d, e.iid));
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;


    use crate::pipeline::{compile, run, CompileOptions};
    use crate::runtime::compare_outputs;
    use crate::runtime::exec::{CpuBackend, ExecOptions};
    use crate::runtime::oracle::{reference_execute, OracleOptions};
    use crate::symexpr::{eval_components, Env};

    /// For every read of a donor point, the position in the trace of the
    /// reading `EXEC`; the donating user must be the last one.
    fn last_reader_holds(src: &str, t: i64) {
        let c = compile(src, &CompileOptions::default()).unwrap();
        let bindings: BTreeMap<String, i64> = [("T".to_string(), t)].into();
        let eo = ExecOptions { bindings: bindings.clone(), trace: true, ..Default::default() };
        let ex = run(&c, &CpuBackend, &eo).unwrap();
        let g = &c.pdg;
        let execs: Vec<(String, Vec<i64>)> = ex
            .trace
            .iter()
            .filter_map(|l| l.strip_prefix("EXEC "))
            .map(|l| {
                let (name, pt) = l.split_once(' ').unwrap_or((l, "[]"));
                let pt = pt.trim_matches(|c| c == '[' || c == ']');
                (name.to_string(), pt.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse().unwrap()).collect())
            })
            .collect();
        for (&u, &(d, _)) in &c.donations {
            let mut last: BTreeMap<Vec<i64>, (usize, usize, Vec<i64>)> = BTreeMap::new();
            for (pos, (name, q)) in execs.iter().enumerate() {
                let Some(r) = g.ids().into_iter().find(|&r| &g.node(r).name == name) else { continue };
                for e in g.in_edges(r).into_iter().filter(|e| e.src == d) {
                    let mut env = Env::new();
                    for (k, v) in &bindings {
                        env.bind(k, *v);
                    }
                    for (dim, v) in g.node(r).domain.iter().zip(q) {
                        env.bind(&dim.name, *v);
                    }
                    let set = eval_components(&e.phi, &env).unwrap();
                    for p in set.points() {
                        last.insert(p, (pos, r, q.clone()));
                    }
                }
            }
            for (p, (_, r, _)) in &last {
                assert_eq!(*r, u, "{}[{p:?}] read after its donation", g.node(d).name);
            }
        }
    }

    const SRC: &str = "dims t;\n bounds T=6;\n x = rand((3)) over (t);\n a = x * 2;\n b = exp(a);\n c = sum(b[0:t+1]);\n out c;";

    #[test]
    fn chain_donates_and_matches_the_oracle() {
        let mut opts = CompileOptions::default();
        opts.transforms.fuse = false;
        opts.transforms.vectorize = false;
        let c = compile(SRC, &opts).unwrap();
        let name = |n: usize| c.pdg.node(n).name.clone();
        let pairs: Vec<(String, String)> = c.donations.iter().map(|(u, (d, _))| (name(*u), name(*d))).collect();
        assert!(pairs.contains(&("b".into(), "a".into())), "{pairs:?}");
        assert!(!pairs.iter().any(|(_, d)| d == "b"), "sliced reads never donate");
        let eo = ExecOptions { bindings: [("T".to_string(), 6)].into(), ..Default::default() };
        let ex = run(&c, &CpuBackend, &eo).unwrap();
        assert!(ex.stats.donated > 0);
        let want = reference_execute(&c.pdg, &OracleOptions { bindings: eo.bindings.clone(), ..Default::default() }).unwrap();
        compare_outputs(&want, &ex.outputs, 1e-12).unwrap();
    }

    #[test]
    fn donors_are_last_read_by_their_user() {
        for t in 1..=6 {
            last_reader_holds(SRC, t);
            last_reader_holds("dims t;\n bounds T=6;\n x = rand(()) over (t);\n y = x[t-1] + x;\n rec z over (t) f64;\n z[0] = x[0];\n z[t+1] = y[t+1] * 2;\n out z;", t);
        }
    }

    #[test]
    fn shifted_reads_with_other_readers_are_rejected() {
        let src = "dims t;\n bounds T=4;\n x = rand(()) over (t);\n y = x * 3;\n z = y + x;\n out z;";
        let mut opts = CompileOptions::default();
        opts.transforms.fuse = false;
        let c = compile(src, &opts).unwrap();
        for (_, (d, _)) in &c.donations {
            assert_ne!(c.pdg.node(*d).name, "x");
        }
    }
}
