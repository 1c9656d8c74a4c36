//! Reference interpreter: evaluates each output point on demand, straight
//! from the dependence graph, with no schedule and no memory management.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::access::{assemble, clip, resolve, src_extents, Read};
use super::kernels::{forward, grad_gather, KernelCtx};
use super::tensor::Tensor;
use super::{Outputs, PointMap, RuntimeError, DYNAMIC_BOUND_CAP};
use crate::frontend::ops::OpKind;
use crate::frontend::Bound;
use crate::pdg::{Edge, Pdg};
use crate::symexpr::{Env, IndexSet};

#[derive(Debug, Clone, Default)]
pub struct OracleOptions {
    pub bindings: BTreeMap<String, i64>,
    pub seed: u64,
    /// Replacement values for `param` tensors, by name.
    pub params: BTreeMap<String, Tensor>,
}

type Key = (usize, Vec<i64>);

enum Step {
    Done(Option<Tensor>),
    Needs(Vec<Key>),
}

struct Oracle<'a> {
    g: &'a Pdg,
    bounds: Env,
    opts: &'a OracleOptions,
    memo: HashMap<Key, Option<Tensor>>,
}

impl<'a> Oracle<'a> {
    fn env_at(&self, n: usize, point: &[i64]) -> Env {
        let mut env = self.bounds.clone();
        for (d, v) in self.g.node(n).domain.iter().zip(point) {
            env.bind(&d.name, *v);
        }
        env
    }

    /// Values at every point of `set`, or the keys still missing.
    fn collect(&self, src: usize, set: &IndexSet, missing: &mut Vec<Key>) -> Vec<(Vec<i64>, Option<Tensor>)> {
        let mut out = Vec::new();
        for p in set.points() {
            match self.memo.get(&(src, p.clone())) {
                Some(v) => out.push((p, v.clone())),
                None => missing.push((src, p)),
            }
        }
        out
    }

    fn read(&self, e: &Edge, set: &IndexSet, env: &Env, missing: &mut Vec<Key>) -> Result<Option<Tensor>, RuntimeError> {
        let parts = self.collect(e.src, set, missing);
        if !missing.is_empty() {
            return Ok(None);
        }
        let mut vals = Vec::with_capacity(parts.len());
        for (_, v) in parts {
            match v {
                Some(t) => vals.push(t),
                None => return Ok(None),
            }
        }
        let src = self.g.node(e.src);
        let elem = self.elem_shape(e.src, set, env)?;
        Ok(assemble(set, vals, &elem, src.dtype))
    }

    /// Shape of one point of `n`, evaluated at the first point of `set`.
    fn elem_shape(&self, n: usize, set: &IndexSet, _env: &Env) -> Result<Vec<usize>, RuntimeError> {
        let first: Vec<i64> = set
            .comps
            .iter()
            .map(|c| match *c {
                crate::symexpr::IndexComp::Point(p) => p,
                crate::symexpr::IndexComp::Range(lo, _) => lo,
            })
            .collect();
        self.shape_at(n, &first)
    }

    fn shape_at(&self, n: usize, point: &[i64]) -> Result<Vec<usize>, RuntimeError> {
        let env = self.env_at(n, point);
        let mut out = Vec::new();
        for e in &self.g.node(n).shape {
            out.push(e.eval_int(&env)?.max(0) as usize);
        }
        Ok(out)
    }

    fn step(&self, n: usize, point: &[i64]) -> Result<Step, RuntimeError> {
        let node = self.g.node(n);
        let env = self.env_at(n, point);
        let ins = self.g.in_edges(n);
        let mut missing = Vec::new();
        let cx = KernelCtx { env: &env, point, seed: self.opts.seed };
        let value = match &node.kind {
            OpKind::Merge => {
                let mut chosen = None;
                for e in &ins {
                    match resolve(self.g, e, &env)? {
                        Read::Inactive => continue,
                        Read::OutOfBounds => break,
                        Read::Points(set) => {
                            chosen = Some((*e, set));
                            break;
                        }
                    }
                }
                match chosen {
                    None => None,
                    Some((e, set)) => self.read(e, &set, &env, &mut missing)?,
                }
            }
            OpKind::GradGather { fwd_phi, fwd_cond, sink_dims, src_dims } => {
                let e = ins[0];
                let mut parts = Vec::new();
                let active = e.cond.as_ref().map(|c| c.eval_bool(&env)).transpose()?.unwrap_or(true);
                if active {
                    let set = crate::symexpr::eval_components(&e.phi, &env)?;
                    let set = clip(&set, &src_extents(self.g, e, &env)?);
                    for (p, v) in self.collect(e.src, &set, &mut missing) {
                        if let Some(t) = v {
                            parts.push((p, t));
                        }
                    }
                }
                if !missing.is_empty() {
                    return Ok(Step::Needs(missing));
                }
                let shape = self.shape_at(n, point)?;
                Some(grad_gather(fwd_phi, fwd_cond.as_ref(), sink_dims, src_dims, &self.bounds, point, &shape, &parts)?)
            }
            OpKind::Param { .. } if self.opts.params.contains_key(&node.name) => Some(self.opts.params[&node.name].clone()),
            OpKind::Memory { .. } => return Err(RuntimeError::Other("memory ops are not evaluated by the oracle".into())),
            kind => {
                let mut inputs = Vec::with_capacity(ins.len());
                let mut undefined = false;
                for e in &ins {
                    match resolve(self.g, e, &env)? {
                        Read::Points(set) => match self.read(e, &set, &env, &mut missing)? {
                            Some(t) => inputs.push(t),
                            None => undefined = true,
                        },
                        _ => undefined = true,
                    }
                }
                if !missing.is_empty() {
                    return Ok(Step::Needs(missing));
                }
                if undefined {
                    // Gradient contributions of undefined points are zero.
                    if matches!(kind, OpKind::Vjp { .. }) {
                        Some(Tensor::zeros(&self.shape_at(n, point)?))
                    } else {
                        None
                    }
                } else {
                    Some(forward(kind, &inputs, &cx)?)
                }
            }
        };
        if !missing.is_empty() {
            return Ok(Step::Needs(missing));
        }
        Ok(Step::Done(value.map(|t| t.with_dtype(node.dtype))))
    }

    fn eval(&mut self, n: usize, point: Vec<i64>) -> Result<Option<Tensor>, RuntimeError> {
        let root = (n, point);
        let mut stack = vec![root.clone()];
        // Entries that asked for inputs; everything above one on the stack
        // is its descendant, so meeting one again means a cycle.
        let mut expanded: HashSet<Key> = HashSet::new();
        while let Some(top) = stack.last().cloned() {
            if self.memo.contains_key(&top) {
                stack.pop();
                continue;
            }
            match self.step(top.0, &top.1)? {
                Step::Done(v) => {
                    expanded.remove(&top);
                    self.memo.insert(top, v);
                    stack.pop();
                }
                Step::Needs(keys) => {
                    expanded.insert(top);
                    for k in keys {
                        if expanded.contains(&k) {
                            let tensor = self.g.node(k.0).name.clone();
                            return Err(RuntimeError::Cycle { tensor, point: k.1 });
                        }
                        stack.push(k);
                    }
                }
            }
        }
        Ok(self.memo[&root].clone())
    }
}

/// All points of a domain under `bounds`, in lexicographic order.
pub fn domain_points(extents: &[i64]) -> Vec<Vec<i64>> {
    let set = IndexSet { comps: extents.iter().map(|&e| crate::symexpr::IndexComp::Range(0, e)).collect() };
    set.points()
}

/// Evaluate every output of `g`.
pub fn reference_execute(g: &Pdg, opts: &OracleOptions) -> Result<Outputs, RuntimeError> {
    let mut bounds = g.bound_env(&opts.bindings, DYNAMIC_BOUND_CAP)?;
    for (b, kind) in &g.bounds {
        if !matches!(kind, Bound::Dynamic { .. }) || opts.bindings.contains_key(b) {
            continue;
        }
        let setter = g
            .nodes
            .values()
            .find(|n| matches!(&n.kind, OpKind::SetSymbol { bound } if bound == b))
            .ok_or_else(|| RuntimeError::Other(format!("no setter for `{b}`")))?;
        let mut o = Oracle { g, bounds: bounds.clone(), opts, memo: HashMap::new() };
        let mut value = None;
        for t in 0..DYNAMIC_BOUND_CAP {
            let v = o.eval(setter.id, vec![t])?.ok_or_else(|| RuntimeError::Undefined { tensor: setter.name.clone(), point: vec![t] })?;
            if v.item() != 0.0 {
                value = Some(t + 1);
                break;
            }
        }
        bounds.bind(b, value.ok_or_else(|| RuntimeError::NoTermination(b.clone()))?);
    }
    let mut o = Oracle { g, bounds: bounds.clone(), opts, memo: HashMap::new() };
    let mut out = Outputs::default();
    for (b, _) in &g.bounds {
        out.bounds.insert(b.clone(), bounds.get(b).unwrap());
    }
    for (name, id) in &g.outputs {
        let node = g.node(*id);
        let mut ext = Vec::new();
        for d in &node.domain {
            ext.push(bounds.get(&d.bound).ok_or_else(|| RuntimeError::Other(format!("unbound {}", d.bound)))?);
        }
        let mut pm = PointMap::new();
        for p in domain_points(&ext) {
            let v = o.eval(*id, p.clone())?.ok_or_else(|| RuntimeError::Undefined { tensor: name.clone(), point: p.clone() })?;
            pm.insert(p, v);
        }
        out.values.insert(name.clone(), pm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::dsl::parse_program;
    use crate::pdg::build;

    fn run(src: &str) -> Outputs {
        let g = build(&parse_program(src).unwrap()).unwrap();
        reference_execute(&g, &OracleOptions::default()).unwrap()
    }

    #[test]
    fn prefix_sum_over_time() {
        let src = "dims t;\n bounds T=4;\n x = const(2.0) over (t);\n m = x * sym(t);\n rec s over (t) f64;\n s[0] = m[0];\n s[t+1] = s + m[t+1];\n out s;";
        let out = run(src);
        let s: Vec<f64> = out.values["s"].values().map(|t| t.item()).collect();
        assert_eq!(s, vec![0.0, 2.0, 6.0, 12.0]);
    }

    #[test]
    fn anti_causal_window() {
        let src = "dims t;\n bounds T=3;\n x = sym(t) + 1 over (t);\n y = sum(x[t:T]);\n out y;";
        let out = run(src);
        let y: Vec<f64> = out.values["y"].values().map(|t| t.item()).collect();
        assert_eq!(y, vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn dynamic_bound_stops_at_first_done() {
        let src = "dims t;\n d = sym(t) >= 3;\n bounds T=dyn(d);\n out d;";
        let out = run(src);
        assert_eq!(out.bounds["T"], 4);
        assert_eq!(out.values["d"].len(), 4);
    }

    #[test]
    fn out_of_bounds_read_is_undefined() {
        let src = "dims t;\n bounds T=3;\n x = sym(t) over (t);\n y = x[t+1] * 2;\n out y;";
        let g = build(&parse_program(src).unwrap()).unwrap();
        let err = reference_execute(&g, &OracleOptions::default()).unwrap_err();
        assert!(matches!(err, RuntimeError::Undefined { .. }), "{err}");
    }

    #[test]
    fn long_chain_does_not_overflow_the_stack() {
        let src = "dims t;\n bounds T=3000;\n rec s over (t) f64;\n s[0] = const(0.0);\n s[t+1] = s + 1;\n out s;";
        let out = run(src);
        assert_eq!(out.values["s"][&vec![2999]].item(), 2999.0);
    }
}
