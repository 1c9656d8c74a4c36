//! Reverse-mode differentiation over recurrent tensors.
//!
//! Every tensor on a path from the parameter to the loss gets a gradient
//! tensor defined as an `AddN` of contributions. A contribution read at a
//! non-identity index is routed back through the inverse of that index by a
//! `GradGather`, which sums over every sink point that read the source point.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::ops::{DType, OpKind};
use super::{Access, Def, FrontendError, Program, Result};
use crate::symexpr::{invert, SymExpr};

fn inputs_of(def: &Def) -> &[Access] {
    match def {
        Def::Op { inputs, .. } => inputs,
        Def::Branches(bs) => bs,
    }
}

fn passes_gradient(def: &Def) -> bool {
    match def {
        Def::Op { kind, .. } => kind.differentiable(),
        Def::Branches(_) => true,
    }
}

fn float(d: DType) -> DType {
    if d.is_float() {
        d
    } else {
        DType::F64
    }
}

pub fn backward(p: &mut Program, loss: usize, param: usize) -> Result<usize> {
    let lt = p.tensor(loss);
    if !lt.shape.is_empty() {
        return Err(FrontendError::NonScalarLoss(lt.name.clone()));
    }
    let n = p.tensors.len();
    let mut consumers: Vec<Vec<usize>> = vec![vec![]; n];
    for t in &p.tensors {
        for a in inputs_of(&t.def) {
            consumers[a.tensor].push(t.id);
        }
    }
    let mut fwd = BTreeSet::from([param]);
    let mut queue = VecDeque::from([param]);
    while let Some(x) = queue.pop_front() {
        for &y in &consumers[x] {
            if passes_gradient(&p.tensors[y].def) && fwd.insert(y) {
                queue.push_back(y);
            }
        }
    }
    let mut path = BTreeSet::new();
    if fwd.contains(&loss) {
        path.insert(loss);
        let mut queue = VecDeque::from([loss]);
        while let Some(y) = queue.pop_front() {
            if y == param {
                continue;
            }
            for a in inputs_of(&p.tensors[y].def) {
                if fwd.contains(&a.tensor) && path.insert(a.tensor) {
                    queue.push_back(a.tensor);
                }
            }
        }
    }
    let pname = p.tensor(param).name.clone();
    if !path.contains(&param) {
        let t = p.tensor(param).clone();
        let kind = OpKind::Const { value: 0.0, shape: t.shape.clone() };
        let def = Def::Op { kind, inputs: vec![] };
        return Ok(p.push_tensor(Some(&format!("grad_{pname}")), t.domain, t.shape, float(t.dtype), def));
    }

    let mut grads: BTreeMap<usize, usize> = BTreeMap::new();
    for &id in &path {
        let t = p.tensor(id).clone();
        let name = if id == param { format!("grad_{pname}") } else { format!("grad{id}") };
        let def = Def::Op { kind: OpKind::AddN { batch: 0 }, inputs: vec![] };
        let g = p.push_tensor(Some(&name), t.domain.clone(), t.shape.clone(), float(t.dtype), def);
        grads.insert(id, g);
    }
    let seed = {
        let t = p.tensor(loss).clone();
        let def = Def::Op { kind: OpKind::Const { value: 1.0, shape: vec![] }, inputs: vec![] };
        p.push_tensor(None, t.domain, vec![], float(t.dtype), def)
    };
    add_input(p, grads[&loss], Access::linear(seed));

    for &y in &path {
        if y == param {
            continue;
        }
        let yt = p.tensor(y).clone();
        let gy = grads[&y];
        match &yt.def {
            Def::Branches(bs) => {
                let zeros = {
                    let def = Def::Op { kind: OpKind::Const { value: 0.0, shape: yt.shape.clone() }, inputs: vec![] };
                    p.push_tensor(None, yt.domain.clone(), yt.shape.clone(), float(yt.dtype), def)
                };
                let mut earlier: Vec<SymExpr> = Vec::new();
                for b in bs {
                    let psi = b.cond.clone().unwrap_or_else(|| SymExpr::bool(true));
                    let mut sel = psi.clone();
                    for e in &earlier {
                        sel = SymExpr::and(sel, SymExpr::not(e.clone()));
                    }
                    let sel = sel.simplify();
                    earlier.push(psi);
                    if !path.contains(&b.tensor) {
                        continue;
                    }
                    let id_ix = yt.identity_index();
                    let def = Def::Branches(vec![
                        Access { tensor: gy, index: Some(id_ix.clone()), cond: Some(sel.clone()) },
                        Access { tensor: zeros, index: Some(id_ix), cond: Some(SymExpr::not(sel).simplify()) },
                    ]);
                    let c = p.push_tensor(None, yt.domain.clone(), yt.shape.clone(), float(yt.dtype), def);
                    let phi = b.index.clone().unwrap_or_else(|| p.tensor(b.tensor).identity_index());
                    gather(p, c, y, b.tensor, phi, None, grads[&b.tensor])?;
                }
            }
            Def::Op { kind, inputs } => {
                for (k, a) in inputs.iter().enumerate() {
                    if !path.contains(&a.tensor) {
                        continue;
                    }
                    let vjp = OpKind::Vjp { of: Box::new(kind.clone()), wrt: k, n_inputs: inputs.len() };
                    let mut vin = vec![Access::linear(gy), Access::linear(y)];
                    vin.extend(inputs.iter().cloned());
                    let shape = p.access_shape(a);
                    let dt = float(p.tensor(a.tensor).dtype);
                    let c = p.push_tensor(None, yt.domain.clone(), shape, dt, Def::Op { kind: vjp, inputs: vin });
                    let phi = a.index.clone().unwrap_or_else(|| p.tensor(a.tensor).identity_index());
                    gather(p, c, y, a.tensor, phi, a.cond.clone(), grads[&a.tensor])?;
                }
            }
        }
    }
    Ok(grads[&param])
}

fn add_input(p: &mut Program, g: usize, a: Access) {
    if let Def::Op { inputs, .. } = &mut p.tensors[g].def {
        inputs.push(a);
    }
}

/// Route contribution `c` (over the domain of `y`) back to the gradient of
/// `x`, where `y` read `x` at `phi` under `cond`.
fn gather(p: &mut Program, c: usize, y: usize, x: usize, phi: Vec<SymExpr>, cond: Option<SymExpr>, gx: usize) -> Result<()> {
    let yt = p.tensor(y).clone();
    let xt = p.tensor(x).clone();
    if cond.is_none() && yt.domain == xt.domain && phi == xt.identity_index() {
        add_input(p, gx, Access::linear(c));
        return Ok(());
    }
    let inv = invert(&phi, &yt.domain, &xt.domain)
        .map_err(|e| FrontendError::Grad(format!("`{}` read by `{}`: {e}", xt.name, yt.name)))?;
    let access = Access {
        tensor: c,
        index: Some(inv.index.clone()),
        cond: if inv.is_unconditional() { None } else { Some(inv.cond.clone()) },
    };
    let kind = OpKind::GradGather { fwd_phi: phi, fwd_cond: cond, sink_dims: yt.domain.clone(), src_dims: xt.domain.clone() };
    let gg = p.push_tensor(None, xt.domain.clone(), xt.shape.clone(), float(xt.dtype), Def::Op { kind, inputs: vec![access] });
    add_input(p, gx, Access::linear(gg));
    Ok(())
}
