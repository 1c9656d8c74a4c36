//! Recurrent-tensor programs: symbolic dims, tensors defined by ops or by
//! branch lists, domain inference and symbolic differentiation.

pub mod autodiff;
pub mod dsl;
pub mod ops;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symexpr::{classify_affine, AffineClass, Dim, Env, LinExpr, SymError, SymExpr};
use ops::{infer, DType, OpKind, Shape, ShapeError};

/// Largest extent per dim used when enumerating branch conditions.
pub const OVERLAP_CHECK_EXTENT: i64 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrontendError {
    #[error("duplicate name `{0}`")]
    Duplicate(String),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("unknown dim or bound `{0}`")]
    UnknownDim(String),
    #[error("{0}")]
    Shape(#[from] ShapeError),
    #[error("{0}")]
    Sym(#[from] SymError),
    #[error("bad index on `{tensor}`: {msg}")]
    Index { tensor: String, msg: String },
    #[error("branches of `{tensor}` overlap at {point}")]
    Overlap { tensor: String, point: String },
    #[error("`{0}` is not defined by branches")]
    NotBranched(String),
    #[error("loss `{0}` must have an empty shape")]
    NonScalarLoss(String),
    #[error("cannot differentiate: {0}")]
    Grad(String),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, FrontendError>;

/// How an upper bound gets its value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    Static(i64),
    /// Set at runtime: the bound becomes `t+1` at the first `t` where the
    /// named boolean tensor over `(t)` is true.
    Dynamic { done: String },
    /// Computed from other non-dynamic bounds, e.g. a block count.
    Derived(SymExpr),
    Unbound,
}

/// A read of a tensor. `index` has one component per dim of the source
/// domain; `None` means the tensor is read linearly at the sink's point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Access {
    pub tensor: usize,
    pub index: Option<Vec<SymExpr>>,
    pub cond: Option<SymExpr>,
}

impl Access {
    pub fn linear(tensor: usize) -> Self {
        Access { tensor, index: None, cond: None }
    }

    pub fn indexed(tensor: usize, index: Vec<SymExpr>) -> Self {
        Access { tensor, index: Some(index), cond: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Def {
    Op { kind: OpKind, inputs: Vec<Access> },
    /// Branch list, lowered to a Merge. Each access is written in the
    /// frame of the defined tensor and carries its condition.
    Branches(Vec<Access>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecTensor {
    pub id: usize,
    pub name: String,
    pub domain: Vec<Dim>,
    pub shape: Shape,
    pub dtype: DType,
    pub def: Def,
}

impl RecTensor {
    pub fn dim_names(&self) -> Vec<&str> {
        self.domain.iter().map(|d| d.name.as_str()).collect()
    }

    /// Identity index over the tensor's own domain.
    pub fn identity_index(&self) -> Vec<SymExpr> {
        self.domain.iter().map(|d| SymExpr::sym(&d.name)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradInfo {
    pub loss: usize,
    pub param: usize,
    pub grad: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub dims: Vec<Dim>,
    pub bounds: BTreeMap<String, Bound>,
    pub tensors: Vec<RecTensor>,
    pub outputs: Vec<usize>,
    pub grads: Vec<GradInfo>,
}

impl Program {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declare a loop dim `name` with bound `NAME`.
    pub fn declare_dim(&mut self, name: &str) -> Result<Dim> {
        self.declare_dim_with_bound(name, &name.to_uppercase())
    }

    pub fn declare_dim_with_bound(&mut self, name: &str, bound: &str) -> Result<Dim> {
        let taken = |n: &str| self.dims.iter().any(|d| d.name == n || d.bound == n);
        if taken(name) || taken(bound) || name == bound {
            return Err(FrontendError::Duplicate(name.into()));
        }
        let d = Dim::new(name, bound);
        self.dims.push(d.clone());
        self.bounds.insert(bound.into(), Bound::Unbound);
        Ok(d)
    }

    pub fn dim(&self, name: &str) -> Option<&Dim> {
        self.dims.iter().find(|d| d.name == name)
    }

    pub fn dim_of_bound(&self, bound: &str) -> Option<&Dim> {
        self.dims.iter().find(|d| d.bound == bound)
    }

    pub fn bind(&mut self, bound: &str, value: Bound) -> Result<()> {
        match self.bounds.get_mut(bound) {
            Some(b) => {
                *b = value;
                Ok(())
            }
            None => Err(FrontendError::UnknownDim(bound.into())),
        }
    }

    /// Dims in canonical (declaration) order.
    pub fn canonical(&self, names: &BTreeSet<String>) -> Vec<Dim> {
        self.dims.iter().filter(|d| names.contains(&d.name)).cloned().collect()
    }

    /// Union of domains, in canonical order.
    pub fn infer_domain(&self, domains: &[&[Dim]]) -> Vec<Dim> {
        let names: BTreeSet<String> = domains.iter().flat_map(|d| d.iter().map(|x| x.name.clone())).collect();
        self.canonical(&names)
    }

    pub fn tensor(&self, id: usize) -> &RecTensor {
        &self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().rev().find(|t| t.name == name).map(|t| t.id)
    }

    fn dim_names(&self) -> BTreeSet<String> {
        self.dims.iter().map(|d| d.name.clone()).collect()
    }

    /// Sink dims an access depends on.
    pub fn access_dims(&self, a: &Access) -> BTreeSet<String> {
        match &a.index {
            None => self.tensors[a.tensor].domain.iter().map(|d| d.name.clone()).collect(),
            Some(ix) => {
                let dims = self.dim_names();
                ix.iter().flat_map(|c| c.free_symbols()).filter(|s| dims.contains(s)).collect()
            }
        }
    }

    /// Shape seen by the reader: one leading axis per slice component,
    /// followed by the source shape.
    pub fn access_shape(&self, a: &Access) -> Shape {
        let src = &self.tensors[a.tensor];
        let mut shape = Vec::new();
        if let Some(ix) = &a.index {
            for c in ix {
                if let Some((lo, hi)) = c.as_slice() {
                    shape.push(SymExpr::sub(hi.clone(), lo.clone()).simplify());
                }
            }
        }
        shape.extend(src.shape.iter().cloned());
        shape
    }

    fn check_access(&self, a: &Access) -> Result<()> {
        let src = self.tensors.get(a.tensor).ok_or_else(|| FrontendError::UnknownTensor(a.tensor.to_string()))?;
        if let Some(ix) = &a.index {
            let err = |msg: String| FrontendError::Index { tensor: src.name.clone(), msg };
            if ix.len() != src.domain.len() {
                return Err(err(format!("expected {} components, got {}", src.domain.len(), ix.len())));
            }
            if classify_affine(ix, &src.dim_names()) == AffineClass::NonAffine {
                let parts: Vec<String> = ix.iter().map(|c| c.to_string()).collect();
                return Err(err(format!("[{}] is not affine", parts.join(", "))));
            }
            self.check_symbols(ix.iter())?;
        }
        if let Some(c) = &a.cond {
            self.check_symbols(std::iter::once(c))?;
        }
        Ok(())
    }

    fn check_symbols<'a>(&self, exprs: impl Iterator<Item = &'a SymExpr>) -> Result<()> {
        for e in exprs {
            for s in e.free_symbols() {
                if self.dim(&s).is_none() && !self.bounds.contains_key(&s) {
                    return Err(FrontendError::UnknownDim(s));
                }
            }
        }
        Ok(())
    }

    fn fresh_name(&self, name: Option<&str>) -> String {
        match name {
            Some(n) => n.to_string(),
            None => format!("%{}", self.tensors.len()),
        }
    }

    /// Push a tensor with an explicit domain, shape and definition.
    pub fn push_tensor(&mut self, name: Option<&str>, domain: Vec<Dim>, shape: Shape, dtype: DType, def: Def) -> usize {
        let id = self.tensors.len();
        let name = self.fresh_name(name);
        self.tensors.push(RecTensor { id, name, domain, shape, dtype, def });
        id
    }

    /// Apply an op. The domain is the union of the inputs' domains and the
    /// extra dims in `over`.
    pub fn apply_op(&mut self, name: Option<&str>, kind: OpKind, inputs: Vec<Access>, over: &[&str]) -> Result<usize> {
        for a in &inputs {
            self.check_access(a)?;
        }
        let mut names: BTreeSet<String> = BTreeSet::new();
        for a in &inputs {
            names.extend(self.access_dims(a));
        }
        for d in over {
            if self.dim(d).is_none() {
                return Err(FrontendError::UnknownDim(d.to_string()));
            }
            names.insert(d.to_string());
        }
        let shapes: Vec<(Shape, DType)> =
            inputs.iter().map(|a| (self.access_shape(a), self.tensors[a.tensor].dtype)).collect();
        let (shape, dtype) = infer(&kind, &shapes)?;
        self.check_symbols(shape.iter())?;
        let domain = self.canonical(&names);
        Ok(self.push_tensor(name, domain, shape, dtype, Def::Op { kind, inputs }))
    }

    /// Declare a tensor defined later by `branch_define`.
    pub fn declare_rec(&mut self, name: &str, domain: &[&str], shape: Shape, dtype: DType) -> Result<usize> {
        let mut names = BTreeSet::new();
        for d in domain {
            if self.dim(d).is_none() {
                return Err(FrontendError::UnknownDim(d.to_string()));
            }
            names.insert(d.to_string());
        }
        let dom = self.canonical(&names);
        let given: Vec<&str> = domain.to_vec();
        if dom.iter().map(|d| d.name.as_str()).collect::<Vec<_>>() != given {
            return Err(FrontendError::Index { tensor: name.into(), msg: "domain must follow declaration order".into() });
        }
        self.check_symbols(shape.iter())?;
        Ok(self.push_tensor(Some(name), dom, shape, dtype, Def::Branches(vec![])))
    }

    /// Add the branch `x[lhs] = rhs if cond`. `lhs` has one component per
    /// dim of `x`, each `d+c` or a constant; `cond` is written over the
    /// symbols of `lhs`.
    pub fn branch_define(&mut self, x: usize, lhs: &[SymExpr], cond: Option<SymExpr>, rhs: usize) -> Result<()> {
        let xt = self.tensors[x].clone();
        let err = |msg: String| FrontendError::Index { tensor: xt.name.clone(), msg };
        if !matches!(xt.def, Def::Branches(_)) {
            return Err(FrontendError::NotBranched(xt.name.clone()));
        }
        if lhs.len() != xt.domain.len() {
            return Err(err(format!("expected {} components, got {}", xt.domain.len(), lhs.len())));
        }
        // Per dim of x: Some(c) for `d+c`, None for a constant component.
        let mut shift: BTreeMap<String, i64> = BTreeMap::new();
        let mut conds: Vec<SymExpr> = Vec::new();
        for (d, e) in xt.domain.iter().zip(lhs) {
            let e = e.simplify();
            let lin = LinExpr::from_expr(&e).ok_or_else(|| err(format!("component `{e}` is not affine")))?;
            let dsym = SymExpr::sym(&d.name);
            if lin.is_constant() {
                conds.push(SymExpr::eq(dsym, SymExpr::int(lin.constant)));
            } else if lin.coef(&d.name) == 1 && lin.vars().count() == 1 {
                let c = lin.constant;
                shift.insert(d.name.clone(), c);
                if c > 0 {
                    conds.push(SymExpr::ge(dsym, SymExpr::int(c)));
                } else if c < 0 {
                    conds.push(SymExpr::lt(dsym, SymExpr::offset(SymExpr::sym(&d.bound), c)));
                }
            } else {
                return Err(err(format!("component `{e}` must be `{}` plus a constant", d.name)));
            }
        }
        let rt = &self.tensors[rhs];
        let mut phi = Vec::new();
        for d in &rt.domain {
            match shift.get(&d.name) {
                Some(c) => phi.push(SymExpr::offset(SymExpr::sym(&d.name), -c).simplify()),
                None => {
                    return Err(err(format!("right-hand side varies over `{}` which the left-hand side fixes", d.name)));
                }
            }
        }
        let to_frame = |e: &SymExpr| {
            e.substitute(&|s| shift.get(s).map(|c| SymExpr::offset(SymExpr::sym(s), -c))).simplify()
        };
        if let Some(c) = &cond {
            self.check_symbols(std::iter::once(c))?;
            conds.push(to_frame(c));
        }
        let rshape: Vec<SymExpr> = rt.shape.iter().map(to_frame).collect();
        let same_shape = rshape.len() == xt.shape.len()
            && rshape.iter().zip(&xt.shape).all(|(a, b)| a.simplify() == b.simplify());
        if !same_shape {
            return Err(FrontendError::Shape(ShapeError::Broadcast {
                op: format!("branch of {}", xt.name),
                a: ops::fmt_shape(&xt.shape),
                b: ops::fmt_shape(&rshape),
            }));
        }
        let psi = conds.into_iter().reduce(SymExpr::and).unwrap_or_else(|| SymExpr::bool(true)).simplify();
        if let Def::Branches(bs) = &mut self.tensors[x].def {
            bs.push(Access { tensor: rhs, index: Some(phi), cond: Some(psi) });
        }
        self.check_disjoint(x)
    }

    /// Enumerate the domain of a branch-defined tensor (at most
    /// `OVERLAP_CHECK_EXTENT` per dim) and reject points where two
    /// conditions hold.
    pub fn check_disjoint(&self, x: usize) -> Result<()> {
        let t = &self.tensors[x];
        let Def::Branches(bs) = &t.def else { return Ok(()) };
        if bs.len() < 2 {
            return Ok(());
        }
        let mut env = Env::new();
        let mut extents = Vec::new();
        for d in &self.dims {
            let e = match self.bounds.get(&d.bound) {
                Some(Bound::Static(v)) => (*v).min(OVERLAP_CHECK_EXTENT),
                _ => OVERLAP_CHECK_EXTENT,
            };
            env.bind(&d.bound, e);
            if t.domain.contains(d) {
                extents.push((d.name.clone(), e));
            }
        }
        let mut idx = vec![0i64; extents.len()];
        loop {
            for (k, (n, _)) in extents.iter().enumerate() {
                env.bind(n, idx[k]);
            }
            let mut hits = 0;
            for b in bs {
                let c = b.cond.as_ref().map(|c| c.eval_bool(&env)).transpose()?.unwrap_or(true);
                hits += c as usize;
            }
            if hits > 1 {
                let pt: Vec<String> = extents.iter().zip(&idx).map(|((n, _), v)| format!("{n}={v}")).collect();
                return Err(FrontendError::Overlap { tensor: t.name.clone(), point: format!("({})", pt.join(", ")) });
            }
            let mut k = extents.len();
            loop {
                if k == 0 {
                    return Ok(());
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < extents[k].1 {
                    break;
                }
                idx[k] = 0;
            }
        }
    }

    pub fn mark_output(&mut self, id: usize) {
        if !self.outputs.contains(&id) {
            self.outputs.push(id);
        }
    }

    /// Differentiate the sum of `loss` over its domain with respect to
    /// `param`; returns the gradient tensor.
    pub fn grad(&mut self, loss: usize, param: usize) -> Result<usize> {
        let g = autodiff::backward(self, loss, param)?;
        self.grads.push(GradInfo { loss, param, grad: g });
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    pub fn from_json(s: &str) -> std::result::Result<Program, serde_json::Error> {
        serde_json::from_str(s)
    }
}
