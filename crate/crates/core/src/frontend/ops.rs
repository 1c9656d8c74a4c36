use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symexpr::{Dim, SymExpr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
    Bool,
}

impl DType {
    pub fn size_bytes(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::Bool => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    pub fn parse(s: &str) -> Option<DType> {
        Some(match s {
            "f32" => DType::F32,
            "f64" => DType::F64,
            "i64" => DType::I64,
            "bool" => DType::Bool,
            _ => return None,
        })
    }

    fn promote(a: DType, b: DType) -> DType {
        use DType::*;
        match (a, b) {
            (F64, _) | (_, F64) => F64,
            (F32, _) | (_, F32) => F32,
            (I64, _) | (_, I64) => I64,
            _ => Bool,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I64 => "i64",
            DType::Bool => "bool",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl BinaryOp {
    pub fn is_comparison(self) -> bool {
        matches!(self, BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge | BinaryOp::Eq)
    }
}

/// Input of a node inside a fused body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BodyInput {
    Internal(usize),
    External(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyNode {
    pub kind: OpKind,
    pub inputs: Vec<BodyInput>,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemOp {
    Dealloc,
    Offload,
    Fetch,
}

/// Operator kinds. Ops with a `batch` count treat that many leading axes of
/// every operand as aligned batch axes; vectorization increments it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpKind {
    Const { value: f64, shape: Vec<SymExpr> },
    Param { seed: u64, shape: Vec<usize> },
    Rand { seed: u64, shape: Vec<usize> },
    EvalSymbol { symbol: String },
    Udf { name: String, seed: u64, shape: Vec<SymExpr> },
    Unary { op: UnaryOp, batch: usize },
    Pow { exponent: f64, batch: usize },
    Binary { op: BinaryOp, batch: usize },
    AddN { batch: usize },
    Sum { dim: usize },
    Max { dim: usize },
    CumSum { dim: usize, reverse: bool },
    DSum { gamma: f64, dim: usize },
    DScan { gamma: f64, dim: usize, reverse: bool },
    Matmul { batch: usize },
    Reshape { shape: Vec<SymExpr>, batch: usize },
    Permute { perm: Vec<usize> },
    Squeeze { dim: usize },
    Unsqueeze { dim: usize },
    Expand { shape: Vec<SymExpr>, batch: usize },
    Slice { dim: usize, start: SymExpr, end: SymExpr },
    IndexSelect { dim: usize, index: SymExpr },
    Stack { dim: usize },
    Concat { dim: usize },
    Conv { dim: usize, weights: Vec<f64> },
    Identity,
    Merge,
    SetSymbol { bound: String },
    Vjp { of: Box<OpKind>, wrt: usize, n_inputs: usize },
    GradGather { fwd_phi: Vec<SymExpr>, fwd_cond: Option<SymExpr>, sink_dims: Vec<Dim>, src_dims: Vec<Dim> },
    Dataflow { body: Vec<BodyNode>, output: usize },
    Memory { op: MemOp, tensor: usize, stage: usize },
}

impl OpKind {
    pub fn name(&self) -> String {
        match self {
            OpKind::Const { .. } => "Const".into(),
            OpKind::Param { .. } => "Param".into(),
            OpKind::Rand { .. } => "Rand".into(),
            OpKind::EvalSymbol { symbol } => format!("EvalSymbol({symbol})"),
            OpKind::Udf { name, .. } => format!("Udf({name})"),
            OpKind::Unary { op, .. } => format!("{op:?}"),
            OpKind::Pow { .. } => "Pow".into(),
            OpKind::Binary { op, .. } => format!("{op:?}"),
            OpKind::AddN { .. } => "AddN".into(),
            OpKind::Sum { .. } => "Sum".into(),
            OpKind::Max { .. } => "Max".into(),
            OpKind::CumSum { .. } => "CumSum".into(),
            OpKind::DSum { .. } => "DSum".into(),
            OpKind::DScan { .. } => "DScan".into(),
            OpKind::Matmul { .. } => "Matmul".into(),
            OpKind::Reshape { .. } => "Reshape".into(),
            OpKind::Permute { .. } => "Permute".into(),
            OpKind::Squeeze { .. } => "Squeeze".into(),
            OpKind::Unsqueeze { .. } => "Unsqueeze".into(),
            OpKind::Expand { .. } => "Expand".into(),
            OpKind::Slice { .. } => "Slice".into(),
            OpKind::IndexSelect { .. } => "IndexSelect".into(),
            OpKind::Stack { .. } => "Stack".into(),
            OpKind::Concat { .. } => "Concat".into(),
            OpKind::Conv { .. } => "Conv".into(),
            OpKind::Identity => "Identity".into(),
            OpKind::Merge => "Merge".into(),
            OpKind::SetSymbol { bound } => format!("SetSymbol({bound})"),
            OpKind::Vjp { of, wrt, .. } => format!("Vjp({}, {wrt})", of.name()),
            OpKind::GradGather { .. } => "GradGather".into(),
            OpKind::Dataflow { body, .. } => {
                let names: Vec<String> = body.iter().map(|b| b.kind.name()).collect();
                format!("Dataflow({})", names.join(","))
            }
            OpKind::Memory { op, stage, .. } => match op {
                MemOp::Dealloc => "Dealloc".into(),
                MemOp::Offload => format!("Offload{stage}"),
                MemOp::Fetch => format!("Fetch{stage}"),
            },
        }
    }

    /// Leaf ops that read no inputs.
    pub fn is_source(&self) -> bool {
        matches!(
            self,
            OpKind::Const { .. } | OpKind::Param { .. } | OpKind::Rand { .. } | OpKind::EvalSymbol { .. }
        ) || matches!(self, OpKind::Udf { name, .. } if name == "reset")
    }

    pub fn is_memory(&self) -> bool {
        matches!(self, OpKind::Memory { .. })
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, OpKind::Unary { .. } | OpKind::Pow { .. } | OpKind::Binary { .. } | OpKind::AddN { .. })
    }

    pub fn is_reduction(&self) -> bool {
        matches!(self, OpKind::Sum { .. } | OpKind::Max { .. })
    }

    /// Whether gradients flow through this op.
    pub fn differentiable(&self) -> bool {
        match self {
            OpKind::Const { .. }
            | OpKind::Param { .. }
            | OpKind::Rand { .. }
            | OpKind::EvalSymbol { .. }
            | OpKind::Udf { .. }
            | OpKind::SetSymbol { .. }
            | OpKind::GradGather { .. }
            | OpKind::Vjp { .. }
            | OpKind::Dataflow { .. }
            | OpKind::Memory { .. } => false,
            OpKind::Binary { op, .. } => !op.is_comparison(),
            _ => true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: String, expected: String, got: usize },
    #[error("{op}: incompatible shapes {a} and {b}")]
    Broadcast { op: String, a: String, b: String },
    #[error("{op}: dim {dim} out of range for rank {rank}")]
    Dim { op: String, dim: usize, rank: usize },
    #[error("{op}: {msg}")]
    Other { op: String, msg: String },
}

pub type Shape = Vec<SymExpr>;

pub fn fmt_shape(s: &[SymExpr]) -> String {
    let parts: Vec<String> = s.iter().map(|e| e.to_string()).collect();
    format!("({})", parts.join(", "))
}

pub fn static_shape(s: &[usize]) -> Shape {
    s.iter().map(|v| SymExpr::int(*v as i64)).collect()
}

fn same(a: &SymExpr, b: &SymExpr) -> bool {
    a.simplify() == b.simplify()
}

fn is_one(a: &SymExpr) -> bool {
    a.simplify().as_int() == Some(1)
}

/// Broadcast two shapes: the first `batch` axes are aligned, the rest are
/// right-aligned.
pub fn broadcast(op: &str, a: &[SymExpr], b: &[SymExpr], batch: usize) -> Result<Shape, ShapeError> {
    let err = || ShapeError::Broadcast { op: op.into(), a: fmt_shape(a), b: fmt_shape(b) };
    if a.len() < batch || b.len() < batch {
        return Err(err());
    }
    let mut out = Vec::new();
    for k in 0..batch {
        out.push(merge_extent(&a[k], &b[k]).ok_or_else(err)?);
    }
    let (ra, rb) = (&a[batch..], &b[batch..]);
    let n = ra.len().max(rb.len());
    for k in 0..n {
        let x = if k + ra.len() >= n { Some(&ra[k + ra.len() - n]) } else { None };
        let y = if k + rb.len() >= n { Some(&rb[k + rb.len() - n]) } else { None };
        out.push(match (x, y) {
            (Some(x), Some(y)) => merge_extent(x, y).ok_or_else(err)?,
            (Some(x), None) => x.clone(),
            (None, Some(y)) => y.clone(),
            (None, None) => unreachable!(),
        });
    }
    Ok(out)
}

fn merge_extent(x: &SymExpr, y: &SymExpr) -> Option<SymExpr> {
    if same(x, y) || is_one(y) {
        Some(x.clone())
    } else if is_one(x) {
        Some(y.clone())
    } else {
        None
    }
}

fn check_dim(op: &str, dim: usize, rank: usize) -> Result<(), ShapeError> {
    if dim >= rank {
        return Err(ShapeError::Dim { op: op.into(), dim, rank });
    }
    Ok(())
}

/// Result shape and dtype of applying `kind` to inputs of the given shapes.
pub fn infer(kind: &OpKind, inputs: &[(Shape, DType)]) -> Result<(Shape, DType), ShapeError> {
    let op = kind.name();
    let arity = |n: usize| {
        if inputs.len() != n {
            Err(ShapeError::Arity { op: op.clone(), expected: n.to_string(), got: inputs.len() })
        } else {
            Ok(())
        }
    };
    match kind {
        OpKind::Const { shape, .. } => {
            arity(0)?;
            Ok((shape.clone(), DType::F64))
        }
        OpKind::Param { shape, .. } | OpKind::Rand { shape, .. } => {
            arity(0)?;
            Ok((static_shape(shape), DType::F64))
        }
        OpKind::EvalSymbol { .. } => {
            arity(0)?;
            Ok((vec![], DType::I64))
        }
        OpKind::Udf { name, shape, .. } => match name.as_str() {
            "reset" => Ok((shape.clone(), DType::F64)),
            "step" => {
                if inputs.is_empty() {
                    return Err(ShapeError::Arity { op, expected: "1+".into(), got: 0 });
                }
                Ok((inputs[0].0.clone(), inputs[0].1))
            }
            "reward" => Ok((vec![], DType::F64)),
            "done" => Ok((vec![], DType::Bool)),
            _ => Err(ShapeError::Other { op, msg: format!("unknown function `{name}`") }),
        },
        OpKind::Unary { op: u, batch } => {
            arity(1)?;
            let (s, d) = &inputs[0];
            if s.len() < *batch {
                return Err(ShapeError::Other { op, msg: "rank below batch".into() });
            }
            let dt = if *u == UnaryOp::Neg || *u == UnaryOp::Abs { *d } else { DType::promote(*d, DType::F32) };
            Ok((s.clone(), if dt == DType::Bool { DType::F64 } else { dt }))
        }
        OpKind::Pow { batch, .. } => {
            arity(1)?;
            if inputs[0].0.len() < *batch {
                return Err(ShapeError::Other { op, msg: "rank below batch".into() });
            }
            Ok((inputs[0].0.clone(), DType::promote(inputs[0].1, DType::F32)))
        }
        OpKind::Binary { op: b, batch } => {
            arity(2)?;
            let s = broadcast(&op, &inputs[0].0, &inputs[1].0, *batch)?;
            let dt = if b.is_comparison() { DType::Bool } else { DType::promote(inputs[0].1, inputs[1].1) };
            let dt = if *b == BinaryOp::Div { DType::promote(dt, DType::F32) } else { dt };
            Ok((s, if !b.is_comparison() && dt == DType::Bool { DType::I64 } else { dt }))
        }
        OpKind::AddN { batch } => {
            if inputs.is_empty() {
                return Err(ShapeError::Arity { op, expected: "1+".into(), got: 0 });
            }
            let mut s = inputs[0].0.clone();
            let mut dt = inputs[0].1;
            for (x, d) in &inputs[1..] {
                s = broadcast(&op, &s, x, *batch)?;
                dt = DType::promote(dt, *d);
            }
            Ok((s, dt))
        }
        OpKind::Sum { dim } | OpKind::Max { dim } | OpKind::DSum { dim, .. } => {
            arity(1)?;
            let (s, d) = &inputs[0];
            check_dim(&op, *dim, s.len())?;
            let mut out = s.clone();
            out.remove(*dim);
            let dt = if matches!(kind, OpKind::DSum { .. }) { DType::promote(*d, DType::F32) } else { *d };
            Ok((out, if dt == DType::Bool { DType::I64 } else { dt }))
        }
        OpKind::CumSum { dim, .. } | OpKind::DScan { dim, .. } | OpKind::Conv { dim, .. } => {
            arity(1)?;
            check_dim(&op, *dim, inputs[0].0.len())?;
            Ok((inputs[0].0.clone(), DType::promote(inputs[0].1, DType::I64)))
        }
        OpKind::Matmul { batch } => {
            arity(2)?;
            matmul_shape(&op, &inputs[0].0, &inputs[1].0, *batch)
                .map(|s| (s, DType::promote(inputs[0].1, inputs[1].1)))
        }
        OpKind::Reshape { shape, batch } => {
            arity(1)?;
            let s = &inputs[0].0;
            if s.len() < *batch {
                return Err(ShapeError::Other { op, msg: "rank below batch".into() });
            }
            let mut out: Shape = s[..*batch].to_vec();
            out.extend(shape.iter().cloned());
            let numel = |x: &[SymExpr]| x.iter().map(|e| e.simplify().as_int()).product::<Option<i64>>();
            if let (Some(a), Some(b)) = (numel(&s[*batch..]), numel(shape)) {
                if a != b {
                    return Err(ShapeError::Other { op, msg: format!("cannot reshape {} to {}", fmt_shape(s), fmt_shape(shape)) });
                }
            }
            Ok((out, inputs[0].1))
        }
        OpKind::Permute { perm } => {
            arity(1)?;
            let s = &inputs[0].0;
            let mut sorted = perm.clone();
            sorted.sort();
            if sorted != (0..s.len()).collect::<Vec<_>>() {
                return Err(ShapeError::Other { op, msg: format!("bad permutation {perm:?} for rank {}", s.len()) });
            }
            Ok((perm.iter().map(|k| s[*k].clone()).collect(), inputs[0].1))
        }
        OpKind::Squeeze { dim } => {
            arity(1)?;
            let s = &inputs[0].0;
            check_dim(&op, *dim, s.len())?;
            if !is_one(&s[*dim]) {
                return Err(ShapeError::Other { op, msg: format!("dim {dim} of {} is not 1", fmt_shape(s)) });
            }
            let mut out = s.clone();
            out.remove(*dim);
            Ok((out, inputs[0].1))
        }
        OpKind::Unsqueeze { dim } => {
            arity(1)?;
            let s = &inputs[0].0;
            check_dim(&op, *dim, s.len() + 1)?;
            let mut out = s.clone();
            out.insert(*dim, SymExpr::int(1));
            Ok((out, inputs[0].1))
        }
        OpKind::Expand { shape, batch } => {
            arity(1)?;
            let s = &inputs[0].0;
            let mut target: Shape = s.get(..*batch).unwrap_or(&[]).to_vec();
            target.extend(shape.iter().cloned());
            let b = broadcast(&op, s, &target, *batch)?;
            if b.len() != target.len() || !b.iter().zip(&target).all(|(x, y)| same(x, y)) {
                return Err(ShapeError::Broadcast { op, a: fmt_shape(s), b: fmt_shape(&target) });
            }
            Ok((target, inputs[0].1))
        }
        OpKind::Slice { dim, start, end } => {
            arity(1)?;
            let s = &inputs[0].0;
            check_dim(&op, *dim, s.len())?;
            let mut out = s.clone();
            out[*dim] = SymExpr::sub(end.clone(), start.clone()).simplify();
            Ok((out, inputs[0].1))
        }
        OpKind::IndexSelect { dim, .. } => {
            arity(1)?;
            let s = &inputs[0].0;
            check_dim(&op, *dim, s.len())?;
            let mut out = s.clone();
            out.remove(*dim);
            Ok((out, inputs[0].1))
        }
        OpKind::Stack { dim } => {
            if inputs.is_empty() {
                return Err(ShapeError::Arity { op, expected: "1+".into(), got: 0 });
            }
            let s = &inputs[0].0;
            for (x, _) in &inputs[1..] {
                if x.len() != s.len() || !x.iter().zip(s).all(|(a, b)| same(a, b)) {
                    return Err(ShapeError::Broadcast { op, a: fmt_shape(s), b: fmt_shape(x) });
                }
            }
            check_dim(&op, *dim, s.len() + 1)?;
            let mut out = s.clone();
            out.insert(*dim, SymExpr::int(inputs.len() as i64));
            Ok((out, inputs[0].1))
        }
        OpKind::Concat { dim } => {
            if inputs.is_empty() {
                return Err(ShapeError::Arity { op, expected: "1+".into(), got: 0 });
            }
            let s = &inputs[0].0;
            check_dim(&op, *dim, s.len())?;
            let mut total = s[*dim].clone();
            for (x, _) in &inputs[1..] {
                let ok = x.len() == s.len() && (0..s.len()).all(|k| k == *dim || same(&x[k], &s[k]));
                if !ok {
                    return Err(ShapeError::Broadcast { op, a: fmt_shape(s), b: fmt_shape(x) });
                }
                total = SymExpr::add(total, x[*dim].clone());
            }
            let mut out = s.clone();
            out[*dim] = total.simplify();
            Ok((out, inputs[0].1))
        }
        OpKind::Identity => {
            arity(1)?;
            Ok(inputs[0].clone())
        }
        OpKind::Merge => {
            if inputs.is_empty() {
                return Err(ShapeError::Arity { op, expected: "1+".into(), got: 0 });
            }
            let (s, d) = &inputs[0];
            for (x, dx) in &inputs[1..] {
                if x.len() != s.len() || !x.iter().zip(s).all(|(a, b)| same(a, b)) {
                    return Err(ShapeError::Broadcast { op, a: fmt_shape(s), b: fmt_shape(x) });
                }
                if dx != d {
                    return Err(ShapeError::Other { op, msg: format!("branch dtypes {d} and {dx} differ") });
                }
            }
            Ok((s.clone(), *d))
        }
        OpKind::SetSymbol { .. } => {
            arity(1)?;
            Ok((vec![], DType::Bool))
        }
        OpKind::Vjp { n_inputs, wrt, .. } => {
            // inputs: [grad, output, x_0 .. x_{n-1}]
            if inputs.len() != n_inputs + 2 || *wrt >= *n_inputs {
                return Err(ShapeError::Arity { op, expected: (n_inputs + 2).to_string(), got: inputs.len() });
            }
            let (s, d) = &inputs[2 + wrt];
            Ok((s.clone(), DType::promote(*d, DType::F32)))
        }
        OpKind::GradGather { .. } => Err(ShapeError::Other { op, msg: "shape is given by the gradient target".into() }),
        OpKind::Dataflow { .. } => Err(ShapeError::Other { op, msg: "shape is given by the fused body".into() }),
        OpKind::Memory { .. } => Ok((vec![], DType::Bool)),
    }
}

fn matmul_shape(op: &str, a: &[SymExpr], b: &[SymExpr], batch: usize) -> Result<Shape, ShapeError> {
    let err = || ShapeError::Broadcast { op: op.into(), a: fmt_shape(a), b: fmt_shape(b) };
    if a.len() < batch + 1 || b.len() < batch + 1 {
        return Err(err());
    }
    let mut out: Shape = Vec::new();
    for k in 0..batch {
        out.push(merge_extent(&a[k], &b[k]).ok_or_else(err)?);
    }
    let (ra, rb) = (&a[batch..], &b[batch..]);
    let (ka, kb) = (&ra[ra.len() - 1], if rb.len() == 1 { &rb[0] } else { &rb[rb.len() - 2] });
    if !same(ka, kb) {
        return Err(err());
    }
    let lead_a = if ra.len() >= 2 { &ra[..ra.len() - 2] } else { &[][..] };
    let lead_b = if rb.len() >= 2 { &rb[..rb.len() - 2] } else { &[][..] };
    out.extend(broadcast(op, lead_a, lead_b, 0)?);
    if ra.len() >= 2 {
        out.push(ra[ra.len() - 2].clone());
    }
    if rb.len() >= 2 {
        out.push(rb[rb.len() - 1].clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(v: &[i64]) -> Shape {
        v.iter().map(|x| SymExpr::int(*x)).collect()
    }

    fn f(s: &[i64]) -> (Shape, DType) {
        (sh(s), DType::F64)
    }

    #[test]
    fn broadcasting() {
        let k = OpKind::Binary { op: BinaryOp::Mul, batch: 0 };
        assert_eq!(infer(&k, &[f(&[]), f(&[])]).unwrap().0, sh(&[]));
        assert_eq!(infer(&k, &[f(&[3, 1]), f(&[4])]).unwrap().0, sh(&[3, 4]));
        assert!(infer(&k, &[f(&[3]), f(&[4])]).is_err());
        let k = OpKind::Binary { op: BinaryOp::Add, batch: 1 };
        assert_eq!(infer(&k, &[f(&[5, 3]), f(&[5])]).unwrap().0, sh(&[5, 3]));
        let lt = OpKind::Binary { op: BinaryOp::Lt, batch: 0 };
        assert_eq!(infer(&lt, &[f(&[2]), f(&[])]).unwrap().1, DType::Bool);
    }

    #[test]
    fn reductions_and_layout() {
        assert_eq!(infer(&OpKind::Sum { dim: 0 }, &[f(&[4, 3])]).unwrap().0, sh(&[3]));
        assert_eq!(infer(&OpKind::Permute { perm: vec![1, 0] }, &[f(&[4, 3])]).unwrap().0, sh(&[3, 4]));
        assert_eq!(infer(&OpKind::Unsqueeze { dim: 0 }, &[f(&[3])]).unwrap().0, sh(&[1, 3]));
        assert!(infer(&OpKind::Squeeze { dim: 0 }, &[f(&[3])]).is_err());
        let e = OpKind::Expand { shape: sh(&[4, 3]), batch: 0 };
        assert_eq!(infer(&e, &[f(&[3])]).unwrap().0, sh(&[4, 3]));
        assert_eq!(infer(&OpKind::Stack { dim: 0 }, &[f(&[3]), f(&[3])]).unwrap().0, sh(&[2, 3]));
    }

    #[test]
    fn symbolic_slice_extent() {
        let t_big = SymExpr::sym("T");
        let input = (vec![t_big.clone()], DType::F64);
        let k = OpKind::Slice { dim: 0, start: SymExpr::sym("t"), end: t_big };
        assert_eq!(infer(&k, &[input]).unwrap().0[0].to_string(), "T-t");
    }

    #[test]
    fn matmul_shapes() {
        let k = OpKind::Matmul { batch: 0 };
        assert_eq!(infer(&k, &[f(&[2, 3]), f(&[3, 4])]).unwrap().0, sh(&[2, 4]));
        assert_eq!(infer(&k, &[f(&[3]), f(&[3, 4])]).unwrap().0, sh(&[4]));
        assert_eq!(infer(&k, &[f(&[5, 2, 3]), f(&[3, 4])]).unwrap().0, sh(&[5, 2, 4]));
        assert!(infer(&k, &[f(&[2, 3]), f(&[2, 4])]).is_err());
        let kb = OpKind::Matmul { batch: 1 };
        assert_eq!(infer(&kb, &[f(&[6, 3]), f(&[6, 3, 4])]).unwrap().0, sh(&[6, 4]));
    }
}
