//! Forward and vector-Jacobian kernels over dense tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::tensor::{broadcast_shape, broadcast_strides, for_each_offset, numel, strides, Tensor};
use crate::frontend::ops::{BinaryOp, BodyInput, DType, OpKind, UnaryOp};
use crate::symexpr::{eval_components, Dim, Env, IndexComp, SymExpr};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{op}: {msg}")]
pub struct KernelError {
    pub op: String,
    pub msg: String,
}

fn kerr(kind: &OpKind, msg: impl Into<String>) -> KernelError {
    KernelError { op: kind.name(), msg: msg.into() }
}

/// Evaluation context for one kernel launch.
pub struct KernelCtx<'a> {
    /// Dim symbols bound to the current point, plus all bounds.
    pub env: &'a Env,
    /// The point, in domain order.
    pub point: &'a [i64],
    pub seed: u64,
}

/// Deterministic generator keyed by a seed and a point.
pub fn point_rng(seed: u64, salt: u64, point: &[i64]) -> ChaCha8Rng {
    let mut key = seed ^ salt.rotate_left(32) ^ 0x51_7c_c1_b7_27_22_0a_95;
    for &p in point {
        key = key.rotate_left(17).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (p as u64);
    }
    ChaCha8Rng::seed_from_u64(key)
}

fn eval_usize(kind: &OpKind, e: &SymExpr, env: &Env) -> Result<usize, KernelError> {
    let v = e.eval_int(env).map_err(|x| kerr(kind, x.to_string()))?;
    usize::try_from(v).map_err(|_| kerr(kind, format!("`{e}` evaluates to {v}")))
}

fn eval_shape(kind: &OpKind, s: &[SymExpr], env: &Env) -> Result<Vec<usize>, KernelError> {
    s.iter().map(|e| eval_usize(kind, e, env)).collect()
}

fn zip_with(a: &Tensor, b: &Tensor, batch: usize, kind: &OpKind, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, KernelError> {
    let out = broadcast_shape(&a.shape, &b.shape, batch)
        .ok_or_else(|| kerr(kind, format!("cannot broadcast {:?} with {:?}", a.shape, b.shape)))?;
    let sa = broadcast_strides(&a.shape, &out, batch).unwrap();
    let sb = broadcast_strides(&b.shape, &out, batch).unwrap();
    let mut data = Vec::with_capacity(numel(&out));
    for_each_offset(&out, &[&sa, &sb], |o| data.push(f(a.data[o[0]], b.data[o[1]])));
    Ok(Tensor::new(out, data, DType::F64))
}

fn unary_fn(op: UnaryOp) -> fn(f64) -> f64 {
    match op {
        UnaryOp::Neg => |x| -x,
        UnaryOp::Exp => f64::exp,
        UnaryOp::Log => f64::ln,
        UnaryOp::Tanh => f64::tanh,
        UnaryOp::Abs => f64::abs,
    }
}

fn binary_fn(op: BinaryOp) -> fn(f64, f64) -> f64 {
    match op {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
        BinaryOp::Div => |x, y| x / y,
        BinaryOp::Max => f64::max,
        BinaryOp::Min => f64::min,
        BinaryOp::Lt => |x, y| (x < y) as u8 as f64,
        BinaryOp::Le => |x, y| (x <= y) as u8 as f64,
        BinaryOp::Gt => |x, y| (x > y) as u8 as f64,
        BinaryOp::Ge => |x, y| (x >= y) as u8 as f64,
        BinaryOp::Eq => |x, y| (x == y) as u8 as f64,
    }
}

fn dscan_line(line: &[f64], gamma: f64, reverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; line.len()];
    let mut acc = 0.0;
    if reverse {
        for k in (0..line.len()).rev() {
            acc = line[k] + gamma * acc;
            out[k] = acc;
        }
    } else {
        for k in 0..line.len() {
            acc = line[k] + gamma * acc;
            out[k] = acc;
        }
    }
    out
}

fn cumsum_line(line: &[f64], reverse: bool) -> Vec<f64> {
    dscan_line(line, 1.0, reverse)
}

fn dsum_line(line: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    for v in line.iter().rev() {
        acc = v + gamma * acc;
    }
    acc
}

/// Forward window: `y[j] = Σ_k w[k]·x[j+k]`, terms past the end dropped.
fn conv_line(line: &[f64], w: &[f64]) -> Vec<f64> {
    (0..line.len()).map(|j| w.iter().enumerate().filter(|(k, _)| j + k < line.len()).map(|(k, wk)| wk * line[j + k]).sum()).collect()
}

fn conv_line_vjp(g: &[f64], w: &[f64]) -> Vec<f64> {
    (0..g.len()).map(|m| w.iter().enumerate().filter(|(k, _)| *k <= m).map(|(k, wk)| wk * g[m - k]).sum()).collect()
}

struct MatmulPlan {
    lead: Vec<usize>,
    a_st: Vec<usize>,
    b_st: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_plan(sa: &[usize], sb: &[usize], batch: usize) -> Option<MatmulPlan> {
    if sa.len() < batch + 1 || sb.len() < batch + 1 {
        return None;
    }
    let (ra, rb) = (&sa[batch..], &sb[batch..]);
    let a_vec = ra.len() == 1;
    let b_vec = rb.len() == 1;
    let m = if a_vec { 1 } else { ra[ra.len() - 2] };
    let k = ra[ra.len() - 1];
    let kb = if b_vec { rb[0] } else { rb[rb.len() - 2] };
    let n = if b_vec { 1 } else { rb[rb.len() - 1] };
    if k != kb {
        return None;
    }
    let mut a_lead = sa[..batch].to_vec();
    if !a_vec {
        a_lead.extend_from_slice(&ra[..ra.len() - 2]);
    }
    let mut b_lead = sb[..batch].to_vec();
    if !b_vec {
        b_lead.extend_from_slice(&rb[..rb.len() - 2]);
    }
    let lead = broadcast_shape(&a_lead, &b_lead, batch)?;
    let a_st: Vec<usize> = broadcast_strides(&a_lead, &lead, batch)?.iter().map(|s| s * m * k).collect();
    let b_st: Vec<usize> = broadcast_strides(&b_lead, &lead, batch)?.iter().map(|s| s * k * n).collect();
    let mut out_shape = lead.clone();
    if !a_vec {
        out_shape.push(m);
    }
    if !b_vec {
        out_shape.push(n);
    }
    Some(MatmulPlan { lead, a_st, b_st, m, k, n, out_shape })
}

fn matmul(kind: &OpKind, a: &Tensor, b: &Tensor, batch: usize) -> Result<Tensor, KernelError> {
    let p = matmul_plan(&a.shape, &b.shape, batch)
        .ok_or_else(|| kerr(kind, format!("cannot multiply {:?} by {:?}", a.shape, b.shape)))?;
    let mut out = Vec::with_capacity(numel(&p.out_shape));
    for_each_offset(&p.lead, &[&p.a_st, &p.b_st], |o| {
        for i in 0..p.m {
            for j in 0..p.n {
                let mut acc = 0.0;
                for kk in 0..p.k {
                    acc += a.data[o[0] + i * p.k + kk] * b.data[o[1] + kk * p.n + j];
                }
                out.push(acc);
            }
        }
    });
    Ok(Tensor::new(p.out_shape, out, DType::F64))
}

fn matmul_vjp(kind: &OpKind, a: &Tensor, b: &Tensor, g: &Tensor, batch: usize, wrt: usize) -> Result<Tensor, KernelError> {
    let p = matmul_plan(&a.shape, &b.shape, batch).ok_or_else(|| kerr(kind, "bad operands"))?;
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; b.numel()];
    let mut go = 0;
    for_each_offset(&p.lead, &[&p.a_st, &p.b_st], |o| {
        for i in 0..p.m {
            for j in 0..p.n {
                let gv = g.data[go + i * p.n + j];
                for kk in 0..p.k {
                    if wrt == 0 {
                        da[o[0] + i * p.k + kk] += gv * b.data[o[1] + kk * p.n + j];
                    } else {
                        db[o[1] + kk * p.n + j] += gv * a.data[o[0] + i * p.k + kk];
                    }
                }
            }
        }
        go += p.m * p.n;
    });
    Ok(if wrt == 0 { Tensor::new(a.shape.clone(), da, DType::F64) } else { Tensor::new(b.shape.clone(), db, DType::F64) })
}

fn check_arity(kind: &OpKind, inputs: &[Tensor], n: usize) -> Result<(), KernelError> {
    if inputs.len() != n {
        return Err(kerr(kind, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

fn axis_ok(kind: &OpKind, x: &Tensor, dim: usize) -> Result<(), KernelError> {
    if dim >= x.rank() {
        return Err(kerr(kind, format!("dim {dim} out of range for shape {:?}", x.shape)));
    }
    Ok(())
}

fn mean(t: &Tensor) -> f64 {
    if t.numel() == 0 {
        0.0
    } else {
        t.data.iter().sum::<f64>() / t.numel() as f64
    }
}

/// Deterministic stand-ins for environment functions.
fn udf(kind: &OpKind, name: &str, seed: u64, shape: &[SymExpr], inputs: &[Tensor], cx: &KernelCtx) -> Result<Tensor, KernelError> {
    let mut rng = point_rng(cx.seed, seed.wrapping_add(name.len() as u64 * 7919), cx.point);
    match name {
        "reset" => {
            let s = eval_shape(kind, shape, cx.env)?;
            let data = (0..numel(&s)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Ok(Tensor::new(s, data, DType::F64))
        }
        "step" => {
            let o = inputs.first().ok_or_else(|| kerr(kind, "needs an observation"))?;
            let drive: f64 = inputs[1..].iter().map(mean).sum();
            let data = o.data.iter().map(|v| (0.9 * v + 0.1 * drive + 0.05 * rng.gen_range(-1.0..1.0)).tanh()).collect();
            Ok(Tensor::new(o.shape.clone(), data, DType::F64))
        }
        "reward" => {
            let o = inputs.first().ok_or_else(|| kerr(kind, "needs an observation"))?;
            let drive: f64 = inputs[1..].iter().map(mean).sum();
            let sq = if o.numel() == 0 { 0.0 } else { o.data.iter().map(|v| v * v).sum::<f64>() / o.numel() as f64 };
            Ok(Tensor::scalar(0.1 * drive - sq, DType::F64))
        }
        "done" => {
            let o = inputs.first().ok_or_else(|| kerr(kind, "needs an input"))?;
            Ok(Tensor::scalar((mean(o) > 0.5) as u8 as f64, DType::Bool))
        }
        _ => Err(kerr(kind, format!("unknown function `{name}`"))),
    }
}

/// Run a forward kernel. Merge, SetSymbol and memory ops are handled by
/// the caller; Merge here just copies its single selected input.
pub fn forward(kind: &OpKind, inputs: &[Tensor], cx: &KernelCtx) -> Result<Tensor, KernelError> {
    match kind {
        OpKind::Const { value, shape } => Ok(Tensor::full(&eval_shape(kind, shape, cx.env)?, *value, DType::F64)),
        OpKind::Param { seed, shape } => {
            let mut rng = point_rng(cx.seed, seed.wrapping_mul(31).wrapping_add(1), &[]);
            let data = (0..numel(shape)).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Ok(Tensor::new(shape.clone(), data, DType::F64))
        }
        OpKind::Rand { seed, shape } => {
            let mut rng = point_rng(cx.seed, seed.wrapping_mul(31).wrapping_add(2), cx.point);
            let data = (0..numel(shape)).map(|_| rng.gen::<f64>()).collect();
            Ok(Tensor::new(shape.clone(), data, DType::F64))
        }
        OpKind::EvalSymbol { symbol } => {
            let v = cx.env.get(symbol).ok_or_else(|| kerr(kind, format!("unbound `{symbol}`")))?;
            Ok(Tensor::scalar(v as f64, DType::I64))
        }
        OpKind::Udf { name, seed, shape } => udf(kind, name, *seed, shape, inputs, cx),
        OpKind::Unary { op, .. } => {
            check_arity(kind, inputs, 1)?;
            Ok(inputs[0].map(unary_fn(*op)))
        }
        OpKind::Pow { exponent, .. } => {
            check_arity(kind, inputs, 1)?;
            let e = *exponent;
            Ok(inputs[0].map(|x| x.powf(e)))
        }
        OpKind::Binary { op, batch } => {
            check_arity(kind, inputs, 2)?;
            let r = zip_with(&inputs[0], &inputs[1], *batch, kind, binary_fn(*op))?;
            Ok(if op.is_comparison() { r.with_dtype(DType::Bool) } else { r })
        }
        OpKind::AddN { batch } => {
            let mut it = inputs.iter();
            let mut acc = it.next().ok_or_else(|| kerr(kind, "no inputs"))?.clone();
            for x in it {
                acc = zip_with(&acc, x, *batch, kind, |a, b| a + b)?;
            }
            Ok(acc)
        }
        OpKind::Sum { dim } | OpKind::Max { dim } => {
            check_arity(kind, inputs, 1)?;
            axis_ok(kind, &inputs[0], *dim)?;
            Ok(if matches!(kind, OpKind::Sum { .. }) { inputs[0].sum_axis(*dim) } else { inputs[0].max_axis(*dim) })
        }
        OpKind::CumSum { dim, reverse } => {
            check_arity(kind, inputs, 1)?;
            axis_ok(kind, &inputs[0], *dim)?;
            Ok(inputs[0].map_lines(*dim, |l| cumsum_line(l, *reverse)))
        }
        OpKind::DSum { gamma, dim } => {
            check_arity(kind, inputs, 1)?;
            axis_ok(kind, &inputs[0], *dim)?;
            Ok(inputs[0].reduce_lines(*dim, |l| dsum_line(l, *gamma)))
        }
        OpKind::DScan { gamma, dim, reverse } => {
            check_arity(kind, inputs, 1)?;
            axis_ok(kind, &inputs[0], *dim)?;
            Ok(inputs[0].map_lines(*dim, |l| dscan_line(l, *gamma, *reverse)))
        }
        OpKind::Conv { dim, weights } => {
            check_arity(kind, inputs, 1)?;
            axis_ok(kind, &inputs[0], *dim)?;
            Ok(inputs[0].map_lines(*dim, |l| conv_line(l, weights)))
        }
        OpKind::Matmul { batch } => {
            check_arity(kind, inputs, 2)?;
            matmul(kind, &inputs[0], &inputs[1], *batch)
        }
        OpKind::Reshape { shape, batch } => {
            check_arity(kind, inputs, 1)?;
            let x = &inputs[0];
            let mut s = x.shape[..(*batch).min(x.rank())].to_vec();
            s.extend(eval_shape(kind, shape, cx.env)?);
            x.reshape(s.clone()).ok_or_else(|| kerr(kind, format!("cannot reshape {:?} to {s:?}", x.shape)))
        }
        OpKind::Permute { perm } => {
            check_arity(kind, inputs, 1)?;
            if perm.len() != inputs[0].rank() {
                return Err(kerr(kind, "permutation rank mismatch"));
            }
            Ok(inputs[0].permute(perm))
        }
        OpKind::Squeeze { dim } => {
            check_arity(kind, inputs, 1)?;
            let x = &inputs[0];
            axis_ok(kind, x, *dim)?;
            let mut s = x.shape.clone();
            if s.remove(*dim) != 1 {
                return Err(kerr(kind, format!("dim {dim} of {:?} is not 1", x.shape)));
            }
            Ok(x.reshape(s).unwrap())
        }
        OpKind::Unsqueeze { dim } => {
            check_arity(kind, inputs, 1)?;
            let x = &inputs[0];
            if *dim > x.rank() {
                return Err(kerr(kind, "dim out of range"));
            }
            let mut s = x.shape.clone();
            s.insert(*dim, 1);
            Ok(x.reshape(s).unwrap())
        }
        OpKind::Expand { shape, batch } => {
            check_arity(kind, inputs, 1)?;
            let x = &inputs[0];
            let mut s = x.shape[..(*batch).min(x.rank())].to_vec();
            s.extend(eval_shape(kind, shape, cx.env)?);
            x.broadcast_to(&s, *batch).ok_or_else(|| kerr(kind, format!("cannot expand {:?} to {s:?}", x.shape)))
        }
        OpKind::Slice { dim, start, end } => {
            check_arity(kind, inputs, 1)?;
            let x = &inputs[0];
            axis_ok(kind, x, *dim)?;
            let (s, e) = (eval_usize(kind, start, cx.env)?, eval_usize(kind, end, cx.env)?);
            if s > e || e > x.shape[*dim] {
                return Err(kerr(kind, format!("slice {s}:{e} out of range for extent {}", x.shape[*dim])));
            }
            Ok(x.slice_axis(*dim, s, e))
        }
        OpKind::IndexSelect { dim, index } => {
            check_arity(kind, inputs, 1)?;
            let x = &inputs[0];
            axis_ok(kind, x, *dim)?;
            let i = eval_usize(kind, index, cx.env)?;
            if i >= x.shape[*dim] {
                return Err(kerr(kind, format!("index {i} out of range for extent {}", x.shape[*dim])));
            }
            Ok(x.index_axis(*dim, i))
        }
        OpKind::Stack { dim } => {
            let st = Tensor::stack(inputs, &[], DType::F64).ok_or_else(|| kerr(kind, "inputs differ in shape"))?;
            if *dim > st.rank() - 1 {
                return Err(kerr(kind, "dim out of range"));
            }
            let mut perm: Vec<usize> = (1..st.rank()).collect();
            perm.insert(*dim, 0);
            Ok(st.permute(&perm))
        }
        OpKind::Concat { dim } => Tensor::concat(inputs, *dim).ok_or_else(|| kerr(kind, "bad inputs")),
        OpKind::Identity | OpKind::Merge | OpKind::SetSymbol { .. } => {
            check_arity(kind, inputs, 1)?;
            Ok(inputs[0].clone())
        }
        OpKind::Vjp { of, wrt, n_inputs } => {
            check_arity(kind, inputs, n_inputs + 2)?;
            vjp(of, *wrt, &inputs[0], &inputs[1], &inputs[2..], cx)
        }
        OpKind::Dataflow { body, output } => {
            let mut vals: Vec<Tensor> = Vec::with_capacity(body.len());
            for b in body {
                let ins: Vec<Tensor> = b
                    .inputs
                    .iter()
                    .map(|i| match i {
                        BodyInput::Internal(k) => vals[*k].clone(),
                        BodyInput::External(k) => inputs[*k].clone(),
                    })
                    .collect();
                vals.push(forward(&b.kind, &ins, cx)?);
            }
            Ok(vals.swap_remove(*output))
        }
        OpKind::GradGather { .. } => Err(kerr(kind, "needs per-point inputs; use grad_gather")),
        OpKind::Memory { .. } => Err(kerr(kind, "memory ops have no kernel")),
    }
}

fn inverse_perm(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (k, v) in p.iter().enumerate() {
        inv[*v] = k;
    }
    inv
}

/// Gradient of `of` with respect to input `wrt`, given the output
/// gradient `g`, the forward output `y` and the forward inputs `xs`.
pub fn vjp(of: &OpKind, wrt: usize, g: &Tensor, y: &Tensor, xs: &[Tensor], cx: &KernelCtx) -> Result<Tensor, KernelError> {
    let x = xs.get(wrt).ok_or_else(|| kerr(of, "vjp input out of range"))?;
    let un = |t: Tensor, batch: usize| {
        t.unbroadcast(&x.shape, batch).ok_or_else(|| kerr(of, format!("cannot reduce {:?} to {:?}", t.shape, x.shape)))
    };
    let ew = |a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64| {
        Tensor::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(p, q)| f(*p, *q)).collect(), DType::F64)
    };
    match of {
        OpKind::Identity => Ok(g.clone()),
        OpKind::Unary { op, .. } => Ok(match op {
            UnaryOp::Neg => g.map(|v| -v),
            UnaryOp::Exp => ew(g, y, |a, b| a * b),
            UnaryOp::Log => ew(g, x, |a, b| a / b),
            UnaryOp::Tanh => ew(g, y, |a, b| a * (1.0 - b * b)),
            UnaryOp::Abs => ew(g, x, |a, b| a * b.signum()),
        }),
        OpKind::Pow { exponent, .. } => {
            let e = *exponent;
            Ok(Tensor::new(x.shape.clone(), g.data.iter().zip(&x.data).map(|(gv, xv)| gv * e * xv.powf(e - 1.0)).collect(), DType::F64))
        }
        OpKind::Binary { op, batch } => {
            let (a, b) = (&xs[0], &xs[1]);
            let out = &g.shape;
            let ab = a.broadcast_to(out, *batch).ok_or_else(|| kerr(of, "broadcast"))?;
            let bb = b.broadcast_to(out, *batch).ok_or_else(|| kerr(of, "broadcast"))?;
            let local: Vec<f64> = (0..g.numel())
                .map(|k| {
                    let (gv, av, bv) = (g.data[k], ab.data[k], bb.data[k]);
                    match (op, wrt) {
                        (BinaryOp::Add, _) => gv,
                        (BinaryOp::Sub, 0) => gv,
                        (BinaryOp::Sub, _) => -gv,
                        (BinaryOp::Mul, 0) => gv * bv,
                        (BinaryOp::Mul, _) => gv * av,
                        (BinaryOp::Div, 0) => gv / bv,
                        (BinaryOp::Div, _) => -gv * av / (bv * bv),
                        (BinaryOp::Max, 0) => gv * (av >= bv) as u8 as f64,
                        (BinaryOp::Max, _) => gv * (bv > av) as u8 as f64,
                        (BinaryOp::Min, 0) => gv * (av <= bv) as u8 as f64,
                        (BinaryOp::Min, _) => gv * (bv < av) as u8 as f64,
                        _ => 0.0,
                    }
                })
                .collect();
            un(Tensor::new(out.clone(), local, DType::F64), *batch)
        }
        OpKind::AddN { batch } => un(g.clone(), *batch),
        OpKind::Sum { dim } => {
            let mut s = g.shape.clone();
            s.insert(*dim, 1);
            Ok(g.reshape(s).unwrap().broadcast_to(&x.shape, 0).unwrap())
        }
        OpKind::Max { dim } => {
            let mask = x.map_lines(*dim, |l| {
                let mut best = 0;
                for (k, v) in l.iter().enumerate() {
                    if *v > l[best] {
                        best = k;
                    }
                }
                (0..l.len()).map(|k| (k == best) as u8 as f64).collect()
            });
            let mut s = g.shape.clone();
            s.insert(*dim, 1);
            let gb = g.reshape(s).unwrap().broadcast_to(&x.shape, 0).unwrap();
            Ok(ew(&gb, &mask, |a, b| a * b))
        }
        OpKind::CumSum { dim, reverse } => Ok(g.map_lines(*dim, |l| cumsum_line(l, !reverse))),
        OpKind::DSum { gamma, dim } => {
            let mut s = g.shape.clone();
            s.insert(*dim, 1);
            let gb = g.reshape(s).unwrap().broadcast_to(&x.shape, 0).unwrap();
            let gm = *gamma;
            Ok(gb.map_lines(*dim, |l| {
                let mut w = 1.0;
                l.iter()
                    .map(|v| {
                        let r = v * w;
                        w *= gm;
                        r
                    })
                    .collect()
            }))
        }
        OpKind::DScan { gamma, dim, reverse } => Ok(g.map_lines(*dim, |l| dscan_line(l, *gamma, !reverse))),
        OpKind::Conv { dim, weights } => Ok(g.map_lines(*dim, |l| conv_line_vjp(l, weights))),
        OpKind::Matmul { batch } => matmul_vjp(of, &xs[0], &xs[1], g, *batch, wrt),
        OpKind::Reshape { .. } | OpKind::Squeeze { .. } | OpKind::Unsqueeze { .. } => {
            g.reshape(x.shape.clone()).ok_or_else(|| kerr(of, "reshape"))
        }
        OpKind::Permute { perm } => Ok(g.permute(&inverse_perm(perm))),
        OpKind::Expand { batch, .. } => un(g.clone(), *batch),
        OpKind::Slice { dim, start, .. } => Ok(g.pad_axis(&x.shape, *dim, eval_usize(of, start, cx.env)?)),
        OpKind::IndexSelect { dim, index } => {
            let mut s = g.shape.clone();
            s.insert(*dim, 1);
            Ok(g.reshape(s).unwrap().pad_axis(&x.shape, *dim, eval_usize(of, index, cx.env)?))
        }
        OpKind::Stack { dim } => Ok(g.index_axis(*dim, wrt)),
        OpKind::Concat { dim } => {
            let off: usize = xs[..wrt].iter().map(|t| t.shape[*dim]).sum();
            Ok(g.slice_axis(*dim, off, off + x.shape[*dim]))
        }
        other => Err(kerr(other, "not differentiable")),
    }
}

/// Sum, over every sink point `p` in `parts` that read `src_point`
/// through `fwd_phi` (under `fwd_cond`), the slice of the contribution
/// that corresponds to `src_point`.
#[allow(clippy::too_many_arguments)]
pub fn grad_gather(
    fwd_phi: &[SymExpr],
    fwd_cond: Option<&SymExpr>,
    sink_dims: &[Dim],
    src_dims: &[Dim],
    bounds: &Env,
    src_point: &[i64],
    out_shape: &[usize],
    parts: &[(Vec<i64>, Tensor)],
) -> Result<Tensor, KernelError> {
    let op = OpKind::GradGather { fwd_phi: vec![], fwd_cond: None, sink_dims: vec![], src_dims: vec![] };
    let mut acc = Tensor::full(out_shape, 0.0, DType::F64);
    let _ = src_dims;
    for (p, c) in parts {
        let mut env = bounds.clone();
        for (d, v) in sink_dims.iter().zip(p) {
            env.bind(&d.name, *v);
        }
        if let Some(cond) = fwd_cond {
            if !cond.eval_bool(&env).map_err(|e| kerr(&op, e.to_string()))? {
                continue;
            }
        }
        let set = eval_components(fwd_phi, &env).map_err(|e| kerr(&op, e.to_string()))?;
        if !set.contains(src_point) {
            continue;
        }
        let mut part = c.clone();
        for (comp, v) in set.comps.iter().zip(src_point) {
            if let IndexComp::Range(lo, _) = comp {
                part = part.index_axis(0, (v - lo) as usize);
            }
        }
        if part.shape != out_shape {
            return Err(kerr(&op, format!("contribution shape {:?} does not match {:?}", part.shape, out_shape)));
        }
        for (a, b) in acc.data.iter_mut().zip(&part.data) {
            *a += b;
        }
    }
    Ok(acc)
}

/// Row-major flat index of `idx` in `shape`.
pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    strides(shape).iter().zip(idx).map(|(s, i)| s * i).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cx_env() -> Env {
        Env::new()
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec(), DType::F64)
    }

    fn run(kind: &OpKind, inputs: &[Tensor]) -> Tensor {
        let env = cx_env();
        forward(kind, inputs, &KernelCtx { env: &env, point: &[], seed: 0 }).unwrap()
    }

    #[test]
    fn scans_and_discounts() {
        let r = t(&[2], &[1.0, 1.0]);
        assert_eq!(run(&OpKind::DSum { gamma: 0.95, dim: 0 }, &[r.clone()]).data, vec![1.95]);
        assert_eq!(run(&OpKind::DScan { gamma: 0.95, dim: 0, reverse: true }, &[r.clone()]).data, vec![1.95, 1.0]);
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        assert_eq!(run(&OpKind::CumSum { dim: 0, reverse: false }, &[x.clone()]).data, vec![1.0, 3.0, 6.0]);
        assert_eq!(run(&OpKind::Conv { dim: 0, weights: vec![1.0, 1.0] }, &[x]).data, vec![3.0, 5.0, 3.0]);
    }

    #[test]
    fn matmul_batched() {
        let a = t(&[2, 2, 3], &[1., 2., 3., 4., 5., 6., 1., 0., 0., 0., 1., 0.]);
        let b = t(&[3], &[1., 1., 1.]);
        assert_eq!(run(&OpKind::Matmul { batch: 0 }, &[a.clone(), b.clone()]).data, vec![6., 15., 1., 1.]);
        let bb = t(&[2, 3], &[1., 1., 1., 2., 2., 2.]);
        let r = run(&OpKind::Matmul { batch: 1 }, &[a, bb]);
        assert_eq!(r.shape, vec![2, 2]);
        assert_eq!(r.data, vec![6., 15., 2., 2.]);
    }

    #[test]
    fn stack_along_inner_dim() {
        let a = t(&[2], &[1., 2.]);
        let b = t(&[2], &[3., 4.]);
        let r = run(&OpKind::Stack { dim: 1 }, &[a, b]);
        assert_eq!(r.shape, vec![2, 2]);
        assert_eq!(r.data, vec![1., 3., 2., 4.]);
    }

    fn numeric_vjp(kind: &OpKind, xs: &[Tensor], wrt: usize, g: &Tensor) -> Tensor {
        let h = 1e-6;
        let mut out = xs[wrt].clone();
        for k in 0..out.numel() {
            let mut p = xs.to_vec();
            p[wrt].data[k] += h;
            let fp = run(kind, &p);
            p[wrt].data[k] -= 2.0 * h;
            let fm = run(kind, &p);
            out.data[k] = fp.data.iter().zip(&fm.data).zip(&g.data).map(|((a, b), gv)| gv * (a - b) / (2.0 * h)).sum();
        }
        out
    }

    #[test]
    fn vjps_match_finite_differences() {
        let a = t(&[2, 3], &[0.3, -0.2, 0.5, 0.9, 0.1, -0.7]);
        let b = t(&[3], &[0.4, 0.6, -0.3]);
        let m = t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let cases: Vec<(OpKind, Vec<Tensor>)> = vec![
            (OpKind::Binary { op: BinaryOp::Mul, batch: 0 }, vec![a.clone(), b.clone()]),
            (OpKind::Binary { op: BinaryOp::Div, batch: 0 }, vec![a.clone(), b.map(|v| v + 2.0)]),
            (OpKind::Unary { op: UnaryOp::Tanh, batch: 0 }, vec![a.clone()]),
            (OpKind::Unary { op: UnaryOp::Exp, batch: 0 }, vec![a.clone()]),
            (OpKind::Pow { exponent: 2.0, batch: 0 }, vec![a.clone()]),
            (OpKind::Sum { dim: 1 }, vec![a.clone()]),
            (OpKind::DSum { gamma: 0.9, dim: 1 }, vec![a.clone()]),
            (OpKind::DScan { gamma: 0.9, dim: 1, reverse: true }, vec![a.clone()]),
            (OpKind::CumSum { dim: 0, reverse: false }, vec![a.clone()]),
            (OpKind::Matmul { batch: 0 }, vec![a.clone(), m.clone()]),
            (OpKind::Matmul { batch: 0 }, vec![b.clone(), m.clone()]),
            (OpKind::Permute { perm: vec![1, 0] }, vec![a.clone()]),
            (OpKind::Conv { dim: 1, weights: vec![1.0, 0.5] }, vec![a.clone()]),
            (OpKind::Stack { dim: 0 }, vec![b.clone(), b.map(|v| v * 2.0)]),
            (OpKind::Binary { op: BinaryOp::Add, batch: 1 }, vec![a.clone(), t(&[2], &[1.0, 2.0])]),
        ];
        let env = cx_env();
        let cx = KernelCtx { env: &env, point: &[], seed: 0 };
        for (kind, xs) in cases {
            let y = run(&kind, &xs);
            let g = y.map(|v| 0.5 + v.sin());
            for wrt in 0..xs.len() {
                let got = vjp(&kind, wrt, &g, &y, &xs, &cx).unwrap();
                let want = numeric_vjp(&kind, &xs, wrt, &g);
                assert!(got.rel_diff(&want) < 1e-6 || got.data.iter().zip(&want.data).all(|(p, q)| (p - q).abs() < 1e-8), "{kind:?} wrt {wrt}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn seeded_sources_are_deterministic() {
        let env = cx_env();
        let cx = KernelCtx { env: &env, point: &[3, 1], seed: 7 };
        let k = OpKind::Rand { seed: 1, shape: vec![4] };
        assert_eq!(forward(&k, &[], &cx).unwrap(), forward(&k, &[], &cx).unwrap());
        let cx2 = KernelCtx { env: &env, point: &[3, 2], seed: 7 };
        assert_ne!(forward(&k, &[], &cx).unwrap(), forward(&k, &[], &cx2).unwrap());
    }
}
