//! Textual program format (`.rtl`).
//!
//! ```text
//! dims b:B, t:T;
//! bounds B=2, T=dyn(d);
//! rec o over (b, t) shape (4) f64;
//! o[b, 0] = reset((4));
//! o[b, t+1] = step(o, a);
//! g = dsum(r[b, t:T], 0.95);
//! grad l wrt w;
//! out g, grad_w;
//! ```
//!
//! Statements end with `;`. `#` starts a comment. A branch statement may end
//! with `if <cond>`; an assignment may carry `over (dims)` to give leaf ops a
//! domain.

use std::collections::HashMap;

use super::ops::{BinaryOp, DType, OpKind, UnaryOp};
use super::{Access, Bound, FrontendError, Program, Result};
use crate::symexpr::{self, SymExpr};

#[derive(Debug, Clone, PartialEq)]
enum Tk {
    Ident(String),
    Num(f64, bool),
    Punct(&'static str),
}

#[derive(Debug, Clone)]
struct Tok {
    tk: Tk,
    start: usize,
    end: usize,
}

const PUNCTS: [&str; 19] = ["<=", ">=", "==", "!=", "(", ")", "[", "]", ",", "=", "+", "-", "*", "/", "<", ">", ":", "%", "."];

fn lex(src: &str) -> std::result::Result<Vec<Tok>, String> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let s = i;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            out.push(Tok { tk: Tk::Ident(src[s..i].to_string()), start: s, end: i });
        } else if c.is_ascii_digit() || (c == b'.' && b.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let s = i;
            let mut float = false;
            while i < b.len() && (b[i].is_ascii_digit() || b[i] == b'.') {
                float |= b[i] == b'.';
                i += 1;
            }
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                let mut j = i + 1;
                if j < b.len() && (b[j] == b'-' || b[j] == b'+') {
                    j += 1;
                }
                if j < b.len() && b[j].is_ascii_digit() {
                    float = true;
                    i = j;
                    while i < b.len() && b[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let v: f64 = src[s..i].parse().map_err(|_| format!("bad number `{}`", &src[s..i]))?;
            out.push(Tok { tk: Tk::Num(v, float), start: s, end: i });
        } else {
            let p = PUNCTS.iter().find(|p| src[i..].starts_with(**p)).ok_or_else(|| format!("unexpected `{}`", c as char))?;
            out.push(Tok { tk: Tk::Punct(p), start: i, end: i + p.len() });
            i += p.len();
        }
    }
    Ok(out)
}

/// Parse a program.
pub fn parse_program(src: &str) -> Result<Program> {
    let mut st = State { prog: Program::new(), names: HashMap::new(), line: 0 };
    let clean: String = src.lines().map(|l| l.split('#').next().unwrap_or("")).collect::<Vec<_>>().join("\n");
    let mut line = 1;
    for stmt in clean.split(';') {
        let lead = stmt.len() - stmt.trim_start().len();
        st.line = line + stmt[..lead].matches('\n').count();
        line += stmt.matches('\n').count();
        if stmt.trim().is_empty() {
            continue;
        }
        st.statement(stmt.trim())?;
    }
    Ok(st.prog)
}

struct State {
    prog: Program,
    names: HashMap<String, usize>,
    line: usize,
}

/// A parsed expression over a token range of one statement.
struct Cur<'a> {
    src: &'a str,
    toks: &'a [Tok],
    pos: usize,
    /// Dims given to source ops created by the statement.
    leaf_dims: Vec<String>,
}

impl<'a> Cur<'a> {
    fn peek(&self) -> Option<&Tk> {
        self.toks.get(self.pos).map(|t| &t.tk)
    }

    fn is(&self, p: &str) -> bool {
        matches!(self.peek(), Some(Tk::Punct(q)) if *q == p)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.start).unwrap_or(self.src.len())
    }

    /// Index of the token matching the opener at `self.pos`.
    fn matching(&self) -> std::result::Result<usize, String> {
        let mut depth = 0;
        for (k, t) in self.toks.iter().enumerate().skip(self.pos) {
            match t.tk {
                Tk::Punct("(") | Tk::Punct("[") => depth += 1,
                Tk::Punct(")") | Tk::Punct("]") => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok(k);
                    }
                }
                _ => {}
            }
        }
        Err("unbalanced brackets".into())
    }

    /// Source text of a bracketed group at `self.pos`, without the brackets;
    /// advances past it.
    fn group_text(&mut self) -> std::result::Result<&'a str, String> {
        let close = self.matching()?;
        let s = self.toks[self.pos].end;
        let e = self.toks[close].start;
        self.pos = close + 1;
        Ok(&self.src[s..e])
    }

    fn expect(&mut self, p: &str) -> std::result::Result<(), String> {
        if self.is(p) {
            self.pos += 1;
            Ok(())
        } else {
            Err(format!("expected `{p}` at byte {}", self.offset()))
        }
    }

    fn ident(&mut self) -> std::result::Result<String, String> {
        match self.peek() {
            Some(Tk::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(format!("expected a name at byte {}", self.offset())),
        }
    }

    fn done(&self) -> bool {
        self.pos >= self.toks.len()
    }
}

fn sym(text: &str) -> std::result::Result<SymExpr, String> {
    symexpr::parse(text.trim()).map_err(|e| format!("`{}`: {e}", text.trim()))
}

/// Split text at top-level commas.
fn split_top(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut s = 0;
    for (i, c) in text.char_indices() {
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&text[s..i]);
                s = i + 1;
            }
            _ => {}
        }
    }
    if !text[s..].trim().is_empty() || !out.is_empty() {
        out.push(&text[s..]);
    }
    out
}

fn sym_list(text: &str) -> std::result::Result<Vec<SymExpr>, String> {
    let t = text.trim();
    let inner = t.strip_prefix('(').and_then(|x| x.strip_suffix(')')).unwrap_or(t);
    split_top(inner).into_iter().filter(|s| !s.trim().is_empty()).map(sym).collect()
}

fn int_list(text: &str) -> std::result::Result<Vec<usize>, String> {
    sym_list(text)?
        .iter()
        .map(|e| e.simplify().as_int().filter(|v| *v >= 0).map(|v| v as usize).ok_or_else(|| format!("`{e}` is not a constant")))
        .collect()
}

fn num(text: &str) -> std::result::Result<f64, String> {
    text.trim().parse().map_err(|_| format!("expected a number, got `{}`", text.trim()))
}

fn uint(text: &str) -> std::result::Result<usize, String> {
    text.trim().parse().map_err(|_| format!("expected a non-negative integer, got `{}`", text.trim()))
}

impl State {
    fn err(&self, msg: impl Into<String>) -> FrontendError {
        FrontendError::Syntax { line: self.line, msg: msg.into() }
    }

    fn lookup(&self, name: &str) -> Result<usize> {
        self.names.get(name).copied().ok_or_else(|| FrontendError::UnknownTensor(name.into()))
    }

    fn bind_name(&mut self, name: &str, id: usize) {
        self.names.insert(name.to_string(), id);
    }

    fn statement(&mut self, text: &str) -> Result<()> {
        let toks = lex(text).map_err(|m| self.err(m))?;
        let mut c = Cur { src: text, toks: &toks, pos: 0, leaf_dims: vec![] };
        let head = match c.peek() {
            Some(Tk::Ident(s)) => s.clone(),
            _ => return Err(self.err("statement must start with a name")),
        };
        let next_is_name = matches!(toks.get(1).map(|t| &t.tk), Some(Tk::Ident(_)));
        match head.as_str() {
            "dims" if next_is_name => self.dims_stmt(&mut c),
            "bounds" if next_is_name => self.bounds_stmt(&mut c),
            "rec" if next_is_name => self.rec_stmt(&mut c),
            "grad" if next_is_name => self.grad_stmt(&mut c),
            "out" if next_is_name => self.out_stmt(&mut c),
            _ => self.assign_stmt(&mut c),
        }
    }

    fn dims_stmt(&mut self, c: &mut Cur) -> Result<()> {
        c.pos = 1;
        loop {
            let n = c.ident().map_err(|m| self.err(m))?;
            let bound = if c.is(":") {
                c.pos += 1;
                c.ident().map_err(|m| self.err(m))?
            } else {
                n.to_uppercase()
            };
            self.prog.declare_dim_with_bound(&n, &bound)?;
            if c.done() {
                return Ok(());
            }
            c.expect(",").map_err(|m| self.err(m))?;
        }
    }

    fn bounds_stmt(&mut self, c: &mut Cur) -> Result<()> {
        c.pos = 1;
        loop {
            let n = c.ident().map_err(|m| self.err(m))?;
            c.expect("=").map_err(|m| self.err(m))?;
            let b = match c.peek().cloned() {
                Some(Tk::Num(v, false)) => {
                    c.pos += 1;
                    Bound::Static(v as i64)
                }
                Some(Tk::Ident(k)) if k == "dyn" => {
                    c.pos += 1;
                    let inner = c.group_text().map_err(|m| self.err(m))?;
                    Bound::Dynamic { done: inner.trim().to_string() }
                }
                _ => return Err(self.err(format!("bad value for bound `{n}`"))),
            };
            self.prog.bind(&n, b)?;
            if c.done() {
                return Ok(());
            }
            c.expect(",").map_err(|m| self.err(m))?;
        }
    }

    fn rec_stmt(&mut self, c: &mut Cur) -> Result<()> {
        c.pos = 1;
        let name = c.ident().map_err(|m| self.err(m))?;
        let mut domain: Vec<String> = vec![];
        let mut shape = vec![];
        let mut dtype = DType::F64;
        while !c.done() {
            let kw = c.ident().map_err(|m| self.err(m))?;
            match kw.as_str() {
                "over" => {
                    let t = c.group_text().map_err(|m| self.err(m))?;
                    domain = split_top(t).iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                }
                "shape" => {
                    let t = c.group_text().map_err(|m| self.err(m))?;
                    shape = sym_list(t).map_err(|m| self.err(m))?;
                }
                other => dtype = DType::parse(other).ok_or_else(|| self.err(format!("unknown keyword `{other}`")))?,
            }
        }
        let dref: Vec<&str> = domain.iter().map(|s| s.as_str()).collect();
        let id = self.prog.declare_rec(&name, &dref, shape, dtype)?;
        self.bind_name(&name, id);
        Ok(())
    }

    fn grad_stmt(&mut self, c: &mut Cur) -> Result<()> {
        c.pos = 1;
        let loss = c.ident().map_err(|m| self.err(m))?;
        if c.ident().map_err(|m| self.err(m))? != "wrt" {
            return Err(self.err("expected `wrt`"));
        }
        let param = c.ident().map_err(|m| self.err(m))?;
        let g = self.prog.grad(self.lookup(&loss)?, self.lookup(&param)?)?;
        self.bind_name(&format!("grad_{param}"), g);
        Ok(())
    }

    fn out_stmt(&mut self, c: &mut Cur) -> Result<()> {
        c.pos = 1;
        loop {
            let n = c.ident().map_err(|m| self.err(m))?;
            let id = self.lookup(&n)?;
            self.prog.mark_output(id);
            if c.done() {
                return Ok(());
            }
            c.expect(",").map_err(|m| self.err(m))?;
        }
    }

    fn assign_stmt(&mut self, c: &mut Cur) -> Result<()> {
        let name = c.ident().map_err(|m| self.err(m))?;
        let lhs = if c.is("[") {
            let t = c.group_text().map_err(|m| self.err(m))?;
            Some(sym_list(t).map_err(|m| self.err(m))?)
        } else {
            None
        };
        c.expect("=").map_err(|m| self.err(m))?;
        // Trailing clauses: `over (..)` and `if cond`.
        let mut end = c.toks.len();
        let mut cond = None;
        let mut over: Vec<String> = vec![];
        let mut depth = 0;
        let mut k = c.pos;
        while k < end {
            match &c.toks[k].tk {
                Tk::Punct("(") | Tk::Punct("[") => depth += 1,
                Tk::Punct(")") | Tk::Punct("]") => depth -= 1,
                Tk::Ident(w) if depth == 0 && w == "if" => {
                    cond = Some(sym(&c.src[c.toks[k].end..]).map_err(|m| self.err(m))?);
                    end = k;
                    break;
                }
                _ => {}
            }
            k += 1;
        }
        let mut k = c.pos;
        while k < end {
            if matches!(&c.toks[k].tk, Tk::Ident(w) if w == "over") && k + 1 < end && c.toks[k + 1].tk == Tk::Punct("(") {
                let mut sub = Cur { src: c.src, toks: &c.toks[..end], pos: k + 1, leaf_dims: vec![] };
                let t = sub.group_text().map_err(|m| self.err(m))?;
                over = split_top(t).iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if sub.pos != end {
                    return Err(self.err("`over (..)` must end the expression"));
                }
                end = k;
                break;
            }
            k += 1;
        }
        let mut leaf_dims = over.clone();
        if let Some(ix) = &lhs {
            let x = self.lookup(&name)?;
            for (d, e) in self.prog.tensor(x).domain.iter().zip(ix) {
                if e.mentions(&d.name) && !leaf_dims.contains(&d.name) {
                    leaf_dims.push(d.name.clone());
                }
            }
        }
        let mut sub = Cur { src: c.src, toks: &c.toks[..end], pos: c.pos, leaf_dims };
        let (rhs, fresh) = self.expr(&mut sub)?;
        if !sub.done() {
            return Err(self.err(format!("unexpected input at byte {}", sub.offset())));
        }
        let over_ref: Vec<&str> = over.iter().map(|s| s.as_str()).collect();
        let rhs_dims: Vec<String> = self.prog.tensor(rhs).domain.iter().map(|d| d.name.clone()).collect();
        let rhs = if !fresh || over.iter().any(|o| !rhs_dims.contains(o)) {
            self.prog.apply_op(None, OpKind::Identity, vec![Access::linear(rhs)], &over_ref)?
        } else {
            rhs
        };
        match lhs {
            None => {
                if let Some(&prev) = self.names.get(&name) {
                    if matches!(self.prog.tensor(prev).def, super::Def::Branches(_)) {
                        return Err(self.err(format!("`{name}` is defined by branches; index it on the left")));
                    }
                }
                self.prog.tensors[rhs].name = name.clone();
                self.bind_name(&name, rhs);
            }
            Some(ix) => {
                let x = self.lookup(&name)?;
                self.prog.branch_define(x, &ix, cond, rhs)?;
            }
        }
        Ok(())
    }

    // expression grammar: cmp > add > mul > unary > postfix > primary

    fn expr(&mut self, c: &mut Cur) -> Result<(usize, bool)> {
        let lhs = self.add(c)?;
        for (p, op) in [("<=", BinaryOp::Le), (">=", BinaryOp::Ge), ("==", BinaryOp::Eq), ("<", BinaryOp::Lt), (">", BinaryOp::Gt)] {
            if c.is(p) {
                c.pos += 1;
                let rhs = self.add(c)?;
                return Ok((self.binary(op, lhs.0, rhs.0)?, true));
            }
        }
        Ok(lhs)
    }

    fn binary(&mut self, op: BinaryOp, a: usize, b: usize) -> Result<usize> {
        self.prog.apply_op(None, OpKind::Binary { op, batch: 0 }, vec![Access::linear(a), Access::linear(b)], &[])
    }

    fn add(&mut self, c: &mut Cur) -> Result<(usize, bool)> {
        let mut acc = self.mul(c)?;
        loop {
            let op = if c.is("+") {
                BinaryOp::Add
            } else if c.is("-") {
                BinaryOp::Sub
            } else {
                return Ok(acc);
            };
            c.pos += 1;
            let rhs = self.mul(c)?;
            acc = (self.binary(op, acc.0, rhs.0)?, true);
        }
    }

    fn mul(&mut self, c: &mut Cur) -> Result<(usize, bool)> {
        let mut acc = self.unary(c)?;
        loop {
            let op = if c.is("*") {
                BinaryOp::Mul
            } else if c.is("/") {
                BinaryOp::Div
            } else {
                return Ok(acc);
            };
            c.pos += 1;
            let rhs = self.unary(c)?;
            acc = (self.binary(op, acc.0, rhs.0)?, true);
        }
    }

    fn unary(&mut self, c: &mut Cur) -> Result<(usize, bool)> {
        if c.is("-") {
            c.pos += 1;
            if let Some(Tk::Num(v, _)) = c.peek().cloned() {
                c.pos += 1;
                return Ok((self.constant(-v)?, true));
            }
            let x = self.unary(c)?;
            let k = OpKind::Unary { op: UnaryOp::Neg, batch: 0 };
            return Ok((self.prog.apply_op(None, k, vec![Access::linear(x.0)], &[])?, true));
        }
        self.primary(c)
    }

    fn constant(&mut self, v: f64) -> Result<usize> {
        self.prog.apply_op(None, OpKind::Const { value: v, shape: vec![] }, vec![], &[])
    }

    fn primary(&mut self, c: &mut Cur) -> Result<(usize, bool)> {
        match c.peek().cloned() {
            Some(Tk::Num(v, _)) => {
                c.pos += 1;
                Ok((self.constant(v)?, true))
            }
            Some(Tk::Punct("(")) => {
                let close = c.matching().map_err(|m| self.err(m))?;
                let mut sub = Cur { src: c.src, toks: &c.toks[..close], pos: c.pos + 1, leaf_dims: c.leaf_dims.clone() };
                let r = self.expr(&mut sub)?;
                if !sub.done() {
                    return Err(self.err(format!("unexpected input at byte {}", sub.offset())));
                }
                c.pos = close + 1;
                Ok(r)
            }
            Some(Tk::Ident(name)) => {
                c.pos += 1;
                if c.is("(") {
                    let args = c.group_text().map_err(|m| self.err(m))?;
                    return Ok((self.call(&name, args, &c.leaf_dims)?, true));
                }
                let id = self.lookup(&name)?;
                if c.is("[") {
                    let t = c.group_text().map_err(|m| self.err(m))?;
                    let ix = sym_list(t).map_err(|m| self.err(m))?;
                    let a = Access::indexed(id, ix);
                    return Ok((self.prog.apply_op(None, OpKind::Identity, vec![a], &[])?, true));
                }
                Ok((id, false))
            }
            _ => Err(self.err(format!("expected an expression at byte {}", c.offset()))),
        }
    }

    /// Parse a tensor-valued argument; indexed names become direct accesses.
    fn tensor_arg(&mut self, text: &str, leaf: &[String]) -> Result<Access> {
        let toks = lex(text).map_err(|m| self.err(m))?;
        if let [Tok { tk: Tk::Ident(n), .. }, Tok { tk: Tk::Punct("["), .. }, .., Tok { tk: Tk::Punct("]"), end, .. }] = toks.as_slice() {
            let mut c = Cur { src: text, toks: &toks, pos: 1, leaf_dims: vec![] };
            if c.matching().ok() == Some(toks.len() - 1) && *end == text.trim_end().len() {
                if let Ok(id) = self.lookup(n) {
                    let t = c.group_text().map_err(|m| self.err(m))?;
                    return Ok(Access::indexed(id, sym_list(t).map_err(|m| self.err(m))?));
                }
            }
        }
        let mut c = Cur { src: text, toks: &toks, pos: 0, leaf_dims: leaf.to_vec() };
        let (id, _) = self.expr(&mut c)?;
        if !c.done() {
            return Err(self.err(format!("unexpected input in `{}`", text.trim())));
        }
        Ok(Access::linear(id))
    }

    fn call(&mut self, f: &str, args_text: &str, leaf: &[String]) -> Result<usize> {
        let mut pos: Vec<&str> = vec![];
        let mut kw: HashMap<String, &str> = HashMap::new();
        for a in split_top(args_text) {
            match a.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() && k.trim().chars().all(|ch| ch.is_alphanumeric() || ch == '_') && !v.starts_with('=') && !k.ends_with(['<', '>', '!']) => {
                    kw.insert(k.trim().to_string(), v);
                }
                _ => pos.push(a),
            }
        }
        let line = self.line;
        let e = |m: String| FrontendError::Syntax { line, msg: format!("{f}: {m}") };
        let arg = |k: usize| pos.get(k).copied().ok_or_else(|| e(format!("missing argument {}", k + 1)));
        let opt_dim = |k: usize, name: &str| -> Result<usize> {
            match (pos.get(k), kw.get(name)) {
                (Some(v), _) | (None, Some(v)) => uint(v).map_err(e),
                _ => Ok(0),
            }
        };
        let seed = |k: usize| -> Result<u64> {
            match (pos.get(k), kw.get("seed")) {
                (Some(v), _) | (None, Some(v)) => uint(v).map(|v| v as u64).map_err(e),
                _ => Ok(0),
            }
        };
        let leaf_ref: Vec<&str> = leaf.iter().map(|s| s.as_str()).collect();
        let unary = |op| OpKind::Unary { op, batch: 0 };
        let (kind, inputs, over): (OpKind, Vec<Access>, Vec<&str>) = match f {
            "exp" | "log" | "tanh" | "abs" | "neg" | "identity" => {
                let x = self.tensor_arg(arg(0)?, leaf)?;
                let k = match f {
                    "exp" => unary(UnaryOp::Exp),
                    "log" => unary(UnaryOp::Log),
                    "tanh" => unary(UnaryOp::Tanh),
                    "abs" => unary(UnaryOp::Abs),
                    "neg" => unary(UnaryOp::Neg),
                    _ => OpKind::Identity,
                };
                (k, vec![x], vec![])
            }
            "pow" => {
                let x = self.tensor_arg(arg(0)?, leaf)?;
                (OpKind::Pow { exponent: num(arg(1)?).map_err(e)?, batch: 0 }, vec![x], vec![])
            }
            "max" | "min" => {
                let a = self.tensor_arg(arg(0)?, leaf)?;
                let b = self.tensor_arg(arg(1)?, leaf)?;
                let op = if f == "max" { BinaryOp::Max } else { BinaryOp::Min };
                (OpKind::Binary { op, batch: 0 }, vec![a, b], vec![])
            }
            "sum" | "rmax" | "cumsum" | "rcumsum" => {
                let x = self.tensor_arg(arg(0)?, leaf)?;
                let dim = opt_dim(1, "dim")?;
                let k = match f {
                    "sum" => OpKind::Sum { dim },
                    "rmax" => OpKind::Max { dim },
                    "cumsum" => OpKind::CumSum { dim, reverse: false },
                    _ => OpKind::CumSum { dim, reverse: true },
                };
                (k, vec![x], vec![])
            }
            "dsum" | "dscan" | "dscanf" => {
                let x = self.tensor_arg(arg(0)?, leaf)?;
                let gamma = num(arg(1)?).map_err(e)?;
                let dim = opt_dim(2, "dim")?;
                let k = match f {
                    "dsum" => OpKind::DSum { gamma, dim },
                    "dscan" => OpKind::DScan { gamma, dim, reverse: true },
                    _ => OpKind::DScan { gamma, dim, reverse: false },
                };
                (k, vec![x], vec![])
            }
            "matmul" => {
                let a = self.tensor_arg(arg(0)?, leaf)?;
                let b = self.tensor_arg(arg(1)?, leaf)?;
                (OpKind::Matmul { batch: 0 }, vec![a, b], vec![])
            }
            "reshape" | "expand" => {
                let x = self.tensor_arg(arg(0)?, leaf)?;
                let shape = sym_list(arg(1)?).map_err(e)?;
                let k = if f == "reshape" { OpKind::Reshape { shape, batch: 0 } } else { OpKind::Expand { shape, batch: 0 } };
                (k, vec![x], vec![])
            }
            "permute" => {
                let x = self.tensor_arg(arg(0)?, leaf)?;
                (OpKind::Permute { perm: int_list(arg(1)?).map_err(e)? }, vec![x], vec![])
            }
            "squeeze" | "unsqueeze" => {
                let x = self.tensor_arg(arg(0)?, leaf)?;
                let dim = opt_dim(1, "dim")?;
                let k = if f == "squeeze" { OpKind::Squeeze { dim } } else { OpKind::Unsqueeze { dim } };
                (k, vec![x], vec![])
            }
            "slice" => {
                let x = self.tensor_arg(arg(0)?, leaf)?;
                let dim = uint(arg(1)?).map_err(e)?;
                let start = sym(arg(2)?).map_err(e)?;
                let end = sym(arg(3)?).map_err(e)?;
                (OpKind::Slice { dim, start, end }, vec![x], vec![])
            }
            "index_select" => {
                let x = self.tensor_arg(arg(0)?, leaf)?;
                let dim = uint(arg(1)?).map_err(e)?;
                (OpKind::IndexSelect { dim, index: sym(arg(2)?).map_err(e)? }, vec![x], vec![])
            }
            "stack" | "concat" => {
                let dim = kw.get("dim").map(|v| uint(v)).transpose().map_err(e)?.unwrap_or(0);
                let mut xs = vec![];
                for a in &pos {
                    xs.push(self.tensor_arg(a, leaf)?);
                }
                let k = if f == "stack" { OpKind::Stack { dim } } else { OpKind::Concat { dim } };
                (k, xs, vec![])
            }
            "const" => {
                let value = num(arg(0)?).map_err(e)?;
                let shape = pos.get(1).map(|s| sym_list(s)).transpose().map_err(e)?.unwrap_or_default();
                (OpKind::Const { value, shape }, vec![], leaf_ref)
            }
            "param" | "rand" => {
                let shape = int_list(arg(0)?).map_err(e)?;
                let s = seed(1)?;
                let k = if f == "param" { OpKind::Param { seed: s, shape } } else { OpKind::Rand { seed: s, shape } };
                let over = if f == "param" { vec![] } else { leaf_ref };
                (k, vec![], over)
            }
            "sym" => {
                let d = arg(0)?.trim().to_string();
                if self.prog.dim(&d).is_none() {
                    return Err(FrontendError::UnknownDim(d));
                }
                let id = self.prog.apply_op(None, OpKind::EvalSymbol { symbol: d.clone() }, vec![], &[d.as_str()])?;
                return Ok(id);
            }
            "reset" => {
                let shape = sym_list(arg(0)?).map_err(e)?;
                (OpKind::Udf { name: "reset".into(), seed: seed(1)?, shape }, vec![], leaf_ref)
            }
            "step" | "reward" | "done" => {
                let s = kw.get("seed").map(|v| uint(v)).transpose().map_err(e)?.unwrap_or(0) as u64;
                let mut xs = vec![];
                for a in &pos {
                    xs.push(self.tensor_arg(a, leaf)?);
                }
                (OpKind::Udf { name: f.into(), seed: s, shape: vec![] }, xs, leaf_ref)
            }
            _ => return Err(e("unknown function".into())),
        };
        self.prog.apply_op(None, kind, inputs, &over)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Def;

    #[test]
    fn parses_statements() {
        let p = parse_program(
            "dims b:B, t:T;  # comment\n\
             bounds B=2, T=4;\n\
             rec o over (b, t) shape (3) f64;\n\
             o[b, 0] = reset((3));\n\
             a = tanh(o);\n\
             o[b, t+1] = step(o, a);\n\
             r = reward(o, a);\n\
             g = dsum(r[b, t:T], 0.95);\n\
             out g;",
        )
        .unwrap();
        assert_eq!(p.dims.len(), 2);
        assert_eq!(p.bounds["T"], Bound::Static(4));
        let o = p.find("o").unwrap();
        let Def::Branches(bs) = &p.tensor(o).def else { panic!() };
        assert_eq!(bs.len(), 2);
        assert_eq!(p.tensor(bs[0].tensor).dim_names(), vec!["b"]);
        let g = p.find("g").unwrap();
        assert_eq!(p.tensor(g).dim_names(), vec!["b", "t"]);
        assert_eq!(p.outputs, vec![g]);
    }

    #[test]
    fn conditions_and_over() {
        let p = parse_program(
            "dims i;\n rec c over (i) f64;\n x = const(2.0) over (i);\n c[i] = x * 3 if (i % 2) == 0;\n c[i] = x if (i % 2) == 1;",
        )
        .unwrap();
        let x = p.find("x").unwrap();
        assert_eq!(p.tensor(x).dim_names(), vec!["i"]);
        let c = p.find("c").unwrap();
        let Def::Branches(bs) = &p.tensor(c).def else { panic!() };
        assert_eq!(bs[0].cond.as_ref().unwrap().to_string(), "i % 2 == 0");
    }

    #[test]
    fn errors_carry_lines() {
        let e = parse_program("dims t;\n\n y = foo(1);").unwrap_err();
        assert!(matches!(e, FrontendError::Syntax { line: 3, .. }), "{e:?}");
        let e = parse_program("dims t;\n y = z + 1;").unwrap_err();
        assert!(matches!(e, FrontendError::UnknownTensor(_)));
        let e = parse_program("dims t;\n rec y over (t) f64;\n y[0] = const(1.0);\n y[0] = const(2.0);").unwrap_err();
        assert!(matches!(e, FrontendError::Overlap { .. }));
    }

    #[test]
    fn grad_statement_binds_name() {
        let p = parse_program("dims t;\n w = param((2));\n x = const(1.0, (2)) over (t);\n l = sum(w * x);\n grad l wrt w;\n out grad_w;")
            .unwrap();
        let g = p.find("grad_w").unwrap();
        assert_eq!(p.outputs, vec![g]);
        assert_eq!(p.grads.len(), 1);
    }
}
