//! Interpreter for loop programs over a simulated device and host memory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use super::access::{assemble, clip, resolve, src_extents, Read};
use super::kernels::{forward, grad_gather, KernelCtx, KernelError};
use super::oracle::domain_points;
use super::tensor::Tensor;
use super::{Outputs, PointMap, RuntimeError, DYNAMIC_BOUND_CAP};
use crate::astgen::{Ast, Stmt};
use crate::frontend::ops::{MemOp, OpKind};
use crate::frontend::Bound;
use crate::pdg::Pdg;
use crate::symexpr::{eval_components, Env, IndexComp, IndexSet, SymExpr};

/// Kernel launches and allocation accounting.
pub trait Backend {
    fn name(&self) -> &'static str;

    fn execute(&self, kind: &OpKind, inputs: &[Tensor], cx: &KernelCtx) -> Result<Tensor, KernelError> {
        forward(kind, inputs, cx)
    }

    /// Device bytes taken by `t`.
    fn alloc_bytes(&self, t: &Tensor) -> u64;
}

/// Flat row-major buffers, sized exactly.
pub struct CpuBackend;

impl Backend for CpuBackend {
    fn name(&self) -> &'static str {
        "cpu"
    }

    fn alloc_bytes(&self, t: &Tensor) -> u64 {
        t.bytes()
    }
}

/// Same kernels, with every allocation rounded up to `align` bytes.
pub struct AlignedBackend {
    pub align: u64,
}

impl Backend for AlignedBackend {
    fn name(&self) -> &'static str {
        "aligned"
    }

    fn alloc_bytes(&self, t: &Tensor) -> u64 {
        t.bytes().div_ceil(self.align) * self.align
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MemorySim {
    pub capacity: Option<u64>,
    pub device_live: u64,
    pub device_peak: u64,
    pub host_live: u64,
    pub host_peak: u64,
    pub fetches: u64,
    pub offloads: u64,
    pub deallocs: u64,
    pub bytes_fetched: u64,
    pub bytes_offloaded: u64,
}

impl MemorySim {
    fn alloc(&mut self, b: u64) -> Result<(), RuntimeError> {
        if let Some(c) = self.capacity {
            if self.device_live + b > c {
                return Err(RuntimeError::OutOfMemory { need: b, live: self.device_live, capacity: c });
            }
        }
        self.device_live += b;
        self.device_peak = self.device_peak.max(self.device_live);
        Ok(())
    }

    fn host_alloc(&mut self, b: u64) {
        self.host_live += b;
        self.host_peak = self.host_peak.max(self.host_live);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub step: u64,
    /// Logical time: ticks once per iteration of a loop that is not parallel.
    pub slot: u64,
    pub op: String,
    pub point: Vec<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Stats {
    pub backend: String,
    pub executes: u64,
    pub executes_by_op: BTreeMap<String, u64>,
    pub memory: MemorySim,
    /// Most points of each tensor resident on the device at once.
    pub peak_live_points: BTreeMap<String, u64>,
    pub peak_live_bytes: BTreeMap<String, u64>,
    /// Bytes to hold every point of each tensor at the final bounds.
    pub static_estimate: BTreeMap<String, u64>,
    pub static_estimate_total: u64,
    /// Points computed past a dynamic bound and then dropped.
    pub discarded_points: u64,
    pub donated: u64,
    pub timeline: Vec<Event>,
}

impl Stats {
    /// One `key=value` line per counter; the timeline is left out.
    pub fn to_kv(&self) -> String {
        let m = &self.memory;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("backend", self.backend.clone());
        kv("executes", self.executes.to_string());
        for (op, n) in &self.executes_by_op {
            kv(&format!("executes.{op}"), n.to_string());
        }
        kv("device_capacity", m.capacity.map_or("none".into(), |c| c.to_string()));
        kv("device_peak_bytes", m.device_peak.to_string());
        kv("device_live_bytes", m.device_live.to_string());
        kv("host_peak_bytes", m.host_peak.to_string());
        kv("host_live_bytes", m.host_live.to_string());
        kv("fetches", m.fetches.to_string());
        kv("offloads", m.offloads.to_string());
        kv("deallocs", m.deallocs.to_string());
        kv("bytes_fetched", m.bytes_fetched.to_string());
        kv("bytes_offloaded", m.bytes_offloaded.to_string());
        kv("discarded_points", self.discarded_points.to_string());
        kv("donated", self.donated.to_string());
        for (t, n) in &self.peak_live_points {
            kv(&format!("peak_live_points.{t}"), n.to_string());
        }
        for (t, n) in &self.peak_live_bytes {
            kv(&format!("peak_live_bytes.{t}"), n.to_string());
        }
        for (t, n) in &self.static_estimate {
            kv(&format!("static_estimate.{t}"), n.to_string());
        }
        kv("static_estimate_total", self.static_estimate_total.to_string());
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

/// Bytes to materialize every point of each non-memory tensor.
pub fn static_estimate(g: &Pdg, bounds: &Env) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for n in g.nodes.values().filter(|n| !n.kind.is_memory()) {
        let points: u64 = n.domain.iter().map(|d| bounds.get(&d.bound).unwrap_or(0).max(0) as u64).product();
        out.insert(n.name.clone(), g.point_bytes(n.id, bounds) * points);
    }
    out
}

/// `user -> (donor, input slot)`: the user's output may take over the
/// buffer of the single point it reads from the donor through that slot.
pub type Donations = BTreeMap<usize, (usize, usize)>;

#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    pub bindings: BTreeMap<String, i64>,
    pub seed: u64,
    pub device_bytes: Option<u64>,
    pub params: BTreeMap<String, Tensor>,
    pub donations: Donations,
    pub trace: bool,
    pub timeline: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub outputs: Outputs,
    pub stats: Stats,
    pub trace: Vec<String>,
}

struct Entry {
    value: Option<Tensor>,
    bytes: u64,
    on_device: bool,
    on_host: bool,
}

#[derive(Debug, Default)]
struct Live {
    points: u64,
    peak_points: u64,
    bytes: u64,
    peak_bytes: u64,
}

struct Machine<'a> {
    g: &'a Pdg,
    backend: &'a dyn Backend,
    opts: &'a ExecOptions,
    env: Env,
    /// Dynamic bounds not fixed yet.
    open: BTreeSet<String>,
    store: HashMap<usize, HashMap<Vec<i64>, Entry>>,
    live: HashMap<usize, Live>,
    stats: Stats,
    trace: Vec<String>,
    slot: u64,
}

fn fmt_point(p: &[i64]) -> String {
    let parts: Vec<String> = p.iter().map(|v| v.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn fmt_set(s: &IndexSet) -> String {
    let parts: Vec<String> = s
        .comps
        .iter()
        .map(|c| match *c {
            IndexComp::Point(p) => p.to_string(),
            IndexComp::Range(lo, hi) => format!("{lo}:{hi}"),
        })
        .collect();
    format!("[{}]", parts.join(","))
}

impl<'a> Machine<'a> {
    fn node_env(&self, n: usize, point: &[i64]) -> Env {
        let mut env = self.env.clone();
        for (d, v) in self.g.node(n).domain.iter().zip(point) {
            env.bind(&d.name, *v);
        }
        env
    }

    fn shape_at(&self, n: usize, point: &[i64]) -> Result<Vec<usize>, RuntimeError> {
        let env = self.node_env(n, point);
        let mut out = Vec::new();
        for e in &self.g.node(n).shape {
            out.push(e.eval_int(&env)?.max(0) as usize);
        }
        Ok(out)
    }

    fn live_change(&mut self, n: usize, up: bool, bytes: u64) {
        let e = self.live.entry(n).or_default();
        if up {
            e.points += 1;
            e.bytes += bytes;
            e.peak_points = e.peak_points.max(e.points);
            e.peak_bytes = e.peak_bytes.max(e.bytes);
        } else {
            e.points = e.points.saturating_sub(1);
            e.bytes = e.bytes.saturating_sub(bytes);
        }
    }

    fn entry(&self, src: usize, p: &[i64]) -> Result<&Entry, RuntimeError> {
        let name = || self.g.node(src).name.clone();
        let e = self
            .store
            .get(&src)
            .and_then(|m| m.get(p))
            .ok_or_else(|| RuntimeError::Other(format!("`{}` at {p:?} is read but not stored", name())))?;
        if !e.on_device {
            return Err(RuntimeError::NotResident { tensor: name(), point: p.to_vec() });
        }
        Ok(e)
    }

    /// Values read through `e` over `set`, or `None` if any is undefined.
    fn read(&self, src: usize, set: &IndexSet) -> Result<Option<Tensor>, RuntimeError> {
        let mut vals = Vec::new();
        for p in set.points() {
            match &self.entry(src, &p)?.value {
                Some(t) => vals.push(t.clone()),
                None => return Ok(None),
            }
        }
        let first: Vec<i64> = set
            .comps
            .iter()
            .map(|c| match *c {
                IndexComp::Point(p) => p,
                IndexComp::Range(lo, _) => lo,
            })
            .collect();
        let elem = self.shape_at(src, &first)?;
        Ok(assemble(set, vals, &elem, self.g.node(src).dtype))
    }

    fn compute(&mut self, n: usize, point: &[i64]) -> Result<(Option<Tensor>, Option<(usize, Vec<i64>)>), RuntimeError> {
        let g = self.g;
        let node = g.node(n);
        let env = self.node_env(n, point);
        let ins = g.in_edges(n);
        let mut single_reads: BTreeMap<usize, Vec<i64>> = BTreeMap::new();
        let value = match &node.kind {
            OpKind::Merge => {
                let mut chosen = None;
                for e in &ins {
                    match resolve(g, e, &env)? {
                        Read::Inactive => continue,
                        Read::OutOfBounds => break,
                        Read::Points(set) => {
                            chosen = Some((e.src, set));
                            break;
                        }
                    }
                }
                match chosen {
                    None => None,
                    Some((src, set)) => self.read(src, &set)?,
                }
            }
            OpKind::GradGather { fwd_phi, fwd_cond, sink_dims, src_dims } => {
                let e = ins[0];
                let mut parts = Vec::new();
                let active = e.cond.as_ref().map(|c| c.eval_bool(&env)).transpose()?.unwrap_or(true);
                if active {
                    let set = clip(&eval_components(&e.phi, &env)?, &src_extents(g, e, &env)?);
                    for p in set.points() {
                        if let Some(t) = &self.entry(e.src, &p)?.value {
                            parts.push((p, t.clone()));
                        }
                    }
                }
                let shape = self.shape_at(n, point)?;
                Some(grad_gather(fwd_phi, fwd_cond.as_ref(), sink_dims, src_dims, &self.env, point, &shape, &parts)?)
            }
            OpKind::Param { .. } if self.opts.params.contains_key(&node.name) => Some(self.opts.params[&node.name].clone()),
            kind => {
                let mut inputs = Vec::with_capacity(ins.len());
                let mut undefined = false;
                for e in &ins {
                    match resolve(g, e, &env)? {
                        Read::Points(set) => {
                            if set.comps.iter().all(|c| matches!(c, IndexComp::Point(_))) {
                                single_reads.insert(e.iid, set.points().remove(0));
                            }
                            match self.read(e.src, &set)? {
                                Some(t) => inputs.push(t),
                                None => undefined = true,
                            }
                        }
                        _ => undefined = true,
                    }
                }
                if undefined {
                    // Gradient contributions of undefined points are zero.
                    if matches!(kind, OpKind::Vjp { .. }) {
                        Some(Tensor::zeros(&self.shape_at(n, point)?))
                    } else {
                        None
                    }
                } else {
                    let cx = KernelCtx { env: &env, point, seed: self.opts.seed };
                    Some(self.backend.execute(kind, &inputs, &cx)?)
                }
            }
        };
        let donor = self.opts.donations.get(&n).and_then(|(d, iid)| single_reads.get(iid).map(|p| (*d, p.clone())));
        Ok((value.map(|t| t.with_dtype(node.dtype)), donor))
    }

    fn execute(&mut self, n: usize, point: Vec<i64>) -> Result<(), RuntimeError> {
        let node = self.g.node(n);
        let (value, donor) = self.compute(n, &point)?;
        let bytes = value.as_ref().map_or(0, |t| self.backend.alloc_bytes(t));
        let mut reused = false;
        let mut donated_bytes = 0;
        if let Some((d, p)) = donor {
            if let Some(e) = self.store.get_mut(&d).and_then(|m| m.get_mut(&p)) {
                if e.on_device && !e.on_host && e.bytes == bytes && bytes > 0 {
                    e.bytes = 0;
                    donated_bytes = bytes;
                    e.on_device = false;
                    reused = true;
                }
            }
            if reused {
                self.live_change(d, false, donated_bytes);
                self.stats.donated += 1;
            }
        }
        if !reused {
            self.stats.memory.alloc(bytes)?;
        }
        if let OpKind::SetSymbol { bound } = &node.kind {
            let fired = value.as_ref().is_some_and(|t| t.item() != 0.0);
            if fired && self.open.contains(bound) {
                let k = node.domain.iter().position(|d| &d.bound == bound).unwrap_or(0);
                self.fix_bound(bound, point.get(k).copied().unwrap_or(0) + 1);
            }
        }
        let old = self.store.entry(n).or_default().insert(point.clone(), Entry { value, bytes, on_device: true, on_host: false });
        if old.is_some() {
            return Err(RuntimeError::Other(format!("`{}` at {point:?} computed twice", node.name)));
        }
        self.live_change(n, true, bytes);
        self.stats.executes += 1;
        *self.stats.executes_by_op.entry(node.name.clone()).or_insert(0) += 1;
        if self.opts.timeline {
            self.stats.timeline.push(Event { step: self.stats.executes - 1, slot: self.slot, op: node.name.clone(), point: point.clone() });
        }
        if self.opts.trace {
            self.trace.push(format!("EXEC {} {}", node.name, fmt_point(&point)));
        }
        Ok(())
    }

    /// Fix a dynamic bound and drop the points computed beyond it.
    fn fix_bound(&mut self, bound: &str, value: i64) {
        self.open.remove(bound);
        self.env.bind(bound, value);
        let g = self.g;
        for (n, m) in self.store.iter_mut() {
            let dims: Vec<usize> = g.node(*n).domain.iter().enumerate().filter(|(_, d)| d.bound == bound).map(|(i, _)| i).collect();
            if dims.is_empty() {
                continue;
            }
            let gone: Vec<Vec<i64>> = m.keys().filter(|p| dims.iter().any(|&i| p[i] >= value)).cloned().collect();
            for p in gone {
                let e = m.remove(&p).unwrap();
                if e.on_device {
                    self.stats.memory.device_live -= e.bytes;
                    let l = self.live.entry(*n).or_default();
                    l.points = l.points.saturating_sub(1);
                    l.bytes = l.bytes.saturating_sub(e.bytes);
                }
                if e.on_host {
                    self.stats.memory.host_live -= e.bytes;
                }
                self.stats.discarded_points += 1;
            }
        }
    }

    /// Points of the tensor moved by memory op `m` at `point`.
    fn mem_points(&self, m: usize, point: &[SymExpr]) -> Result<(usize, IndexSet), RuntimeError> {
        let node = self.g.node(m);
        let OpKind::Memory { tensor, .. } = node.kind else { unreachable!("not a memory op") };
        let e = self.g.in_edges(m)[0];
        let at = eval_components(point, &self.env)?;
        let mut env = self.env.clone();
        for (d, c) in node.domain.iter().zip(&at.comps) {
            if let IndexComp::Point(v) = c {
                env.bind(&d.name, *v);
            }
        }
        let mut comps = Vec::new();
        for c in &e.phi {
            match c.as_sym().and_then(|s| node.domain.iter().position(|d| d.name == s)) {
                Some(j) => comps.push(at.comps[j]),
                None => comps.extend(eval_components(std::slice::from_ref(c), &env)?.comps),
            }
        }
        let ext = src_extents(self.g, e, &self.env)?;
        Ok((tensor, clip(&IndexSet { comps }, &ext)))
    }

    fn memory(&mut self, m: usize, point: &[SymExpr], op: MemOp) -> Result<(), RuntimeError> {
        let (x, set) = self.mem_points(m, point)?;
        if self.opts.trace {
            let word = match op {
                MemOp::Dealloc => "DEALLOC",
                MemOp::Offload => "OFFLOAD",
                MemOp::Fetch => "FETCH",
            };
            self.trace.push(format!("{word} {} {}", self.g.node(x).name, fmt_set(&set)));
        }
        match op {
            MemOp::Dealloc => self.stats.memory.deallocs += 1,
            MemOp::Offload => self.stats.memory.offloads += 1,
            MemOp::Fetch => self.stats.memory.fetches += 1,
        }
        for p in set.points() {
            let Some(store) = self.store.get_mut(&x) else { break };
            let mem = &mut self.stats.memory;
            let mut live_delta = 0i64;
            let mut moved = 0;
            match op {
                MemOp::Dealloc => {
                    let Some(e) = store.remove(&p) else { continue };
                    if e.on_device {
                        mem.device_live -= e.bytes;
                        live_delta = -1;
                        moved = e.bytes;
                    }
                    if e.on_host {
                        mem.host_live -= e.bytes;
                    }
                }
                MemOp::Offload => {
                    let Some(e) = store.get_mut(&p) else { continue };
                    if e.on_device {
                        if !e.on_host {
                            mem.host_alloc(e.bytes);
                            mem.bytes_offloaded += e.bytes;
                            e.on_host = true;
                        }
                        mem.device_live -= e.bytes;
                        e.on_device = false;
                        live_delta = -1;
                        moved = e.bytes;
                    }
                }
                MemOp::Fetch => {
                    let Some(e) = store.get_mut(&p) else { continue };
                    if !e.on_device && e.on_host {
                        mem.alloc(e.bytes)?;
                        mem.bytes_fetched += e.bytes;
                        e.on_device = true;
                        live_delta = 1;
                        moved = e.bytes;
                    }
                }
            }
            if live_delta != 0 {
                self.live_change(x, live_delta > 0, moved);
            }
        }
        Ok(())
    }

    fn run(&mut self, s: &Stmt) -> Result<(), RuntimeError> {
        match s {
            Stmt::Sequence(ss) => {
                for s in ss {
                    self.run(s)?;
                }
            }
            Stmt::Loop { var, parallel, lo, hi, body, .. } => {
                let mut i = lo.eval_int(&self.env)?;
                while i < hi.eval_int(&self.env)? {
                    self.env.bind(var, i);
                    self.run(body)?;
                    if !parallel {
                        self.slot += 1;
                    }
                    i += 1;
                }
                self.env.unbind(var);
            }
            Stmt::If { cond, body } => {
                if cond.eval_bool(&self.env)? {
                    self.run(body)?;
                }
            }
            Stmt::Execute { node, point } => {
                let mut p = Vec::with_capacity(point.len());
                for e in point {
                    p.push(e.eval_int(&self.env)?);
                }
                self.execute(*node, p)?;
            }
            Stmt::Dealloc { node, point } => self.memory(*node, point, MemOp::Dealloc)?,
            Stmt::Offload { node, point } => self.memory(*node, point, MemOp::Offload)?,
            Stmt::Fetch { node, point } => self.memory(*node, point, MemOp::Fetch)?,
        }
        Ok(())
    }
}

/// Run `ast` and collect every output point.
pub fn execute(g: &Pdg, ast: &Ast, backend: &dyn Backend, opts: &ExecOptions) -> Result<Execution, RuntimeError> {
    let env = g.bound_env(&opts.bindings, DYNAMIC_BOUND_CAP)?;
    let open = g
        .bounds
        .iter()
        .filter(|(b, k)| matches!(k, Bound::Dynamic { .. }) && !opts.bindings.contains_key(*b))
        .map(|(b, _)| b.clone())
        .collect();
    let mut m = Machine {
        g,
        backend,
        opts,
        env,
        open,
        store: HashMap::new(),
        live: HashMap::new(),
        stats: Stats { backend: backend.name().into(), ..Stats::default() },
        trace: Vec::new(),
        slot: 0,
    };
    m.stats.memory.capacity = opts.device_bytes;
    let body = ast.select(&m.env).clone();
    m.run(&body)?;
    if let Some(b) = m.open.iter().next() {
        return Err(RuntimeError::NoTermination(b.clone()));
    }
    let mut out = Outputs::default();
    for b in g.bounds.keys() {
        out.bounds.insert(b.clone(), m.env.get(b).unwrap_or(0));
    }
    for (name, id) in &g.outputs {
        let node = g.node(*id);
        let ext: Vec<i64> = node.domain.iter().map(|d| m.env.get(&d.bound).unwrap_or(0)).collect();
        let mut pm = PointMap::new();
        for p in domain_points(&ext) {
            let v = m
                .store
                .get(id)
                .and_then(|s| s.get(&p))
                .and_then(|e| e.value.clone())
                .ok_or_else(|| RuntimeError::Undefined { tensor: name.clone(), point: p.clone() })?;
            pm.insert(p, v);
        }
        out.values.insert(name.clone(), pm);
    }
    let names: BTreeSet<usize> = g.nodes.keys().copied().collect();
    for (n, l) in &m.live {
        if names.contains(n) {
            m.stats.peak_live_points.insert(g.node(*n).name.clone(), l.peak_points);
            m.stats.peak_live_bytes.insert(g.node(*n).name.clone(), l.peak_bytes);
        }
    }
    let bounds = m.env.clone();
    m.stats.static_estimate = static_estimate(g, &bounds);
    m.stats.static_estimate_total = m.stats.static_estimate.values().sum();
    Ok(Execution { outputs: out, stats: m.stats, trace: m.trace })
}
