//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! straight to stdout so the lines show up even when output is captured.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtensor::astgen::opt::OptOptions;
use rtensor::frontend::dsl::parse_program;
use rtensor::frontend::ops::{DType, OpKind};
use rtensor::pdg::{build, Pdg};
use rtensor::pipeline::{compile, compile_graph, run, CompileOptions, Compiled, Error};
use rtensor::polysched::memory::{augment, MemoryOptions};
use rtensor::polysched::schedule;
use rtensor::polysched::verify::verify_schedule;
use rtensor::runtime::exec::{static_estimate, CpuBackend, ExecOptions, Execution};
use rtensor::runtime::oracle::{reference_execute, OracleOptions};
use rtensor::runtime::tensor::Tensor;
use rtensor::runtime::{Outputs, RuntimeError, DYNAMIC_BOUND_CAP};
use rtensor::symexpr::{eval_components, invert, parse, Dim, Env, SymExpr};
use rtensor::transforms::{apply, TransformOptions};

const PREFIX_SUM: &str = include_str!("../programs/prefix_sum.rtl");
const REINFORCE: &str = include_str!("../programs/reinforce.rtl");
const NSTEP2: &str = include_str!("../programs/nstep2.rtl");
const NSTEP4: &str = include_str!("../programs/nstep4.rtl");
const PPO_BLOCKS: &str = include_str!("../programs/ppo_blocks.rtl");
const CHECKPOINT: &str = include_str!("../programs/checkpoint.rtl");
const DYN_EPISODE: &str = include_str!("../programs/dyn_episode.rtl");
const OBS_ESTIMATE: &str = include_str!("../programs/obs_estimate.rtl");
const LARGE_OBS: &str = include_str!("../programs/large_obs.rtl");
const ELEMENTWISE: &str = include_str!("../programs/elementwise.rtl");
const INCREMENTAL_SUM: &str = include_str!("../programs/incremental_sum.rtl");
const GRAD_BRANCHES: &str = include_str!("../programs/grad_branches.rtl");
const GRAD_WINDOW: &str = include_str!("../programs/grad_window.rtl");
const GRAD_DISCOUNTED: &str = include_str!("../programs/grad_discounted.rtl");
const WINDOW: &str = include_str!("../programs/window.rtl");

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn bind(pairs: &[(&str, i64)]) -> BTreeMap<String, i64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn graph(src: &str) -> Pdg {
    build(&parse_program(src).unwrap()).unwrap()
}

fn oracle(src: &str, bindings: &BTreeMap<String, i64>, seed: u64) -> Outputs {
    reference_execute(&graph(src), &OracleOptions { bindings: bindings.clone(), seed, ..Default::default() }).unwrap()
}

fn execute(c: &Compiled, bindings: &BTreeMap<String, i64>, seed: u64, trace: bool) -> Result<Execution, Error> {
    run(c, &CpuBackend, &ExecOptions { bindings: bindings.clone(), seed, trace, timeline: trace, ..Default::default() })
}

/// Integer outputs must match exactly, floats within `tol`. Bounds added by
/// tiling only show up in `got`.
fn same_outputs(want: &Outputs, got: &Outputs, tol: f64) -> Result<(), String> {
    ensure(want.bounds.iter().all(|(k, v)| got.bounds.get(k) == Some(v)), || format!("bounds {:?} vs {:?}", want.bounds, got.bounds))?;
    ensure(want.values.keys().eq(got.values.keys()), || format!("outputs {:?} vs {:?}", want.values.keys(), got.values.keys()))?;
    for (name, pw) in &want.values {
        let pg = &got.values[name];
        ensure(pw.keys().eq(pg.keys()), || format!("`{name}` points differ"))?;
        for (p, a) in pw {
            let b = &pg[p];
            ensure(a.shape == b.shape, || format!("`{name}`{p:?} shape {:?} vs {:?}", a.shape, b.shape))?;
            let exact = matches!(a.dtype, DType::I64 | DType::Bool);
            for (x, y) in a.data.iter().zip(&b.data) {
                let ok = if exact { x == y } else { (x - y).abs() <= tol };
                ensure(ok, || format!("`{name}`{p:?}: {x} vs {y}"))?;
            }
        }
    }
    Ok(())
}

fn criterion_1() -> Check {
    let g = graph(OBS_ESTIMATE);
    let env = g.bound_env(&BTreeMap::new(), DYNAMIC_BOUND_CAP).map_err(err)?;
    let est = static_estimate(&g, &env);
    let gib = est["o"] as f64 / (1u64 << 30) as f64;
    ensure((gib - 375.0).abs() <= 0.1, || format!("estimate {gib:.3} GiB"))?;
    Ok(format!("observations need {gib:.1} GiB"))
}

fn criterion_2() -> Check {
    let t = [Dim::new("t", "T")];
    let table = [("t+3", "t-3"), ("t:T", "0:t+1"), ("0:T", "0:T")];
    for (fwd, back) in table {
        let inv = invert(&[parse(fwd).map_err(err)?], &t, &t).map_err(err)?;
        let got = inv.index[0].to_string();
        ensure(got == back && inv.is_unconditional(), || format!("[{fwd}] inverts to [{got}] if {}", inv.cond))?;
    }
    let dims = [Dim::new("i", "I"), Dim::new("t", "T")];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..1000 {
        let sink: Vec<Dim> = dims[rng.gen_range(0..2)..].to_vec();
        let src: Vec<Dim> = dims[rng.gen_range(0..2)..].to_vec();
        let phi: Vec<SymExpr> = src
            .iter()
            .map(|sd| {
                let u = &sink[rng.gen_range(0..sink.len())].name;
                let b = &sd.bound;
                let c: i64 = rng.gen_range(-3..=3);
                let k: i64 = rng.gen_range(1..=4);
                let text = match rng.gen_range(0..8) {
                    0 => format!("{}", rng.gen_range(0..4)),
                    1 => format!("{u}+{c}"),
                    2 => format!("2*{u}+{c}"),
                    3 => format!("-{u}+{c}"),
                    4 => format!("{u}+{}:{b}", c.abs()),
                    5 => format!("0:{b}"),
                    6 => format!("max(0, {u}-{k}):{u}+1"),
                    _ => format!("{u}:min({u}+{k}, {b})"),
                };
                parse(&text).unwrap()
            })
            .collect();
        let small = sink.len() + src.len() > 2;
        let hi = if small { 6 } else { 16 };
        let bounds = [("I", rng.gen_range(1..=hi)), ("T", rng.gen_range(1..=hi))];
        let inverse = invert(&phi, &sink, &src).map_err(|e| format!("case {case}: {e}"))?;
        let env_at = |dims: &[Dim], p: &[i64]| {
            let mut env = Env::new();
            for (k, v) in bounds {
                env.bind(k, v);
            }
            for (d, v) in dims.iter().zip(p) {
                env.bind(&d.name, *v);
            }
            env
        };
        let grid = |dims: &[Dim]| {
            dims.iter().fold(vec![vec![]], |acc: Vec<Vec<i64>>, d| {
                let n = bounds.iter().find(|(k, _)| *k == d.bound).unwrap().1;
                acc.into_iter().flat_map(|p| (0..n).map(move |v| [p.clone(), vec![v]].concat())).collect()
            })
        };
        for p in grid(&sink) {
            let reads = eval_components(&phi, &env_at(&sink, &p)).map_err(err)?;
            for q in grid(&src) {
                let env = env_at(&src, &q);
                let back = inverse.cond.eval_bool(&env).map_err(err)? && eval_components(&inverse.index, &env).map_err(err)?.contains(&p);
                ensure(reads.contains(&q) == back, || {
                    let f: Vec<String> = phi.iter().map(|e| e.to_string()).collect();
                    let b: Vec<String> = inverse.index.iter().map(|e| e.to_string()).collect();
                    format!("case {case}: [{}] vs [{}] if {} at sink {p:?} source {q:?}", f.join(", "), b.join(", "), inverse.cond)
                })?;
            }
        }
    }
    Ok("table holds; 1000 random round trips agree".into())
}

fn toggles(k: usize) -> CompileOptions {
    let (vectorize, incrementalize, fuse) = (k & 1 != 0, k & 2 != 0, k & 4 != 0);
    let mut o = CompileOptions::default();
    o.transforms = TransformOptions { vectorize, incrementalize, fuse, block_bytes: incrementalize.then_some(64) };
    o.swap_threshold = Some(1);
    o
}

fn criterion_3() -> Check {
    let fixed = [
        ("prefix_sum", PREFIX_SUM),
        ("reinforce", REINFORCE),
        ("nstep2", NSTEP2),
        ("nstep4", NSTEP4),
        ("ppo_blocks", PPO_BLOCKS),
        ("checkpoint", CHECKPOINT),
    ];
    let mut runs = 0;
    for k in 0..8 {
        let opts = toggles(k);
        for (name, src) in fixed {
            let c = compile(src, &opts).map_err(|e| format!("{name} config {k}: {e}"))?;
            for t in 1..=8 {
                let b = bind(&[("T", t)]);
                let got = execute(&c, &b, 3, false).map_err(|e| format!("{name} config {k} T={t}: {e}"))?;
                same_outputs(&oracle(src, &b, 3), &got.outputs, 1e-10).map_err(|e| format!("{name} config {k} T={t}: {e}"))?;
                runs += 1;
            }
        }
        let c = compile(DYN_EPISODE, &opts).map_err(|e| format!("dyn_episode config {k}: {e}"))?;
        for seed in 0..4 {
            let got = execute(&c, &BTreeMap::new(), seed, false).map_err(|e| format!("dyn_episode config {k}: {e}"))?;
            let want = oracle(DYN_EPISODE, &BTreeMap::new(), seed);
            ensure(want.bounds["T"] <= 8, || format!("episode ran to T={}", want.bounds["T"]))?;
            same_outputs(&want, &got.outputs, 1e-10).map_err(|e| format!("dyn_episode config {k} seed {seed}: {e}"))?;
            runs += 1;
        }
    }
    Ok(format!("7 programs x 8 configs, {runs} runs match the oracle"))
}

fn criterion_4() -> Check {
    let corpus = [PREFIX_SUM, REINFORCE, NSTEP2, NSTEP4, PPO_BLOCKS, CHECKPOINT, DYN_EPISODE, LARGE_OBS, WINDOW, ELEMENTWISE];
    let mut checked = 0;
    for src in corpus {
        let mut g = graph(src);
        apply(&mut g, &TransformOptions::default());
        let s = schedule(&g).map_err(err)?;
        for t in [1, 2, 5, 8] {
            let env = g.bound_env(&bind(&[("T", t)]), DYNAMIC_BOUND_CAP).map_err(err)?;
            let v = verify_schedule(&g, &s.tree, &env);
            ensure(v.is_empty(), || format!("T={t}: {v:?}"))?;
            let mut h = g.clone();
            let (tree, _) = augment(&mut h, s.tree.clone(), &MemoryOptions { swap_threshold: Some(1), bounds: env.clone() });
            let v = verify_schedule(&h, &tree, &env);
            ensure(v.is_empty(), || format!("augmented, T={t}: {v:?}"))?;
            checked += 2;
        }
    }
    Ok(format!("{checked} schedules verified with no violations"))
}

fn events_of<'a>(ex: &'a Execution, op: &'a str) -> impl Iterator<Item = (u64, i64)> + 'a {
    ex.stats.timeline.iter().filter(move |e| e.op == op).map(|e| (e.step, e.point.first().copied().unwrap_or(0)))
}

fn criterion_5() -> Check {
    let t = 8;
    let b = bind(&[("T", t)]);
    // Anti-causal returns: acting finishes before any learning starts.
    let c = compile(REINFORCE, &CompileOptions::default()).map_err(err)?;
    ensure(c.schedule.phase_count() == 2, || format!("{} phases", c.schedule.phase_count()))?;
    let ex = execute(&c, &b, 0, true).map_err(err)?;
    let phase_of = |name: &str| c.pdg.ids().into_iter().find(|&n| c.pdg.node(n).name == name).and_then(|n| c.schedule.phase.get(&n).copied());
    let (mut last_act, mut first_learn) = (0, u64::MAX);
    for e in &ex.stats.timeline {
        match phase_of(&e.op) {
            Some(0) if e.op == "a" || e.op == "o" => last_act = last_act.max(e.step),
            Some(1) => first_learn = first_learn.min(e.step),
            _ => {}
        }
    }
    ensure(last_act < first_learn, || format!("acting until step {last_act}, learning from {first_learn}"))?;
    let mut no_swap = CompileOptions::default();
    no_swap.swap_threshold = None;
    let c = compile(REINFORCE, &no_swap).map_err(err)?;
    let live = execute(&c, &b, 0, false).map_err(err)?.stats.peak_live_points["o"];
    ensure(live == t as u64, || format!("anti-causal keeps {live} observations live"))?;
    let mut detail = format!("2 phases; anti-causal live obs {live}");
    // n-step: learning trails acting by n.
    for (n, src) in [(2i64, NSTEP2), (4, NSTEP4)] {
        let c = compile(src, &CompileOptions::default()).map_err(err)?;
        let id = |name: &str| c.pdg.ids().into_iter().find(|&x| c.pdg.node(x).name == name).ok_or(format!("no `{name}`"));
        let (u, a) = (id("u")?, id("a")?);
        let band = c.schedule.tree.bands().into_iter().find(|bd| bd.shifts.contains_key(&u) && bd.shifts.contains_key(&a)).ok_or("u and a share no band")?;
        let skew = band.shifts[&u] - band.shifts[&a];
        ensure(skew == n, || format!("n={n}: skew {skew}"))?;
        let ex = execute(&c, &b, 0, true).map_err(err)?;
        let acts: BTreeMap<i64, u64> = events_of(&ex, "a").map(|(s, p)| (p, s)).collect();
        for (s, p) in events_of(&ex, "u") {
            let after = acts.get(&(p + n)).is_none_or(|&x| x < s);
            let before = acts.get(&(p + n + 1)).is_none_or(|&x| x > s);
            ensure(after && before, || format!("n={n}: u[{p}] at step {s} is not between a[{}] and a[{}]", p + n, p + n + 1))?;
        }
        let order: Vec<String> = ex.stats.timeline.iter().filter(|e| e.op == "a" || e.op == "u").take(8).map(|e| format!("{}{}", e.op, e.point[0])).collect();
        let live = ex.stats.peak_live_points["o"];
        ensure(live <= n as u64 + 1, || format!("n={n}: {live} observations live"))?;
        detail.push_str(&format!("; n={n} skew {skew}, live obs {live}, order {}", order.join(" ")));
    }
    Ok(detail)
}

fn criterion_6() -> Check {
    let capacity = 96 * 1024;
    let b = bind(&[("T", 16)]);
    let opts = |incrementalize: bool, swap: bool| {
        let mut o = CompileOptions::default();
        o.transforms.incrementalize = incrementalize;
        o.transforms.block_bytes = Some(32 * 1024);
        o.swap_threshold = swap.then_some(4096);
        o
    };
    let eo = ExecOptions { bindings: b.clone(), device_bytes: Some(capacity), ..Default::default() };
    let plain = compile(LARGE_OBS, &opts(false, false)).map_err(err)?;
    match run(&plain, &CpuBackend, &eo) {
        Err(Error::Runtime(RuntimeError::OutOfMemory { .. })) => {}
        Err(e) => return Err(format!("unexpected error without passes: {e}")),
        Ok(ex) => return Err(format!("fits without passes (peak {})", ex.stats.memory.device_peak)),
    }
    let c = compile(LARGE_OBS, &opts(true, true)).map_err(err)?;
    let ex = run(&c, &CpuBackend, &eo).map_err(err)?;
    let m = &ex.stats.memory;
    ensure(m.device_peak <= capacity && m.host_peak > 0, || format!("device peak {} host peak {}", m.device_peak, m.host_peak))?;
    same_outputs(&oracle(LARGE_OBS, &b, 0), &ex.outputs, 1e-9)?;
    Ok(format!("overflows {capacity} B without passes; with them device peak {} host peak {}", m.device_peak, m.host_peak))
}

fn criterion_7() -> Check {
    let b = bind(&[("T", 32)]);
    let counts = |vectorize: bool| -> Result<(BTreeMap<String, u64>, Outputs), String> {
        let mut o = CompileOptions::default();
        o.transforms = TransformOptions { vectorize, incrementalize: false, fuse: false, block_bytes: None };
        let ex = execute(&compile(ELEMENTWISE, &o).map_err(err)?, &b, 0, false).map_err(err)?;
        Ok((ex.stats.executes_by_op, ex.outputs))
    };
    let (before, out_before) = counts(false)?;
    let (after, out_after) = counts(true)?;
    for op in ["y", "z"] {
        let (x, y) = (before.get(op).copied().unwrap_or(0), after.get(op).copied().unwrap_or(0));
        ensure(x == 32 * y && y > 0, || format!("`{op}` executes {x} -> {y}"))?;
    }
    same_outputs(&out_before, &out_after, 1e-12)?;
    Ok(format!("y {} -> {}, z {} -> {}", before["y"], after["y"], before["z"], after["z"]))
}

fn criterion_8() -> Check {
    let mut o = CompileOptions::default();
    o.transforms = TransformOptions { vectorize: true, incrementalize: true, fuse: false, block_bytes: Some(2048) };
    let c = compile(INCREMENTAL_SUM, &o).map_err(err)?;
    let env = c.pdg.bound_env(&BTreeMap::new(), DYNAMIC_BOUND_CAP).map_err(err)?;
    let fresh: Vec<&Dim> = c.pdg.dims.iter().collect();
    let [d] = fresh.as_slice() else { return Err(format!("dims {:?}", c.pdg.dims)) };
    let di = env.get(&d.bound).ok_or("unbound block dim")?;
    ensure(di == 4, || format!("{} = {di}", d.bound))?;
    let tiled = execute(&c, &BTreeMap::new(), 0, false).map_err(err)?;
    o.transforms.incrementalize = false;
    let whole = execute(&compile(INCREMENTAL_SUM, &o).map_err(err)?, &BTreeMap::new(), 0, false).map_err(err)?;
    let untiled = whole.stats.peak_live_bytes["y"];
    let (name, peak) = tiled.stats.peak_live_bytes.iter().filter(|(k, _)| k.starts_with('y')).max_by_key(|(_, v)| **v).ok_or("no tiled intermediate")?;
    let block = 2048;
    let limit = untiled / di as u64 + block;
    ensure(*peak <= limit, || format!("`{name}` peaks at {peak} > {limit}"))?;
    same_outputs(&oracle(INCREMENTAL_SUM, &BTreeMap::new(), 0), &tiled.outputs, 1e-9)?;
    Ok(format!("DI={di}; `{name}` peak {peak} B vs untiled {untiled} B"))
}

fn fd_error(src: &str) -> Result<f64, String> {
    let p = parse_program(src).map_err(err)?;
    let mut g = build(&p).map_err(err)?;
    let w = p.find("w").ok_or("no param `w`")?;
    g.outputs.push(("w".into(), w));
    let c = compile_graph(g, &CompileOptions::default()).map_err(err)?;
    let base = run(&c, &CpuBackend, &ExecOptions::default()).map_err(err)?.outputs;
    let w0 = base.values["w"][&vec![]].clone();
    let grad = base.values["grad_w"][&vec![]].clone();
    let loss = |wv: Tensor| -> Result<f64, String> {
        let eo = ExecOptions { params: [("w".to_string(), wv)].into(), ..Default::default() };
        Ok(run(&c, &CpuBackend, &eo).map_err(err)?.outputs.values["l"][&vec![]].data[0])
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..w0.data.len() {
        let (mut a, mut b) = (w0.clone(), w0.clone());
        a.data[k] += h;
        b.data[k] -= h;
        let fd = (loss(a)? - loss(b)?) / (2.0 * h);
        let an = grad.data[k];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
    }
    Ok(worst)
}

fn criterion_9() -> Check {
    let has_merge = graph(GRAD_BRANCHES).nodes.values().any(|n| n.kind == OpKind::Merge);
    ensure(has_merge, || "branch program has no merge".into())?;
    let mut parts = Vec::new();
    for (name, src) in [("merge", GRAD_BRANCHES), ("inverted slice", GRAD_WINDOW), ("discounted", GRAD_DISCOUNTED)] {
        let e = fd_error(src).map_err(|e| format!("{name}: {e}"))?;
        ensure(e < 1e-4, || format!("{name}: relative error {e:e}"))?;
        parts.push(format!("{name} {e:.1e}"));
    }
    Ok(parts.join(", "))
}

fn criterion_10() -> Check {
    let b = bind(&[("T", 8)]);
    let traced = |ast: OptOptions| -> Result<(Compiled, Execution), String> {
        let mut o = CompileOptions::default();
        o.swap_threshold = Some(1);
        o.ast = ast;
        let c = compile(WINDOW, &o).map_err(err)?;
        let ex = execute(&c, &b, 0, true).map_err(err)?;
        Ok((c, ex))
    };
    let (_, plain) = traced(OptOptions { peel: 0, promote: false, elide: false })?;
    let (c, opt) = traced(OptOptions::default())?;
    let lines = |ex: &Execution, kind: &str| -> Vec<String> { ex.trace.iter().filter(|l| l.starts_with(kind)).cloned().collect() };
    ensure(lines(&plain, "EXEC ") == lines(&opt, "EXEC "), || "execute traces differ".into())?;
    let count = |ex: &Execution, kind: &str| lines(ex, kind).len();
    let (o0, o1, f0, f1) = (count(&plain, "OFFLOAD "), count(&opt, "OFFLOAD "), count(&plain, "FETCH "), count(&opt, "FETCH "));
    ensure(c.ast_report.elided_pairs >= 1 && o1 < o0 && f1 < f0, || format!("offloads {o0}->{o1}, fetches {f0}->{f1}, elided {}", c.ast_report.elided_pairs))?;
    same_outputs(&plain.outputs, &opt.outputs, 1e-12)?;
    Ok(format!("execute traces equal; offloads {o0}->{o1}, fetches {f0}->{f1}"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("memory estimate", criterion_1),
        ("index inversion", criterion_2),
        ("oracle equivalence", criterion_3),
        ("schedule validity", criterion_4),
        ("acting and learning order", criterion_5),
        ("swap and incrementalize under a device limit", criterion_6),
        ("vectorization", criterion_7),
        ("incremental reduction", criterion_8),
        ("gradients", criterion_9),
        ("loop optimizations", criterion_10),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (k, (name, f)) in criteria.into_iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let line = match &result {
            Ok(d) => format!("criterion {:>2} PASS {name}: {d}\n", k + 1),
            Err(e) => {
                failed.push(k + 1);
                format!("criterion {:>2} FAIL {name}: {e}\n", k + 1)
            }
        };
        let _ = out.write_all(line.as_bytes());
        let _ = out.flush();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
