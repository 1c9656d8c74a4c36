//! Compiled execution against the reference interpreter.

use std::collections::BTreeMap;

use rtensor::pipeline::{compile, run, CompileOptions};
use rtensor::runtime::compare_outputs;
use rtensor::runtime::exec::{AlignedBackend, CpuBackend, ExecOptions};
use rtensor::runtime::oracle::{reference_execute, OracleOptions};

const PROGRAMS: [(&str, &str); 6] = [
    ("prefix", "dims t;\n bounds T=4;\n x = sym(t) + 1 over (t);\n rec s over (t) f64;\n s[0] = x[0];\n s[t+1] = s + x[t+1];\n out s;"),
    ("window", "dims t;\n bounds T=8;\n rec r over (t) f64;\n r[0] = const(1.0);\n r[t+1] = r * 0.5 + 1;\n g = sum(r[t:min(t+3, T)]);\n h = g + r[t];\n out h;"),
    ("anti", "dims t;\n bounds T=8;\n rec r over (t) shape (4) f64;\n r[0] = const(1.0, (4));\n r[t+1] = r * 0.5;\n g = sum(r[t:T]);\n l = sum(sum(g[0:T]));\n out l;"),
    ("dynamic", "dims t;\n x = sym(t) * 2 over (t);\n d = x >= 6;\n bounds T=dyn(d);\n y = x + 1;\n out y;"),
    ("lookback", "dims t;\n bounds T=6;\n x = rand(()) over (t);\n y = x[t-1] + x;\n rec z over (t) f64;\n z[0] = x[0];\n z[t+1] = y[t+1];\n out z;"),
    ("batched", "dims b, t;\n bounds B=3, T=5;\n r = rand((2)) over (b, t);\n g = sum(r[b, t:T]);\n out g;"),
];

fn check(name: &str, src: &str, opts: &CompileOptions, t: i64) {
    let mut bindings = BTreeMap::new();
    if !src.contains("dyn(") {
        bindings.insert("T".to_string(), t);
    }
    let oracle = rtensor::pdg::build(&rtensor::frontend::dsl::parse_program(src).unwrap()).unwrap();
    let want = reference_execute(&oracle, &OracleOptions { bindings: bindings.clone(), seed: 3, ..Default::default() });
    let c = compile(src, opts).unwrap_or_else(|e| panic!("{name}: {e}"));
    let eo = ExecOptions { bindings, seed: 3, ..Default::default() };
    let got = run(&c, &CpuBackend, &eo);
    match (want, got) {
        (Ok(w), Ok(g)) => {
            if let Err(m) = compare_outputs(&w, &g.outputs, 1e-10) {
                panic!("{name} T={t}: {m}");
            }
        }
        (Err(_), Err(_)) => {}
        (w, g) => panic!("{name} T={t}: oracle {:?} vs run {:?}", w.map(|_| ()), g.map(|_| ())),
    }
}

#[test]
fn compiled_runs_match_the_oracle() {
    for (name, src) in PROGRAMS {
        for swap in [None, Some(1)] {
            for peel in [0, 8] {
                let mut opts = CompileOptions { swap_threshold: swap, ..Default::default() };
                opts.ast.peel = peel;
                for t in 1..=8 {
                    check(name, src, &opts, t);
                }
            }
        }
    }
}

#[test]
fn backends_agree_on_values() {
    let (_, src) = PROGRAMS[2];
    let c = compile(src, &CompileOptions::default()).unwrap();
    let a = run(&c, &CpuBackend, &ExecOptions::default()).unwrap();
    let b = run(&c, &AlignedBackend { align: 64 }, &ExecOptions::default()).unwrap();
    assert_eq!(a.outputs, b.outputs);
    assert!(b.stats.memory.device_peak >= a.stats.memory.device_peak);
}

#[test]
fn runs_are_deterministic() {
    let (_, src) = PROGRAMS[5];
    let c = compile(src, &CompileOptions::default()).unwrap();
    let eo = ExecOptions { seed: 9, trace: true, timeline: true, ..Default::default() };
    let a = run(&c, &CpuBackend, &eo).unwrap();
    let b = run(&c, &CpuBackend, &eo).unwrap();
    assert_eq!(a, b);
}
