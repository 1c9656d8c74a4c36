use rtensor::frontend::dsl::parse_program;
use rtensor::pdg::build;
use rtensor::runtime::oracle::{reference_execute, OracleOptions};
use rtensor::runtime::tensor::Tensor;

/// Largest relative error between the reverse-mode gradient of `l` with
/// respect to `w` and central differences.
fn grad_error(src: &str) -> f64 {
    let p = parse_program(src).unwrap();
    let mut g = build(&p).unwrap();
    let w = p.find("w").unwrap();
    g.outputs.push(("w".into(), w));
    let opts = OracleOptions::default();
    let base = reference_execute(&g, &opts).unwrap();
    let w0 = base.values["w"][&vec![]].clone();
    let grad = base.values["grad_w"][&vec![]].clone();
    let loss = |wv: Tensor| {
        let mut o = opts.clone();
        o.params.insert("w".into(), wv);
        reference_execute(&g, &o).unwrap().values["l"][&vec![]].item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..w0.numel() {
        let (mut a, mut b) = (w0.clone(), w0.clone());
        a.data[k] += h;
        b.data[k] -= h;
        let fd = (loss(a) - loss(b)) / (2.0 * h);
        let an = grad.data[k];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

pub const RECURRENT_BRANCHES: &str = "dims t;
bounds T=5;
w = param((3), 1);
x = rand((3), 7) over (t);
rec h over (t) shape (3) f64;
h[0] = tanh(x[0] * w);
h[t+1] = tanh(h * w + x[t+1]);
l = sum(sum(h[0:T]));
grad l wrt w;
out l, grad_w;";

pub const WINDOW_SUM: &str = "dims t;
bounds T=4;
w = param((2), 3);
x = tanh(w * sym(t)) over (t);
y = sum(x[t:T]);
l = sum(sum(y[0:T] * y[0:T]));
grad l wrt w;
out l, grad_w;";

pub const DISCOUNTED: &str = "dims t;
bounds T=4;
w = param((3, 2), 2);
o = rand((3), 5) over (t);
a = tanh(matmul(o, w));
r = sum(a * a);
ret = dsum(r[t:T], 0.9);
l = sum(ret[0:T]);
grad l wrt w;
out l, grad_w;";

#[test]
fn gradient_through_recurrent_branches() {
    let e = grad_error(RECURRENT_BRANCHES);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn gradient_through_anti_causal_window() {
    let e = grad_error(WINDOW_SUM);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn gradient_through_discounted_return() {
    let e = grad_error(DISCOUNTED);
    assert!(e < 1e-4, "{e}");
}
