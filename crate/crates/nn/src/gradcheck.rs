// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference verification of analytic gradients.

use crate::{Graph, NnError, ParamStore, Var};

/// Gradients smaller than this in magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_param: String,
    pub worst_index: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backprop gradients of every parameter element against
/// `(L(w+eps) - L(w-eps)) / 2eps`.
///
/// `build` records the forward pass and returns the scalar loss; it must be a
/// pure function of the store's values.
pub fn check_param_grads<F>(store: &mut ParamStore<f64>, eps: f64, build: F) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.backward(loss)?;
    g.accumulate_param_grads(store);

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l).data()[0]
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst_param: String::new(), worst_index: 0 };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = store.get(id).grad.data()[i];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Every differentiable op in the kernel, by name.
pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "add_scalar",
    "relu",
    "gelu",
    "abs",
    "layernorm",
    "softmax",
    "attention",
    "embedding",
    "cross_entropy",
    "mse",
    "topk_relu",
    "sum",
    "mean",
    "pad_zero_col",
    "mlp3",
];

/// Result of checking one op over many randomized cases.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

/// Runs `cases` randomized shapes/values through each op in [`OPS`] and
/// reports the worst relative gradient error per op.
pub fn run_op_suite(cases: usize, seed: u64, eps: f64) -> Result<Vec<OpCheck>, NnError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(OPS.len());
    for &op in OPS {
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let r = check_op_case(op, &mut rng, eps)?;
            worst = worst.max(r.max_rel_error);
        }
        out.push(OpCheck { op, cases, max_rel_error: worst });
    }
    Ok(out)
}

fn rand_tensor<R: rand::Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> crate::Tensor<f64> {
    let n: usize = shape.iter().product();
    crate::Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Sum of `out * weights` for a fixed random weight tensor, so upstream
/// gradients are non-uniform.
fn readout(g: &mut Graph<f64>, out: Var, weights: &crate::Tensor<f64>) -> Var {
    let w = g.input(weights.clone());
    let p = g.mul(out, w);
    g.sum(p)
}

fn check_op_case<R: rand::Rng>(op: &str, rng: &mut R, eps: f64) -> Result<GradCheckReport, NnError> {
    let m = rng.random_range(1..5usize);
    let n = rng.random_range(1..6usize);
    let mut store = ParamStore::<f64>::new();
    match op {
        "matmul" => {
            let k = rng.random_range(1..5usize);
            let a = store.add("a", rand_tensor(rng, &[m, k], -1.0, 1.0), false);
            let b = store.add("b", rand_tensor(rng, &[k, n], -1.0, 1.0), false);
            let w = rand_tensor(rng, &[m, n], -1.0, 1.0);
            check_param_grads(&mut store, eps, |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                let c = g.matmul(a, b);
                readout(g, c, &w)
            })
        }
        "add" | "sub" | "mul" | "mse" => {
            let a = store.add("a", rand_tensor(rng, &[m, n], -2.0, 2.0), false);
            let b = store.add("b", rand_tensor(rng, &[m, n], -2.0, 2.0), false);
            let w = rand_tensor(rng, &[m, n], -1.0, 1.0);
            let op = op.to_string();
            check_param_grads(&mut store, eps, move |g, s| {
                let (a, b) = (g.param(s, a), g.param(s, b));
                match op.as_str() {
                    "add" => {
                        let c = g.add(a, b);
                        readout(g, c, &w)
                    }
                    "sub" => {
                        let c = g.sub(a, b);
                        readout(g, c, &w)
                    }
                    "mul" => {
                        let c = g.mul(a, b);
                        readout(g, c, &w)
                    }
                    _ => g.mse(a, b),
                }
            })
        }
        "add_row" => {
            let x = store.add("x", rand_tensor(rng, &[m, n], -1.0, 1.0), false);
            let b = store.add("b", rand_tensor(rng, &[n], -1.0, 1.0), false);
            let w = rand_tensor(rng, &[m, n], -1.0, 1.0);
            check_param_grads(&mut store, eps, |g, s| {
                let (x, b) = (g.param(s, x), g.param(s, b));
                let y = g.add_row(x, b);
                readout(g, y, &w)
            })
        }
        "scale" | "add_scalar" | "relu" | "gelu" | "abs" | "softmax" | "sum" | "mean" | "pad_zero_col" => {
            let x = store.add("x", rand_tensor(rng, &[m, n], -3.0, 3.0), false);
            let c: f64 = rng.random_range(-2.0..2.0);
            let wcols = if op == "pad_zero_col" { n + 1 } else { n };
            let w = rand_tensor(rng, &[m, wcols], -1.0, 1.0);
            let ws = rand_tensor(rng, &[1], 0.5, 1.5);
            let op = op.to_string();
            check_param_grads(&mut store, eps, move |g, s| {
                let x = g.param(s, x);
                match op.as_str() {
                    "scale" => {
                        let y = g.scale(x, c);
                        readout(g, y, &w)
                    }
                    "add_scalar" => {
                        let y = g.add_scalar(x, c);
                        let y2 = g.mul(y, y);
                        readout(g, y2, &w)
                    }
                    "relu" => {
                        let y = g.relu(x);
                        readout(g, y, &w)
                    }
                    "gelu" => {
                        let y = g.gelu(x);
                        readout(g, y, &w)
                    }
                    "abs" => {
                        let y = g.abs(x);
                        readout(g, y, &w)
                    }
                    "softmax" => {
                        let y = g.softmax(x);
                        readout(g, y, &w)
                    }
                    "sum" => {
                        let y = g.sum(x);
                        let y2 = g.mul(y, y);
                        readout(g, y2, &ws)
                    }
                    "mean" => {
                        let y = g.mean(x);
                        let y2 = g.mul(y, y);
                        readout(g, y2, &ws)
                    }
                    _ => {
                        let y = g.pad_zero_col(x);
                        readout(g, y, &w)
                    }
                }
            })
        }
        "layernorm" => {
            let n = n + 1;
            let x = store.add("x", rand_tensor(rng, &[m, n], -2.0, 2.0), false);
            let ga = store.add("gain", rand_tensor(rng, &[n], 0.5, 1.5), false);
            let be = store.add("bias", rand_tensor(rng, &[n], -0.5, 0.5), false);
            let w = rand_tensor(rng, &[m, n], -1.0, 1.0);
            check_param_grads(&mut store, eps, |g, s| {
                let (x, ga, be) = (g.param(s, x), g.param(s, ga), g.param(s, be));
                let y = g.layernorm(x, ga, be);
                readout(g, y, &w)
            })
        }
        "attention" => {
            let batch = rng.random_range(1..3usize);
            let seq = rng.random_range(1..5usize);
            let heads = rng.random_range(1..3usize);
            let dh = rng.random_range(1..4usize);
            let d = heads * dh;
            let qkv = store.add("qkv", rand_tensor(rng, &[batch * seq, 3 * d], -1.5, 1.5), false);
            let w = rand_tensor(rng, &[batch * seq, d], -1.0, 1.0);
            check_param_grads(&mut store, eps, |g, s| {
                let q = g.param(s, qkv);
                let y = g.causal_attention(q, batch, seq, heads);
                readout(g, y, &w)
            })
        }
        "embedding" => {
            let vocab = rng.random_range(2..6usize);
            let table = store.add("table", rand_tensor(rng, &[vocab, n], -1.0, 1.0), false);
            let ids: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..vocab)).collect();
            let w = rand_tensor(rng, &[ids.len(), n], -1.0, 1.0);
            check_param_grads(&mut store, eps, |g, s| {
                let t = g.param(s, table);
                let y = g.embedding(t, &ids);
                readout(g, y, &w)
            })
        }
        "cross_entropy" => {
            let c = n + 1;
            let logits = store.add("logits", rand_tensor(rng, &[m, c], -3.0, 3.0), false);
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
            check_param_grads(&mut store, eps, |g, s| {
                let l = g.param(s, logits);
                g.cross_entropy(l, &targets)
            })
        }
        "topk_relu" => {
            let n = n + 2;
            let k = rng.random_range(1..=n);
            let x = store.add("x", rand_tensor(rng, &[m, n], -1.0, 2.0), false);
            let scale: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
            let use_scale = rng.random_bool(0.5);
            let w = rand_tensor(rng, &[m, n], -1.0, 1.0);
            check_param_grads(&mut store, eps, |g, s| {
                let x = g.param(s, x);
                let y = g.topk_relu(x, k, use_scale.then_some(scale.as_slice()));
                readout(g, y, &w)
            })
        }
        "mlp3" => {
            let din = rng.random_range(1..5usize);
            let h1 = rng.random_range(1..6usize);
            let h2 = rng.random_range(1..6usize);
            let classes = rng.random_range(2..5usize);
            let mut ids = Vec::new();
            for (i, (a, b)) in [(din, h1), (h1, h2), (h2, classes)].into_iter().enumerate() {
                let w = store.add(format!("w{i}"), rand_tensor(rng, &[a, b], -1.0, 1.0), false);
                let bias = store.add(format!("b{i}"), rand_tensor(rng, &[b], -0.5, 0.5), false);
                ids.push((w, bias));
            }
            let xin = rand_tensor(rng, &[m, din], -1.0, 1.0);
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
            check_param_grads(&mut store, eps, |g, s| {
                let mut h = g.input(xin.clone());
                for (i, &(w, b)) in ids.iter().enumerate() {
                    let w = g.param(s, w);
                    let b = g.param(s, b);
                    let z = g.matmul(h, w);
                    h = g.add_row(z, b);
                    if i < 2 {
                        h = if i == 0 { g.gelu(h) } else { g.relu(h) };
                    }
                }
                g.cross_entropy(h, &targets)
            })
        }
        other => panic!("unknown op {other}"),
    }
}
