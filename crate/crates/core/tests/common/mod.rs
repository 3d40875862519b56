//! Independent scalar-loop reference implementation of the forward pass and
//! a finite-difference gradient checker, shared by the integration tests.
#![allow(dead_code)]

use megacrn::data::Normalizer;
use megacrn::model::{Model, Variant};
use megacrn::training::{loss_and_grads, LossWeights};
use ndarray::{Array2, Array3, Array4};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let mut out = zeros(a[0].len(), a.len());
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn hcat(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| f(*v)).collect()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `softmax(relu(S))` row-wise.
pub fn normalized(scores: &Mat) -> Mat {
    scores
        .iter()
        .map(|row| {
            let r: Vec<f64> = row.iter().map(|v| v.max(0.0)).collect();
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn graph_from_embedding(e: &Mat) -> Mat {
    normalized(&matmul(e, &transpose(e)))
}

/// `Σ_k P^k X Θ_k` with `Θ` stacked as `((K+1)·C_in) × C_out`.
fn graph_conv(p: &Mat, x: &Mat, theta: &Mat, order: usize) -> Mat {
    let c_in = x[0].len();
    let c_out = theta[0].len();
    let mut out = zeros(x.len(), c_out);
    let mut px = x.clone();
    for k in 0..=order {
        if k > 0 {
            px = matmul(p, &px);
        }
        let slice: Mat = theta[k * c_in..(k + 1) * c_in].to_vec();
        let term = matmul(&px, &slice);
        for (o, t) in out.iter_mut().zip(term) {
            for (a, b) in o.iter_mut().zip(t) {
                *a += b;
            }
        }
    }
    out
}

struct Cell {
    tu: Mat,
    tr: Mat,
    tc: Mat,
    bu: Vec<f64>,
    br: Vec<f64>,
    bc: Vec<f64>,
}

fn cell(model: &Model, side: &str, l: usize) -> Cell {
    let g = |t: &str| to_mat(model.params().get(&format!("{side}.cell{l}.{t}")).unwrap());
    Cell {
        tu: g("theta_u"),
        tr: g("theta_r"),
        tc: g("theta_c"),
        bu: g("b_u")[0].clone(),
        br: g("b_r")[0].clone(),
        bc: g("b_c")[0].clone(),
    }
}

fn gcru(c: &Cell, p: &Mat, x: &Mat, h: &Mat, order: usize) -> Mat {
    let xh = hcat(x, h);
    let u = map(&add_bias(&graph_conv(p, &xh, &c.tu, order), &c.bu), sigmoid);
    let r = map(&add_bias(&graph_conv(p, &xh, &c.tr, order), &c.br), sigmoid);
    let rh: Mat = r.iter().zip(h).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect()).collect();
    let cand = map(&add_bias(&graph_conv(p, &hcat(x, &rh), &c.tc, order), &c.bc), f64::tanh);
    let mut out = zeros(h.len(), h[0].len());
    for i in 0..h.len() {
        for j in 0..h[0].len() {
            out[i][j] = u[i][j] * h[i][j] + (1.0 - u[i][j]) * cand[i][j];
        }
    }
    out
}

pub struct OracleTrace {
    /// One `N × C` matrix per horizon step, normalized space.
    pub predictions: Vec<Mat>,
    pub encoder_graph: Mat,
    pub decoder_graph: Mat,
    pub attention: Option<Mat>,
}

/// Step-by-step forward pass for one `α × N × C` window.
pub fn oracle_forward(model: &Model, x: &Array3<f64>) -> OracleTrace {
    let cfg = model.config();
    let p = |n: &str| to_mat(model.params().get(n).unwrap());
    let (alpha, n, c) = x.dim();
    let order = cfg.cheb_order;

    let enc_graph = graph_from_embedding(&p("graph.node_embedding"));
    let enc: Vec<Cell> = (0..cfg.layers).map(|l| cell(model, "encoder", l)).collect();
    let mut hs: Vec<Mat> = (0..cfg.layers).map(|_| zeros(n, cfg.hidden)).collect();
    for t in 0..alpha {
        let mut inp: Mat = (0..n).map(|i| (0..c).map(|ch| x[[t, i, ch]]).collect()).collect();
        for (l, cl) in enc.iter().enumerate() {
            hs[l] = gcru(cl, &enc_graph, &inp, &hs[l], order);
            inp = hs[l].clone();
        }
    }
    let top = hs.last().unwrap().clone();

    let mut attention = None;
    let mut init = hs.clone();
    let mut dec_graph = enc_graph.clone();
    if cfg.variant == Variant::Momentary {
        dec_graph = graph_from_embedding(&matmul(&top, &p("momentary.w")));
    }
    if cfg.variant.has_memory() {
        let q = add_bias(&matmul(&top, &p("memory.w_q")), &p("memory.b_q")[0]);
        let phi = p("memory.phi");
        let logits = matmul(&q, &transpose(&phi));
        let a: Mat = logits
            .iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            })
            .collect();
        let m = matmul(&a, &phi);
        init = hs.iter().map(|h| hcat(h, &m)).collect();
        if cfg.variant == Variant::Mega {
            let mut e = matmul(&m, &p("memory.w_e"));
            if let Some(b) = model.params().get("memory.b_e") {
                e = add_bias(&e, &to_mat(b)[0]);
            }
            dec_graph = graph_from_embedding(&e);
        }
        attention = Some(a);
    }

    let dec: Vec<Cell> = (0..cfg.layers).map(|l| cell(model, "decoder", l)).collect();
    let w = p("readout.weight");
    let b = p("readout.bias")[0].clone();
    let mut states = init;
    let mut frame = zeros(n, c);
    let mut predictions = Vec::new();
    for _ in 0..cfg.horizon {
        let mut inp = frame.clone();
        for (l, cl) in dec.iter().enumerate() {
            states[l] = gcru(cl, &dec_graph, &inp, &states[l], order);
            inp = states[l].clone();
        }
        let y = add_bias(&matmul(&inp, &w), &b);
        predictions.push(y.clone());
        frame = y;
    }
    OracleTrace {
        predictions,
        encoder_graph: enc_graph,
        decoder_graph: dec_graph,
        attention,
    }
}

pub fn max_abs_diff(a: &Mat, b: &Array2<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - b[[i, j]]).abs());
        }
    }
    m
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Central differences with step `h` for every scalar of every parameter.
/// Entries where the one-sided slopes disagree (a kink inside `[x-h, x+h]`)
/// are skipped.
pub fn finite_difference_check(
    model: &Model,
    inputs: &Array4<f64>,
    targets: &Array4<f64>,
    norm: &Normalizer,
    weights: LossWeights,
    h: f64,
) -> GradCheck {
    let (_, grads) = loss_and_grads(model, inputs.view(), targets.view(), norm, weights).unwrap();
    let loss = |m: &Model| {
        loss_and_grads(m, inputs.view(), targets.view(), norm, weights)
            .unwrap()
            .0
            .total
    };
    let f0 = loss(model);
    let mut report = GradCheck::default();
    let names: Vec<String> = model.params().iter().map(|(k, _)| k.clone()).collect();
    for name in names {
        let len = model.params().get(&name).unwrap().len();
        for idx in 0..len {
            let mut plus = model.clone();
            plus.params_mut().get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] -= h;
            let (fp, fm) = (loss(&plus), loss(&minus));
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            if (fwd - bwd).abs() > 1e-3 * (fwd.abs() + bwd.abs()) + 1e-6 {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[&name].as_slice().unwrap()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{idx}]: analytic {analytic:e}, numeric {numeric:e}");
            }
        }
    }
    report
}
