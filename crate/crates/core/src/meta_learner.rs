//! Meta-node bank: prototype memory, attention read, hyper-network node
//! embeddings, and the two memory regularizers.
//!
//! Each node's hidden vector is projected to a query, matched against every
//! prototype by dot product, and the softmax-weighted prototype mix `M` is
//! fed through a single affine layer to produce per-step node embeddings.
//! Those embeddings build the decoder graph the same way a free embedding
//! builds the adaptive graph.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{config, invalid, Result};
use crate::graph_ops::{embedding_graph_on, DenseGraph, NodeEmbedding};

/// Prototype memory plus the query projection and hyper-network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaNodeBank {
    /// `φ × d` prototypes.
    pub phi: Array2<f64>,
    /// `h × d`
    pub w_q: Array2<f64>,
    /// `1 × d`
    pub b_q: Array2<f64>,
    /// `d × e`
    pub w_e: Array2<f64>,
    /// `1 × e`, absent when the hyper-network is bias-free.
    pub b_e: Option<Array2<f64>>,
}

impl MetaNodeBank {
    pub fn zeros(prototypes: usize, hidden: usize, dim: usize, embed: usize, hyper_bias: bool) -> Self {
        Self {
            phi: Array2::zeros((prototypes, dim)),
            w_q: Array2::zeros((hidden, dim)),
            b_q: Array2::zeros((1, dim)),
            w_e: Array2::zeros((dim, embed)),
            b_e: hyper_bias.then(|| Array2::zeros((1, embed))),
        }
    }

    /// Prototypes uniform in `±1/√d`; projections Xavier-uniform; biases zero.
    pub fn random(
        rng: &mut impl Rng,
        prototypes: usize,
        hidden: usize,
        dim: usize,
        embed: usize,
        hyper_bias: bool,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut bank = Self::zeros(prototypes, hidden, dim, embed, hyper_bias);
        bank.phi.mapv_inplace(|_| rng.gen_range(-bound..bound));
        bank.w_q = xavier(rng, hidden, dim);
        bank.w_e = xavier(rng, dim, embed);
        bank
    }

    pub fn prototypes(&self) -> usize {
        self.phi.nrows()
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototypes() < 2 {
            return Err(config(format!(
                "meta-node bank needs at least 2 prototypes, got {}",
                self.prototypes()
            )));
        }
        let d = self.dim();
        if self.w_q.ncols() != d || self.b_q.dim() != (1, d) || self.w_e.nrows() != d {
            return Err(invalid("meta-node bank tensors disagree on the memory width"));
        }
        if let Some(b) = &self.b_e {
            if b.dim() != (1, self.w_e.ncols()) {
                return Err(invalid("hyper-network bias width mismatch"));
            }
        }
        let all = [&self.phi, &self.w_q, &self.b_q, &self.w_e];
        if all.iter().any(|a| a.iter().any(|v| !v.is_finite())) || self.b_e.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(invalid("meta-node bank contains non-finite parameters"));
        }
        Ok(())
    }
}

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
}

/// Result of matching queries against the prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReadout {
    /// `N × d` reconstructed meta-node vectors.
    pub m: Array2<f64>,
    /// `N × φ` attention weights.
    pub attention: Array2<f64>,
    /// `(p, n)` per node: most and second-most attended prototypes.
    pub top2: Vec<[usize; 2]>,
}

/// Indices of the two largest entries of every row; the lower index wins ties.
pub fn top2_indices(scores: ArrayView2<f64>) -> Vec<[usize; 2]> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            let mut second = usize::from(best == 0);
            for (j, v) in row.iter().enumerate() {
                if j != best && *v > row[second] {
                    second = j;
                }
            }
            [best, second]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tape versions.

pub fn query_on(tape: &mut Tape, hidden: Var, w_q: Var, b_q: Var) -> Var {
    let lin = tape.matmul(hidden, w_q);
    tape.add_row(lin, b_q)
}

/// Attention weights and reconstructed meta-node vectors, plus the top-2
/// selection computed from the logits.
pub fn read_on(tape: &mut Tape, query: Var, phi: Var) -> (Var, Var, Vec<[usize; 2]>) {
    let logits = tape.matmul_nt(query, phi);
    let top2 = top2_indices(tape.value(logits).view());
    let attention = tape.softmax_rows(logits);
    let m = tape.matmul(attention, phi);
    (attention, m, top2)
}

pub fn hyper_embedding_on(tape: &mut Tape, m: Var, w_e: Var, b_e: Option<Var>) -> Var {
    let lin = tape.matmul(m, w_e);
    match b_e {
        Some(b) => tape.add_row(lin, b),
        None => lin,
    }
}

/// Summed consistency and contrastive terms over all rows of `query`.
pub fn memory_losses_on(tape: &mut Tape, query: Var, phi: Var, top2: &[[usize; 2]], margin: f64) -> (Var, Var) {
    let pos_idx: Vec<usize> = top2.iter().map(|t| t[0]).collect();
    let neg_idx: Vec<usize> = top2.iter().map(|t| t[1]).collect();
    let pos = tape.gather_rows(phi, pos_idx);
    let neg = tape.gather_rows(phi, neg_idx);
    let d_pos = tape.sub(query, pos);
    let d_neg = tape.sub(query, neg);
    let pos_sq = tape.row_sq_norm(d_pos);
    let neg_sq = tape.row_sq_norm(d_neg);
    let consistency = tape.sum(pos_sq);
    let gap = tape.sub(pos_sq, neg_sq);
    let shifted = tape.affine(gap, 1.0, margin);
    let hinge = tape.relu(shifted);
    let contrastive = tape.sum(hinge);
    (consistency, contrastive)
}

// ---------------------------------------------------------------------------
// Pure entry points.

pub fn query(hidden: ArrayView2<f64>, bank: &MetaNodeBank) -> Result<Array2<f64>> {
    if hidden.ncols() != bank.w_q.nrows() {
        return Err(invalid(format!(
            "hidden width {} does not match query projection rows {}",
            hidden.ncols(),
            bank.w_q.nrows()
        )));
    }
    if bank.b_q.dim() != (1, bank.w_q.ncols()) {
        return Err(invalid("query bias width mismatch"));
    }
    let mut tape = Tape::new();
    let h = tape.constant(hidden.to_owned());
    let w = tape.constant(bank.w_q.clone());
    let b = tape.constant(bank.b_q.clone());
    let q = query_on(&mut tape, h, w, b);
    Ok(tape.value(q).clone())
}

pub fn read(query: ArrayView2<f64>, phi: ArrayView2<f64>) -> Result<MemoryReadout> {
    if phi.nrows() < 2 {
        return Err(config(format!("memory read needs at least 2 prototypes, got {}", phi.nrows())));
    }
    if query.ncols() != phi.ncols() {
        return Err(invalid(format!(
            "query width {} does not match prototype width {}",
            query.ncols(),
            phi.ncols()
        )));
    }
    let mut tape = Tape::new();
    let q = tape.constant(query.to_owned());
    let p = tape.constant(phi.to_owned());
    let (a, m, top2) = read_on(&mut tape, q, p);
    Ok(MemoryReadout {
        m: tape.value(m).clone(),
        attention: tape.value(a).clone(),
        top2,
    })
}

/// Hyper-network embeddings `E' = M W_E (+ b_E)` and the graph they induce.
pub fn meta_graph(m: ArrayView2<f64>, bank: &MetaNodeBank) -> Result<(DenseGraph, NodeEmbedding)> {
    if m.ncols() != bank.w_e.nrows() {
        return Err(invalid(format!(
            "meta-node width {} does not match hyper-network rows {}",
            m.ncols(),
            bank.w_e.nrows()
        )));
    }
    let mut tape = Tape::new();
    let mv = tape.constant(m.to_owned());
    let w = tape.constant(bank.w_e.clone());
    let b = bank.b_e.as_ref().map(|b| tape.constant(b.clone()));
    let emb = hyper_embedding_on(&mut tape, mv, w, b);
    let graph = embedding_graph_on(&mut tape, emb, 1);
    Ok((
        DenseGraph::from_softmax(tape.value(graph).clone()),
        NodeEmbedding::new(tape.value(emb).clone())?,
    ))
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_losses(query: ArrayView2<f64>, phi: ArrayView2<f64>, top2: &[[usize; 2]]) -> Result<()> {
    if query.ncols() != phi.ncols() || query.nrows() != top2.len() {
        return Err(invalid("query, prototypes and top-2 selection disagree in shape"));
    }
    if top2.iter().flatten().any(|&j| j >= phi.nrows()) {
        return Err(invalid("top-2 index out of range"));
    }
    Ok(())
}

/// `Σ_i ‖Q_i − Φ[p_i]‖²`
pub fn consistency_loss(query: ArrayView2<f64>, phi: ArrayView2<f64>, top2: &[[usize; 2]]) -> Result<f64> {
    check_losses(query, phi, top2)?;
    Ok(query
        .axis_iter(Axis(0))
        .zip(top2)
        .map(|(q, t)| sq_dist(q, phi.row(t[0])))
        .sum())
}

/// `Σ_i max(‖Q_i − Φ[p_i]‖² − ‖Q_i − Φ[n_i]‖² + λ, 0)`
pub fn contrastive_loss(query: ArrayView2<f64>, phi: ArrayView2<f64>, top2: &[[usize; 2]], margin: f64) -> Result<f64> {
    check_losses(query, phi, top2)?;
    if margin < 0.0 || !margin.is_finite() {
        return Err(invalid(format!("margin must be finite and non-negative, got {margin}")));
    }
    Ok(query
        .axis_iter(Axis(0))
        .zip(top2)
        .map(|(q, t)| (sq_dist(q, phi.row(t[0])) - sq_dist(q, phi.row(t[1])) + margin).max(0.0))
        .sum())
}
