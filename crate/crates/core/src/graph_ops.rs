//! Learned support matrices and the polynomial graph convolution.
//!
//! Every learned graph here goes through the same normalization: negative
//! scores are clipped to zero and each row is passed through a softmax, so
//! the result is a non-negative random-walk (row-stochastic) matrix.

use ndarray::{s, Array2, ArrayView2};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};

/// Row-sum tolerance accepted by [`DenseGraph::new`].
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Non-negative, row-stochastic `N × N` support matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGraph {
    matrix: Array2<f64>,
}

impl DenseGraph {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.is_empty() {
            return Err(invalid(format!("graph must be square and non-empty, got {:?}", matrix.dim())));
        }
        if let Some(v) = matrix.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(invalid(format!("graph entries must be finite and non-negative, found {v}")));
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let total = row.sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(format!("graph row {i} sums to {total}")));
            }
        }
        Ok(Self { matrix })
    }

    /// `1/N` everywhere.
    pub fn uniform(n_nodes: usize) -> Self {
        Self {
            matrix: Array2::from_elem((n_nodes, n_nodes), 1.0 / n_nodes as f64),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.matrix
    }

    // Trusted constructor for matrices produced by the softmax path.
    pub(crate) fn from_softmax(matrix: Array2<f64>) -> Self {
        debug_assert_eq!(matrix.nrows(), matrix.ncols());
        Self { matrix }
    }
}

/// Free node embedding `E ∈ R^{N×e}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbedding(Array2<f64>);

impl NodeEmbedding {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(invalid("embedding must have at least one node and one column"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("embedding contains non-finite entries"));
        }
        Ok(Self(matrix))
    }

    pub fn n_nodes(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Polynomial graph-convolution kernel with one `C_in × C_out` slice per
/// power `k = 0..=K`.
///
/// The slices are stored stacked along the rows, so `weights` has shape
/// `((K+1)·C_in) × C_out` and slice `k` occupies rows `k·C_in..(k+1)·C_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebKernel {
    order: usize,
    c_in: usize,
    weights: Array2<f64>,
}

impl ChebKernel {
    pub fn zeros(order: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            order,
            c_in,
            weights: Array2::zeros(((order + 1) * c_in, c_out)),
        }
    }

    pub fn from_slices(slices: &[Array2<f64>]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| invalid("kernel needs at least one slice"))?;
        let (c_in, c_out) = first.dim();
        if slices.iter().any(|w| w.dim() != (c_in, c_out)) {
            return Err(invalid("kernel slices must share one shape"));
        }
        let views: Vec<ArrayView2<f64>> = slices.iter().map(|w| w.view()).collect();
        let weights = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
        Ok(Self {
            order: slices.len() - 1,
            c_in,
            weights,
        })
    }

    pub fn from_stacked(order: usize, weights: Array2<f64>) -> Result<Self> {
        if !weights.nrows().is_multiple_of(order + 1) {
            return Err(invalid(format!(
                "stacked kernel has {} rows, not a multiple of K+1 = {}",
                weights.nrows(),
                order + 1
            )));
        }
        Ok(Self {
            order,
            c_in: weights.nrows() / (order + 1),
            weights,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.weights.ncols()
    }

    /// The `W_k` slice.
    pub fn slice(&self, k: usize) -> ArrayView2<'_, f64> {
        self.weights.slice(s![k * self.c_in..(k + 1) * self.c_in, ..])
    }

    pub fn stacked(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn stacked_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }
}

// ---------------------------------------------------------------------------
// Differentiable building blocks shared with the model.

/// `softmax(relu(scores))` row-wise on the tape.
pub fn normalize_scores_on(tape: &mut Tape, scores: Var) -> Var {
    let clipped = tape.relu(scores);
    tape.softmax_rows(clipped)
}

/// Per-sample graphs from stacked `(B·N) × e` embeddings.
pub fn embedding_graph_on(tape: &mut Tape, emb: Var, batch: usize) -> Var {
    let scores = tape.block_gram(emb, batch);
    normalize_scores_on(tape, scores)
}

/// `[P⁰X, P¹X, …, PᴷX]` concatenated along the feature axis.
pub fn power_stack_on(tape: &mut Tape, graph: Var, x: Var, order: usize, batch: usize) -> Var {
    if order == 0 {
        return x;
    }
    let mut powers = Vec::with_capacity(order + 1);
    powers.push(x);
    for _ in 0..order {
        let prev = *powers.last().expect("non-empty");
        powers.push(tape.propagate(graph, prev, batch));
    }
    tape.concat_cols(&powers)
}

/// `Σ_k Pᵏ X W_k` on the tape; `graph` may be shared or per-sample (see
/// [`Tape::propagate`]).
pub fn graph_conv_on(tape: &mut Tape, graph: Var, x: Var, kernel: Var, order: usize, batch: usize) -> Var {
    let stacked = power_stack_on(tape, graph, x, order, batch);
    tape.matmul(stacked, kernel)
}

// ---------------------------------------------------------------------------
// Pure entry points.

pub fn normalize_scores(scores: ArrayView2<f64>) -> Result<DenseGraph> {
    if scores.nrows() != scores.ncols() || scores.is_empty() {
        return Err(invalid(format!("score matrix must be square and non-empty, got {:?}", scores.dim())));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(invalid("score matrix contains non-finite entries"));
    }
    let mut tape = Tape::new();
    let s = tape.constant(scores.to_owned());
    let p = normalize_scores_on(&mut tape, s);
    Ok(DenseGraph::from_softmax(tape.value(p).clone()))
}

/// Time-invariant graph `softmax(relu(E Eᵀ))`.
pub fn adaptive_graph(embedding: &NodeEmbedding) -> DenseGraph {
    let mut tape = Tape::new();
    let e = tape.constant(embedding.matrix().clone());
    let p = embedding_graph_on(&mut tape, e, 1);
    DenseGraph::from_softmax(tape.value(p).clone())
}

/// Input-conditioned graph `softmax(relu((H W)(H W)ᵀ))`.
pub fn momentary_graph(hidden: ArrayView2<f64>, projection: ArrayView2<f64>) -> Result<DenseGraph> {
    if hidden.ncols() != projection.nrows() {
        return Err(invalid(format!(
            "hidden width {} does not match projection rows {}",
            hidden.ncols(),
            projection.nrows()
        )));
    }
    if hidden.nrows() == 0 || projection.ncols() == 0 {
        return Err(invalid("momentary graph needs at least one node and one embedding column"));
    }
    let embedding = NodeEmbedding::new(hidden.dot(&projection))?;
    Ok(adaptive_graph(&embedding))
}

/// `Σ_{k=0..K} Pᵏ X W_k`, no activation.
pub fn cheb_graph_conv(x: ArrayView2<f64>, graph: &DenseGraph, kernel: &ChebKernel) -> Result<Array2<f64>> {
    if x.nrows() != graph.n_nodes() {
        return Err(invalid(format!(
            "signal has {} rows but graph has {} nodes",
            x.nrows(),
            graph.n_nodes()
        )));
    }
    if x.ncols() != kernel.c_in() {
        return Err(invalid(format!(
            "signal has {} channels but kernel expects {}",
            x.ncols(),
            kernel.c_in()
        )));
    }
    let mut tape = Tape::new();
    let g = tape.constant(graph.matrix().clone());
    let xv = tape.constant(x.to_owned());
    let w = tape.constant(kernel.stacked().clone());
    let out = graph_conv_on(&mut tape, g, xv, w, kernel.order(), 1);
    Ok(tape.value(out).clone())
}
