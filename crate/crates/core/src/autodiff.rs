//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward evaluation. Calling
//! [`Tape::backward`] walks the records in reverse and returns the gradient
//! of a scalar output with respect to every recorded node. Batched
//! activations are stored as `(B·N) × F` matrices with row `b * N + i`
//! holding node `i` of sample `b`; the graph operations below take the
//! batch size explicitly so they can address the per-sample blocks.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, std::ops::Range<usize>),
    Propagate { graph: Var, x: Var, batch: usize },
    BlockGram { emb: Var, batch: usize },
    GatherRows(Var, Vec<usize>),
    RowSqNorm(Var),
    Sum(Var),
    MaskedMae { pred: Var, sign: Array2<f64> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the differentiated output w.r.t. `v`, or `None` when `v`
    /// does not influence it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf treated as data.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds the `1 × F` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + self.value(bias);
        let rg = self.needs(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        let rg = self.needs(&[a]);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 - x);
        let rg = self.needs(&[a]);
        self.push(value, Op::OneMinus(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a).view());
        let rg = self.needs(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Feature-axis concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `cols` of `a`.
    pub fn slice_cols(&mut self, a: Var, cols: std::ops::Range<usize>) -> Var {
        let value = self.value(a).slice(s![.., cols.clone()]).to_owned();
        let rg = self.needs(&[a]);
        self.push(value, Op::SliceCols(a, cols), rg)
    }

    /// Multiplies every per-sample block of `x` by its graph.
    ///
    /// `graph` is either one `N × N` matrix shared by the whole batch or a
    /// stack of `batch` per-sample graphs with shape `(B·N) × N`.
    pub fn propagate(&mut self, graph: Var, x: Var, batch: usize) -> Var {
        let value = propagate(self.value(graph).view(), self.value(x).view(), batch);
        let rg = self.needs(&[graph, x]);
        self.push(value, Op::Propagate { graph, x, batch }, rg)
    }

    /// Per-sample Gram matrices `E_b E_bᵀ` stacked into `(B·N) × N`.
    pub fn block_gram(&mut self, emb: Var, batch: usize) -> Var {
        let value = block_gram(self.value(emb).view(), batch);
        let rg = self.needs(&[emb]);
        self.push(value, Op::BlockGram { emb, batch }, rg)
    }

    /// Selects rows of `src` by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let value = self.value(src).select(Axis(0), &rows);
        let rg = self.needs(&[src]);
        self.push(value, Op::GatherRows(src, rows), rg)
    }

    /// Squared Euclidean norm of every row, as an `R × 1` column.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |row| row.dot(&row))
            .insert_axis(Axis(1));
        let rg = self.needs(&[a]);
        self.push(value, Op::RowSqNorm(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean of `|pred - target|` over entries where `mask` is true; `0` when
    /// nothing is masked in.
    pub fn masked_mae(&mut self, pred: Var, target: ArrayView2<f64>, mask: ArrayView2<bool>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "masked_mae: shape mismatch");
        assert_eq!(p.dim(), mask.dim(), "masked_mae: mask shape mismatch");
        let count = mask.iter().filter(|m| **m).count();
        let mut total = 0.0;
        let mut sign = Array2::zeros(p.dim());
        if count > 0 {
            let inv = 1.0 / count as f64;
            Zip::from(&mut sign)
                .and(p)
                .and(&target)
                .and(&mask)
                .for_each(|s, &pv, &tv, &m| {
                    if m {
                        let d = pv - tv;
                        total += d.abs();
                        *s = if d > 0.0 {
                            inv
                        } else if d < 0.0 {
                            -inv
                        } else {
                            0.0
                        };
                    }
                });
            total *= inv;
        }
        let rg = self.needs(&[pred]);
        self.push(Array2::from_elem((1, 1), total), Op::MaskedMae { pred, sign }, rg)
    }

    /// Back-propagates from the `1 × 1` node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // Interior gradients are dropped once consumed; only leaves keep theirs.
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let da = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let db = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.rg(*a) {
                        let da = g.dot(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let db = g.t().dot(self.value(*a));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Affine(a, scale) => {
                    accumulate(&mut grads, *a, g * *scale);
                }
                Op::OneMinus(a) => {
                    accumulate(&mut grads, *a, -g);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    let dots = d.sum_axis(Axis(1));
                    Zip::from(d.rows_mut())
                        .and(y.rows())
                        .and(&dots)
                        .for_each(|mut drow, yrow, &dot| {
                            Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * dot);
                        });
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = self.value(*p).ncols();
                        if self.rg(*p) {
                            let piece = g.slice(s![.., start..start + width]).to_owned();
                            accumulate(&mut grads, *p, piece);
                        }
                        start += width;
                    }
                }
                Op::SliceCols(a, cols) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., cols.clone()]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::Propagate { graph, x, batch } => {
                    let gv = self.value(*graph);
                    let xv = self.value(*x);
                    let n = xv.nrows() / batch;
                    let shared = gv.nrows() == n;
                    if shared {
                        let gp = to_node_major(g.view(), *batch);
                        if self.rg(*x) {
                            let dx = from_node_major(gv.t().dot(&gp).view(), *batch);
                            accumulate(&mut grads, *x, dx);
                        }
                        if self.rg(*graph) {
                            let dg = gp.dot(&to_node_major(xv.view(), *batch).t());
                            accumulate(&mut grads, *graph, dg);
                        }
                    } else {
                        if self.rg(*x) {
                            let mut dx = Array2::zeros(xv.dim());
                            for b in 0..*batch {
                                let rows = b * n..(b + 1) * n;
                                let mut out = dx.slice_mut(s![rows.clone(), ..]);
                                let gb = gv.slice(s![rows.clone(), ..]);
                                general_mat_mul(1.0, &gb.t(), &g.slice(s![rows, ..]), 0.0, &mut out);
                            }
                            accumulate(&mut grads, *x, dx);
                        }
                        if self.rg(*graph) {
                            let mut dg = Array2::zeros(gv.dim());
                            for b in 0..*batch {
                                let rows = b * n..(b + 1) * n;
                                let gy = g.slice(s![rows.clone(), ..]);
                                let xb = xv.slice(s![rows.clone(), ..]);
                                let mut out = dg.slice_mut(s![rows, ..]);
                                general_mat_mul(1.0, &gy, &xb.t(), 0.0, &mut out);
                            }
                            accumulate(&mut grads, *graph, dg);
                        }
                    }
                }
                Op::BlockGram { emb, batch } => {
                    let ev = self.value(*emb);
                    let n = ev.nrows() / batch;
                    let mut de = Array2::zeros(ev.dim());
                    for b in 0..*batch {
                        let rows = b * n..(b + 1) * n;
                        let gb = g.slice(s![rows.clone(), ..]);
                        let sym = &gb + &gb.t();
                        let mut out = de.slice_mut(s![rows.clone(), ..]);
                        general_mat_mul(1.0, &sym, &ev.slice(s![rows, ..]), 0.0, &mut out);
                    }
                    accumulate(&mut grads, *emb, de);
                }
                Op::GatherRows(src, rows) => {
                    let mut d = Array2::zeros(self.value(*src).dim());
                    for (out_row, &src_row) in rows.iter().enumerate() {
                        let mut target = d.row_mut(src_row);
                        target += &g.row(out_row);
                    }
                    accumulate(&mut grads, *src, d);
                }
                Op::RowSqNorm(a) => {
                    let mut d = self.value(*a) * 2.0;
                    Zip::from(d.rows_mut())
                        .and(g.column(0))
                        .for_each(|mut row, &gv| row *= gv);
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let gv = g[[0, 0]];
                    accumulate(&mut grads, *a, Array2::from_elem(self.value(*a).dim(), gv));
                }
                Op::MaskedMae { pred, sign } => {
                    accumulate(&mut grads, *pred, sign * g[[0, 0]]);
                }
            }
        }
        Gradients { grads }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

pub fn propagate(graph: ArrayView2<f64>, x: ArrayView2<f64>, batch: usize) -> Array2<f64> {
    assert!(batch > 0 && x.nrows().is_multiple_of(batch), "propagate: rows not divisible by batch");
    let n = x.nrows() / batch;
    assert_eq!(graph.ncols(), n, "propagate: graph width differs from node count");
    let shared = graph.nrows() == n;
    assert!(shared || graph.nrows() == x.nrows(), "propagate: graph rows mismatch");
    if shared {
        return from_node_major(graph.dot(&to_node_major(x, batch)).view(), batch);
    }
    let mut out = Array2::zeros(x.dim());
    for b in 0..batch {
        let rows = b * n..(b + 1) * n;
        let mut dst = out.slice_mut(s![rows.clone(), ..]);
        general_mat_mul(1.0, &graph.slice(s![rows.clone(), ..]), &x.slice(s![rows, ..]), 0.0, &mut dst);
    }
    out
}

/// `(B·N) × F` sample-major rows to `N × (B·F)`, so a shared graph
/// multiplies the whole batch at once.
fn to_node_major(x: ArrayView2<f64>, batch: usize) -> Array2<f64> {
    let (rows, f) = x.dim();
    let n = rows / batch;
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = vec![0.0; rows * f];
    for b in 0..batch {
        for i in 0..n {
            let from = (b * n + i) * f;
            let to = (i * batch + b) * f;
            out[to..to + f].copy_from_slice(&src[from..from + f]);
        }
    }
    Array2::from_shape_vec((n, batch * f), out).expect("sized")
}

fn from_node_major(y: ArrayView2<f64>, batch: usize) -> Array2<f64> {
    let (n, bf) = y.dim();
    let f = bf / batch;
    let src = y.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * bf];
    for b in 0..batch {
        for i in 0..n {
            let from = (i * batch + b) * f;
            let to = (b * n + i) * f;
            out[to..to + f].copy_from_slice(&src[from..from + f]);
        }
    }
    Array2::from_shape_vec((batch * n, f), out).expect("sized")
}

pub fn block_gram(emb: ArrayView2<f64>, batch: usize) -> Array2<f64> {
    assert!(batch > 0 && emb.nrows().is_multiple_of(batch), "block_gram: rows not divisible by batch");
    let n = emb.nrows() / batch;
    let mut out = Array2::zeros((emb.nrows(), n));
    for b in 0..batch {
        let rows = b * n..(b + 1) * n;
        let eb = emb.slice(s![rows.clone(), ..]);
        let mut dst = out.slice_mut(s![rows, ..]);
        general_mat_mul(1.0, &eb, &eb.t(), 0.0, &mut dst);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax_rows(array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]].view());
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((y[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn chain_of_ops_matches_finite_differences() {
        let x0 = array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6], [-0.3, 0.2, 0.9], [0.7, -0.1, 0.2]];
        let g0 = array![[0.6, 0.4], [0.2, 0.8]];
        let eval = |x: &Array2<f64>, grad: bool| {
            let mut t = Tape::new();
            let xv = if grad { t.param(x.clone()) } else { t.constant(x.clone()) };
            let gv = t.constant(g0.clone());
            let p = t.propagate(gv, xv, 2);
            let s = t.sigmoid(p);
            let th = t.tanh(xv);
            let m = t.mul(s, th);
            let gram = t.block_gram(m, 2);
            let r = t.relu(gram);
            let sm = t.softmax_rows(r);
            let c = t.concat_cols(&[sm, xv]);
            let q = t.row_sq_norm(c);
            let total = t.sum(q);
            (t, xv, total)
        };
        let (t, xv, total) = eval(&x0, true);
        let grads = t.backward(total);
        let analytic = grads.get(xv).unwrap().clone();
        let numeric = numeric_grad(
            |x| {
                let (t, _, total) = eval(x, false);
                t.value(total)[[0, 0]]
            },
            &x0,
        );
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn per_sample_graph_gradient() {
        let x0 = array![[0.3, -0.2], [0.1, 0.4], [-0.3, 0.2], [0.7, -0.1]];
        let g0 = array![[0.6, 0.4], [0.2, 0.8], [0.1, 0.9], [0.5, 0.5]];
        let f = |g: &Array2<f64>, grad: bool| {
            let mut t = Tape::new();
            let xv = t.constant(x0.clone());
            let gv = if grad { t.param(g.clone()) } else { t.constant(g.clone()) };
            let p = t.propagate(gv, xv, 2);
            let w = t.constant(array![[1.0], [-2.0]]);
            let o = t.matmul(p, w);
            let sq = t.row_sq_norm(o);
            let total = t.sum(sq);
            (t, gv, total)
        };
        let (t, gv, total) = f(&g0, true);
        let analytic = t.backward(total).get(gv).unwrap().clone();
        let numeric = numeric_grad(
            |g| {
                let (t, _, total) = f(g, false);
                t.value(total)[[0, 0]]
            },
            &g0,
        );
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn gather_rows_scatters_back() {
        let mut t = Tape::new();
        let src = t.param(array![[1.0, 2.0], [3.0, 4.0]]);
        let picked = t.gather_rows(src, vec![1, 1, 0]);
        let total = t.sum(picked);
        let grads = t.backward(total);
        assert_eq!(grads.get(src).unwrap(), &array![[1.0, 1.0], [2.0, 2.0]]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0]]);
        let b = t.param(array![[2.0]]);
        let m = t.mul(a, b);
        let total = t.sum(m);
        let grads = t.backward(total);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap()[[0, 0]], 1.0);
    }
}
