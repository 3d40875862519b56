//! Graph convolutional recurrent unit and the encoder/decoder loops.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::graph_ops::{power_stack_on, ChebKernel, DenseGraph};

/// Gate kernels and biases of one GCRU layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GcruCell {
    pub theta_u: ChebKernel,
    pub theta_r: ChebKernel,
    pub theta_c: ChebKernel,
    pub b_u: Array2<f64>,
    pub b_r: Array2<f64>,
    pub b_c: Array2<f64>,
}

impl GcruCell {
    pub fn zeros(order: usize, in_channels: usize, hidden: usize) -> Self {
        let kernel = ChebKernel::zeros(order, in_channels + hidden, hidden);
        Self {
            theta_u: kernel.clone(),
            theta_r: kernel.clone(),
            theta_c: kernel,
            b_u: Array2::zeros((1, hidden)),
            b_r: Array2::zeros((1, hidden)),
            b_c: Array2::zeros((1, hidden)),
        }
    }

    pub fn new(
        theta_u: ChebKernel,
        theta_r: ChebKernel,
        theta_c: ChebKernel,
        b_u: Array2<f64>,
        b_r: Array2<f64>,
        b_c: Array2<f64>,
    ) -> Result<Self> {
        let cell = Self {
            theta_u,
            theta_r,
            theta_c,
            b_u,
            b_r,
            b_c,
        };
        cell.validate()?;
        Ok(cell)
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        for k in [&self.theta_r, &self.theta_c] {
            if k.order() != self.theta_u.order() || k.c_in() != self.theta_u.c_in() || k.c_out() != h {
                return Err(invalid("GCRU gate kernels must share order and shape"));
            }
        }
        if self.theta_u.c_in() <= h {
            return Err(invalid("GCRU kernel input width must exceed the hidden size"));
        }
        for b in [&self.b_u, &self.b_r, &self.b_c] {
            if b.dim() != (1, h) {
                return Err(invalid(format!("GCRU bias must be 1×{h}, got {:?}", b.dim())));
            }
        }
        Ok(())
    }

    pub fn hidden_size(&self) -> usize {
        self.theta_u.c_out()
    }

    pub fn in_channels(&self) -> usize {
        self.theta_u.c_in() - self.hidden_size()
    }

    pub fn order(&self) -> usize {
        self.theta_u.order()
    }

    /// Records the cell's tensors on `tape`; `trainable` decides whether
    /// gradients flow into them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CellVars {
        let mut leaf = |a: &Array2<f64>| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        CellVars {
            theta_u: leaf(self.theta_u.stacked()),
            theta_r: leaf(self.theta_r.stacked()),
            theta_c: leaf(self.theta_c.stacked()),
            b_u: leaf(&self.b_u),
            b_r: leaf(&self.b_r),
            b_c: leaf(&self.b_c),
            order: self.order(),
            hidden: self.hidden_size(),
        }
    }
}

/// A [`GcruCell`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub theta_u: Var,
    pub theta_r: Var,
    pub theta_c: Var,
    pub b_u: Var,
    pub b_r: Var,
    pub b_c: Var,
    pub order: usize,
    pub hidden: usize,
}

/// Affine per-node output head `h → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Readout {
    pub fn zeros(hidden: usize, channels: usize) -> Self {
        Self {
            weight: Array2::zeros((hidden, channels)),
            bias: Array2::zeros((1, channels)),
        }
    }
}

/// `N × h` recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Array2<f64>);

impl HiddenState {
    pub fn zeros(n_nodes: usize, hidden: usize) -> Self {
        Self(Array2::zeros((n_nodes, hidden)))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }
}

/// One GCRU update on the tape.
///
/// `x` is `(B·N) × C`, `h_prev` is `(B·N) × h`.
pub fn cell_step_on(tape: &mut Tape, cell: &CellVars, x: Var, h_prev: Var, graph: Var, batch: usize) -> Var {
    let xh = tape.concat_cols(&[x, h_prev]);
    let stack = power_stack_on(tape, graph, xh, cell.order, batch);

    // update and reset gates share one product
    let theta_ur = tape.concat_cols(&[cell.theta_u, cell.theta_r]);
    let b_ur = tape.concat_cols(&[cell.b_u, cell.b_r]);
    let ur_lin = tape.matmul(stack, theta_ur);
    let ur_pre = tape.add_row(ur_lin, b_ur);
    let ur = tape.sigmoid(ur_pre);
    let u = tape.slice_cols(ur, 0..cell.hidden);
    let r = tape.slice_cols(ur, cell.hidden..2 * cell.hidden);

    let rh = tape.mul(r, h_prev);
    let xrh = tape.concat_cols(&[x, rh]);
    let cand_stack = power_stack_on(tape, graph, xrh, cell.order, batch);
    let c_lin = tape.matmul(cand_stack, cell.theta_c);
    let c_pre = tape.add_row(c_lin, cell.b_c);
    let c = tape.tanh(c_pre);

    let keep = tape.mul(u, h_prev);
    let one_minus_u = tape.one_minus(u);
    let fresh = tape.mul(one_minus_u, c);
    tape.add(keep, fresh)
}

/// Unrolls the stacked cells over `inputs` from zero state and returns the
/// final hidden state of every layer.
pub fn encode_on(tape: &mut Tape, cells: &[CellVars], inputs: &[Var], graph: Var, batch: usize) -> Vec<Var> {
    assert!(!inputs.is_empty(), "encode_on needs at least one step");
    let rows = tape.value(inputs[0]).nrows();
    let mut states: Vec<Var> = cells
        .iter()
        .map(|c| tape.constant(Array2::zeros((rows, c.hidden))))
        .collect();
    for &x in inputs {
        let mut layer_in = x;
        for (cell, state) in cells.iter().zip(states.iter_mut()) {
            *state = cell_step_on(tape, cell, layer_in, *state, graph, batch);
            layer_in = *state;
        }
    }
    states
}

/// Readout parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ReadoutVars {
    pub weight: Var,
    pub bias: Var,
}

/// Autoregressive decoding loop.
///
/// Step 0 consumes an all-zero frame; every later step consumes the previous
/// step's readout. `graph_for_step` supplies the support used at each step.
pub fn decode_on(
    tape: &mut Tape,
    cells: &[CellVars],
    init: Vec<Var>,
    readout: ReadoutVars,
    steps: usize,
    batch: usize,
    mut graph_for_step: impl FnMut(&mut Tape, usize) -> Var,
) -> Vec<Var> {
    assert_eq!(cells.len(), init.len(), "one initial state per decoder layer");
    let rows = tape.value(init[0]).nrows();
    let channels = tape.value(readout.weight).ncols();
    let mut states = init;
    let mut frame = tape.constant(Array2::zeros((rows, channels)));
    let mut outputs = Vec::with_capacity(steps);
    for step in 0..steps {
        let graph = graph_for_step(tape, step);
        let mut layer_in = frame;
        for (cell, state) in cells.iter().zip(states.iter_mut()) {
            *state = cell_step_on(tape, cell, layer_in, *state, graph, batch);
            layer_in = *state;
        }
        let lin = tape.matmul(layer_in, readout.weight);
        frame = tape.add_row(lin, readout.bias);
        outputs.push(frame);
    }
    outputs
}

// ---------------------------------------------------------------------------
// Pure entry points.

fn check_step(x: ArrayView2<f64>, h: &HiddenState, graph: &DenseGraph, cell: &GcruCell) -> Result<()> {
    let n = graph.n_nodes();
    if x.nrows() != n || h.0.nrows() != n {
        return Err(invalid(format!(
            "signal ({}) and state ({}) rows must equal node count {n}",
            x.nrows(),
            h.0.nrows()
        )));
    }
    if x.ncols() != cell.in_channels() {
        return Err(invalid(format!(
            "cell expects {} input channels, got {}",
            cell.in_channels(),
            x.ncols()
        )));
    }
    if h.0.ncols() != cell.hidden_size() {
        return Err(invalid(format!(
            "cell hidden size {} does not match state width {}",
            cell.hidden_size(),
            h.0.ncols()
        )));
    }
    Ok(())
}

pub fn gcru_step(x: ArrayView2<f64>, h_prev: &HiddenState, graph: &DenseGraph, cell: &GcruCell) -> Result<HiddenState> {
    check_step(x, h_prev, graph, cell)?;
    let mut tape = Tape::new();
    let vars = cell.bind(&mut tape, false);
    let g = tape.constant(graph.matrix().clone());
    let xv = tape.constant(x.to_owned());
    let hv = tape.constant(h_prev.0.clone());
    let out = cell_step_on(&mut tape, &vars, xv, hv, g, 1);
    Ok(HiddenState(tape.value(out).clone()))
}

/// Runs the encoder over an `α × N × C` sequence and returns the last
/// layer's final hidden state.
pub fn encode(seq: ArrayView3<f64>, graph: &DenseGraph, cells: &[GcruCell]) -> Result<HiddenState> {
    let states = encode_layers(seq, graph, cells)?;
    Ok(states.into_iter().last().expect("at least one layer"))
}

/// Like [`encode`] but returns every layer's final state.
pub fn encode_layers(seq: ArrayView3<f64>, graph: &DenseGraph, cells: &[GcruCell]) -> Result<Vec<HiddenState>> {
    if seq.len_of(Axis(0)) == 0 {
        return Err(invalid("cannot encode an empty sequence"));
    }
    if cells.is_empty() {
        return Err(invalid("encoder needs at least one cell"));
    }
    let n = graph.n_nodes();
    let mut layer_in_channels = seq.len_of(Axis(2));
    if seq.len_of(Axis(1)) != n {
        return Err(invalid(format!("sequence has {} nodes, graph has {n}", seq.len_of(Axis(1)))));
    }
    for cell in cells {
        if cell.in_channels() != layer_in_channels {
            return Err(invalid("stacked cell input widths do not chain"));
        }
        layer_in_channels = cell.hidden_size();
    }
    let mut tape = Tape::new();
    let vars: Vec<CellVars> = cells.iter().map(|c| c.bind(&mut tape, false)).collect();
    let g = tape.constant(graph.matrix().clone());
    let inputs: Vec<Var> = seq
        .outer_iter()
        .map(|frame| tape.constant(frame.to_owned()))
        .collect();
    let states = encode_on(&mut tape, &vars, &inputs, g, 1);
    Ok(states.into_iter().map(|v| HiddenState(tape.value(v).clone())).collect())
}

/// Decodes `steps` frames from per-layer initial states, returning a
/// `steps × N × C` array in the same (normalized) space as the readout.
pub fn decode(
    init: &[HiddenState],
    mut graph_provider: impl FnMut(usize) -> DenseGraph,
    steps: usize,
    cells: &[GcruCell],
    readout: &Readout,
) -> Result<Array3<f64>> {
    if steps == 0 {
        return Err(invalid("decoder needs at least one step"));
    }
    if cells.is_empty() || cells.len() != init.len() {
        return Err(invalid("decoder needs one initial state per cell"));
    }
    let n = init[0].0.nrows();
    let channels = readout.weight.ncols();
    if cells[0].in_channels() != channels {
        return Err(invalid("first decoder cell must consume the readout channels"));
    }
    for (cell, state) in cells.iter().zip(init) {
        if state.0.dim() != (n, cell.hidden_size()) {
            return Err(invalid("initial state shape does not match its cell"));
        }
    }
    let top = cells.last().expect("non-empty").hidden_size();
    if readout.weight.nrows() != top || readout.bias.dim() != (1, channels) {
        return Err(invalid("readout shape does not match the top cell"));
    }

    let mut tape = Tape::new();
    let vars: Vec<CellVars> = cells.iter().map(|c| c.bind(&mut tape, false)).collect();
    let states: Vec<Var> = init.iter().map(|h| tape.constant(h.0.clone())).collect();
    let rv = ReadoutVars {
        weight: tape.constant(readout.weight.clone()),
        bias: tape.constant(readout.bias.clone()),
    };
    let mut bad_graph = None;
    let outputs = decode_on(&mut tape, &vars, states, rv, steps, 1, |tape, step| {
        let g = graph_provider(step);
        if g.n_nodes() != n {
            bad_graph = Some(g.n_nodes());
        }
        // keep shapes valid so the loop can finish; the error is reported below
        let m = if g.n_nodes() == n { g.into_inner() } else { DenseGraph::uniform(n).into_inner() };
        tape.constant(m)
    });
    if let Some(got) = bad_graph {
        return Err(invalid(format!("graph provider returned {got} nodes, expected {n}")));
    }
    let mut out = Array3::zeros((steps, n, channels));
    for (step, v) in outputs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), step).assign(tape.value(v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ops::normalize_scores;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn random_cell(rng: &mut ChaCha8Rng, order: usize, c: usize, h: usize) -> GcruCell {
        let k = |rng: &mut ChaCha8Rng| ChebKernel::from_stacked(order, random(rng, (order + 1) * (c + h), h)).unwrap();
        GcruCell::new(k(rng), k(rng), k(rng), random(rng, 1, h), random(rng, 1, h), random(rng, 1, h)).unwrap()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar loops over the update/reset/candidate equations for K = 0.
    fn scalar_step_oracle(x: &Array2<f64>, h: &Array2<f64>, cell: &GcruCell) -> Array2<f64> {
        let (n, hs) = h.dim();
        let c = x.ncols();
        let wu = cell.theta_u.slice(0);
        let wr = cell.theta_r.slice(0);
        let wc = cell.theta_c.slice(0);
        let mut out = Array2::zeros((n, hs));
        for i in 0..n {
            let mut u = vec![0.0; hs];
            let mut r = vec![0.0; hs];
            for j in 0..hs {
                let mut su = cell.b_u[[0, j]];
                let mut sr = cell.b_r[[0, j]];
                for k in 0..c {
                    su += x[[i, k]] * wu[[k, j]];
                    sr += x[[i, k]] * wr[[k, j]];
                }
                for k in 0..hs {
                    su += h[[i, k]] * wu[[c + k, j]];
                    sr += h[[i, k]] * wr[[c + k, j]];
                }
                u[j] = sigmoid(su);
                r[j] = sigmoid(sr);
            }
            for j in 0..hs {
                let mut sc = cell.b_c[[0, j]];
                for k in 0..c {
                    sc += x[[i, k]] * wc[[k, j]];
                }
                for k in 0..hs {
                    sc += r[k] * h[[i, k]] * wc[[c + k, j]];
                }
                out[[i, j]] = u[j] * h[[i, j]] + (1.0 - u[j]) * sc.tanh();
            }
        }
        out
    }

    #[test]
    fn zero_cell_halves_state() {
        let cell = GcruCell::zeros(2, 1, 3);
        let h = HiddenState(array![[0.4, -0.2, 1.0], [2.0, 0.0, -1.0]]);
        let out = gcru_step(array![[5.0], [-3.0]].view(), &h, &DenseGraph::uniform(2), &cell).unwrap();
        assert_eq!(out.0, &h.0 * 0.5);

        let out = gcru_step(array![[5.0], [-3.0]].view(), &HiddenState::zeros(2, 3), &DenseGraph::uniform(2), &cell).unwrap();
        assert!(out.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cell = random_cell(&mut rng, 0, 1, 2);
        let x = random(&mut rng, 2, 1);
        let h = random(&mut rng, 2, 2);
        let p = normalize_scores(random(&mut rng, 2, 2).view()).unwrap();
        let out = gcru_step(x.view(), &HiddenState(h.clone()), &p, &cell).unwrap();
        let expected = scalar_step_oracle(&x, &h, &cell);
        for (a, b) in out.0.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let cell = GcruCell::zeros(1, 1, 2);
        let g = DenseGraph::uniform(3);
        assert!(gcru_step(Array2::zeros((2, 1)).view(), &HiddenState::zeros(3, 2), &g, &cell).is_err());
        assert!(gcru_step(Array2::zeros((3, 2)).view(), &HiddenState::zeros(3, 2), &g, &cell).is_err());
        assert!(gcru_step(Array2::zeros((3, 1)).view(), &HiddenState::zeros(3, 3), &g, &cell).is_err());
    }

    #[test]
    fn encode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cell = random_cell(&mut rng, 1, 1, 3);
        let p = normalize_scores(random(&mut rng, 4, 4).view()).unwrap();
        let seq = Array3::from_shape_fn((3, 4, 1), |_| rng.gen_range(-2.0..2.0));

        let one = encode(seq.slice(ndarray::s![..1, .., ..]), &p, std::slice::from_ref(&cell)).unwrap();
        let manual = gcru_step(seq.index_axis(Axis(0), 0), &HiddenState::zeros(4, 3), &p, &cell).unwrap();
        assert_eq!(one, manual);

        let mut h = HiddenState::zeros(4, 3);
        for t in 0..3 {
            h = gcru_step(seq.index_axis(Axis(0), t), &h, &p, &cell).unwrap();
        }
        assert_eq!(encode(seq.view(), &p, &[cell]).unwrap(), h);

        let zero = encode(seq.view(), &p, &[GcruCell::zeros(1, 1, 3)]).unwrap();
        assert!(zero.0.iter().all(|v| *v == 0.0));

        assert!(encode(Array3::zeros((0, 4, 1)).view(), &p, &[GcruCell::zeros(1, 1, 3)]).is_err());
    }

    #[test]
    fn decode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = normalize_scores(random(&mut rng, 3, 3).view()).unwrap();
        let zero = decode(
            &[HiddenState(random(&mut rng, 3, 2))],
            |_| p.clone(),
            4,
            &[GcruCell::zeros(1, 1, 2)],
            &Readout::zeros(2, 1),
        )
        .unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        let cell = random_cell(&mut rng, 1, 1, 2);
        let readout = Readout {
            weight: random(&mut rng, 2, 1),
            bias: random(&mut rng, 1, 1),
        };
        let h0 = HiddenState(random(&mut rng, 3, 2));
        let out = decode(std::slice::from_ref(&h0), |_| p.clone(), 2, std::slice::from_ref(&cell), &readout).unwrap();

        // hand-unrolled: zero start frame, then feed step-1 output back in
        let h1 = gcru_step(Array2::zeros((3, 1)).view(), &h0, &p, &cell).unwrap();
        let y1 = h1.0.dot(&readout.weight) + &readout.bias;
        let h2 = gcru_step(y1.view(), &h1, &p, &cell).unwrap();
        let y2 = h2.0.dot(&readout.weight) + &readout.bias;
        assert_eq!(out.index_axis(Axis(0), 0), y1);
        assert_eq!(out.index_axis(Axis(0), 1), y2);

        let single = decode(&[h0], |_| p.clone(), 1, &[cell], &readout).unwrap();
        assert_eq!(single.index_axis(Axis(0), 0), y1);
    }

    #[test]
    fn step_is_bounded_by_previous_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let cell = random_cell(&mut rng, 2, 1, 4);
            let h = random(&mut rng, 5, 4) * 3.0;
            let x = random(&mut rng, 5, 1) * 10.0;
            let p = normalize_scores(random(&mut rng, 5, 5).view()).unwrap();
            let out = gcru_step(x.view(), &HiddenState(h.clone()), &p, &cell).unwrap();
            let bound = h.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            assert!(out.0.iter().all(|v| v.abs() <= bound + 1e-12));
        }
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cell = random_cell(&mut rng, 2, 1, 4);
        let x = random(&mut rng, 3, 1);
        let h = random(&mut rng, 3, 4);
        let p = normalize_scores(random(&mut rng, 3, 3).view()).unwrap();
        let probe = random(&mut rng, 3, 4);

        let run = |cell: &GcruCell| -> (Tape, CellVars, Var) {
            let mut t = Tape::new();
            let vars = cell.bind(&mut t, true);
            let g = t.constant(p.matrix().clone());
            let xv = t.constant(x.clone());
            let hv = t.constant(h.clone());
            let out = cell_step_on(&mut t, &vars, xv, hv, g, 1);
            let pr = t.constant(probe.clone());
            let m = t.mul(out, pr);
            let total = t.sum(m);
            (t, vars, total)
        };
        let (tape, vars, total) = run(&cell);
        let grads = tape.backward(total);

        let step = 1e-5;
        let tensors: [(&str, Var); 6] = [
            ("theta_u", vars.theta_u),
            ("theta_r", vars.theta_r),
            ("theta_c", vars.theta_c),
            ("b_u", vars.b_u),
            ("b_r", vars.b_r),
            ("b_c", vars.b_c),
        ];
        for (name, var) in tensors {
            let analytic = grads.get(var).unwrap();
            for idx in 0..analytic.len() {
                let eval = |delta: f64| {
                    let mut c = cell.clone();
                    let target = match name {
                        "theta_u" => c.theta_u.stacked_mut(),
                        "theta_r" => c.theta_r.stacked_mut(),
                        "theta_c" => c.theta_c.stacked_mut(),
                        "b_u" => &mut c.b_u,
                        "b_r" => &mut c.b_r,
                        _ => &mut c.b_c,
                    };
                    target.as_slice_mut().unwrap()[idx] += delta;
                    let (t, _, total) = run(&c);
                    t.value(total)[[0, 0]]
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                let an = analytic.as_slice().unwrap()[idx];
                let scale = fd.abs().max(an.abs());
                assert!(
                    (fd - an).abs() <= 1e-4 * scale || (fd - an).abs() < 1e-9,
                    "{name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
