//! Encoder, meta-graph learner and decoder assembled into one forecaster,
//! with the ablation variants behind [`Variant`].
//!
//! | variant     | encoder graph | decoder graph              | decoder state |
//! |-------------|---------------|----------------------------|---------------|
//! | `adaptive`  | adaptive      | same adaptive graph        | `H`           |
//! | `memory`    | adaptive      | same adaptive graph        | `[H, M]`      |
//! | `momentary` | adaptive      | `softmax(relu(HW (HW)ᵀ))`  | `H`           |
//! | `mega`      | adaptive      | meta-graph from `M W_E`    | `[H, M]`      |
//!
//! `H` is the encoder's final hidden state and `M` the memory readout for
//! the query projected from it. Decoder graphs are built once per sequence
//! and held for all decoder steps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config, invalid, Result};
use crate::gcru::{decode_on, encode_on, CellVars, GcruCell, Readout, ReadoutVars};
use crate::graph_ops::{embedding_graph_on, ChebKernel, DenseGraph, NodeEmbedding};
use crate::meta_learner::{hyper_embedding_on, query_on, read_on, xavier, MemoryReadout, MetaNodeBank};

pub mod checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Adaptive,
    Memory,
    Momentary,
    Mega,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Adaptive, Variant::Memory, Variant::Momentary, Variant::Mega];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Adaptive => "adaptive",
            Variant::Memory => "memory",
            Variant::Momentary => "momentary",
            Variant::Mega => "mega",
        }
    }

    /// Whether the variant owns a meta-node bank.
    pub fn has_memory(self) -> bool {
        matches!(self, Variant::Memory | Variant::Mega)
    }

    /// Whether the decoder graph changes with the input.
    pub fn has_dynamic_graph(self) -> bool {
        matches!(self, Variant::Momentary | Variant::Mega)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                config(format!("unknown variant {s:?}; valid variants: {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub in_channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub cheb_order: usize,
    pub embed_dim: usize,
    pub prototypes: usize,
    pub memory_dim: usize,
    pub horizon: usize,
    pub lookback: usize,
    pub variant: Variant,
    /// Bias on the hyper-network layer that maps `M` to node embeddings.
    pub hyper_bias: bool,
}

impl ModelConfig {
    pub fn new(n_nodes: usize, variant: Variant) -> Self {
        Self {
            n_nodes,
            in_channels: 1,
            hidden: 32,
            layers: 1,
            cheb_order: 2,
            embed_dim: 8,
            prototypes: 10,
            memory_dim: 32,
            horizon: 12,
            lookback: 12,
            variant,
            hyper_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_nodes", self.n_nodes),
            ("in_channels", self.in_channels),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("prototypes", self.prototypes),
            ("memory_dim", self.memory_dim),
            ("horizon", self.horizon),
            ("lookback", self.lookback),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config(format!("{name} must be positive")));
        }
        if self.variant.has_memory() && self.prototypes < 2 {
            return Err(config(format!(
                "the {} variant needs at least 2 prototypes, got {}",
                self.variant, self.prototypes
            )));
        }
        Ok(())
    }

    pub fn decoder_hidden(&self) -> usize {
        if self.variant.has_memory() {
            self.hidden + self.memory_dim
        } else {
            self.hidden
        }
    }

    /// Every trainable tensor as `(name, rows, cols)`, in checkpoint order.
    pub fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = vec![("graph.node_embedding".to_string(), self.n_nodes, self.embed_dim)];
        let k1 = self.cheb_order + 1;
        let mut cells = |side: &str, hidden: usize| {
            for l in 0..self.layers {
                let c_in = if l == 0 { self.in_channels } else { hidden };
                for gate in ["theta_u", "theta_r", "theta_c"] {
                    out.push((format!("{side}.cell{l}.{gate}"), k1 * (c_in + hidden), hidden));
                }
                for bias in ["b_u", "b_r", "b_c"] {
                    out.push((format!("{side}.cell{l}.{bias}"), 1, hidden));
                }
            }
        };
        cells("encoder", self.hidden);
        cells("decoder", self.decoder_hidden());
        if self.variant.has_memory() {
            out.push(("memory.phi".into(), self.prototypes, self.memory_dim));
            out.push(("memory.w_q".into(), self.hidden, self.memory_dim));
            out.push(("memory.b_q".into(), 1, self.memory_dim));
        }
        if self.variant == Variant::Mega {
            out.push(("memory.w_e".into(), self.memory_dim, self.embed_dim));
            if self.hyper_bias {
                out.push(("memory.b_e".into(), 1, self.embed_dim));
            }
        }
        if self.variant == Variant::Momentary {
            out.push(("momentary.w".into(), self.hidden, self.embed_dim));
        }
        out.push(("readout.weight".into(), self.decoder_hidden(), self.in_channels));
        out.push(("readout.bias".into(), 1, self.in_channels));
        out
    }
}

/// Per-tensor parameter tally.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParameterCount {
    pub total: usize,
    pub tensors: Vec<(String, usize, usize, usize)>,
}

pub fn count_parameters(cfg: &ModelConfig) -> ParameterCount {
    let tensors: Vec<_> = cfg
        .tensor_shapes()
        .into_iter()
        .map(|(name, r, c)| (name, r, c, r * c))
        .collect();
    ParameterCount {
        total: tensors.iter().map(|t| t.3).sum(),
        tensors,
    }
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    fn req(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from a validated store"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Random(u64),
    Zero,
}

/// Everything one forward pass produces for a single sample.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `β × N × C`, normalized space.
    pub predictions: Array3<f64>,
    pub encoder_graph: DenseGraph,
    pub decoder_graph: DenseGraph,
    /// Static embedding `E` behind the encoder graph.
    pub node_embedding: NodeEmbedding,
    /// Input-conditioned embedding behind the decoder graph (`E'_t` for
    /// mega, `H W` for momentary).
    pub dynamic_embedding: Option<NodeEmbedding>,
    pub queries: Option<Array2<f64>>,
    pub readout: Option<MemoryReadout>,
}

/// Tape handles of one batched forward pass.
#[derive(Debug)]
pub struct ForwardVars {
    pub params: BTreeMap<String, Var>,
    /// One `(B·N) × C` matrix per horizon step.
    pub predictions: Vec<Var>,
    pub encoder_graph: Var,
    pub decoder_graph: Var,
    pub dynamic_embedding: Option<Var>,
    pub queries: Option<Var>,
    pub attention: Option<Var>,
    pub meta_nodes: Option<Var>,
    pub top2: Option<Vec<[usize; 2]>>,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        match init {
            Init::Zero => {
                for (name, r, c) in config.tensor_shapes() {
                    params.insert(name, Array2::zeros((r, c)));
                }
            }
            Init::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for (name, r, c) in config.tensor_shapes() {
                    let value = random_tensor(&mut rng, &config, &name, r, c);
                    params.insert(name, value);
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.tensor_shapes();
        if expected.len() != params.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, r, c) in expected {
            match params.get(&name) {
                Some(t) if t.dim() == (r, c) => {}
                Some(t) => {
                    return Err(invalid(format!("tensor {name} has shape {:?}, expected ({r}, {c})", t.dim())));
                }
                None => return Err(invalid(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    pub fn node_embedding(&self) -> NodeEmbedding {
        NodeEmbedding::new(self.params.req("graph.node_embedding").clone())
            .expect("finite embedding")
    }

    /// Cell `layer` of `side` (`"encoder"` or `"decoder"`).
    pub fn cell(&self, side: &str, layer: usize) -> Result<GcruCell> {
        let get = |t: &str| {
            self.params
                .get(&format!("{side}.cell{layer}.{t}"))
                .cloned()
                .ok_or_else(|| invalid(format!("no {side} cell {layer}")))
        };
        let order = self.config.cheb_order;
        GcruCell::new(
            ChebKernel::from_stacked(order, get("theta_u")?)?,
            ChebKernel::from_stacked(order, get("theta_r")?)?,
            ChebKernel::from_stacked(order, get("theta_c")?)?,
            get("b_u")?,
            get("b_r")?,
            get("b_c")?,
        )
    }

    pub fn bank(&self) -> Option<MetaNodeBank> {
        if !self.config.variant.has_memory() {
            return None;
        }
        let p = &self.params;
        let (w_e, b_e) = match self.config.variant {
            Variant::Mega => (
                p.req("memory.w_e").clone(),
                p.get("memory.b_e").cloned(),
            ),
            _ => (Array2::zeros((self.config.memory_dim, self.config.embed_dim)), None),
        };
        Some(MetaNodeBank {
            phi: p.req("memory.phi").clone(),
            w_q: p.req("memory.w_q").clone(),
            b_q: p.req("memory.b_q").clone(),
            w_e,
            b_e,
        })
    }

    pub fn readout(&self) -> Readout {
        Readout {
            weight: self.params.req("readout.weight").clone(),
            bias: self.params.req("readout.bias").clone(),
        }
    }

    fn check_inputs(&self, inputs: &ArrayView4<f64>) -> Result<()> {
        let (b, a, n, c) = inputs.dim();
        let cfg = &self.config;
        if b == 0 {
            return Err(invalid("empty batch"));
        }
        if (a, n, c) != (cfg.lookback, cfg.n_nodes, cfg.in_channels) {
            return Err(invalid(format!(
                "inputs are {a}×{n}×{c}, model expects {}×{}×{}",
                cfg.lookback, cfg.n_nodes, cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Records the batched forward pass on `tape`. Parameters are leaves
    /// that receive gradients when `trainable` is set.
    pub fn forward_on(&self, tape: &mut Tape, inputs: ArrayView4<f64>, trainable: bool) -> Result<ForwardVars> {
        self.check_inputs(&inputs)?;
        let cfg = &self.config;
        let batch = inputs.len_of(Axis(0));
        let n = cfg.n_nodes;

        let mut params = BTreeMap::new();
        for (name, value) in self.params.iter() {
            let v = if trainable {
                tape.param(value.clone())
            } else {
                tape.constant(value.clone())
            };
            params.insert(name.clone(), v);
        }
        let p = |name: &str| params[name];
        let cells = |side: &str, hidden: usize| -> Vec<CellVars> {
            (0..cfg.layers)
                .map(|l| {
                    let key = |t: &str| params[&format!("{side}.cell{l}.{t}")];
                    CellVars {
                        theta_u: key("theta_u"),
                        theta_r: key("theta_r"),
                        theta_c: key("theta_c"),
                        b_u: key("b_u"),
                        b_r: key("b_r"),
                        b_c: key("b_c"),
                        order: cfg.cheb_order,
                        hidden,
                    }
                })
                .collect()
        };
        let enc_cells = cells("encoder", cfg.hidden);
        let dec_cells = cells("decoder", cfg.decoder_hidden());

        let frames: Vec<Var> = (0..cfg.lookback)
            .map(|t| {
                let frame = inputs.slice(s![.., t, .., ..]);
                let flat = frame
                    .to_owned()
                    .into_shape((batch * n, cfg.in_channels))
                    .expect("contiguous frame");
                tape.constant(flat)
            })
            .collect();

        let encoder_graph = embedding_graph_on(tape, p("graph.node_embedding"), 1);
        let enc_states = encode_on(tape, &enc_cells, &frames, encoder_graph, batch);
        let top = *enc_states.last().expect("at least one layer");

        let mut queries = None;
        let mut attention = None;
        let mut meta_nodes = None;
        let mut top2 = None;
        let mut dynamic_embedding = None;

        let init: Vec<Var> = if cfg.variant.has_memory() {
            let q = query_on(tape, top, p("memory.w_q"), p("memory.b_q"));
            let (a, m, t2) = read_on(tape, q, p("memory.phi"));
            queries = Some(q);
            attention = Some(a);
            meta_nodes = Some(m);
            top2 = Some(t2);
            enc_states.iter().map(|h| tape.concat_cols(&[*h, m])).collect()
        } else {
            enc_states.clone()
        };

        let decoder_graph = match cfg.variant {
            Variant::Adaptive | Variant::Memory => encoder_graph,
            Variant::Momentary => {
                let emb = tape.matmul(top, p("momentary.w"));
                dynamic_embedding = Some(emb);
                embedding_graph_on(tape, emb, batch)
            }
            Variant::Mega => {
                let bias = params.get("memory.b_e").copied();
                let m = meta_nodes.expect("mega has memory");
                let emb = hyper_embedding_on(tape, m, p("memory.w_e"), bias);
                dynamic_embedding = Some(emb);
                embedding_graph_on(tape, emb, batch)
            }
        };

        let readout = ReadoutVars {
            weight: p("readout.weight"),
            bias: p("readout.bias"),
        };
        let predictions = decode_on(tape, &dec_cells, init, readout, cfg.horizon, batch, |_, _| decoder_graph);

        Ok(ForwardVars {
            params,
            predictions,
            encoder_graph,
            decoder_graph,
            dynamic_embedding,
            queries,
            attention,
            meta_nodes,
            top2,
            batch,
        })
    }

    /// Normalized-space predictions `B × β × N × C`.
    pub fn predict(&self, inputs: ArrayView4<f64>) -> Result<Array4<f64>> {
        let mut tape = Tape::new();
        let vars = self.forward_on(&mut tape, inputs, false)?;
        Ok(self.collect_predictions(&tape, &vars))
    }

    pub(crate) fn collect_predictions(&self, tape: &Tape, vars: &ForwardVars) -> Array4<f64> {
        let cfg = &self.config;
        let mut out = Array4::zeros((vars.batch, cfg.horizon, cfg.n_nodes, cfg.in_channels));
        for (step, v) in vars.predictions.iter().enumerate() {
            let frame = tape
                .value(*v)
                .view()
                .into_shape((vars.batch, cfg.n_nodes, cfg.in_channels))
                .expect("prediction layout");
            out.slice_mut(s![.., step, .., ..]).assign(&frame);
        }
        out
    }

    /// Full trace for one `α × N × C` input window.
    pub fn forward(&self, inputs: ArrayView3<f64>) -> Result<ForwardTrace> {
        let batched = inputs.insert_axis(Axis(0));
        let mut tape = Tape::new();
        let vars = self.forward_on(&mut tape, batched, false)?;
        let predictions = self
            .collect_predictions(&tape, &vars)
            .index_axis_move(Axis(0), 0);
        let readout = match (vars.attention, vars.meta_nodes, vars.top2.clone()) {
            (Some(a), Some(m), Some(top2)) => Some(MemoryReadout {
                m: tape.value(m).clone(),
                attention: tape.value(a).clone(),
                top2,
            }),
            _ => None,
        };
        Ok(ForwardTrace {
            predictions,
            encoder_graph: DenseGraph::from_softmax(tape.value(vars.encoder_graph).clone()),
            decoder_graph: DenseGraph::from_softmax(tape.value(vars.decoder_graph).clone()),
            node_embedding: self.node_embedding(),
            dynamic_embedding: vars
                .dynamic_embedding
                .map(|e| NodeEmbedding::new(tape.value(e).clone()))
                .transpose()?,
            queries: vars.queries.map(|q| tape.value(q).clone()),
            readout,
        })
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, cfg: &ModelConfig, name: &str, rows: usize, cols: usize) -> Array2<f64> {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "node_embedding" => Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal)),
        "theta_u" | "theta_r" | "theta_c" => {
            // Xavier bound per W_k slice
            let c_in = rows / (cfg.cheb_order + 1);
            let bound = (6.0 / (c_in + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        }
        "phi" => {
            let bound = 1.0 / (cfg.memory_dim as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        }
        "w_q" | "w_e" | "w" | "weight" => xavier(rng, rows, cols),
        _ => Array2::zeros((rows, cols)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcru::{decode, encode_layers, HiddenState};
    use crate::graph_ops::{adaptive_graph, momentary_graph};
    use crate::meta_learner::{meta_graph, query, read};

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            n_nodes: 3,
            in_channels: 1,
            hidden: 2,
            layers: 1,
            cheb_order: 1,
            embed_dim: 2,
            prototypes: 2,
            memory_dim: 2,
            horizon: 2,
            lookback: 2,
            variant,
            hyper_bias: true,
        }
    }

    fn window(seed: u64, cfg: &ModelConfig) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((cfg.lookback, cfg.n_nodes, cfg.in_channels), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("mega".parse::<Variant>().unwrap(), Variant::Mega);
        let err = "bogus".parse::<Variant>().unwrap_err().to_string();
        for v in Variant::ALL {
            assert!(err.contains(v.name()));
        }
    }

    #[test]
    fn zero_mega_predicts_zero_on_uniform_graph() {
        let cfg = tiny(Variant::Mega);
        let model = Model::new(cfg.clone(), Init::Zero).unwrap();
        let trace = model.forward(window(1, &cfg).view()).unwrap();
        assert!(trace.predictions.iter().all(|v| *v == 0.0));
        assert_eq!(trace.decoder_graph, DenseGraph::uniform(3));
    }

    #[test]
    fn momentary_with_identity_projection_matches_adaptive() {
        let mut cfg = tiny(Variant::Momentary);
        cfg.embed_dim = cfg.hidden;
        let mut model = Model::new(cfg.clone(), Init::Random(3)).unwrap();
        *model.params_mut().get_mut("momentary.w").unwrap() = Array2::eye(cfg.hidden);
        let x = window(4, &cfg);
        let trace = model.forward(x.view()).unwrap();
        // reuse the encoder's final state as the free embedding
        let h = encode_layers(x.view(), &trace.encoder_graph, &[model.cell("encoder", 0).unwrap()])
            .unwrap()
            .pop()
            .unwrap();
        let adaptive = adaptive_graph(&NodeEmbedding::new(h.0.clone()).unwrap());
        assert_eq!(trace.decoder_graph, adaptive);
        assert_eq!(trace.decoder_graph, momentary_graph(h.0.view(), Array2::eye(2).view()).unwrap());
    }

    #[test]
    fn forward_matches_module_composition() {
        for variant in Variant::ALL {
            let cfg = tiny(variant);
            let model = Model::new(cfg.clone(), Init::Random(7)).unwrap();
            let x = window(8, &cfg);
            let trace = model.forward(x.view()).unwrap();

            let enc_graph = adaptive_graph(&model.node_embedding());
            assert_eq!(trace.encoder_graph, enc_graph);
            let h = encode_layers(x.view(), &enc_graph, &[model.cell("encoder", 0).unwrap()]).unwrap();
            let top = h[0].0.clone();
            let (init, dec_graph) = match variant {
                Variant::Adaptive => (h[0].clone(), enc_graph.clone()),
                Variant::Momentary => {
                    let w = model.params().get("momentary.w").unwrap();
                    (h[0].clone(), momentary_graph(top.view(), w.view()).unwrap())
                }
                Variant::Memory | Variant::Mega => {
                    let bank = model.bank().unwrap();
                    let q = query(top.view(), &bank).unwrap();
                    let r = read(q.view(), bank.phi.view()).unwrap();
                    let joined = ndarray::concatenate(Axis(1), &[top.view(), r.m.view()]).unwrap();
                    let g = if variant == Variant::Mega {
                        meta_graph(r.m.view(), &bank).unwrap().0
                    } else {
                        enc_graph.clone()
                    };
                    assert_eq!(trace.readout.as_ref().unwrap().attention, r.attention);
                    (HiddenState(joined), g)
                }
            };
            assert_eq!(trace.decoder_graph, dec_graph, "{variant}");
            let dec_cell = model.cell("decoder", 0).unwrap();
            let preds = decode(&[init], |_| dec_graph.clone(), cfg.horizon, &[dec_cell], &model.readout()).unwrap();
            assert_eq!(trace.predictions, preds, "{variant}");
        }
    }

    #[test]
    fn all_variants_share_output_shape() {
        for variant in Variant::ALL {
            let cfg = tiny(variant);
            let model = Model::new(cfg.clone(), Init::Random(1)).unwrap();
            let batch = Array4::from_elem((4, 2, 3, 1), 0.3);
            assert_eq!(model.predict(batch.view()).unwrap().dim(), (4, 2, 3, 1));
        }
    }

    #[test]
    fn batched_predictions_equal_single_sample_runs() {
        let cfg = tiny(Variant::Mega);
        let model = Model::new(cfg.clone(), Init::Random(2)).unwrap();
        let a = window(10, &cfg);
        let b = window(11, &cfg);
        let stacked = ndarray::stack(Axis(0), &[a.view(), b.view()]).unwrap();
        let batched = model.predict(stacked.view()).unwrap();
        let single_b = model.forward(b.view()).unwrap().predictions;
        for (x, y) in batched.index_axis(Axis(0), 1).iter().zip(single_b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_dynamics_by_variant() {
        for variant in Variant::ALL {
            let cfg = tiny(variant);
            let model = Model::new(cfg.clone(), Init::Random(5)).unwrap();
            let g1 = model.forward(window(20, &cfg).view()).unwrap().decoder_graph;
            let g2 = model.forward((window(21, &cfg) * 3.0).view()).unwrap().decoder_graph;
            if variant.has_dynamic_graph() {
                assert_ne!(g1, g2, "{variant}");
            } else {
                assert_eq!(g1, g2, "{variant}");
            }
        }
    }

    #[test]
    fn rejects_misshapen_inputs() {
        let cfg = tiny(Variant::Adaptive);
        let model = Model::new(cfg, Init::Zero).unwrap();
        assert!(model.forward(Array3::zeros((3, 3, 1)).view()).is_err());
        assert!(model.forward(Array3::zeros((2, 4, 1)).view()).is_err());
    }

    #[test]
    fn parameter_count_by_hand() {
        let cfg = ModelConfig {
            n_nodes: 1,
            in_channels: 1,
            hidden: 1,
            layers: 1,
            cheb_order: 0,
            embed_dim: 1,
            prototypes: 2,
            memory_dim: 1,
            horizon: 1,
            lookback: 1,
            variant: Variant::Mega,
            hyper_bias: true,
        };
        // E 1; encoder 3 kernels (2×1) + 3 biases = 9; decoder hidden 2:
        // 3 kernels (3×2) + 3 biases (2) = 24; Φ 2, W_Q 1, b_Q 1, W_E 1,
        // b_E 1; readout 2 + 1
        assert_eq!(count_parameters(&cfg).total, 1 + 9 + 24 + 2 + 1 + 1 + 1 + 1 + 3);
        let mut wider = cfg.clone();
        wider.hidden = 2;
        assert!(count_parameters(&wider).total > count_parameters(&cfg).total);
    }

    #[test]
    fn memory_variants_need_two_prototypes() {
        let mut cfg = tiny(Variant::Memory);
        cfg.prototypes = 1;
        assert!(Model::new(cfg.clone(), Init::Zero).is_err());
        cfg.variant = Variant::Adaptive;
        assert!(Model::new(cfg, Init::Zero).is_ok());
    }
}
