//! Plain-table exports of learned embeddings, memory attention and decoder
//! graphs for a chosen sample.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2};

use crate::data::{make_windows, Normalizer, TimeMatrix};
use crate::error::{invalid, Error, Result};
use crate::model::{ForwardTrace, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportKind {
    Embeddings,
    Attention,
    Graph,
}

impl ExportKind {
    pub const ALL: [ExportKind; 3] = [ExportKind::Embeddings, ExportKind::Attention, ExportKind::Graph];

    pub fn name(self) -> &'static str {
        match self {
            ExportKind::Embeddings => "embeddings",
            ExportKind::Attention => "attention",
            ExportKind::Graph => "graph",
        }
    }
}

impl fmt::Display for ExportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExportKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown export {s:?}; expected embeddings, attention or graph")))
    }
}

/// Normalized `α × N × 1` input of window `at` over the whole series.
pub fn window_input(tm: &TimeMatrix, normalizer: &Normalizer, model: &Model, at: usize) -> Result<Array3<f64>> {
    let cfg = model.config();
    if tm.n_nodes() != cfg.n_nodes {
        return Err(crate::error::config(format!(
            "data has {} nodes, checkpoint expects {}",
            tm.n_nodes(),
            cfg.n_nodes
        )));
    }
    let windows = make_windows(tm, cfg.lookback, cfg.horizon)?;
    let w = windows
        .get(at)
        .ok_or_else(|| invalid(format!("sample {at} out of range; the series has {} windows", windows.len())))?;
    let x = normalizer.apply_array(w.input(tm.values()));
    Ok(x.insert_axis(ndarray::Axis(2)))
}

/// Named tables for `kind` from one forward trace.
pub fn tables(model: &Model, trace: &ForwardTrace, kind: ExportKind) -> Result<Vec<(String, Array2<f64>)>> {
    match kind {
        ExportKind::Graph => Ok(vec![("graph".into(), trace.decoder_graph.matrix().clone())]),
        ExportKind::Embeddings => {
            let mut out = vec![("embeddings_static".into(), trace.node_embedding.matrix().clone())];
            if let Some(e) = &trace.dynamic_embedding {
                out.push(("embeddings_dynamic".into(), e.matrix().clone()));
            }
            Ok(out)
        }
        ExportKind::Attention => match &trace.readout {
            Some(r) => Ok(vec![("attention".into(), r.attention.clone())]),
            None => Err(Error::Unsupported(format!(
                "attention export needs a memory variant, checkpoint is {}",
                model.config().variant
            ))),
        },
    }
}

/// Headerless comma-separated matrix, one row per line, shortest
/// round-trip formatting.
pub fn write_matrix(path: &Path, m: ArrayView2<f64>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-node mean absolute error over `S × β × N` arrays, zero truth masked
/// when `mask_zeros`. Nodes with no valid entry get NaN.
pub fn per_node_mae(pred: &Array3<f64>, truth: &Array3<f64>, mask_zeros: bool) -> Array2<f64> {
    let n = pred.dim().2;
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let p = pred.slice(s![.., .., i]);
        let y = truth.slice(s![.., .., i]);
        let (mut sum, mut count) = (0.0, 0usize);
        for (&p, &y) in p.iter().zip(y.iter()) {
            if mask_zeros && y == 0.0 {
                continue;
            }
            sum += (p - y).abs();
            count += 1;
        }
        out[[i, 0]] = i as f64;
        out[[i, 1]] = if count > 0 { sum / count as f64 } else { f64::NAN };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_adjacency;
    use crate::model::{Init, ModelConfig, Variant};
    use crate::synthetic::{generate, SyntheticSpec};

    fn setup(variant: Variant) -> (Model, TimeMatrix, Normalizer) {
        let tm = generate(&SyntheticSpec::new(4, 120, 1)).unwrap().matrix;
        let norm = Normalizer::fit(&tm, true).unwrap();
        let mut cfg = ModelConfig::new(4, variant);
        cfg.hidden = 4;
        cfg.memory_dim = 4;
        (Model::new(cfg, Init::Random(2)).unwrap(), tm, norm)
    }

    #[test]
    fn graph_roundtrips_through_adjacency_loader() {
        let (model, tm, norm) = setup(Variant::Mega);
        let trace = model.forward(window_input(&tm, &norm, &model, 5).unwrap().view()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let (_, g) = tables(&model, &trace, ExportKind::Graph).unwrap().remove(0);
        write_matrix(&path, g.view()).unwrap();
        let back = load_adjacency(&path).unwrap();
        assert_eq!(back, g);
        crate::graph_ops::DenseGraph::new(back).unwrap();
    }

    #[test]
    fn attention_needs_memory() {
        let (model, tm, norm) = setup(Variant::Momentary);
        let trace = model.forward(window_input(&tm, &norm, &model, 0).unwrap().view()).unwrap();
        assert!(matches!(tables(&model, &trace, ExportKind::Attention), Err(Error::Unsupported(_))));
        let emb = tables(&model, &trace, ExportKind::Embeddings).unwrap();
        assert_eq!(emb.len(), 2);
    }

    #[test]
    fn out_of_range_sample() {
        let (model, tm, norm) = setup(Variant::Adaptive);
        assert!(window_input(&tm, &norm, &model, 96).is_ok());
        assert!(window_input(&tm, &norm, &model, 97).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("graph".parse::<ExportKind>().unwrap(), ExportKind::Graph);
        assert!("pictures".parse::<ExportKind>().is_err());
    }
}
