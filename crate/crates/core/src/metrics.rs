//! Masked MAE / RMSE / MAPE at named horizons.

use std::fmt::Write as _;

use ndarray::{ArrayView3, Axis};
use serde::Serialize;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent. Undefined when no entry has non-zero truth.
    pub mape: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HorizonMetrics {
    /// 1-based lead index; 0 for the all-horizons aggregate.
    pub horizon: usize,
    pub valid_count: usize,
    /// `None` when `valid_count` is 0.
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HorizonReport {
    pub horizons: Vec<HorizonMetrics>,
    pub aggregate: HorizonMetrics,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    ape_count: usize,
}

impl Acc {
    fn push(&mut self, p: f64, y: f64) {
        let e = p - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if y != 0.0 {
            self.ape += e.abs() / y.abs();
            self.ape_count += 1;
        }
    }

    fn merge(&mut self, o: &Acc) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.ape += o.ape;
        self.count += o.count;
        self.ape_count += o.ape_count;
    }

    fn finish(&self, horizon: usize) -> HorizonMetrics {
        let metrics = (self.count > 0).then(|| {
            let n = self.count as f64;
            Metrics {
                mae: self.abs / n,
                rmse: (self.sq / n).sqrt(),
                mape: (self.ape_count > 0).then(|| self.ape / self.ape_count as f64 * 100.0),
            }
        });
        HorizonMetrics {
            horizon,
            valid_count: self.count,
            metrics,
        }
    }
}

/// Metrics over `B × β × N` arrays in original units. With `mask_zeros`,
/// entries whose truth is exactly 0 are excluded; MAPE always skips them.
pub fn masked_metrics(
    pred: ArrayView3<f64>,
    truth: ArrayView3<f64>,
    horizons: &[usize],
    mask_zeros: bool,
) -> Result<HorizonReport> {
    if pred.dim() != truth.dim() {
        return Err(invalid(format!("prediction shape {:?} != truth shape {:?}", pred.dim(), truth.dim())));
    }
    let beta = pred.len_of(Axis(1));
    if let Some(h) = horizons.iter().find(|h| **h == 0 || **h > beta) {
        return Err(invalid(format!("horizon {h} outside 1..={beta}")));
    }
    let mut per_step = vec![Acc::default(); beta];
    for (step, acc) in per_step.iter_mut().enumerate() {
        let p = pred.index_axis(Axis(1), step);
        let y = truth.index_axis(Axis(1), step);
        for (&p, &y) in p.iter().zip(y.iter()) {
            if mask_zeros && y == 0.0 {
                continue;
            }
            acc.push(p, y);
        }
    }
    let mut all = Acc::default();
    for acc in &per_step {
        all.merge(acc);
    }
    Ok(HorizonReport {
        horizons: horizons.iter().map(|&h| per_step[h - 1].finish(h)).collect(),
        aggregate: all.finish(0),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

impl HorizonReport {
    fn rows(&self) -> impl Iterator<Item = (String, &HorizonMetrics)> {
        self.horizons
            .iter()
            .map(|h| (format!("horizon{}", h.horizon), h))
            .chain(std::iter::once(("all".to_string(), &self.aggregate)))
    }

    /// `horizon3.mae = 2.5` lines, aggregate under `all.`.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (key, h) in self.rows() {
            let m = h.metrics;
            let _ = writeln!(out, "{key}.mae = {}", fmt_opt(m.map(|m| m.mae)));
            let _ = writeln!(out, "{key}.rmse = {}", fmt_opt(m.map(|m| m.rmse)));
            let _ = writeln!(out, "{key}.mape = {}", fmt_opt(m.and_then(|m| m.mape)));
            let _ = writeln!(out, "{key}.valid_count = {}", h.valid_count);
        }
        out
    }

    /// Comma-separated table with a header row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("horizon,mae,rmse,mape,valid_count\n");
        for (key, h) in self.rows() {
            let m = h.metrics;
            let _ = writeln!(
                out,
                "{key},{},{},{},{}",
                fmt_opt(m.map(|m| m.mae)),
                fmt_opt(m.map(|m| m.rmse)),
                fmt_opt(m.and_then(|m| m.mape)),
                h.valid_count
            );
        }
        out
    }

    pub fn horizon(&self, h: usize) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|m| m.horizon == h)
    }
}
