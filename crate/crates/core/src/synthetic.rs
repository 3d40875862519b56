//! Regime-switching synthetic traffic: two node clusters with distinct daily
//! patterns, plus multiplicative incidents.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::TimeMatrix;
use crate::error::{config, Result};

/// 2012-03-01 00:00:00 UTC.
pub const DEFAULT_START: i64 = 1_330_560_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub node: usize,
    pub start: usize,
    pub duration: usize,
    /// Fractional speed drop in `(0, 1]`.
    pub depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub mean: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_nodes: usize,
    pub steps: usize,
    pub interval_minutes: u32,
    /// Steps per synthetic day.
    pub day_steps: usize,
    /// Cluster id (1 or 2) per node.
    pub clusters: Vec<u8>,
    pub incidents: Vec<Incident>,
    pub noise_std: f64,
    pub seed: u64,
    pub cluster1: ClusterProfile,
    pub cluster2: ClusterProfile,
    pub start_timestamp: i64,
}

/// Ground truth written next to the generated matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub clusters: Vec<u8>,
    pub incidents: Vec<Incident>,
}

impl SyntheticSpec {
    /// Nodes split evenly between the clusters (seeded assignment), no
    /// incidents, noise std 1.
    pub fn new(n_nodes: usize, steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_edc1_u64);
        let mut clusters: Vec<u8> = (0..n_nodes).map(|i| if i < n_nodes.div_ceil(2) { 1 } else { 2 }).collect();
        clusters.shuffle(&mut rng);
        Self {
            n_nodes,
            steps,
            interval_minutes: 5,
            day_steps: 288,
            clusters,
            incidents: Vec::new(),
            noise_std: 1.0,
            seed,
            cluster1: ClusterProfile { mean: 60.0, amplitude: 20.0 },
            cluster2: ClusterProfile { mean: 40.0, amplitude: 10.0 },
            start_timestamp: DEFAULT_START,
        }
    }

    /// `count` seeded incidents of `duration` steps, spread over evenly
    /// spaced segments of the series so they never overlap.
    pub fn with_random_incidents(mut self, count: usize, duration: usize, depth: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1dc1_de47u64);
        self.incidents = (0..count)
            .map(|k| {
                let seg = self.steps / count.max(1);
                let lo = k * seg + seg / 4;
                let hi = (k * seg + 3 * seg / 4).saturating_sub(duration).max(lo + 1);
                Incident {
                    node: rng.gen_range(0..self.n_nodes),
                    start: rng.gen_range(lo..hi),
                    duration,
                    depth,
                }
            })
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.steps == 0 || self.day_steps == 0 || self.interval_minutes == 0 {
            return Err(config("n_nodes, steps, day_steps and interval_minutes must be positive"));
        }
        if self.clusters.len() != self.n_nodes || self.clusters.iter().any(|c| *c != 1 && *c != 2) {
            return Err(config("clusters must assign 1 or 2 to every node"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        for inc in &self.incidents {
            if inc.node >= self.n_nodes || inc.start >= self.steps || inc.duration == 0 {
                return Err(config(format!("incident {inc:?} lies outside the series")));
            }
            if !(inc.depth > 0.0 && inc.depth <= 1.0) {
                return Err(config(format!("incident depth {} outside (0, 1]", inc.depth)));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Labels {
        Labels {
            clusters: self.clusters.clone(),
            incidents: self.incidents.clone(),
        }
    }

    /// Noise-free, incident-free value of `node` at step `t`.
    pub fn base_value(&self, node: usize, t: usize) -> f64 {
        let day = self.day_steps as f64;
        let tau = (t % self.day_steps) as f64;
        // per-node phase offsets keep nodes within a cluster distinct
        let shift = (node % 5) as f64 * day / 288.0 * 3.0;
        match self.clusters[node] {
            1 => {
                let p = self.cluster1;
                let width = day / 24.0;
                let dip = |center: f64| {
                    let d = (tau - center - shift + day / 2.0).rem_euclid(day) - day / 2.0;
                    (-0.5 * (d / width).powi(2)).exp()
                };
                p.mean - p.amplitude * (dip(day * 8.0 / 24.0) + dip(day * 17.5 / 24.0))
            }
            _ => {
                let p = self.cluster2;
                let daily = (2.0 * PI * (tau - shift) / day).sin();
                let fast = (2.0 * PI * 12.0 * (tau - shift) / day).sin();
                p.mean + p.amplitude * (daily + 2f64.sqrt() * fast)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub matrix: TimeMatrix,
    pub labels: Labels,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let mut factor = Array2::<f64>::ones((spec.steps, spec.n_nodes));
    for inc in &spec.incidents {
        let end = (inc.start + inc.duration).min(spec.steps);
        for t in inc.start..end {
            factor[[t, inc.node]] *= 1.0 - inc.depth;
        }
    }
    let mut values = Array2::zeros((spec.steps, spec.n_nodes));
    for t in 0..spec.steps {
        for i in 0..spec.n_nodes {
            let eps = if spec.noise_std > 0.0 { rng.sample(noise) } else { 0.0 };
            values[[t, i]] = (spec.base_value(i, t) * factor[[t, i]] + eps).max(0.0);
        }
    }
    let step_secs = i64::from(spec.interval_minutes) * 60;
    let timestamps = (0..spec.steps as i64).map(|t| spec.start_timestamp + t * step_secs).collect();
    Ok(SyntheticDataset {
        matrix: TimeMatrix::new(values, spec.interval_minutes, Some(timestamps))?,
        labels: spec.labels(),
    })
}

/// Path of the labels sidecar for a dataset file.
pub fn labels_path(data: &Path) -> std::path::PathBuf {
    let mut name = data.file_name().unwrap_or_default().to_os_string();
    name.push(".labels.json");
    data.with_file_name(name)
}

pub fn save_labels(labels: &Labels, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(labels)?)?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<Labels> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
