//! Composite loss, Adam, early-stopped training and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Normalizer, SplitData};
use crate::error::{config, Error, Result};
use crate::meta_learner::{consistency_loss, contrastive_loss, memory_losses_on};
use crate::metrics::{masked_metrics, HorizonReport};
use crate::model::{ForwardVars, Model, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub kappa1: f64,
    pub kappa2: f64,
    /// Contrastive margin λ.
    pub margin: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Zeroes wall-clock fields so logs compare bit-for-bit.
    pub deterministic: bool,
    /// Exclude zero-truth entries from the prediction loss and metrics.
    pub mask_zeros: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 64,
            max_epochs: 200,
            patience: 10,
            kappa1: 0.01,
            kappa2: 0.01,
            margin: 1.0,
            seed: 0,
            grad_clip: Some(5.0),
            deterministic: false,
            mask_zeros: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it freezes the parameters, which is useful for
        // sanity runs.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(config("batch, max_epochs and patience must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        for (name, v) in [("kappa1", self.kappa1), ("kappa2", self.kappa2), ("margin", self.margin)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mae: f64,
    /// Consistency term, summed over nodes and averaged over the batch.
    pub l1: f64,
    /// Contrastive term, same reduction as `l1`.
    pub l2: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub kappa1: f64,
    pub kappa2: f64,
    pub margin: f64,
    pub mask_zeros: bool,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        Self {
            kappa1: c.kappa1,
            kappa2: c.kappa2,
            margin: c.margin,
            mask_zeros: c.mask_zeros,
        }
    }
}

/// Memory-read inputs to the loss: queries `(B·N) × d`, prototypes and the
/// per-row top-2 selection.
pub struct MemoryTerms<'a> {
    pub queries: ArrayView2<'a, f64>,
    pub phi: ArrayView2<'a, f64>,
    pub top2: &'a [[usize; 2]],
}

/// Loss from plain arrays. `pred` and `truth` are `B × β × N` in original
/// units.
pub fn task_loss(
    pred: ArrayView3<f64>,
    truth: ArrayView3<f64>,
    memory: Option<MemoryTerms<'_>>,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let report = masked_metrics(pred, truth, &[], weights.mask_zeros)?;
    let mae = report.aggregate.metrics.map_or(0.0, |m| m.mae);
    let batch = pred.len_of(Axis(0)) as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    if let Some(m) = memory {
        if weights.kappa1 != 0.0 {
            l1 = consistency_loss(m.queries, m.phi, m.top2)? / batch;
        }
        if weights.kappa2 != 0.0 {
            l2 = contrastive_loss(m.queries, m.phi, m.top2, weights.margin)? / batch;
        }
    }
    Ok(LossBreakdown {
        total: mae + weights.kappa1 * l1 + weights.kappa2 * l2,
        mae,
        l1,
        l2,
    })
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mae: Var,
    pub l1: Option<Var>,
    pub l2: Option<Var>,
}

/// Records the loss for a batched forward pass. `targets` is `B × β × N × C`
/// in original units.
pub fn task_loss_on(
    tape: &mut Tape,
    model: &Model,
    fwd: &ForwardVars,
    targets: ArrayView4<f64>,
    normalizer: &Normalizer,
    weights: LossWeights,
) -> LossVars {
    let cfg = model.config();
    let (b, n, c) = (fwd.batch, cfg.n_nodes, cfg.in_channels);
    let pred = tape.concat_cols(&fwd.predictions);
    let pred = tape.affine(pred, normalizer.std, normalizer.mean);
    let mut target = Array2::zeros((b * n, cfg.horizon * c));
    for ((bi, step, i, ch), v) in targets.indexed_iter() {
        target[[bi * n + i, step * c + ch]] = *v;
    }
    let mask = target.mapv(|y| !weights.mask_zeros || y != 0.0);
    let mae = tape.masked_mae(pred, target.view(), mask.view());
    let mut total = mae;
    let (mut l1, mut l2) = (None, None);
    let want = weights.kappa1 != 0.0 || weights.kappa2 != 0.0;
    if let (true, Some(q), Some(top2)) = (want, fwd.queries, fwd.top2.as_ref()) {
        let phi = fwd.params["memory.phi"];
        let (cons, contr) = memory_losses_on(tape, q, phi, top2, weights.margin);
        let inv_b = 1.0 / b as f64;
        let cons = tape.affine(cons, inv_b, 0.0);
        let contr = tape.affine(contr, inv_b, 0.0);
        let w1 = tape.affine(cons, weights.kappa1, 0.0);
        let w2 = tape.affine(contr, weights.kappa2, 0.0);
        total = tape.add(total, w1);
        total = tape.add(total, w2);
        l1 = Some(cons);
        l2 = Some(contr);
    }
    LossVars { total, mae, l1, l2 }
}

fn scalar(tape: &Tape, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| tape.value(v)[[0, 0]])
}

/// Loss values and parameter gradients for one batch.
pub fn loss_and_grads(
    model: &Model,
    inputs: ArrayView4<f64>,
    targets: ArrayView4<f64>,
    normalizer: &Normalizer,
    weights: LossWeights,
) -> Result<(LossBreakdown, BTreeMap<String, Array2<f64>>)> {
    let mut tape = Tape::new();
    let fwd = model.forward_on(&mut tape, inputs, true)?;
    let loss = task_loss_on(&mut tape, model, &fwd, targets, normalizer, weights);
    let breakdown = LossBreakdown {
        total: scalar(&tape, Some(loss.total)),
        mae: scalar(&tape, Some(loss.mae)),
        l1: scalar(&tape, loss.l1),
        l2: scalar(&tape, loss.l2),
    };
    let mut grads = tape.backward(loss.total);
    let out = fwd
        .params
        .iter()
        .map(|(name, v)| {
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Array2::zeros(tape.value(*v).dim()));
            (name.clone(), g)
        })
        .collect();
    Ok((breakdown, out))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub l1: f64,
    pub l2: f64,
    pub val_mae: f64,
    pub elapsed_seconds: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MAE.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn check_split(model: &Model, split: &SplitData, what: &str) -> Result<()> {
    let cfg = model.config();
    if split.is_empty() {
        return Err(Error::EmptySet(format!("{what} split has no windows")));
    }
    let w = split.windows()[0];
    if split.n_nodes() != cfg.n_nodes
        || w.lookback != cfg.lookback
        || w.horizon != cfg.horizon
    {
        return Err(config(format!(
            "{what} split has {} nodes, α={}, β={}; model expects {} nodes, α={}, β={}",
            split.n_nodes(),
            w.lookback,
            w.horizon,
            cfg.n_nodes,
            cfg.lookback,
            cfg.horizon
        )));
    }
    Ok(())
}

fn ensure_finite(value: f64, component: &'static str, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { component, epoch, batch })
    }
}

/// Trains `model` with early stopping on validation MAE. `on_epoch` sees
/// each record as soon as it is produced.
pub fn train(
    mut model: Model,
    train: &SplitData,
    val: &SplitData,
    normalizer: &Normalizer,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_split(&model, train, "training")?;
    check_split(&model, val, "validation")?;
    let weights = LossWeights::from(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let start = Instant::now();

    let mut log = Vec::new();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let (mut mae_sum, mut l1_sum, mut l2_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (bi, idx) in train.batch_indices(cfg.batch, Some(&mut rng)).iter().enumerate() {
            let batch = train.batch(idx);
            let (loss, mut grads) =
                loss_and_grads(&model, batch.inputs.view(), batch.targets.view(), normalizer, weights)?;
            ensure_finite(loss.mae, "prediction", epoch, bi)?;
            ensure_finite(loss.l1, "consistency", epoch, bi)?;
            ensure_finite(loss.l2, "contrastive", epoch, bi)?;
            if grads.values().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite { component: "gradient", epoch, batch: bi });
            }
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            adam.step(model.params_mut(), &grads);
            let n = idx.len();
            mae_sum += loss.mae * n as f64;
            l1_sum += loss.l1 * n as f64;
            l2_sum += loss.l2 * n as f64;
            seen += n;
        }
        let val_mae = validation_mae(&model, val, normalizer, cfg.batch, cfg.mask_zeros)?;
        ensure_finite(val_mae, "validation", epoch, 0)?;
        let record = EpochRecord {
            epoch,
            train_mae: mae_sum / seen as f64,
            l1: l1_sum / seen as f64,
            l2: l2_sum / seen as f64,
            val_mae,
            elapsed_seconds: if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
        };
        on_epoch(&record);
        log.push(record);

        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_mae: best_val,
        log,
        stopped_early,
    })
}

/// Original-unit predictions and truths for a whole split, in chronological
/// order, each `S × β × (N·C)`.
pub fn predict_split(
    model: &Model,
    split: &SplitData,
    normalizer: &Normalizer,
    batch: usize,
) -> Result<(Array3<f64>, Array3<f64>)> {
    check_split(model, split, "evaluation")?;
    let cfg = model.config();
    let width = cfg.n_nodes * cfg.in_channels;
    let mut pred = Array3::zeros((split.len(), cfg.horizon, width));
    let mut truth = Array3::zeros((split.len(), cfg.horizon, width));
    let mut offset = 0;
    let none: Option<&mut ChaCha8Rng> = None;
    for idx in split.batch_indices(batch, none) {
        let b = split.batch(&idx);
        let p = model.predict(b.inputs.view())?;
        let n = idx.len();
        let p = p
            .into_shape((n, cfg.horizon, width))
            .expect("contiguous predictions")
            .mapv(|z| normalizer.invert(z));
        let t = b
            .targets
            .into_shape((n, cfg.horizon, width))
            .expect("contiguous targets");
        pred.slice_mut(ndarray::s![offset..offset + n, .., ..]).assign(&p);
        truth.slice_mut(ndarray::s![offset..offset + n, .., ..]).assign(&t);
        offset += n;
    }
    Ok((pred, truth))
}

fn validation_mae(model: &Model, split: &SplitData, normalizer: &Normalizer, batch: usize, mask: bool) -> Result<f64> {
    let (p, t) = predict_split(model, split, normalizer, batch)?;
    let report = masked_metrics(p.view(), t.view(), &[], mask)?;
    report
        .aggregate
        .metrics
        .map(|m| m.mae)
        .ok_or_else(|| Error::EmptySet("validation split has no non-missing targets".into()))
}

/// Deterministic masked metrics on `split` at `horizons` (1-based).
pub fn evaluate(
    model: &Model,
    normalizer: &Normalizer,
    split: &SplitData,
    horizons: &[usize],
    mask_zeros: bool,
) -> Result<HorizonReport> {
    let (p, t) = predict_split(model, split, normalizer, 64)?;
    masked_metrics(p.view(), t.view(), horizons, mask_zeros)
}
