//! Dataset preparation and the four-variant ablation grid.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{chronological_split, Normalizer, SplitData, SplitRatios, Splits, TimeMatrix};
use crate::error::Result;
use crate::metrics::HorizonReport;
use crate::model::{Init, Model, ModelConfig, Variant};
use crate::training::{evaluate, train, EpochRecord, TrainConfig, TrainOutcome};

/// Splits, the fitted normalizer and windowed samples for each split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub splits: Splits,
    pub normalizer: Normalizer,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

pub fn prepare(
    tm: &TimeMatrix,
    ratios: SplitRatios,
    lookback: usize,
    horizon: usize,
    include_zeros: bool,
) -> Result<Prepared> {
    let splits = chronological_split(tm, ratios, lookback + horizon)?;
    let normalizer = Normalizer::fit(&splits.train, include_zeros)?;
    let mk = |t: &TimeMatrix| SplitData::new(t, &normalizer, lookback, horizon);
    Ok(Prepared {
        train: mk(&splits.train)?,
        val: mk(&splits.val)?,
        test: mk(&splits.test)?,
        normalizer,
        splits,
    })
}

/// Hash of everything an ablation row shares with its siblings: the model
/// config without the variant, and the training config.
pub fn shared_config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut m = serde_json::to_value(model).expect("config serializes");
    if let Some(obj) = m.as_object_mut() {
        obj.remove("variant");
    }
    let doc = serde_json::json!({ "model": m, "train": train });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub config_hash: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_mae: f64,
    pub test: HorizonReport,
}

/// Trains one variant from a seeded initialization.
pub fn train_variant(
    data: &Prepared,
    base: &ModelConfig,
    variant: Variant,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let model_cfg = ModelConfig {
        variant,
        ..base.clone()
    };
    let model = Model::new(model_cfg, Init::Random(cfg.seed))?;
    train(model, &data.train, &data.val, &data.normalizer, cfg, on_epoch)
}

/// Trains every variant in `variants` with the same seed and configuration.
pub fn ablate(
    data: &Prepared,
    base: &ModelConfig,
    variants: &[Variant],
    cfg: &TrainConfig,
    horizons: &[usize],
    mut on_epoch: impl FnMut(Variant, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    let hash = shared_config_hash(base, cfg);
    variants
        .iter()
        .map(|&variant| {
            let out = train_variant(data, base, variant, cfg, |r| on_epoch(variant, r))?;
            let test = evaluate(&out.best, &data.normalizer, &data.test, horizons, cfg.mask_zeros)?;
            Ok(AblationRow {
                variant,
                config_hash: hash.clone(),
                best_epoch: out.best_epoch,
                epochs_run: out.log.len(),
                val_mae: out.best_val_mae,
                test,
            })
        })
        .collect()
}

/// Table with one row per variant: validation MAE plus test MAE/RMSE at
/// each horizon and overall.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut header = vec!["variant".to_string(), "config_hash".into(), "val_mae".into()];
    if let Some(first) = rows.first() {
        for h in &first.test.horizons {
            header.push(format!("h{}_mae", h.horizon));
            header.push(format!("h{}_rmse", h.horizon));
        }
    }
    header.push("all_mae".into());
    header.push("all_rmse".into());
    let mut out = header.join(",");
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
    for r in rows {
        let mut fields = vec![r.variant.to_string(), r.config_hash[..12].to_string(), format!("{:.4}", r.val_mae)];
        for h in r.test.horizons.iter().chain(std::iter::once(&r.test.aggregate)) {
            fields.push(cell(h.metrics.map(|m| m.mae)));
            fields.push(cell(h.metrics.map(|m| m.rmse)));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
