//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 2 for usage and configuration errors, 1 for runtime failures
//! such as a non-finite training loss.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{load_kv, RunConfig};
use crate::data::{fingerprint, load_time_matrix, save_time_matrix, SplitData, SplitRatios};
use crate::error::{config, Error, Result};
use crate::experiment::{ablate, ablation_table, prepare, train_variant};
use crate::export::{per_node_mae, tables, window_input, write_matrix, ExportKind};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ModelConfig, Variant};
use crate::synthetic::{generate, labels_path, save_labels, SyntheticSpec};
use crate::training::{evaluate, predict_split, TrainConfig};

/// Default output root when `--out` is not given.
pub const OUT_DIR_ENV: &str = "MEGACRN_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "megacrn", version, about = "Meta-graph convolutional recurrent traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one variant and write manifest, checkpoint and log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Train all variants with a shared configuration and compare them.
    Ablate(AblateArgs),
    /// Export embeddings, memory attention or decoder graphs as tables.
    Export(ExportArgs),
    /// Generate a synthetic regime-switching dataset.
    Synth(SynthArgs),
}

/// Overrides named after the configuration keys.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    cheb_order: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    prototypes: Option<usize>,
    #[arg(long)]
    memory_dim: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    hyper_bias: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, visible_alias = "epochs")]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    kappa1: Option<f64>,
    #[arg(long)]
    kappa2: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Max gradient norm, or `none`.
    #[arg(long)]
    grad_clip: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    #[arg(long)]
    mask_zeros: Option<bool>,
    #[arg(long)]
    train_ratio: Option<f64>,
    #[arg(long)]
    val_ratio: Option<f64>,
    #[arg(long)]
    test_ratio: Option<f64>,
    #[arg(long)]
    include_zeros: Option<bool>,
    #[arg(long)]
    interval_minutes: Option<u32>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    out.push((stringify!($f).to_string(), v.to_string()));
                }
            )*};
        }
        push!(
            hidden, layers, cheb_order, embed_dim, prototypes, memory_dim, horizon, lookback, hyper_bias, lr, batch,
            max_epochs, patience, kappa1, kappa2, margin, seed, grad_clip, deterministic, mask_zeros, train_ratio,
            val_ratio, test_ratio, include_zeros, interval_minutes
        );
        out
    }
}

#[derive(Args, Debug)]
struct RunSource {
    /// Dataset file (`.csv` or `.bin`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Key-value configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run from a previous run's manifest (data path and configuration).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    source: RunSource,
    #[arg(long)]
    variant: Option<Variant>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    source: RunSource,
    /// Variants to train, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "adaptive,memory,momentary,mega")]
    variants: Vec<Variant>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// 1-based horizons, comma separated. Defaults to 3,6,12 for β=12 and
    /// 1,3,6 for β=6.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    /// Directory for report.txt and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-node MAE to this file.
    #[arg(long)]
    per_node: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    what: ExportKind,
    /// Window index over the whole series; repeatable.
    #[arg(long, required = true)]
    at: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output dataset path (`.csv` or `.bin`).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    #[arg(long, default_value_t = 2016)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    incidents: usize,
    #[arg(long, default_value_t = 36)]
    incident_duration: usize,
    #[arg(long, default_value_t = 0.6)]
    incident_depth: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    interval_minutes: u32,
}

/// Everything needed to repeat a command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub data: Option<PathBuf>,
    pub dataset_fingerprint: Option<String>,
    pub seed: u64,
    /// Resolved configuration keys; see [`crate::config`].
    pub config: BTreeMap<String, String>,
    pub model_config: Option<ModelConfig>,
    pub train_config: Option<TrainConfig>,
    pub synthetic: Option<SyntheticSpec>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    fn new(command: &str, seed: u64) -> Self {
        Self {
            tool: "megacrn".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            data: None,
            dataset_fingerprint: None,
            seed,
            config: BTreeMap::new(),
            model_config: None,
            train_config: None,
            synthetic: None,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Export(a) => cmd_export(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Unsupported(_) => 2,
        _ => 1,
    }
}

fn default_out(name: &str) -> PathBuf {
    let root = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}

struct Resolved {
    data_path: PathBuf,
    run: RunConfig,
}

fn resolve_source(source: &RunSource, variant: Option<Variant>, overrides: &Overrides) -> Result<Resolved> {
    let mut run = RunConfig::default();
    let mut data_path = None;
    if let Some(m) = &source.manifest {
        let manifest = RunManifest::load(m)?;
        let pairs: Vec<(String, String)> = manifest.config.into_iter().collect();
        run.apply(&pairs)?;
        data_path = manifest.data;
    }
    if let Some(c) = &source.config {
        run.apply(&load_kv(c)?)?;
    }
    run.apply(&overrides.pairs())?;
    if let Some(v) = variant {
        run.model.variant = v;
    }
    let data_path = source
        .data
        .clone()
        .or(data_path)
        .ok_or_else(|| config("no dataset: pass --data or --manifest"))?;
    Ok(Resolved { data_path, run })
}

fn checkpoint_metadata(run: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    let mut meta = serde_json::json!({
        "train_ratio": run.ratios.train,
        "val_ratio": run.ratios.val,
        "test_ratio": run.ratios.test,
        "include_zeros": run.include_zeros,
        "mask_zeros": run.train.mask_zeros,
        "interval_minutes": run.interval_minutes,
    });
    if let (Some(m), Some(e)) = (meta.as_object_mut(), extra.as_object()) {
        m.extend(e.clone());
    }
    meta
}

fn default_horizons(beta: usize) -> Vec<usize> {
    if beta >= 12 {
        vec![3, 6, 12]
    } else if beta >= 6 {
        vec![1, 3, 6]
    } else {
        (1..=beta).collect()
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let Resolved { data_path, run } = resolve_source(&a.source, a.variant, &a.overrides)?;
    let tm = load_time_matrix(&data_path, run.interval_minutes)?;
    let (model_cfg, train_cfg) = run.resolve(tm.n_nodes(), tm.interval_minutes())?;
    let out = a
        .source
        .out
        .clone()
        .unwrap_or_else(|| default_out(&format!("train-{}-s{}", model_cfg.variant, train_cfg.seed)));
    std::fs::create_dir_all(&out)?;

    let mut manifest = RunManifest::new("train", train_cfg.seed);
    manifest.data = Some(data_path.clone());
    manifest.dataset_fingerprint = Some(fingerprint(&data_path)?);
    manifest.config = run.to_map();
    manifest.model_config = Some(model_cfg.clone());
    manifest.train_config = Some(train_cfg.clone());
    let ckpt_path = out.join("checkpoint.mgck");
    let log_path = out.join("train_log.jsonl");
    let report_path = out.join("report.txt");
    for (k, p) in [("checkpoint", &ckpt_path), ("log", &log_path), ("report", &report_path)] {
        manifest.artifacts.insert(k.into(), p.clone());
    }
    manifest.save(&out.join("manifest.json"))?;

    let data = prepare(&tm, run.ratios, model_cfg.lookback, model_cfg.horizon, run.include_zeros)?;
    let mut log = File::create(&log_path)?;
    let mut io_err = None;
    let outcome = train_variant(&data, &model_cfg, model_cfg.variant, &train_cfg, |r| {
        eprintln!(
            "epoch {:>3}  train_mae {:.4}  l1 {:.4}  l2 {:.4}  val_mae {:.4}",
            r.epoch, r.train_mae, r.l1, r.l2, r.val_mae
        );
        if let Err(e) = writeln!(log, "{}", r.to_json_line()).and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }

    let ck = Checkpoint {
        model: outcome.best.clone(),
        normalizer: data.normalizer,
        metadata: checkpoint_metadata(
            &run,
            serde_json::json!({"best_epoch": outcome.best_epoch, "best_val_mae": outcome.best_val_mae}),
        ),
    };
    ck.save(&ckpt_path)?;
    let report = evaluate(
        &outcome.best,
        &data.normalizer,
        &data.test,
        &default_horizons(model_cfg.horizon),
        train_cfg.mask_zeros,
    )?;
    std::fs::write(&report_path, report.to_key_value())?;
    println!(
        "best epoch {} (val_mae {:.4}); artifacts in {}",
        outcome.best_epoch,
        outcome.best_val_mae,
        out.display()
    );
    print!("{}", report.to_key_value());
    Ok(())
}

fn split_of(ck: &Checkpoint, data: &Path, which: &str) -> Result<(SplitData, bool)> {
    let meta = &ck.metadata;
    let f = |k: &str, d: f64| meta.get(k).and_then(serde_json::Value::as_f64).unwrap_or(d);
    let b = |k: &str| meta.get(k).and_then(serde_json::Value::as_bool).unwrap_or(true);
    let interval = meta.get("interval_minutes").and_then(serde_json::Value::as_u64).unwrap_or(5) as u32;
    let ratios = SplitRatios {
        train: f("train_ratio", 0.7),
        val: f("val_ratio", 0.1),
        test: f("test_ratio", 0.2),
    };
    let tm = load_time_matrix(data, interval)?;
    let cfg = ck.model.config();
    if tm.n_nodes() != cfg.n_nodes {
        return Err(config(format!("data has {} nodes, checkpoint expects {}", tm.n_nodes(), cfg.n_nodes)));
    }
    let splits = crate::data::chronological_split(&tm, ratios, cfg.lookback + cfg.horizon)?;
    let part = match which {
        "train" => splits.train,
        "val" => splits.val,
        "test" => splits.test,
        other => return Err(config(format!("unknown split {other:?}; expected train, val or test"))),
    };
    Ok((SplitData::new(&part, &ck.normalizer, cfg.lookback, cfg.horizon)?, b("mask_zeros")))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (split, mask) = split_of(&ck, &a.data, &a.split)?;
    let horizons = a.horizons.unwrap_or_else(|| default_horizons(ck.model.config().horizon));
    let report = evaluate(&ck.model, &ck.normalizer, &split, &horizons, mask)?;
    print!("{}", report.to_key_value());
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), report.to_key_value())?;
        std::fs::write(dir.join("report.csv"), report.to_table())?;
    }
    if let Some(path) = &a.per_node {
        let (p, t) = predict_split(&ck.model, &split, &ck.normalizer, 64)?;
        let table = per_node_mae(&p, &t, mask);
        let mut w = std::io::BufWriter::new(File::create(path)?);
        writeln!(w, "node,mae")?;
        for row in table.rows() {
            writeln!(w, "{},{}", row[0] as usize, row[1])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let Resolved { data_path, run } = resolve_source(&a.source, None, &a.overrides)?;
    let tm = load_time_matrix(&data_path, run.interval_minutes)?;
    let (model_cfg, train_cfg) = run.resolve(tm.n_nodes(), tm.interval_minutes())?;
    let out = a
        .source
        .out
        .clone()
        .unwrap_or_else(|| default_out(&format!("ablate-s{}", train_cfg.seed)));
    std::fs::create_dir_all(&out)?;

    let mut manifest = RunManifest::new("ablate", train_cfg.seed);
    manifest.data = Some(data_path.clone());
    manifest.dataset_fingerprint = Some(fingerprint(&data_path)?);
    manifest.config = run.to_map();
    manifest.model_config = Some(model_cfg.clone());
    manifest.train_config = Some(train_cfg.clone());
    let table_path = out.join("ablation.csv");
    manifest.artifacts.insert("table".into(), table_path.clone());
    for v in &a.variants {
        manifest.artifacts.insert(format!("log_{v}"), out.join(format!("log_{v}.jsonl")));
    }
    manifest.save(&out.join("manifest.json"))?;

    let data = prepare(&tm, run.ratios, model_cfg.lookback, model_cfg.horizon, run.include_zeros)?;
    let mut logs: BTreeMap<Variant, File> = BTreeMap::new();
    for v in &a.variants {
        logs.insert(*v, File::create(out.join(format!("log_{v}.jsonl")))?);
    }
    let rows = ablate(
        &data,
        &model_cfg,
        &a.variants,
        &train_cfg,
        &default_horizons(model_cfg.horizon),
        |v, r| {
            eprintln!("{v:>9} epoch {:>3}  val_mae {:.4}", r.epoch, r.val_mae);
            if let Some(f) = logs.get_mut(&v) {
                let _ = writeln!(f, "{}", r.to_json_line());
            }
        },
    )?;
    let table = ablation_table(&rows);
    std::fs::write(&table_path, &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let interval = ck
        .metadata
        .get("interval_minutes")
        .and_then(serde_json::Value::as_u64)
        .unwrap_or(5) as u32;
    let tm = load_time_matrix(&a.data, interval)?;
    let out = a.out.clone().unwrap_or_else(|| default_out("exports"));
    std::fs::create_dir_all(&out)?;
    for &at in &a.at {
        let x = window_input(&tm, &ck.normalizer, &ck.model, at)?;
        let trace = ck.model.forward(x.view())?;
        for (stem, m) in tables(&ck.model, &trace, a.what)? {
            let path = out.join(format!("{stem}_{at}.csv"));
            write_matrix(&path, m.view())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(a.nodes, a.steps, a.seed).with_random_incidents(
        a.incidents,
        a.incident_duration,
        a.incident_depth,
    );
    spec.noise_std = a.noise;
    spec.interval_minutes = a.interval_minutes;
    let ds = generate(&spec)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_time_matrix(&ds.matrix, &a.out)?;
    let labels = labels_path(&a.out);
    save_labels(&ds.labels, &labels)?;
    let mut manifest = RunManifest::new("synth", a.seed);
    manifest.synthetic = Some(spec);
    manifest.dataset_fingerprint = Some(fingerprint(&a.out)?);
    manifest.artifacts.insert("data".into(), a.out.clone());
    manifest.artifacts.insert("labels".into(), labels.clone());
    let mut name = a.out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    manifest.save(&a.out.with_file_name(name))?;
    println!("{}", a.out.display());
    println!("{}", labels.display());
    Ok(())
}
