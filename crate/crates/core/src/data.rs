//! Dataset ingestion, chronological splits, z-score normalization and
//! sliding-window samples.
//!
//! Two on-disk layouts are understood, picked by file extension:
//!
//! * `.csv` / `.txt`: a header row `timestamp,<node>,<node>,…` followed by
//!   one row per time step. Timestamps are `YYYY-MM-DD HH:MM:SS` or integer
//!   Unix seconds; an empty timestamp column means "no timestamps".
//! * `.bin`: little-endian container. Magic `MGTS`, `u32` version (1),
//!   `u64` T, `u64` N, `u32` interval minutes, `u8` timestamp flag, then
//!   `T·N` `f64` values row-major, then `T` `i64` Unix seconds when the flag
//!   is set.
//!
//! Missing observations are stored as `0.0`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Error, Result};

const BIN_MAGIC: &[u8; 4] = b"MGTS";
const BIN_VERSION: u32 = 1;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Dense `T × N` observation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeMatrix {
    values: Array2<f64>,
    interval_minutes: u32,
    timestamps: Option<Vec<i64>>,
}

impl TimeMatrix {
    pub fn new(values: Array2<f64>, interval_minutes: u32, timestamps: Option<Vec<i64>>) -> Result<Self> {
        if interval_minutes == 0 {
            return Err(invalid("interval must be at least one minute"));
        }
        if values.ncols() == 0 {
            return Err(invalid("time matrix needs at least one node"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (t, n) = (pos / values.ncols(), pos % values.ncols());
            return Err(invalid(format!("non-finite observation at step {t}, node {n}")));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.nrows() {
                return Err(invalid(format!(
                    "{} timestamps for {} steps",
                    ts.len(),
                    values.nrows()
                )));
            }
            if ts.windows(2).any(|w| w[1] <= w[0]) {
                return Err(invalid("timestamps must be strictly increasing"));
            }
        }
        Ok(Self {
            values,
            interval_minutes,
            timestamps,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.ncols()
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    /// Contiguous copy of rows `range`.
    pub fn slice(&self, range: Range<usize>) -> TimeMatrix {
        TimeMatrix {
            values: self.values.slice(s![range.clone(), ..]).to_owned(),
            interval_minutes: self.interval_minutes,
            timestamps: self.timestamps.as_ref().map(|ts| ts[range].to_vec()),
        }
    }
}

/// Fractions of the series assigned to train / validation / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// The three chronological slices and where each starts in the source.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TimeMatrix,
    pub val: TimeMatrix,
    pub test: TimeMatrix,
    pub ranges: [Range<usize>; 3],
}

/// Contiguous prefix / middle / suffix by `floor(T·ratio)`, remainder to test.
/// Every slice must hold at least `min_len` steps.
pub fn chronological_split(tm: &TimeMatrix, ratios: SplitRatios, min_len: usize) -> Result<Splits> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(config(format!("split ratios must be positive, got {r:?}")));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(config(format!("split ratios must sum to 1, got {r:?}")));
    }
    let t = tm.steps();
    // the epsilon absorbs representation error, e.g. 0.7 · 100 = 69.999…
    let n_train = (t as f64 * ratios.train + 1e-9).floor() as usize;
    let n_val = (t as f64 * ratios.val + 1e-9).floor() as usize;
    let n_val = n_val.min(t - n_train);
    let ranges = [0..n_train, n_train..n_train + n_val, n_train + n_val..t];
    for (name, range) in ["train", "validation", "test"].iter().zip(&ranges) {
        if range.len() < min_len {
            return Err(config(format!(
                "{name} split has {} steps, fewer than lookback + horizon = {min_len}",
                range.len()
            )));
        }
    }
    Ok(Splits {
        train: tm.slice(ranges[0].clone()),
        val: tm.slice(ranges[1].clone()),
        test: tm.slice(ranges[2].clone()),
        ranges,
    })
}

/// Global z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub const STD_FLOOR: f64 = 1e-8;

    /// Mean and population standard deviation over the training entries.
    /// With `include_zeros = false` the zero (missing) sentinels are skipped.
    pub fn fit(train: &TimeMatrix, include_zeros: bool) -> Result<Self> {
        let vals: Vec<f64> = train
            .values()
            .iter()
            .copied()
            .filter(|v| include_zeros || *v != 0.0)
            .collect();
        if vals.is_empty() {
            return Err(Error::EmptySet("no training entries to fit the normalizer".into()));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt().max(Self::STD_FLOOR),
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply_array(&self, a: ArrayView2<f64>) -> Array2<f64> {
        a.mapv(|x| self.apply(x))
    }

    pub fn invert_array(&self, a: ArrayView2<f64>) -> Array2<f64> {
        a.mapv(|z| self.invert(z))
    }
}

/// One sliding-window sample, identified by the index `t` of its last input
/// step: inputs are rows `t+1-α ..= t`, targets `t+1 ..= t+β`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub t: usize,
    pub lookback: usize,
    pub horizon: usize,
}

impl Window {
    pub fn input_rows(&self) -> Range<usize> {
        self.t + 1 - self.lookback..self.t + 1
    }

    pub fn target_rows(&self) -> Range<usize> {
        self.t + 1..self.t + 1 + self.horizon
    }

    pub fn input<'a>(&self, values: &'a Array2<f64>) -> ArrayView2<'a, f64> {
        values.slice(s![self.input_rows(), ..])
    }

    pub fn target<'a>(&self, values: &'a Array2<f64>) -> ArrayView2<'a, f64> {
        values.slice(s![self.target_rows(), ..])
    }
}

/// All stride-1 windows: one per `t` in `α−1 ..= T−β−1`.
pub fn make_windows(tm: &TimeMatrix, lookback: usize, horizon: usize) -> Result<Vec<Window>> {
    if lookback == 0 || horizon == 0 {
        return Err(config("lookback and horizon must be positive"));
    }
    let t = tm.steps();
    if t < lookback + horizon {
        return Err(Error::EmptySet(format!(
            "{t} steps cannot hold a window of {lookback} + {horizon}"
        )));
    }
    Ok((lookback - 1..t - horizon)
        .map(|t| Window { t, lookback, horizon })
        .collect())
}

/// Inputs (normalized, `B×α×N×1`) and targets (original units, `B×β×N×1`).
#[derive(Clone, Debug)]
pub struct ForecastBatch {
    pub inputs: Array4<f64>,
    pub targets: Array4<f64>,
}

impl ForecastBatch {
    pub fn len(&self) -> usize {
        self.inputs.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One split ready for batching.
#[derive(Clone, Debug)]
pub struct SplitData {
    raw: Array2<f64>,
    normalized: Array2<f64>,
    windows: Vec<Window>,
}

impl SplitData {
    pub fn new(tm: &TimeMatrix, normalizer: &Normalizer, lookback: usize, horizon: usize) -> Result<Self> {
        let windows = make_windows(tm, lookback, horizon)?;
        Ok(Self {
            raw: tm.values().clone(),
            normalized: normalizer.apply_array(tm.values().view()),
            windows,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn n_nodes(&self) -> usize {
        self.raw.ncols()
    }

    pub fn batch(&self, indices: &[usize]) -> ForecastBatch {
        assert!(!indices.is_empty(), "empty batch");
        let first = self.windows[indices[0]];
        let n = self.n_nodes();
        let mut inputs = Array4::zeros((indices.len(), first.lookback, n, 1));
        let mut targets = Array4::zeros((indices.len(), first.horizon, n, 1));
        for (b, &i) in indices.iter().enumerate() {
            let w = self.windows[i];
            inputs
                .slice_mut(s![b, .., .., 0])
                .assign(&w.input(&self.normalized));
            targets.slice_mut(s![b, .., .., 0]).assign(&w.target(&self.raw));
        }
        ForecastBatch { inputs, targets }
    }

    /// Chronological batches, or shuffled ones when `rng` is given.
    pub fn batch_indices(&self, batch_size: usize, rng: Option<&mut impl Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

// ---------------------------------------------------------------------------
// File formats.

pub fn load_time_matrix(path: &Path, default_interval: u32) -> Result<TimeMatrix> {
    match extension(path).as_deref() {
        Some("csv") | Some("txt") => read_csv(path, default_interval),
        Some("bin") => read_bin(path),
        _ => Err(Error::Format {
            path: path.to_owned(),
            reason: "unknown extension; expected .csv, .txt or .bin".into(),
        }),
    }
}

pub fn save_time_matrix(tm: &TimeMatrix, path: &Path) -> Result<()> {
    match extension(path).as_deref() {
        Some("csv") | Some("txt") => write_csv(tm, path),
        Some("bin") => write_bin(tm, path),
        _ => Err(Error::Format {
            path: path.to_owned(),
            reason: "unknown extension; expected .csv, .txt or .bin".into(),
        }),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(secs) = s.parse::<i64>() {
        return Some(secs);
    }
    chrono::NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

pub fn format_timestamp(secs: i64) -> String {
    chrono::DateTime::from_timestamp(secs, 0)
        .map(|dt| dt.naive_utc().format(TIMESTAMP_FORMAT).to_string())
        .unwrap_or_else(|| secs.to_string())
}

fn read_csv(path: &Path, default_interval: u32) -> Result<TimeMatrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let n = reader.headers()?.len().checked_sub(1).filter(|n| *n > 0).ok_or_else(|| {
        format_err(path, "header needs a timestamp column and at least one node column")
    })?;
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    let mut any_stamp = false;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != n + 1 {
            return Err(format_err(path, format!("row {} has {} fields, expected {}", row + 1, record.len(), n + 1)));
        }
        let ts = record[0].trim();
        if ts.is_empty() {
            stamps.push(None);
        } else {
            any_stamp = true;
            let parsed = parse_timestamp(ts)
                .ok_or_else(|| format_err(path, format!("row {}: bad timestamp {ts:?}", row + 1)))?;
            stamps.push(Some(parsed));
        }
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("row {}: bad value {field:?}", row + 1)))?;
            values.push(v);
        }
    }
    let t = values.len() / n;
    let values = Array2::from_shape_vec((t, n), values).expect("row lengths checked");
    let timestamps = if any_stamp {
        Some(
            stamps
                .into_iter()
                .collect::<Option<Vec<i64>>>()
                .ok_or_else(|| format_err(path, "timestamps must be given on every row or none"))?,
        )
    } else {
        None
    };
    let interval = match &timestamps {
        Some(ts) if ts.len() >= 2 => {
            let delta = ts[1] - ts[0];
            if delta <= 0 || delta % 60 != 0 {
                return Err(format_err(path, "timestamps must advance by whole minutes"));
            }
            (delta / 60) as u32
        }
        _ => default_interval,
    };
    TimeMatrix::new(values, interval, timestamps)
}

fn write_csv(tm: &TimeMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..tm.n_nodes()).map(|i| format!("node{i}")));
    w.write_record(&header)?;
    for (t, row) in tm.values().rows().into_iter().enumerate() {
        let mut rec = vec![tm.timestamps().map(|ts| format_timestamp(ts[t])).unwrap_or_default()];
        // `{}` on f64 is shortest round-trip, so values reload bit-exact
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_bin(path: &Path) -> Result<TimeMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BIN_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != BIN_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let t = r.read_u64::<LittleEndian>()? as usize;
    let n = r.read_u64::<LittleEndian>()? as usize;
    let interval = r.read_u32::<LittleEndian>()?;
    let has_ts = r.read_u8()? != 0;
    let mut values = vec![0.0; t * n];
    r.read_f64_into::<LittleEndian>(&mut values)?;
    let timestamps = if has_ts {
        let mut ts = vec![0i64; t];
        r.read_i64_into::<LittleEndian>(&mut ts)?;
        Some(ts)
    } else {
        None
    };
    let values = Array2::from_shape_vec((t, n), values).map_err(|e| format_err(path, e.to_string()))?;
    TimeMatrix::new(values, interval, timestamps)
}

fn write_bin(tm: &TimeMatrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BIN_MAGIC)?;
    w.write_u32::<LittleEndian>(BIN_VERSION)?;
    w.write_u64::<LittleEndian>(tm.steps() as u64)?;
    w.write_u64::<LittleEndian>(tm.n_nodes() as u64)?;
    w.write_u32::<LittleEndian>(tm.interval_minutes())?;
    w.write_u8(u8::from(tm.timestamps().is_some()))?;
    for v in tm.values().iter() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    if let Some(ts) = tm.timestamps() {
        for s in ts {
            w.write_i64::<LittleEndian>(*s)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a headerless delimited `N × N` adjacency matrix and checks that it
/// is square and non-negative.
pub fn load_adjacency(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| format_err(path, format!("bad entry {f:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(format_err(path, "adjacency matrix must be square"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    if flat.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(format_err(path, "adjacency entries must be finite and non-negative"));
    }
    Ok(Array2::from_shape_vec((n, n), flat).expect("square"))
}

/// Content hash of a dataset file, hex-encoded SHA-256.
pub fn fingerprint(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}
