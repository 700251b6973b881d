//! Dataset ingestion, chronological splitting, windowing and normalization.

mod patches;
mod toy;

pub use patches::{complementary_masks, patchify, patchify_batch, MaskPair, PadMode, PatchBatch};
pub use toy::{gen_class_toy, gen_shift_toy, LabeledSet, ShiftGrid, ShiftToyConfig};

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// A multichannel series stored as a T x C grid in time order.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    pub name: String,
    /// T x C, row-major (one row per timestep).
    pub values: Matrix,
    pub timestamps: Option<Vec<String>>,
    /// (train_end, val_end) indices; train = [0, train_end), val = [train_end, val_end),
    /// test = [val_end, T).
    pub split: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidArg(format!("unknown split {other:?}"))),
        }
    }
}

/// Column selection for CSV ingestion.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    /// Name of the timestamp column to keep as strings, if any.
    pub timestamp_col: Option<String>,
    /// Value columns to load, in this order. Empty = all non-timestamp columns.
    pub value_cols: Vec<String>,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.values.rows
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols
    }

    /// The [start, end) time range of a named split.
    pub fn split_range(&self, split: SplitName) -> Result<(usize, usize)> {
        let (train_end, val_end) = self
            .split
            .ok_or_else(|| Error::InvalidArg("dataset has no split set".into()))?;
        Ok(match split {
            SplitName::Train => (0, train_end),
            SplitName::Val => (train_end, val_end),
            SplitName::Test => (val_end, self.len()),
        })
    }
}

/// Load an ETT-style CSV: header row, optional timestamp column, numeric channels.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();

    let ts_idx = match &schema.timestamp_col {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))?,
        ),
        None => None,
    };

    let value_idx: Vec<usize> = if schema.value_cols.is_empty() {
        (0..headers.len()).filter(|i| Some(*i) != ts_idx).collect()
    } else {
        schema
            .value_cols
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::MissingColumn(name.clone()))
            })
            .collect::<Result<_>>()?
    };
    if value_idx.is_empty() {
        return Err(Error::InvalidArg("no value columns selected".into()));
    }

    let mut data: Vec<f64> = Vec::new();
    let mut timestamps: Vec<String> = Vec::new();
    let mut rows = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if let Some(i) = ts_idx {
            timestamps.push(record.get(i).unwrap_or("").to_string());
        }
        for &i in &value_idx {
            let cell = record.get(i).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                row: r + 2, // 1-based, counting the header line
                col: i + 1,
                name: headers[i].clone(),
                msg: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvCell {
                    row: r + 2,
                    col: i + 1,
                    name: headers[i].clone(),
                    msg: "non-finite value".into(),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows < 2 {
        return Err(Error::InvalidArg(format!(
            "need at least 2 data rows, got {rows}"
        )));
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(TimeSeriesDataset {
        name,
        values: Matrix::from_vec(rows, value_idx.len(), data)?,
        timestamps: ts_idx.map(|_| timestamps),
        split: None,
    })
}

/// Write a dataset in the same CSV format `load_csv` reads.
pub fn write_csv(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let c = ds.channels();
    let mut header: Vec<String> = Vec::new();
    if ds.timestamps.is_some() {
        header.push("date".into());
    }
    header.extend((0..c).map(|i| format!("ch{i}")));
    w.write_record(&header)?;
    for t in 0..ds.len() {
        let mut row: Vec<String> = Vec::new();
        if let Some(ts) = &ds.timestamps {
            row.push(ts[t].clone());
        }
        row.extend(ds.values.row(t).iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Set chronological split boundaries at floor(T*train) and floor(T*(train+val)).
pub fn chronological_split(
    ds: &mut TimeSeriesDataset,
    ratios: (f64, f64, f64),
) -> Result<()> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::InvalidArg(format!("split ratios must be positive: {ratios:?}")));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArg(format!(
            "split ratios must sum to 1, got {}",
            a + b + c
        )));
    }
    let t = ds.len();
    // nudge before flooring so ratios like 0.7 land on the intended boundary
    let train_end = (t as f64 * a + 1e-9).floor() as usize;
    let val_end = (t as f64 * (a + b) + 1e-9).floor() as usize;
    if train_end == 0 || val_end <= train_end || val_end >= t {
        return Err(Error::InvalidArg(format!(
            "split produces an empty part: boundaries ({train_end}, {val_end}) for T={t}"
        )));
    }
    ds.split = Some((train_end, val_end));
    Ok(())
}

/// An (input, target) pair of consecutive segments.
#[derive(Debug, Clone)]
pub struct ForecastWindow {
    /// L x C
    pub input: Matrix,
    /// H x C
    pub target: Matrix,
    /// Start index of the input within the source split.
    pub origin: usize,
}

/// Sliding (input, target) windows inside one split.
pub fn make_forecast_windows(
    ds: &TimeSeriesDataset,
    split: SplitName,
    input_len: usize,
    horizon: usize,
    window_stride: usize,
) -> Result<Vec<ForecastWindow>> {
    if input_len == 0 || horizon == 0 || window_stride == 0 {
        return Err(Error::InvalidArg(
            "input_len, horizon, window_stride must be positive".into(),
        ));
    }
    let (start, end) = ds.split_range(split)?;
    let t_split = end - start;
    if t_split < input_len + horizon {
        return Err(Error::InvalidArg(format!(
            "split has {t_split} steps, needs at least {}",
            input_len + horizon
        )));
    }
    let c = ds.channels();
    let count = (t_split - input_len - horizon) / window_stride + 1;
    let mut windows = Vec::with_capacity(count);
    for k in 0..count {
        let s = start + k * window_stride;
        let mut input = Matrix::zeros(input_len, c);
        let mut target = Matrix::zeros(horizon, c);
        for t in 0..input_len {
            input.row_mut(t).copy_from_slice(ds.values.row(s + t));
        }
        for t in 0..horizon {
            target
                .row_mut(t)
                .copy_from_slice(ds.values.row(s + input_len + t));
        }
        windows.push(ForecastWindow {
            input,
            target,
            origin: k * window_stride,
        });
    }
    Ok(windows)
}

/// Sliding input-only windows (no target), used for pretraining.
pub fn make_input_windows(
    ds: &TimeSeriesDataset,
    split: SplitName,
    input_len: usize,
    window_stride: usize,
) -> Result<Vec<Matrix>> {
    if input_len == 0 || window_stride == 0 {
        return Err(Error::InvalidArg("input_len and window_stride must be positive".into()));
    }
    let (start, end) = ds.split_range(split)?;
    let t_split = end - start;
    if t_split < input_len {
        return Err(Error::InvalidArg(format!(
            "split has {t_split} steps, needs at least {input_len}"
        )));
    }
    let c = ds.channels();
    let count = (t_split - input_len) / window_stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let s = start + k * window_stride;
        let mut w = Matrix::zeros(input_len, c);
        for t in 0..input_len {
            w.row_mut(t).copy_from_slice(ds.values.row(s + t));
        }
        out.push(w);
    }
    Ok(out)
}

/// Std clamp for constant channels.
pub const EPS_NORM: f64 = 1e-8;

/// Per-channel mean/std of a window input.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standardize each channel of an L x C window to zero mean, unit std.
pub fn instance_normalize(input: &Matrix) -> (Matrix, NormStats) {
    let (l, c) = input.shape();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for t in 0..l {
        for ch in 0..c {
            mean[ch] += input.at(t, ch);
        }
    }
    for m in &mut mean {
        *m /= l as f64;
    }
    for t in 0..l {
        for ch in 0..c {
            let d = input.at(t, ch) - mean[ch];
            std[ch] += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / l as f64).sqrt().max(EPS_NORM);
    }
    let mut out = Matrix::zeros(l, c);
    for t in 0..l {
        for ch in 0..c {
            *out.at_mut(t, ch) = (input.at(t, ch) - mean[ch]) / std[ch];
        }
    }
    (out, NormStats { mean, std })
}

/// Apply the inverse affine map of `instance_normalize` to predictions.
pub fn denormalize(pred: &Matrix, stats: &NormStats) -> Matrix {
    let (h, c) = pred.shape();
    debug_assert_eq!(c, stats.mean.len());
    let mut out = Matrix::zeros(h, c);
    for t in 0..h {
        for ch in 0..c {
            *out.at_mut(t, ch) = pred.at(t, ch) * stats.std[ch] + stats.mean[ch];
        }
    }
    out
}

/// Normalize a target with stats computed from the paired input.
pub fn normalize_with(stats: &NormStats, x: &Matrix) -> Matrix {
    let (h, c) = x.shape();
    let mut out = Matrix::zeros(h, c);
    for t in 0..h {
        for ch in 0..c {
            *out.at_mut(t, ch) = (x.at(t, ch) - stats.mean[ch]) / stats.std[ch];
        }
    }
    out
}
