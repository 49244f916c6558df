//! Series ingestion, chronological splitting, few-shot prefixes, sliding
//! windows, standard scaling, and deterministic synthetic series.

mod csv_io;
mod synth;

use std::ops::Range;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use csv_io::{load_csv, write_csv, DATE_FORMAT};
pub use synth::{generate_synthetic, Component, SynthSpec};

/// Evenly sampled multivariate series. Rows are time steps, columns channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries<T = f64> {
    pub timestamps: Vec<i64>,
    pub values: Array2<T>,
    pub feature_names: Vec<String>,
    /// Seconds between consecutive rows.
    pub sampling_interval: i64,
}

impl<T: Scalar> RawSeries<T> {
    pub fn new(
        timestamps: Vec<i64>,
        values: Array2<T>,
        feature_names: Vec<String>,
        sampling_interval: i64,
    ) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("series must be non-empty, got {rows}x{cols}")));
        }
        if timestamps.len() != rows {
            return Err(Error::shape("RawSeries timestamps", rows, timestamps.len()));
        }
        if feature_names.len() != cols {
            return Err(Error::shape("RawSeries feature names", cols, feature_names.len()));
        }
        if sampling_interval <= 0 {
            return Err(Error::Config(format!(
                "sampling interval must be positive, got {sampling_interval}"
            )));
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if w[1] - w[0] != sampling_interval {
                return Err(Error::Row {
                    row: i + 2,
                    message: format!(
                        "timestamp step {} differs from sampling interval {sampling_interval}",
                        w[1] - w[0]
                    ),
                });
            }
        }
        if let Some(((r, c), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Row {
                row: r + 1,
                message: format!("non-finite value in column {c}"),
            });
        }
        Ok(Self {
            timestamps,
            values,
            feature_names,
            sampling_interval,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Contiguous row range as a new series.
    pub fn slice_rows(&self, range: Range<usize>) -> RawSeries<T> {
        RawSeries {
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values.slice(s![range, ..]).to_owned(),
            feature_names: self.feature_names.clone(),
            sampling_interval: self.sampling_interval,
        }
    }

    pub fn cast<U: Scalar>(&self) -> RawSeries<U> {
        RawSeries {
            timestamps: self.timestamps.clone(),
            values: self.values.mapv(|v| U::of(v.as_f64())),
            feature_names: self.feature_names.clone(),
            sampling_interval: self.sampling_interval,
        }
    }
}

/// Chronological split ratios plus the few-shot fraction of the train split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub few_shot_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            few_shot_fraction: 1.0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!(
                "split ratios must lie in [0, 1], got {ratios:?}"
            )));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {sum}")));
        }
        if !(self.few_shot_fraction > 0.0 && self.few_shot_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "few-shot fraction must lie in (0, 1], got {}",
                self.few_shot_fraction
            )));
        }
        Ok(())
    }
}

// Products like 0.29 * 100 land a hair below the integer they denote.
fn floor_count(len: usize, fraction: f64) -> usize {
    (len as f64 * fraction + 1e-9).floor() as usize
}

/// Train / validation / test segments in time order. Train and validation
/// lengths are floored; the test split takes the remainder.
pub fn chronological_split<T: Scalar>(
    series: &RawSeries<T>,
    spec: &SplitSpec,
) -> Result<(RawSeries<T>, RawSeries<T>, RawSeries<T>)> {
    spec.validate()?;
    let len = series.len();
    if len < 3 {
        return Err(Error::TooShort {
            needed: 3,
            available: len,
        });
    }
    let n_train = floor_count(len, spec.train_ratio);
    let n_val = floor_count(len, spec.val_ratio);
    let n_test = len.saturating_sub(n_train + n_val);
    for (name, n) in [("train", n_train), ("validation", n_val), ("test", n_test)] {
        if n == 0 {
            return Err(Error::Config(format!(
                "{name} split is empty for a series of {len} rows"
            )));
        }
    }
    Ok((
        series.slice_rows(0..n_train),
        series.slice_rows(n_train..n_train + n_val),
        series.slice_rows(n_train + n_val..len),
    ))
}

/// First `floor(T * fraction)` rows of the training split.
pub fn few_shot_prefix<T: Scalar>(train: &RawSeries<T>, fraction: f64) -> Result<RawSeries<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "few-shot fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = floor_count(train.len(), fraction);
    if n < 1 {
        return Err(Error::TooShort {
            needed: 1,
            available: n,
        });
    }
    Ok(train.slice_rows(0..n))
}

/// One look-back / horizon pair cut from a series.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<T> {
    pub x_in: Array2<T>,
    pub x_out: Array2<T>,
    pub in_timestamps: Vec<i64>,
    pub start_index: usize,
}

impl<T: Scalar> Window<T> {
    pub fn t_in(&self) -> usize {
        self.x_in.nrows()
    }

    pub fn t_out(&self) -> usize {
        self.x_out.nrows()
    }
}

/// Number of stride-1 windows of total length `t_in + t_out`.
pub fn window_count(len: usize, t_in: usize, t_out: usize) -> usize {
    (len + 1).saturating_sub(t_in + t_out)
}

/// All stride-1 windows; window `k` covers rows `[k, k + t_in + t_out)`.
/// `t_out = 0` yields look-back-only windows for the alignment stage.
pub fn sliding_windows<T: Scalar>(series: &RawSeries<T>, t_in: usize, t_out: usize) -> Result<Vec<Window<T>>> {
    if t_in == 0 {
        return Err(Error::Config("look-back length must be at least 1".into()));
    }
    let total = t_in + t_out;
    if series.len() < total {
        return Err(Error::TooShort {
            needed: total,
            available: series.len(),
        });
    }
    Ok((0..window_count(series.len(), t_in, t_out))
        .map(|k| Window {
            x_in: series.values.slice(s![k..k + t_in, ..]).to_owned(),
            x_out: series.values.slice(s![k + t_in..k + total, ..]).to_owned(),
            in_timestamps: series.timestamps[k..k + t_in].to_vec(),
            start_index: k,
        })
        .collect())
}

/// Stride-1 windows addressed by index without materializing them all.
#[derive(Debug, Clone, Copy)]
pub struct WindowSource<'a, T> {
    series: &'a RawSeries<T>,
    t_in: usize,
    t_out: usize,
}

impl<'a, T: Scalar> WindowSource<'a, T> {
    pub fn new(series: &'a RawSeries<T>, t_in: usize, t_out: usize) -> Result<Self> {
        if t_in == 0 {
            return Err(Error::Config("look-back length must be at least 1".into()));
        }
        if series.len() < t_in + t_out {
            return Err(Error::TooShort {
                needed: t_in + t_out,
                available: series.len(),
            });
        }
        Ok(Self { series, t_in, t_out })
    }

    pub fn len(&self) -> usize {
        window_count(self.series.len(), self.t_in, self.t_out)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t_in(&self) -> usize {
        self.t_in
    }

    pub fn t_out(&self) -> usize {
        self.t_out
    }

    pub fn channels(&self) -> usize {
        self.series.channels()
    }

    /// Window `k`, identical to `sliding_windows(..)[k]`.
    pub fn get(&self, k: usize) -> Window<T> {
        let (t_in, total) = (self.t_in, self.t_in + self.t_out);
        Window {
            x_in: self.series.values.slice(s![k..k + t_in, ..]).to_owned(),
            x_out: self.series.values.slice(s![k + t_in..k + total, ..]).to_owned(),
            in_timestamps: self.series.timestamps[k..k + t_in].to_vec(),
            start_index: k,
        }
    }
}

/// Per-channel standard scaler fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels whose population std falls below this are treated as constant.
pub const CONSTANT_CHANNEL_STD: f64 = 1e-8;

/// Population mean and std per channel. Constant channels get std 1 so that
/// they scale to zero without amplifying variation in later splits.
pub fn fit_scaler<T: Scalar>(train: &RawSeries<T>) -> Scaler {
    let n = train.len() as f64;
    let mut mean = Vec::with_capacity(train.channels());
    let mut std = Vec::with_capacity(train.channels());
    for (c, col) in train.values.axis_iter(Axis(1)).enumerate() {
        let m = col.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = col.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
        let mut sd = var.sqrt();
        if sd < CONSTANT_CHANNEL_STD {
            log::warn!(
                "channel {c} ({}) is constant on the training split; scaling it to zero",
                train.feature_names[c]
            );
            sd = 1.0;
        }
        mean.push(m);
        std.push(sd);
    }
    Scaler { mean, std }
}

impl Scaler {
    pub fn apply<T: Scalar>(&self, series: &RawSeries<T>) -> Result<RawSeries<T>> {
        self.check(series.channels())?;
        let mut out = series.clone();
        for (c, mut col) in out.values.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            col.mapv_inplace(|v| T::of((v.as_f64() - m) / s));
        }
        Ok(out)
    }

    /// Maps standardized values (rows x channels) back to the raw scale.
    pub fn invert<T: Scalar>(&self, values: &Array2<T>) -> Result<Array2<T>> {
        self.check(values.ncols())?;
        let mut out = values.clone();
        for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            col.mapv_inplace(|v| T::of(v.as_f64() * s + m));
        }
        Ok(out)
    }

    fn check(&self, channels: usize) -> Result<()> {
        if channels != self.mean.len() {
            return Err(Error::shape("scaler channels", self.mean.len(), channels));
        }
        Ok(())
    }
}

/// Scaled train / validation / test series ready for windowing.
///
/// Validation and test segments are extended backwards by the look-back
/// length so their first window predicts the first row of the segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData<T> {
    /// Few-shot prefix of the training split.
    pub train: RawSeries<T>,
    pub val: RawSeries<T>,
    pub test: RawSeries<T>,
    /// Fitted on the full training split.
    pub scaler: Scaler,
    /// Rows in the full training split before the few-shot cut.
    pub full_train_rows: usize,
}

impl<T: Scalar> PreparedData<T> {
    pub fn prepare(series: &RawSeries<T>, spec: &SplitSpec, t_in: usize) -> Result<Self> {
        let (train, val, test) = chronological_split(series, spec)?;
        let scaler = fit_scaler(&train);
        let val_start = train.len();
        let test_start = val_start + val.len();
        let with_context = |start: usize| series.slice_rows(start.saturating_sub(t_in)..start);
        let val = concat_rows(&with_context(val_start), &val);
        let test = concat_rows(&with_context(test_start), &test);
        let full_train_rows = train.len();
        let train = few_shot_prefix(&train, spec.few_shot_fraction)?;
        Ok(Self {
            train: scaler.apply(&train)?,
            val: scaler.apply(&val)?,
            test: scaler.apply(&test)?,
            scaler,
            full_train_rows,
        })
    }

    /// Fails unless every segment holds at least one window of
    /// `t_in + horizon` rows.
    pub fn check_horizon(&self, t_in: usize, horizon: usize) -> Result<()> {
        for (name, part) in [("train", &self.train), ("validation", &self.val), ("test", &self.test)] {
            if part.len() < t_in + horizon {
                return Err(Error::Config(format!(
                    "{name} segment has {} rows, fewer than look-back {t_in} + horizon {horizon}",
                    part.len()
                )));
            }
        }
        Ok(())
    }
}

fn concat_rows<T: Scalar>(a: &RawSeries<T>, b: &RawSeries<T>) -> RawSeries<T> {
    let mut timestamps = a.timestamps.clone();
    timestamps.extend_from_slice(&b.timestamps);
    RawSeries {
        timestamps,
        values: ndarray::concatenate(Axis(0), &[a.values.view(), b.values.view()]).expect("same channel count"),
        feature_names: b.feature_names.clone(),
        sampling_interval: b.sampling_interval,
    }
}
