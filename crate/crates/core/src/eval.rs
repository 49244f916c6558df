//! Forecast metrics, the multi-horizon protocol and linear evaluation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FreezePolicy;
use crate::data::{PreparedData, Scaler, WindowSource};
use crate::error::{Error, Result};
use crate::model::{ForecastShape, Model};
use crate::scalar::Scalar;
use crate::train::{error_sums, forecast_forward, run_lp_ft, LogSink, LpFtSummary, TrainConfig};

/// Global elementwise means over every window, step and channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

// Order-fixed pairwise sum, so the result does not depend on scheduling.
fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

/// Scores `model` on every stride-1 window of `source`, in parallel.
/// With `scaler`, both forecast and target are mapped back to raw units.
pub fn evaluate_forecast<T: Scalar>(
    model: &Model<T>,
    source: &WindowSource<'_, T>,
    scaler: Option<&Scaler>,
) -> Result<ForecastMetrics> {
    let shape = model
        .config
        .forecast
        .ok_or_else(|| Error::Config("evaluation needs a model with a forecast head".into()))?;
    if source.t_out() != shape.horizon {
        return Err(Error::shape("evaluation horizon", shape.horizon, source.t_out()));
    }
    if source.is_empty() {
        return Err(Error::Config("evaluation set has no windows".into()));
    }
    let sums = (0..source.len())
        .into_par_iter()
        .map(|k| {
            let w = source.get(k);
            let pred = forecast_forward(model, w.x_in.view(), &w.in_timestamps)?;
            Ok(match scaler {
                Some(s) => error_sums(s.invert(&w.x_out)?.view(), s.invert(&pred)?.view()),
                None => error_sums(w.x_out.view(), pred.view()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (sq, abs): (Vec<f64>, Vec<f64>) = sums.into_iter().unzip();
    let n = (source.len() * shape.horizon * shape.channels) as f64;
    Ok(ForecastMetrics {
        mse: pairwise_sum(&sq) / n,
        mae: pairwise_sum(&abs) / n,
        windows: source.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// Test metrics per prediction length plus their plain averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub few_shot_fraction: f64,
    /// `"standardized"` or `"raw"`.
    pub scale: String,
    pub horizons: Vec<HorizonMetrics>,
    pub average_mse: f64,
    pub average_mae: f64,
}

impl MetricsReport {
    pub fn new(
        dataset: impl Into<String>,
        few_shot_fraction: f64,
        raw_scale: bool,
        horizons: Vec<HorizonMetrics>,
    ) -> Result<Self> {
        if horizons.is_empty() {
            return Err(Error::Config("a report needs at least one horizon".into()));
        }
        let n = horizons.len() as f64;
        let report = Self {
            dataset: dataset.into(),
            few_shot_fraction,
            scale: if raw_scale { "raw" } else { "standardized" }.into(),
            average_mse: horizons.iter().map(|h| h.mse).sum::<f64>() / n,
            average_mae: horizons.iter().map(|h| h.mae).sum::<f64>() / n,
            horizons,
        };
        if !(report.average_mse.is_finite() && report.average_mae.is_finite()) {
            return Err(Error::Config("report contains non-finite metrics".into()));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "dataset {} (few-shot {}, {} scale)\n{:>8} {:>10} {:>10} {:>8}\n",
            self.dataset, self.few_shot_fraction, self.scale, "horizon", "mse", "mae", "windows"
        );
        for h in &self.horizons {
            let _ = writeln!(out, "{:>8} {:>10.6} {:>10.6} {:>8}", h.horizon, h.mse, h.mae, h.windows);
        }
        let _ = writeln!(
            out,
            "{:>8} {:>10.6} {:>10.6}",
            "avg", self.average_mse, self.average_mae
        );
        out
    }
}

/// A fine-tuned model for one prediction length.
#[derive(Debug, Clone)]
pub struct HorizonRun<T> {
    pub horizon: usize,
    pub model: Model<T>,
    pub summary: LpFtSummary,
    pub metrics: ForecastMetrics,
}

/// Options shared by every horizon of [`multi_horizon_protocol`].
#[derive(Debug, Clone)]
pub struct ProtocolOptions<'a> {
    pub dataset: &'a str,
    pub few_shot_fraction: f64,
    pub train: &'a TrainConfig,
    pub policy: &'a FreezePolicy,
    pub raw_scale: bool,
}

/// Fine-tunes one model per horizon from the shared alignment model and
/// scores each on the test segment.
pub fn multi_horizon_protocol<T: Scalar>(
    aligned: &Model<T>,
    data: &PreparedData<T>,
    horizons: &[usize],
    options: &ProtocolOptions<'_>,
    log: &mut dyn LogSink,
) -> Result<(MetricsReport, Vec<HorizonRun<T>>)> {
    if horizons.is_empty() {
        return Err(Error::Config("no prediction lengths requested".into()));
    }
    let t_in = aligned.config.t_in;
    for &h in horizons {
        if h == 0 {
            return Err(Error::Config("prediction lengths must be at least 1".into()));
        }
        data.check_horizon(t_in, h)?;
    }
    let channels = data.train.channels();
    let mut rows = Vec::with_capacity(horizons.len());
    let mut runs = Vec::with_capacity(horizons.len());
    for &horizon in horizons {
        let mut model = aligned.for_forecasting(ForecastShape { horizon, channels }, options.train.seed)?;
        let summary = run_lp_ft(
            &mut model,
            &data.train,
            Some(&data.val),
            options.train,
            options.policy,
            log,
        )?;
        let test = WindowSource::new(&data.test, t_in, horizon)?;
        let metrics = evaluate_forecast(&model, &test, options.raw_scale.then_some(&data.scaler))?;
        log::info!(
            "horizon {horizon}: test mse {:.6} mae {:.6} over {} windows",
            metrics.mse,
            metrics.mae,
            metrics.windows
        );
        rows.push(HorizonMetrics {
            horizon,
            mse: metrics.mse,
            mae: metrics.mae,
            windows: metrics.windows,
        });
        runs.push(HorizonRun {
            horizon,
            model,
            summary,
            metrics,
        });
    }
    let report = MetricsReport::new(options.dataset, options.few_shot_fraction, options.raw_scale, rows)?;
    Ok((report, runs))
}

/// Representation quality of an aligned model: everything but a fresh
/// forecast head stays frozen (RevIN at identity), the head trains for
/// `lp_steps + ft_steps`, and the result is scored on the test segment.
pub fn linear_eval<T: Scalar>(
    aligned: &Model<T>,
    data: &PreparedData<T>,
    horizon: usize,
    config: &TrainConfig,
    log: &mut dyn LogSink,
) -> Result<(ForecastMetrics, Model<T>)> {
    let t_in = aligned.config.t_in;
    data.check_horizon(t_in, horizon)?;
    let shape = ForecastShape {
        horizon,
        channels: data.train.channels(),
    };
    let mut model = aligned.for_forecasting(shape, config.seed)?;
    let config = TrainConfig {
        unfreeze_all_in_ft: false,
        early_stopping: None,
        ..config.clone()
    };
    run_lp_ft(&mut model, &data.train, None, &config, &FreezePolicy::head_only(), log)?;
    let test = WindowSource::new(&data.test, t_in, horizon)?;
    Ok((evaluate_forecast(&model, &test, None)?, model))
}
