//! Config-driven stages shared by the command-line tool and the tests.

use std::path::{Path, PathBuf};

use crate::config::{DataSource, RunConfig, Transfer};
use crate::data::{generate_synthetic, load_csv, PreparedData, RawSeries};
use crate::error::{Error, Result};
use crate::eval::{multi_horizon_protocol, HorizonRun, MetricsReport, ProtocolOptions};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::train::{run_alignment, AlignmentSummary, LogSink};

/// Resolves a relative CSV path against `data_dir` when given.
pub fn resolve_data_path(path: &Path, data_dir: Option<&Path>) -> PathBuf {
    match data_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

pub fn load_series(config: &RunConfig, data_dir: Option<&Path>) -> Result<RawSeries<f64>> {
    match &config.data {
        Some(DataSource::Csv(path)) => load_csv(resolve_data_path(path, data_dir)),
        Some(DataSource::Synth(spec)) => generate_synthetic(spec),
        None => Err(Error::Config("config names no data source".into())),
    }
}

/// Splits, scales and cuts the few-shot prefix.
pub fn prepare_data<T: Scalar>(config: &RunConfig, series: &RawSeries<f64>) -> Result<PreparedData<T>> {
    let data = PreparedData::prepare(&series.cast::<T>(), &config.split, config.t_in)?;
    log::info!(
        "split rows: train {} of {} (few-shot {}), validation {}, test {} (including look-back context)",
        data.train.len(),
        data.full_train_rows,
        config.split.few_shot_fraction,
        data.val.len(),
        data.test.len()
    );
    Ok(data)
}

/// Stage 1 from a freshly initialized model.
pub fn align<T: Scalar>(
    config: &RunConfig,
    data: &PreparedData<T>,
    log: &mut dyn LogSink,
) -> Result<(Model<T>, AlignmentSummary)> {
    let mut model = Model::new(config.model_config(true, None), config.seed)?;
    log::info!("backbone trainable fraction {:.4}%", 100.0 * model.trainable_fraction());
    let summary = run_alignment(&mut model, &data.train, &config.alignment, &config.freeze, log)?;
    Ok((model, summary))
}

/// Stage 2 for every configured horizon, from `aligned` or, when transfer
/// allows it, from random weights.
pub fn finetune<T: Scalar>(
    config: &RunConfig,
    aligned: Option<&Model<T>>,
    data: &PreparedData<T>,
    log: &mut dyn LogSink,
) -> Result<(MetricsReport, Vec<HorizonRun<T>>)> {
    let fresh;
    let start = match (config.transfer, aligned) {
        (Transfer::Required, None) => {
            return Err(Error::Config(
                "transfer is required but no alignment checkpoint was given".into(),
            ))
        }
        (Transfer::Required | Transfer::Optional, Some(m)) => m,
        (Transfer::None, _) | (Transfer::Optional, None) => {
            fresh = Model::new(config.model_config(false, None), config.seed)?;
            &fresh
        }
    };
    let options = ProtocolOptions {
        dataset: &config.dataset_name(),
        few_shot_fraction: config.split.few_shot_fraction,
        train: &config.finetune,
        policy: &config.freeze,
        raw_scale: config.raw_scale_metrics,
    };
    multi_horizon_protocol(start, data, &config.horizons, &options, log)
}
