//! Losses, the optimizer, both training stages and the gradient checker.

mod gradcheck;
mod loops;
mod loss;
mod optim;
mod passes;


use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{gradient_check, relative_error, GradCheckEntry, GradCheckReport, EPS_RANGE};
pub use loops::{run_alignment, run_lp_ft, AlignmentSummary, LpFtSummary};
pub use loss::{error_sums, mae, mse};
pub use optim::{Optimizer, OptimizerKind};
pub use passes::{
    alignment_loss, alignment_samples, forecast_forward, forecast_loss, window_tokens, AlignSample, BatchSampler,
    ForecastSample,
};

/// Validation-driven stopping for the fine-tuning phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopping {
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Steps between validation evaluations.
    pub eval_every: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            patience: 3,
            eval_every: 50,
        }
    }
}

/// Hyperparameters for one stage. Lengths are counted in optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Windows per step; every channel of a window is one sample.
    pub batch_size: usize,
    /// Alignment-stage steps.
    pub steps: usize,
    /// Linear-probing steps (forecast head only).
    pub lp_steps: usize,
    /// Fine-tuning steps (the freeze policy's trainable set).
    pub ft_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub early_stopping: Option<EarlyStopping>,
    /// Fine-tune every group, attention and feed-forward included.
    pub unfreeze_all_in_ft: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 200,
            lp_steps: 100,
            ft_steps: 200,
            seed: 0,
            optimizer: OptimizerKind::default(),
            early_stopping: None,
            unfreeze_all_in_ft: false,
        }
    }
}

impl TrainConfig {
    pub fn validate_alignment(&self) -> Result<()> {
        self.validate_common()?;
        if self.steps == 0 {
            return Err(Error::Config("alignment needs at least one step".into()));
        }
        Ok(())
    }

    pub fn validate_forecasting(&self) -> Result<()> {
        self.validate_common()?;
        if self.lp_steps == 0 && self.ft_steps == 0 {
            return Err(Error::Config(
                "linear probing and fine-tuning steps are both zero".into(),
            ));
        }
        if let Some(es) = self.early_stopping {
            if es.eval_every == 0 || es.patience == 0 {
                return Err(Error::Config(
                    "early stopping needs eval_every and patience of at least 1".into(),
                ));
            }
        }
        Ok(())
    }

    fn validate_common(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::Config("adam needs betas in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_mse: Option<f64>,
}

/// Receives training-log records as they are produced.
pub trait LogSink {
    fn record(&mut self, record: &LogRecord) -> Result<()>;
}

impl LogSink for Vec<LogRecord> {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards every record.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl LogSink for NullSink {
    fn record(&mut self, _: &LogRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes one JSON object per line.
#[derive(Debug)]
pub struct JsonLines<W: Write> {
    writer: W,
}

impl<W: Write> JsonLines<W> {
    pub fn new(writer: W) -> Self {
        Self { writer }
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl<W: Write> LogSink for JsonLines<W> {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(self.writer, "{line}").map_err(|e| Error::io("training log", e))
    }
}
