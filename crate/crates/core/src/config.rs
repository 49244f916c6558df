//! Run configuration: one JSON document covering data, model and training.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FreezePolicy, LoraConfig};
use crate::data::{SplitSpec, SynthSpec};
use crate::encode::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ForecastShape, ModelConfig};
use crate::train::TrainConfig;

/// Where the series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// CSV in the ingestion format; relative paths resolve against the data
    /// directory.
    Csv(PathBuf),
    Synth(SynthSpec),
}

/// Whether fine-tuning starts from an alignment checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transfer {
    /// An alignment checkpoint must be supplied.
    #[default]
    Required,
    /// Use the checkpoint when given, otherwise start from random weights.
    Optional,
    /// Always start from random weights (the no-alignment ablation).
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub threshold: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    /// Name written into reports; defaults to the file stem or "synthetic".
    pub dataset: Option<String>,
    pub t_in: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub horizons: Vec<usize>,
    pub split: SplitSpec,
    pub backbone: BackboneConfig,
    /// Trainable parameter groups.
    pub freeze: FreezePolicy,
    pub lora: Option<LoraConfig>,
    pub encoder: EncoderConfig,
    pub alignment: TrainConfig,
    pub finetune: TrainConfig,
    pub transfer: Transfer,
    /// Model-initialization seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Report metrics in raw units instead of train-scaler units.
    pub raw_scale_metrics: bool,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            dataset: None,
            t_in: 336,
            patch_len: 16,
            stride: 8,
            horizons: vec![96, 192, 336, 720],
            split: SplitSpec::default(),
            backbone: BackboneConfig::gpt2_first6(),
            freeze: FreezePolicy::default(),
            lora: Some(LoraConfig::default()),
            encoder: EncoderConfig::default(),
            alignment: TrainConfig::default(),
            finetune: TrainConfig::default(),
            transfer: Transfer::default(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            raw_scale_metrics: false,
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is plain data")
    }

    /// Checks everything a run needs before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.t_in < self.patch_len {
            return Err(Error::Config(format!(
                "look-back {} is shorter than the patch length {}",
                self.t_in, self.patch_len
            )));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config(format!(
                "every horizon must be at least 1, got {:?}",
                self.horizons
            )));
        }
        self.split.validate()?;
        self.model_config(false, None).validate()?;
        self.alignment.validate_alignment()?;
        self.finetune.validate_forecasting()?;
        if let Some(DataSource::Synth(spec)) = &self.data {
            spec.validate()?;
        }
        let (lo, hi) = crate::train::EPS_RANGE;
        if !(lo..=hi).contains(&self.gradcheck.eps) {
            return Err(Error::Config(format!("gradcheck eps must lie in [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn model_config(&self, alignment_head: bool, forecast: Option<ForecastShape>) -> ModelConfig {
        ModelConfig {
            t_in: self.t_in,
            patch_len: self.patch_len,
            stride: self.stride,
            encoder: self.encoder.clone(),
            backbone: self.backbone.clone(),
            lora: self.lora,
            alignment_head,
            forecast,
        }
    }

    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.dataset {
            return name.clone();
        }
        match &self.data {
            Some(DataSource::Csv(p)) => p
                .file_stem()
                .map_or("dataset".into(), |s| s.to_string_lossy().into_owned()),
            _ => "synthetic".into(),
        }
    }
}

/// `checkpoints/`, `reports/` and `logs/` under one root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn create(&self) -> Result<()> {
        for dir in [self.checkpoints(), self.reports(), self.logs()] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_benchmark_settings() {
        let c = RunConfig::default();
        assert_eq!((c.t_in, c.patch_len, c.stride), (336, 16, 8));
        assert_eq!(c.horizons, vec![96, 192, 336, 720]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(
            r#"{"t_in": 32, "patch_len": 8, "stride": 4, "horizons": [8],
            "freeze": {"trainable": ["layer_norm", "head"]}}"#,
        )
        .unwrap();
        assert_eq!(c.t_in, 32);
        assert_eq!(c.split, SplitSpec::default());
        assert_eq!(c.freeze.names().len(), 2);
        assert!(c.validate().is_ok());
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_json(r#"{"t_inn": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"freeze": {"trainable": ["attn_only"]}}"#).is_err());
        for bad in [r#"{"t_in": 8}"#, r#"{"horizons": []}"#, r#"{"horizons": [0]}"#] {
            let c = RunConfig::from_json(bad).unwrap();
            assert!(c.validate().is_err(), "{bad}");
        }
    }
}
