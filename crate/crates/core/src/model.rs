//! The assembled model: encoders, transformer stack, optional adapters,
//! and whichever output heads the current stage needs.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, BackboneIds, FreezePolicy, LnIds, LoraConfig};
use crate::encode::{EncoderConfig, EncoderIds};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::transform::patch_count;

/// Which training stage produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Alignment,
    Forecasting,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Alignment => "alignment",
            Stage::Forecasting => "forecasting",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Stage::Init),
            "alignment" => Ok(Stage::Alignment),
            "forecasting" => Ok(Stage::Forecasting),
            other => Err(Error::Checkpoint(format!("unknown stage tag {other:?}"))),
        }
    }
}

/// Shape of the stage-2 output: horizon length and channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastShape {
    pub horizon: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t_in: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub encoder: EncoderConfig,
    pub backbone: BackboneConfig,
    pub lora: Option<LoraConfig>,
    pub alignment_head: bool,
    pub forecast: Option<ForecastShape>,
}

impl ModelConfig {
    /// `T_in = 32`, `P = 8`, `S = 4` on the two-block toy backbone, with
    /// rank-4 adapters and an alignment head.
    pub fn toy() -> Self {
        Self {
            t_in: 32,
            patch_len: 8,
            stride: 4,
            encoder: EncoderConfig::default(),
            backbone: BackboneConfig::toy(),
            lora: Some(LoraConfig::default()),
            alignment_head: true,
            forecast: None,
        }
    }

    pub fn num_patches(&self) -> usize {
        patch_count(self.t_in, self.patch_len, self.stride).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.backbone.validate()?;
        if let Some(l) = &self.lora {
            l.validate()?;
        }
        let n = patch_count(self.t_in, self.patch_len, self.stride).ok_or_else(|| {
            Error::Config(format!(
                "look-back {} cannot hold one patch of length {} with stride {}",
                self.t_in, self.patch_len, self.stride
            ))
        })?;
        if n > self.encoder.max_patches || n > self.backbone.max_positions {
            return Err(Error::Config(format!(
                "{n} patches exceed max_patches {} / max_positions {}",
                self.encoder.max_patches, self.backbone.max_positions
            )));
        }
        if let Some(f) = &self.forecast {
            if f.horizon == 0 || f.channels == 0 {
                return Err(Error::Config(
                    "forecast horizon and channel count must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Element counts behind [`Model::trainable_fraction`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCensus {
    pub trainable: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: EncoderIds,
    pub backbone: BackboneIds,
    /// `P x D`
    pub align_head: Option<ParamId>,
    /// `T_out x (T_p * D)`
    pub forecast_head: Option<ParamId>,
    pub revin: Option<LnIds>,
}

const ALIGN_HEAD: &str = "head.align";
const FORECAST_HEAD: &str = "head.forecast";

fn uniform<T: Scalar, R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let uni = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || T::of(uni.sample(rng)))
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model with every component named in `config`.
    /// All parameters start frozen; apply a [`FreezePolicy`] before training.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.backbone.d_model;
        let encoder = EncoderIds::init(&mut params, &config.encoder, config.patch_len, d, &mut rng)?;
        let backbone = BackboneIds::init(&mut params, &config.backbone, &mut rng)?;
        let mut model = Self {
            config: ModelConfig {
                lora: None,
                alignment_head: false,
                forecast: None,
                ..config.clone()
            },
            params,
            encoder,
            backbone,
            align_head: None,
            forecast_head: None,
            revin: None,
        };
        if let Some(l) = &config.lora {
            model.attach_lora(l, &mut rng)?;
        }
        if config.alignment_head {
            model.add_alignment_head(&mut rng)?;
        }
        if let Some(f) = config.forecast {
            model.add_forecast_head(f, &mut rng)?;
        }
        Ok(model)
    }

    /// Rebuilds handles for a store that already holds every tensor `config`
    /// names.
    pub fn from_store(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderIds::resolve(&params, &config.encoder)?;
        let backbone = BackboneIds::resolve(&params, config.backbone.layers, config.lora.as_ref())?;
        let align_head = config.alignment_head.then(|| params.require(ALIGN_HEAD)).transpose()?;
        let (forecast_head, revin) = match config.forecast {
            Some(_) => (
                Some(params.require(FORECAST_HEAD)?),
                Some(LnIds {
                    gamma: params.require("revin.gamma")?,
                    beta: params.require("revin.beta")?,
                }),
            ),
            None => (None, None),
        };
        Ok(Self {
            config,
            params,
            encoder,
            backbone,
            align_head,
            forecast_head,
            revin,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.backbone.d_model
    }

    pub fn num_patches(&self) -> usize {
        self.config.num_patches()
    }

    /// Attaches Q/K adapters to every block; returns the added scalar count,
    /// `L * 2 * (2 * r * D)`. New adapters are trainable.
    pub fn attach_lora<R: Rng>(&mut self, config: &LoraConfig, rng: &mut R) -> Result<usize> {
        if self.config.lora.is_some() {
            return Err(Error::LoraAttached);
        }
        let first_new = self.params.len();
        let added = backbone::lora_attach(
            &mut self.params,
            &mut self.backbone,
            self.config.backbone.d_model,
            config,
            rng,
        )?;
        for p in self.params.iter_mut().skip(first_new) {
            p.trainable = true;
        }
        self.config.lora = Some(*config);
        Ok(added)
    }

    pub fn add_alignment_head<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let d = self.d_model();
        let w = uniform::<T, _>(self.config.patch_len, d, d, rng);
        self.align_head = Some(self.params.push(ALIGN_HEAD, ParamGroup::Head, w)?);
        self.config.alignment_head = true;
        Ok(())
    }

    /// Adds a forecast head for `shape.horizon` steps and an identity RevIN
    /// affine over `shape.channels`.
    pub fn add_forecast_head<R: Rng>(&mut self, shape: ForecastShape, rng: &mut R) -> Result<()> {
        if self.forecast_head.is_some() {
            return Err(Error::Config("model already has a forecast head".into()));
        }
        let width = self.num_patches() * self.d_model();
        let w = uniform::<T, _>(shape.horizon, width, width, rng);
        self.forecast_head = Some(self.params.push(FORECAST_HEAD, ParamGroup::Head, w)?);
        self.revin = Some(LnIds {
            gamma: self
                .params
                .push("revin.gamma", ParamGroup::RevIn, Array1::<T>::ones(shape.channels))?,
            beta: self
                .params
                .push("revin.beta", ParamGroup::RevIn, Array1::<T>::zeros(shape.channels))?,
        });
        self.config.forecast = Some(shape);
        Ok(())
    }

    /// Copy without the alignment head, ready for a forecast head.
    pub fn without_alignment_head(&self) -> Result<Self> {
        let config = ModelConfig {
            alignment_head: false,
            ..self.config.clone()
        };
        Self::from_store(config, self.params.retain(|p| p.name != ALIGN_HEAD))
    }

    /// Copy without forecast head and RevIN.
    pub fn without_forecast_head(&self) -> Result<Self> {
        let config = ModelConfig {
            forecast: None,
            ..self.config.clone()
        };
        Self::from_store(
            config,
            self.params
                .retain(|p| p.name != FORECAST_HEAD && p.group != ParamGroup::RevIn),
        )
    }

    /// Stage-2 model transferred from an alignment model: same encoders,
    /// blocks and adapters, fresh forecast head.
    pub fn for_forecasting(&self, shape: ForecastShape, seed: u64) -> Result<Self> {
        let mut m = self.without_alignment_head()?;
        if m.forecast_head.is_some() {
            m = m.without_forecast_head()?;
        }
        m.add_forecast_head(shape, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(m)
    }

    pub fn apply_freeze_policy(&mut self, policy: &FreezePolicy) {
        policy.apply(&mut self.params);
    }

    /// Trainable and total element counts over the transformer stack
    /// (blocks, final layer norm, adapters).
    pub fn census(&self) -> ParamCensus {
        let (trainable, total) = self.params.count(|p| p.group.is_backbone());
        ParamCensus { trainable, total }
    }

    pub fn trainable_fraction(&self) -> f64 {
        let c = self.census();
        if c.total == 0 {
            0.0
        } else {
            c.trainable as f64 / c.total as f64
        }
    }

    /// Snapshot of every parameter value, in store order.
    pub fn snapshot(&self) -> Vec<ndarray::ArrayD<T>> {
        self.params.iter().map(|(_, p)| p.value.clone()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::<U>::new();
        for (_, p) in self.params.iter() {
            let id = params
                .push(p.name.clone(), p.group, p.value.mapv(|v| U::of(v.as_f64())))
                .expect("names are unique");
            params.get_mut(id).trainable = p.trainable;
        }
        Model::from_store(self.config.clone(), params).expect("same layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_builds_requested_components() {
        let m = Model::<f64>::new(ModelConfig::toy(), 0).unwrap();
        assert!(m.align_head.is_some() && m.forecast_head.is_none());
        assert_eq!(m.config.lora, Some(LoraConfig::default()));
        assert_eq!(m.num_patches(), 7);
        assert_eq!(m.params.mat(m.align_head.unwrap()).dim(), (8, 16));
    }

    #[test]
    fn forecasting_transfer_swaps_heads() {
        let aligned = Model::<f64>::new(ModelConfig::toy(), 0).unwrap();
        let f = aligned
            .for_forecasting(
                ForecastShape {
                    horizon: 8,
                    channels: 2,
                },
                1,
            )
            .unwrap();
        assert!(f.align_head.is_none());
        assert_eq!(f.params.mat(f.forecast_head.unwrap()).dim(), (8, 7 * 16));
        let w = f.params.require("blocks.1.attn.w_q").unwrap();
        assert_eq!(
            f.params.mat(w),
            aligned.params.mat(aligned.params.require("blocks.1.attn.w_q").unwrap())
        );
        let back = f.without_forecast_head().unwrap();
        assert!(back.revin.is_none());
    }

    #[test]
    fn rejects_look_back_shorter_than_patch() {
        let cfg = ModelConfig {
            t_in: 4,
            ..ModelConfig::toy()
        };
        assert!(Model::<f32>::new(cfg, 0).is_err());
    }
}
