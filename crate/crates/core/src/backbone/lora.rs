use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{block_prefix, BackboneIds, LoraIds};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

/// Low-rank adapter settings for the query and key projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::Config(format!(
                "LoRA rank must be at least 1, got {}",
                self.rank
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("LoRA alpha must be finite".into()));
        }
        Ok(())
    }
}

/// Adds a Q and a K adapter to every block: `A ~ U(-1/r, 1/r)` of shape
/// `r x D`, and `B = 0` of shape `D x r`, so the forward pass is unchanged.
/// Returns the number of added scalars.
pub(crate) fn attach<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    ids: &mut BackboneIds,
    d_model: usize,
    config: &LoraConfig,
    rng: &mut R,
) -> Result<usize> {
    config.validate()?;
    if ids.lora_scaling.is_some() {
        return Err(Error::LoraAttached);
    }
    let r = config.rank;
    let bound = 1.0 / r as f64;
    let uni = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let before = store.count(|_| true).1;
    for (i, block) in ids.blocks.iter_mut().enumerate() {
        let p = block_prefix(i);
        for target in ["q", "k"] {
            let a = store.push(
                format!("{p}.lora_{target}.a"),
                ParamGroup::Lora,
                Array2::from_shape_simple_fn((r, d_model), || T::of(uni.sample(rng))),
            )?;
            let b = store.push(
                format!("{p}.lora_{target}.b"),
                ParamGroup::Lora,
                Array2::<T>::zeros((d_model, r)),
            )?;
            let adapter = Some(LoraIds { a, b });
            match target {
                "q" => block.lora_q = adapter,
                _ => block.lora_k = adapter,
            }
        }
    }
    ids.lora_scaling = Some(config.scaling());
    Ok(store.count(|_| true).1 - before)
}
