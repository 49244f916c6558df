use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

/// The set of parameter groups that receive gradient updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub trainable: BTreeSet<ParamGroup>,
}

impl Default for FreezePolicy {
    /// Layer-norm affines, LoRA, encoders, heads and RevIN train; attention
    /// and feed-forward weights stay frozen.
    fn default() -> Self {
        Self::of([
            ParamGroup::LayerNorm,
            ParamGroup::Lora,
            ParamGroup::Encoder,
            ParamGroup::Head,
            ParamGroup::RevIn,
        ])
    }
}

impl FreezePolicy {
    pub fn of(groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        Self {
            trainable: groups.into_iter().collect(),
        }
    }

    pub fn frozen() -> Self {
        Self::of([])
    }

    /// Every parameter trains (the "no freeze" ablation).
    pub fn all() -> Self {
        Self::of(ParamGroup::ALL)
    }

    pub fn head_only() -> Self {
        Self::of([ParamGroup::Head])
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Ok(Self::of(
            names
                .iter()
                .map(|n| n.as_ref().parse::<ParamGroup>())
                .collect::<Result<Vec<_>>>()?,
        ))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.trainable.iter().map(|g| g.as_str()).collect()
    }

    pub fn allows(&self, group: ParamGroup) -> bool {
        self.trainable.contains(&group)
    }

    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.set_trainable(|p| self.allows(p.group));
    }
}
