//! Named parameter tensors with freeze flags, and gradient buffers keyed by
//! the same ids.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{
    ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, ArrayViewMut3, Dimension, IxDyn,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Coarse grouping used by freeze policies and parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Token convolution, positional and temporal tables.
    Encoder,
    /// Q, K, V and output projections.
    Attention,
    FeedForward,
    /// Layer-norm affines, including the final one.
    LayerNorm,
    Lora,
    /// Alignment or forecast output layer.
    Head,
    #[serde(rename = "revin")]
    RevIn,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Encoder,
        ParamGroup::Attention,
        ParamGroup::FeedForward,
        ParamGroup::LayerNorm,
        ParamGroup::Lora,
        ParamGroup::Head,
        ParamGroup::RevIn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Attention => "attention",
            ParamGroup::FeedForward => "feed_forward",
            ParamGroup::LayerNorm => "layer_norm",
            ParamGroup::Lora => "lora",
            ParamGroup::Head => "head",
            ParamGroup::RevIn => "revin",
        }
    }

    /// Groups that belong to the transformer stack itself.
    pub fn is_backbone(self) -> bool {
        matches!(
            self,
            ParamGroup::Attention | ParamGroup::FeedForward | ParamGroup::LayerNorm | ParamGroup::Lora
        )
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(ParamGroup::Encoder),
            "attention" => Ok(ParamGroup::Attention),
            "feed_forward" | "ffn" => Ok(ParamGroup::FeedForward),
            "layer_norm" | "ln" => Ok(ParamGroup::LayerNorm),
            "lora" => Ok(ParamGroup::Lora),
            "head" | "heads" => Ok(ParamGroup::Head),
            "revin" => Ok(ParamGroup::RevIn),
            other => Err(Error::UnknownGroup(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered parameter collection. Ids are positions and stay valid
/// until the store is rebuilt with [`ParamStore::retain`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn push<D: Dimension>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: ndarray::Array<T, D>,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            value: value.into_dyn(),
            trainable: false,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, T> {
        view_as(&self.params[id.0])
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, T> {
        view_as(&self.params[id.0])
    }

    pub fn tensor3(&self, id: ParamId) -> ArrayView3<'_, T> {
        view_as(&self.params[id.0])
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, T> {
        let p = &mut self.params[id.0];
        p.value.view_mut().into_dimensionality().expect("rank-2 parameter")
    }

    /// Keeps the parameters matching `keep`, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(&Param<T>) -> bool) -> Self {
        let mut out = Self::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            out.by_name.insert(p.name.clone(), out.params.len());
            out.params.push(p.clone());
        }
        out
    }

    pub fn set_trainable(&mut self, mut rule: impl FnMut(&Param<T>) -> bool) {
        for p in &mut self.params {
            p.trainable = rule(p);
        }
    }

    /// Element counts `(trainable, total)` over parameters matching `filter`.
    pub fn count(&self, mut filter: impl FnMut(&Param<T>) -> bool) -> (usize, usize) {
        self.params.iter().filter(|p| filter(p)).fold((0, 0), |(t, n), p| {
            let len = p.value.len();
            (t + if p.trainable { len } else { 0 }, n + len)
        })
    }
}

fn view_as<T, D: Dimension>(p: &Param<T>) -> ndarray::ArrayView<'_, T, D> {
    p.value
        .view()
        .into_dimensionality()
        .unwrap_or_else(|_| panic!("parameter {} has shape {:?}", p.name, p.value.shape()))
}

/// Gradient buffers, allocated only for parameters that were trainable when
/// the buffer was created.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn for_trainable(store: &ParamStore<T>) -> Self {
        Self {
            slots: store
                .params
                .iter()
                .map(|p| p.trainable.then(|| ArrayD::zeros(IxDyn(p.value.shape()))))
                .collect(),
        }
    }

    #[inline]
    pub fn wants(&self, id: ParamId) -> bool {
        self.slots[id.0].is_some()
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ArrayD<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Adds `g` into the buffer for `id`; a no-op for untracked parameters.
    pub fn add<D: Dimension>(&mut self, id: ParamId, g: ndarray::ArrayView<'_, T, D>) {
        if let Some(slot) = self.slots[id.0].as_mut() {
            *slot += &g.into_dyn();
        }
    }

    pub fn vec_mut(&mut self, id: ParamId) -> Option<ArrayViewMut1<'_, T>> {
        self.slots[id.0]
            .as_mut()
            .map(|s| s.view_mut().into_dimensionality().expect("rank-1 gradient"))
    }

    pub fn mat_mut(&mut self, id: ParamId) -> Option<ArrayViewMut2<'_, T>> {
        self.slots[id.0]
            .as_mut()
            .map(|s| s.view_mut().into_dimensionality().expect("rank-2 gradient"))
    }

    pub fn tensor3_mut(&mut self, id: ParamId) -> Option<ArrayViewMut3<'_, T>> {
        self.slots[id.0]
            .as_mut()
            .map(|s| s.view_mut().into_dimensionality().expect("rank-3 gradient"))
    }
}
