use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Structural category of a parameter, derived from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    AttentionWeight,
    AttentionBias,
    CrossAttention,
    FfnWeight,
    FfnBias,
    LnGamma,
    LnBeta,
    Embedding,
    Adapter,
    Prefix,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::AttentionWeight,
        ParamGroup::AttentionBias,
        ParamGroup::CrossAttention,
        ParamGroup::FfnWeight,
        ParamGroup::FfnBias,
        ParamGroup::LnGamma,
        ParamGroup::LnBeta,
        ParamGroup::Embedding,
        ParamGroup::Adapter,
        ParamGroup::Prefix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::AttentionWeight => "attention_weight",
            ParamGroup::AttentionBias => "attention_bias",
            ParamGroup::CrossAttention => "cross_attention",
            ParamGroup::FfnWeight => "ffn_weight",
            ParamGroup::FfnBias => "ffn_bias",
            ParamGroup::LnGamma => "ln_gamma",
            ParamGroup::LnBeta => "ln_beta",
            ParamGroup::Embedding => "embedding",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Prefix => "prefix",
        }
    }

    /// Classifies a hierarchical parameter name.
    pub fn classify(name: &str) -> Option<ParamGroup> {
        let parts: Vec<&str> = name.split('.').collect();
        let has = |p: &str| parts.contains(&p);
        let last = *parts.last()?;
        if has("adapter") {
            return Some(ParamGroup::Adapter);
        }
        if has("prefix") {
            return Some(ParamGroup::Prefix);
        }
        if has("cross_attn") {
            return Some(ParamGroup::CrossAttention);
        }
        if has("self_attn") {
            return match last {
                "weight" => Some(ParamGroup::AttentionWeight),
                "bias" => Some(ParamGroup::AttentionBias),
                _ => None,
            };
        }
        if has("ffn") {
            return match last {
                "weight" => Some(ParamGroup::FfnWeight),
                "bias" => Some(ParamGroup::FfnBias),
                _ => None,
            };
        }
        match last {
            "gamma" => Some(ParamGroup::LnGamma),
            "beta" => Some(ParamGroup::LnBeta),
            _ if has("embed_tokens") || has("embed_positions") || has("output_projection") => {
                Some(ParamGroup::Embedding)
            }
            _ => None,
        }
    }
}

/// Every named model tensor with its trainable flag, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter and returns its index.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if ParamGroup::classify(&name).is_none() {
            return Err(Error::InvalidArgument(format!("unclassifiable parameter name {name:?}")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("parameter {name:?} registered twice")));
        }
        let (index, _) = self.params.insert_full(name, Param { value, trainable });
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn by_index(&self, index: usize) -> (&str, &Param) {
        let (name, param) = self.params.get_index(index).expect("parameter index in range");
        (name.as_str(), param)
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Param {
        self.params.get_index_mut(index).expect("parameter index in range").1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n).collect()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name:?}")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn total_count(&self) -> u64 {
        self.params.values().map(|p| p.value.numel() as u64).sum()
    }

    pub fn trainable_count(&self) -> u64 {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.numel() as u64).sum()
    }

    /// Trainable element count per group; groups with no trainable
    /// parameters are omitted.
    pub fn trainable_breakdown(&self) -> IndexMap<ParamGroup, u64> {
        let mut out = IndexMap::new();
        for group in ParamGroup::ALL {
            let n: u64 = self
                .iter()
                .filter(|(name, p)| p.trainable && ParamGroup::classify(name) == Some(group))
                .map(|(_, p)| p.value.numel() as u64)
                .sum();
            if n > 0 {
                out.insert(group, n);
            }
        }
        out
    }

    /// True when every parameter has the same name, flag and bit pattern.
    pub fn bit_eq(&self, other: &ParameterStore) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, pa), (nb, pb))| {
                na == nb && pa.trainable == pb.trainable && pa.value.bit_eq(&pb.value)
            })
    }
}
