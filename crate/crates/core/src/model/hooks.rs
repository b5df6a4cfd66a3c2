// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named hook points, the activation cache, and residual-stream interventions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    /// Attention head outputs before the output projection, heads flattened.
    AttnZ,
    /// Residual stream after the whole block.
    ResidPost,
}

impl HookKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HookKind::AttnZ => "attn_z",
            HookKind::ResidPost => "resid_post",
        }
    }
}

impl fmt::Display for HookKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HookKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn_z" => Ok(HookKind::AttnZ),
            "resid_post" => Ok(HookKind::ResidPost),
            _ => Err(Error::UnknownHook { name: s.to_owned() }),
        }
    }
}

/// A location in the forward pass, e.g. `blocks.16.hook_resid_post`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HookPoint {
    pub kind: HookKind,
    pub layer: usize,
}

impl HookPoint {
    pub fn resid_post(layer: usize) -> Self {
        HookPoint {
            kind: HookKind::ResidPost,
            layer,
        }
    }

    pub fn attn_z(layer: usize) -> Self {
        HookPoint {
            kind: HookKind::AttnZ,
            layer,
        }
    }

    /// All hooks of the given kinds for an `n_layers` model, ordered by layer.
    pub fn all(n_layers: usize, kinds: &[HookKind]) -> Vec<HookPoint> {
        (0..n_layers)
            .flat_map(|layer| kinds.iter().map(move |&kind| HookPoint { kind, layer }))
            .collect()
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            HookKind::ResidPost => write!(f, "blocks.{}.hook_resid_post", self.layer),
            HookKind::AttnZ => write!(f, "blocks.{}.attn.hook_z", self.layer),
        }
    }
}

impl FromStr for HookPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownHook { name: s.to_owned() };
        let rest = s.strip_prefix("blocks.").ok_or_else(unknown)?;
        let (layer, suffix) = rest.split_once('.').ok_or_else(unknown)?;
        if layer.is_empty() || !layer.bytes().all(|b| b.is_ascii_digit()) {
            return Err(unknown());
        }
        let layer: usize = layer.parse().map_err(|_| unknown())?;
        let kind = match suffix {
            "hook_resid_post" => HookKind::ResidPost,
            "attn.hook_z" => HookKind::AttnZ,
            _ => return Err(unknown()),
        };
        Ok(HookPoint { kind, layer })
    }
}

impl Serialize for HookPoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HookPoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which token positions an intervention touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionPositions {
    All,
    /// Positions `start..` only.
    StartingAt(usize),
}

impl InterventionPositions {
    pub fn contains(self, pos: usize) -> bool {
        match self {
            InterventionPositions::All => true,
            InterventionPositions::StartingAt(start) => pos >= start,
        }
    }
}

/// Adds `scale * delta` to the residual stream at `target`.
#[derive(Debug, Clone)]
pub struct InterventionHook {
    pub target: HookPoint,
    pub delta: Tensor,
    pub scale: f32,
    pub positions: InterventionPositions,
}

/// Captured activations from one forward pass, keyed by hook point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationCache {
    entries: BTreeMap<HookPoint, Tensor>,
}

impl ActivationCache {
    pub(crate) fn insert(&mut self, hook: HookPoint, t: Tensor) {
        self.entries.insert(hook, t);
    }

    pub fn get(&self, hook: &HookPoint) -> Option<&Tensor> {
        self.entries.get(hook)
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Tensor> {
        name.parse().ok().and_then(|h: HookPoint| self.entries.get(&h))
    }

    pub fn hooks(&self) -> impl Iterator<Item = &HookPoint> {
        self.entries.keys()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().map(ToString::to_string).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_entries(self) -> BTreeMap<HookPoint, Tensor> {
        self.entries
    }
}
