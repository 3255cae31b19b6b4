// SPDX-License-Identifier: MIT OR Apache-2.0

//! Identifiers for the nodes of the computational graph.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// A node of the residual-stream graph.
///
/// `Ord` groups by kind; use [`ComponentId::order_key`] for the forward
/// order (embedding, per layer the heads then the MLP, logits last).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComponentId {
    Embedding,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

impl ComponentId {
    pub fn head(layer: usize, head: usize) -> Self {
        ComponentId::Head { layer, head }
    }

    pub fn mlp(layer: usize) -> Self {
        ComponentId::Mlp { layer }
    }

    pub fn layer(&self) -> Option<usize> {
        match *self {
            ComponentId::Head { layer, .. } | ComponentId::Mlp { layer } => Some(layer),
            _ => None,
        }
    }

    /// Topological rank; every edge goes from a lower to a strictly higher key.
    pub fn order_key(&self, n_heads: usize) -> usize {
        match *self {
            ComponentId::Embedding => 0,
            ComponentId::Head { layer, head } => 1 + layer * (n_heads + 1) + head,
            ComponentId::Mlp { layer } => 1 + layer * (n_heads + 1) + n_heads,
            ComponentId::Logits => usize::MAX,
        }
    }

    /// `(layer, head index)` tuple used for deterministic tie-breaking.
    /// The embedding sorts first, MLPs after the heads of their layer.
    pub fn sort_tuple(&self) -> (i64, i64) {
        match *self {
            ComponentId::Embedding => (-1, 0),
            ComponentId::Head { layer, head } => (layer as i64, head as i64),
            ComponentId::Mlp { layer } => (layer as i64, i64::MAX - 1),
            ComponentId::Logits => (i64::MAX, i64::MAX),
        }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, ComponentId::Head { .. })
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Embedding => write!(f, "input"),
            ComponentId::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            ComponentId::Mlp { layer } => write!(f, "m{layer}"),
            ComponentId::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::Input(format!("unrecognized component id `{s}`"));
        match s {
            "input" => return Ok(ComponentId::Embedding),
            "logits" => return Ok(ComponentId::Logits),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix('a') {
            let (layer, head) = rest.split_once(".h").ok_or_else(bad)?;
            return Ok(ComponentId::Head {
                layer: layer.parse().map_err(|_| bad())?,
                head: head.parse().map_err(|_| bad())?,
            });
        }
        if let Some(rest) = s.strip_prefix('m') {
            return Ok(ComponentId::Mlp {
                layer: rest.parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }
}

impl Serialize for ComponentId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Input channel of a downstream component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Q,
    K,
    V,
    /// The single residual read of an MLP.
    Mlp,
    /// The final residual read by the unembedding.
    Out,
}

impl Channel {
    pub const QKV: [Channel; 3] = [Channel::Q, Channel::K, Channel::V];
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Channel::Q => "q",
            Channel::K => "k",
            Channel::V => "v",
            Channel::Mlp => "mlp",
            Channel::Out => "out",
        };
        f.write_str(s)
    }
}
