// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Where an intervention acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Site {
    /// A head's `z` (d_head).
    Head { layer: usize, head: usize },
    /// An MLP's post-activation hidden (d_mlp).
    Mlp { layer: usize },
    /// The residual stream entering block `layer`; `layer == n_layers`
    /// addresses the stream before the final LayerNorm.
    Residual { layer: usize },
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            Site::Mlp { layer } => write!(f, "m{layer}"),
            Site::Residual { layer } => write!(f, "resid{layer}"),
        }
    }
}

/// Token positions an intervention applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    All,
    Last,
    At(usize),
}

impl Position {
    pub fn matches(&self, pos: usize, seq_len: usize) -> bool {
        match *self {
            Position::All => true,
            Position::Last => pos + 1 == seq_len,
            Position::At(p) => p == pos,
        }
    }
}

/// The four supported edits. The `Z` kinds act in a head's or MLP's
/// native space, the residual kinds on the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionKind {
    ReplaceZ,
    AddToZ,
    ReplaceResidual,
    AddToResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub site: Site,
    pub position: Position,
    pub kind: InterventionKind,
    pub payload: Vec<f32>,
    pub scale: f32,
}

impl Intervention {
    pub fn replace_z(layer: usize, head: usize, position: Position, z: Vec<f32>) -> Self {
        Intervention {
            site: Site::Head { layer, head },
            position,
            kind: InterventionKind::ReplaceZ,
            payload: z,
            scale: 1.0,
        }
    }

    pub fn add_to_z(layer: usize, head: usize, position: Position, delta: Vec<f32>) -> Self {
        Intervention {
            site: Site::Head { layer, head },
            position,
            kind: InterventionKind::AddToZ,
            payload: delta,
            scale: 1.0,
        }
    }

    pub fn replace_mlp(layer: usize, position: Position, hidden: Vec<f32>) -> Self {
        Intervention {
            site: Site::Mlp { layer },
            position,
            kind: InterventionKind::ReplaceZ,
            payload: hidden,
            scale: 1.0,
        }
    }

    pub fn replace_residual(layer: usize, position: Position, resid: Vec<f32>) -> Self {
        Intervention {
            site: Site::Residual { layer },
            position,
            kind: InterventionKind::ReplaceResidual,
            payload: resid,
            scale: 1.0,
        }
    }

    pub fn add_to_residual(layer: usize, position: Position, delta: Vec<f32>) -> Self {
        Intervention {
            site: Site::Residual { layer },
            position,
            kind: InterventionKind::AddToResidual,
            payload: delta,
            scale: 1.0,
        }
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        let fail = |reason: String| Error::Intervention {
            site: self.site.to_string(),
            reason,
        };
        let (dims, native) = match self.site {
            Site::Head { layer, head } => {
                if layer >= config.n_layers || head >= config.n_heads {
                    return Err(fail("no such head".into()));
                }
                (config.d_head, true)
            }
            Site::Mlp { layer } => {
                if layer >= config.n_layers {
                    return Err(fail("no such layer".into()));
                }
                (config.d_mlp, true)
            }
            Site::Residual { layer } => {
                if layer > config.n_layers {
                    return Err(fail("no such residual layer".into()));
                }
                (config.d_model, false)
            }
        };
        let kind_native = matches!(self.kind, InterventionKind::ReplaceZ | InterventionKind::AddToZ);
        if kind_native != native {
            return Err(fail(format!("{:?} does not apply to this site", self.kind)));
        }
        if self.payload.len() != dims {
            return Err(fail(format!(
                "payload has {} dims, site expects {dims}",
                self.payload.len()
            )));
        }
        if let Position::At(p) = self.position {
            if p >= seq_len {
                return Err(fail(format!("position {p} outside sequence of {seq_len}")));
            }
        }
        if !self.scale.is_finite() || self.payload.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite payload".into()));
        }
        Ok(())
    }

    pub(crate) fn apply(&self, x: &mut [f32]) {
        match self.kind {
            InterventionKind::ReplaceZ | InterventionKind::ReplaceResidual => {
                for (xi, p) in x.iter_mut().zip(&self.payload) {
                    *xi = p * self.scale;
                }
            }
            InterventionKind::AddToZ | InterventionKind::AddToResidual => {
                for (xi, p) in x.iter_mut().zip(&self.payload) {
                    *xi += p * self.scale;
                }
            }
        }
    }
}

/// Which of the three attention inputs come from the clean run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CoalitionSpec {
    pub q: bool,
    pub k: bool,
    pub v: bool,
}

impl CoalitionSpec {
    pub const EMPTY: CoalitionSpec = CoalitionSpec {
        q: false,
        k: false,
        v: false,
    };
    pub const FULL: CoalitionSpec = CoalitionSpec {
        q: true,
        k: true,
        v: true,
    };

    /// Bit 0 = Q, bit 1 = K, bit 2 = V.
    pub fn from_bits(bits: u8) -> Self {
        CoalitionSpec {
            q: bits & 1 != 0,
            k: bits & 2 != 0,
            v: bits & 4 != 0,
        }
    }

    pub fn bits(&self) -> u8 {
        self.q as u8 | (self.k as u8) << 1 | (self.v as u8) << 2
    }

    pub fn all() -> impl Iterator<Item = CoalitionSpec> {
        (0u8..8).map(CoalitionSpec::from_bits)
    }

    pub fn channels(&self) -> BTreeSet<char> {
        let mut s = BTreeSet::new();
        if self.q {
            s.insert('Q');
        }
        if self.k {
            s.insert('K');
        }
        if self.v {
            s.insert('V');
        }
        s
    }
}
