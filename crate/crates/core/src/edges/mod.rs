// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge-level attribution.
//!
//! A downstream component reads the residual stream through one or more
//! input channels (Q, K, V for a head, a single read for an MLP). Each
//! channel has a task direction in the residual stream, obtained by
//! mapping the answer-token channel difference back through the channel's
//! input projection. The share of that direction's projection contributed
//! by each upstream writer is its edge ratio; the ratios of one channel sum
//! to one because the residual stream is the sum of its writers.

mod graph;
mod shapley;

pub use graph::{
    prune_circuit, ranked_edges, total_importance, total_importance_pair, Alg1Mode, Circuit, Edge, EdgeGraph, EdgeKey,
    NodeScore,
};
pub use shapley::{shapley_qkv, ShapleyWeights};

use serde::{Deserialize, Serialize};

use crate::component::{Channel, ComponentId};
use crate::error::{Error, Result};
use crate::fingerprint::TargetDirection;
use crate::model::{ActivationCache, Model, ModelConfig};
use crate::ops;

/// Absolute threshold on a ratio denominator.
pub const DEGENERATE_EPS: f32 = 1e-6;

/// Writers whose output reaches `target` through the residual stream:
/// the embedding, every head and MLP of earlier layers, and for MLPs the
/// heads of the same layer.
pub fn upstream(config: &ModelConfig, target: ComponentId) -> Vec<ComponentId> {
    let (layer, same_layer_heads) = match target {
        ComponentId::Head { layer, .. } => (layer, false),
        ComponentId::Mlp { layer } => (layer, true),
        ComponentId::Logits => (config.n_layers, false),
        ComponentId::Embedding => return Vec::new(),
    };
    let mut out = vec![ComponentId::Embedding];
    for l in 0..layer {
        out.extend((0..config.n_heads).map(|h| ComponentId::head(l, h)));
        out.push(ComponentId::mlp(l));
    }
    if same_layer_heads {
        out.extend((0..config.n_heads).map(|h| ComponentId::head(layer, h)));
    }
    out
}

/// Ratios of every upstream writer for one input channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRatios {
    pub target: ComponentId,
    pub channel: Channel,
    pub sources: Vec<ComponentId>,
    pub ratios: Vec<f32>,
    pub denominator: f32,
    /// Set when `|denominator| < DEGENERATE_EPS`; all ratios are then zero.
    pub degenerate: bool,
}

impl ChannelRatios {
    pub fn sum(&self) -> f32 {
        self.ratios.iter().sum()
    }

    pub fn ratio(&self, source: ComponentId) -> Option<f32> {
        self.sources.iter().position(|&s| s == source).map(|i| self.ratios[i])
    }
}

/// Residual-space task direction of one channel: the input projection
/// applied to the answer-token channel difference.
pub fn channel_direction(model: &Model, target: ComponentId, channel: Channel, dir: &TargetDirection) -> Result<Vec<f32>> {
    let cfg = &model.config;
    match (target, channel) {
        (ComponentId::Head { layer, head }, Channel::Q | Channel::K | Channel::V)
            if layer < cfg.n_layers && head < cfg.n_heads =>
        {
            let lw = &model.layers[layer];
            let (w, delta) = match channel {
                Channel::Q => (&lw.w_q, &dir.delta_q[layer][head]),
                Channel::K => (&lw.w_k, &dir.delta_k[layer][head]),
                _ => (&lw.w_v, &dir.delta_v[layer][head]),
            };
            Ok(ops::mat_vec(w.index_axis(ndarray::Axis(0), head), delta))
        }
        (ComponentId::Mlp { layer }, Channel::Mlp) if layer < cfg.n_layers => {
            Ok(ops::mat_vec(model.layers[layer].w_in.view(), &dir.delta_u[layer]))
        }
        _ => Err(Error::Input(format!("channel {channel} does not feed {target}"))),
    }
}

fn ratios_for(
    model: &Model,
    clean: &ActivationCache,
    corrupt: &ActivationCache,
    target: ComponentId,
    channel: Channel,
    dir: &TargetDirection,
) -> Result<ChannelRatios> {
    if clean.seq_len() != corrupt.seq_len() {
        return Err(Error::Misaligned {
            clean: clean.seq_len(),
            corrupt: corrupt.seq_len(),
        });
    }
    let t = clean.last();
    let w = channel_direction(model, target, channel, dir)?;
    let (resid_c, resid_k) = match target {
        ComponentId::Head { layer, .. } => (clean.resid_pre_at(layer, t), corrupt.resid_pre_at(layer, t)),
        ComponentId::Mlp { layer } => (clean.resid_mid_at(layer, t), corrupt.resid_mid_at(layer, t)),
        other => return Err(Error::InvalidComponent(other)),
    };
    let denominator = ops::dot(&ops::sub(resid_c, resid_k), &w);
    let sources = upstream(&model.config, target);
    let degenerate = denominator.is_nan() || denominator.abs() < DEGENERATE_EPS;
    let ratios = if degenerate {
        vec![0.0; sources.len()]
    } else {
        sources
            .iter()
            .map(|&s| {
                let delta = ops::sub(clean.output_at(s, t), corrupt.output_at(s, t));
                ops::dot(&delta, &w) / denominator
            })
            .collect()
    };
    Ok(ChannelRatios {
        target,
        channel,
        sources,
        ratios,
        denominator,
        degenerate,
    })
}

/// Ratios for one attention channel of a head.
pub fn channel_edge_ratios(
    model: &Model,
    clean: &ActivationCache,
    corrupt: &ActivationCache,
    head: ComponentId,
    channel: Channel,
    dir: &TargetDirection,
) -> Result<ChannelRatios> {
    if !head.is_head() || !matches!(channel, Channel::Q | Channel::K | Channel::V) {
        return Err(Error::Input(format!("{head}/{channel} is not an attention channel")));
    }
    ratios_for(model, clean, corrupt, head, channel, dir)
}

/// Ratios for the single input of an MLP.
pub fn mlp_edge_ratios(
    model: &Model,
    clean: &ActivationCache,
    corrupt: &ActivationCache,
    mlp: ComponentId,
    dir: &TargetDirection,
) -> Result<ChannelRatios> {
    ratios_for(model, clean, corrupt, mlp, Channel::Mlp, dir)
}

/// `E_{i→j}` per source and channel: `importance · φ̂_ch · R^ch_i` for head
/// targets (`weights` given), `importance · R_i` for MLP targets.
pub fn edge_importance(
    importance: f32,
    weights: Option<&ShapleyWeights>,
    ratios: &[ChannelRatios],
) -> Vec<(ComponentId, Channel, f32)> {
    let mut out = Vec::new();
    for r in ratios {
        let mix = match weights {
            Some(w) => w.normalized_for(r.channel),
            None => 1.0,
        };
        for (&s, &ratio) in r.sources.iter().zip(&r.ratios) {
            out.push((s, r.channel, importance * mix * ratio));
        }
    }
    out
}
