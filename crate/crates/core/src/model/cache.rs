// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array2, Array3};

use crate::component::ComponentId;

/// Every intermediate tensor of one forward pass.
///
/// Per-layer tensors are indexed `[layer]`; per-head tensors are
/// `[layer][head, pos, dim]`. A head's output `attn_out` already contains
/// `1/n_heads` of the layer's output bias, so for every layer and position
/// `resid_post = resid_pre + sum_h attn_out[h] + mlp_out` holds exactly up
/// to rounding.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub tokens: Vec<u32>,
    /// Token plus position embedding, `[pos, d_model]`.
    pub embed: Array2<f32>,
    pub resid_pre: Vec<Array2<f32>>,
    pub resid_mid: Vec<Array2<f32>>,
    pub resid_post: Vec<Array2<f32>>,
    pub q: Vec<Array3<f32>>,
    pub k: Vec<Array3<f32>>,
    pub v: Vec<Array3<f32>>,
    /// Attention-weighted value sums, before `W_O`.
    pub z: Vec<Array3<f32>>,
    /// `[head, query pos, key pos]`, zero above the diagonal.
    pub pattern: Vec<Array3<f32>>,
    pub attn_out: Vec<Array3<f32>>,
    /// MLP pre-activation (`ln2(x) W_in + b_in`).
    pub mlp_pre: Vec<Array2<f32>>,
    /// MLP post-activation, before `W_out`.
    pub mlp_hidden: Vec<Array2<f32>>,
    pub mlp_out: Vec<Array2<f32>>,
}

fn row3(a: &Array3<f32>, i: usize, j: usize) -> &[f32] {
    let (_, n1, n2) = a.dim();
    let flat = a.as_slice().expect("standard layout");
    let start = (i * n1 + j) * n2;
    &flat[start..start + n2]
}

fn row2(a: &Array2<f32>, i: usize) -> &[f32] {
    let n = a.ncols();
    &a.as_slice().expect("standard layout")[i * n..(i + 1) * n]
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn last(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn n_layers(&self) -> usize {
        self.resid_pre.len()
    }

    pub fn q_at(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        row3(&self.q[layer], head, pos)
    }

    pub fn k_at(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        row3(&self.k[layer], head, pos)
    }

    pub fn v_at(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        row3(&self.v[layer], head, pos)
    }

    pub fn z_at(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        row3(&self.z[layer], head, pos)
    }

    pub fn pattern_row(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        row3(&self.pattern[layer], head, pos)
    }

    pub fn attn_out_at(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        row3(&self.attn_out[layer], head, pos)
    }

    pub fn embed_at(&self, pos: usize) -> &[f32] {
        row2(&self.embed, pos)
    }

    pub fn resid_pre_at(&self, layer: usize, pos: usize) -> &[f32] {
        row2(&self.resid_pre[layer], pos)
    }

    pub fn resid_mid_at(&self, layer: usize, pos: usize) -> &[f32] {
        row2(&self.resid_mid[layer], pos)
    }

    pub fn resid_post_at(&self, layer: usize, pos: usize) -> &[f32] {
        row2(&self.resid_post[layer], pos)
    }

    /// Residual stream after the last block, before the final LayerNorm.
    pub fn final_resid_at(&self, pos: usize) -> &[f32] {
        self.resid_post_at(self.n_layers() - 1, pos)
    }

    pub fn mlp_pre_at(&self, layer: usize, pos: usize) -> &[f32] {
        row2(&self.mlp_pre[layer], pos)
    }

    pub fn mlp_hidden_at(&self, layer: usize, pos: usize) -> &[f32] {
        row2(&self.mlp_hidden[layer], pos)
    }

    pub fn mlp_out_at(&self, layer: usize, pos: usize) -> &[f32] {
        row2(&self.mlp_out[layer], pos)
    }

    /// Residual-space output a component writes at `pos`.
    pub fn output_at(&self, c: ComponentId, pos: usize) -> &[f32] {
        match c {
            ComponentId::Embedding => self.embed_at(pos),
            ComponentId::Head { layer, head } => self.attn_out_at(layer, head, pos),
            ComponentId::Mlp { layer } => self.mlp_out_at(layer, pos),
            ComponentId::Logits => panic!("logits node writes no residual output"),
        }
    }

    /// Native-space output: `z` for heads, the MLP hidden for MLPs, the
    /// embedding itself for the embedding node.
    pub fn native_at(&self, c: ComponentId, pos: usize) -> &[f32] {
        match c {
            ComponentId::Embedding => self.embed_at(pos),
            ComponentId::Head { layer, head } => self.z_at(layer, head, pos),
            ComponentId::Mlp { layer } => self.mlp_hidden_at(layer, pos),
            ComponentId::Logits => panic!("logits node has no native output"),
        }
    }
}
