// SPDX-License-Identifier: MIT OR Apache-2.0

//! Answer-token directions and node-level attribution.
//!
//! An answer token is run alone as `[BOS, token]`. The difference between
//! the representations of the two competing answers gives a target
//! direction in the residual stream and, per head and MLP, in the spaces
//! the components read from. Each component is scored by projecting its
//! clean-minus-corrupt native output onto the target pulled back through
//! its output projection.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::component::ComponentId;
use crate::datasets::TokenizedPair;
use crate::error::{Error, Result};
use crate::model::{ActivationCache, Model};
use crate::ops;
use crate::tokenizer::Tokenizer;

/// Below this norm a target direction is rejected.
pub const DEGENERATE_NORM: f32 = 1e-8;

/// Everything read from one position of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerRep {
    /// Residual stream after each block, `[layer][d_model]`.
    pub resid: Vec<Vec<f32>>,
    /// `[layer][head][d_head]`.
    pub q: Vec<Vec<Vec<f32>>>,
    pub k: Vec<Vec<Vec<f32>>>,
    pub v: Vec<Vec<Vec<f32>>>,
    pub z: Vec<Vec<Vec<f32>>>,
    /// MLP pre-activation, `[layer][d_mlp]`.
    pub mlp_pre: Vec<Vec<f32>>,
}

impl AnswerRep {
    pub fn from_cache(cache: &ActivationCache, pos: usize) -> Self {
        let n_layers = cache.n_layers();
        let n_heads = cache.q[0].dim().0;
        let per_head = |f: &dyn Fn(usize, usize) -> Vec<f32>| -> Vec<Vec<Vec<f32>>> {
            (0..n_layers).map(|l| (0..n_heads).map(|h| f(l, h)).collect()).collect()
        };
        AnswerRep {
            resid: (0..n_layers).map(|l| cache.resid_post_at(l, pos).to_vec()).collect(),
            q: per_head(&|l, h| cache.q_at(l, h, pos).to_vec()),
            k: per_head(&|l, h| cache.k_at(l, h, pos).to_vec()),
            v: per_head(&|l, h| cache.v_at(l, h, pos).to_vec()),
            z: per_head(&|l, h| cache.z_at(l, h, pos).to_vec()),
            mlp_pre: (0..n_layers).map(|l| cache.mlp_pre_at(l, pos).to_vec()).collect(),
        }
    }

    /// Final residual, before the last LayerNorm.
    pub fn final_resid(&self) -> &[f32] {
        self.resid.last().expect("at least one layer")
    }
}

/// Runs `[BOS, token]` and reads the answer position.
pub fn answer_representation(model: &Model, token: u32) -> Result<AnswerRep> {
    let (_, cache) = model.forward_cached(&[model.config.bos(), token])?;
    Ok(AnswerRep::from_cache(&cache, 1))
}

fn diff2(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<Vec<f32>> {
    a.iter().zip(b).map(|(x, y)| ops::sub(x, y)).collect()
}

fn diff3(a: &[Vec<Vec<f32>>], b: &[Vec<Vec<f32>>]) -> Vec<Vec<Vec<f32>>> {
    a.iter().zip(b).map(|(x, y)| diff2(x, y)).collect()
}

/// Differences of two representations at every layer and in every head's
/// query, key, value and output spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDirection {
    /// `[layer][d_model]`; the last entry is the final-layer direction.
    pub delta_r: Vec<Vec<f32>>,
    pub delta_q: Vec<Vec<Vec<f32>>>,
    pub delta_k: Vec<Vec<Vec<f32>>>,
    pub delta_v: Vec<Vec<Vec<f32>>>,
    pub delta_z: Vec<Vec<Vec<f32>>>,
    /// MLP pre-activation difference, `[layer][d_mlp]`.
    pub delta_u: Vec<Vec<f32>>,
    pub norm_l: f32,
}

impl TargetDirection {
    pub fn from_reps(plus: &AnswerRep, minus: &AnswerRep) -> Self {
        let delta_r = diff2(&plus.resid, &minus.resid);
        let norm_l = ops::norm(delta_r.last().expect("at least one layer"));
        TargetDirection {
            delta_r,
            delta_q: diff3(&plus.q, &minus.q),
            delta_k: diff3(&plus.k, &minus.k),
            delta_v: diff3(&plus.v, &minus.v),
            delta_z: diff3(&plus.z, &minus.z),
            delta_u: diff2(&plus.mlp_pre, &minus.mlp_pre),
            norm_l,
        }
    }

    pub fn final_delta(&self) -> &[f32] {
        self.delta_r.last().expect("at least one layer")
    }

    /// `Δr / ‖Δr‖` at the final layer.
    pub fn unit(&self) -> Result<Vec<f32>> {
        if self.norm_l.is_nan() || self.norm_l < DEGENERATE_NORM {
            return Err(Error::DegenerateTarget { norm: self.norm_l });
        }
        Ok(ops::scale(self.final_delta(), 1.0 / self.norm_l))
    }

    pub fn scaled(&self, s: f32) -> Self {
        let s2 = |a: &[Vec<f32>]| a.iter().map(|x| ops::scale(x, s)).collect::<Vec<_>>();
        let s3 = |a: &[Vec<Vec<f32>>]| a.iter().map(|x| s2(x)).collect::<Vec<_>>();
        let delta_r = s2(&self.delta_r);
        let norm_l = ops::norm(delta_r.last().expect("at least one layer"));
        TargetDirection {
            delta_r,
            delta_q: s3(&self.delta_q),
            delta_k: s3(&self.delta_k),
            delta_v: s3(&self.delta_v),
            delta_z: s3(&self.delta_z),
            delta_u: s2(&self.delta_u),
            norm_l,
        }
    }

    /// Elementwise mean of several directions.
    pub fn mean(dirs: &[TargetDirection]) -> Result<Self> {
        let first = dirs.first().ok_or_else(|| Error::Dataset("no directions to average".into()))?;
        let inv = 1.0 / dirs.len() as f32;
        let mut acc = first.scaled(0.0);
        let add2 = |acc: &mut [Vec<f32>], x: &[Vec<f32>]| {
            for (a, v) in acc.iter_mut().zip(x) {
                ops::axpy(a, inv, v);
            }
        };
        for d in dirs {
            add2(&mut acc.delta_r, &d.delta_r);
            add2(&mut acc.delta_u, &d.delta_u);
            for l in 0..d.delta_q.len() {
                add2(&mut acc.delta_q[l], &d.delta_q[l]);
                add2(&mut acc.delta_k[l], &d.delta_k[l]);
                add2(&mut acc.delta_v[l], &d.delta_v[l]);
                add2(&mut acc.delta_z[l], &d.delta_z[l]);
            }
        }
        acc.norm_l = ops::norm(acc.final_delta());
        Ok(acc)
    }
}

pub fn target_direction(model: &Model, a_plus: u32, a_minus: u32) -> Result<TargetDirection> {
    let plus = answer_representation(model, a_plus)?;
    let minus = answer_representation(model, a_minus)?;
    Ok(TargetDirection::from_reps(&plus, &minus))
}

/// `W_c · Δr̂`: the final-layer unit target pulled back into a component's
/// native space (`d_head` for heads, `d_mlp` for MLPs). The embedding's
/// native space is the residual stream itself.
pub fn native_target(model: &Model, c: ComponentId, target: &TargetDirection) -> Result<Vec<f32>> {
    let unit = target.unit()?;
    native_from_unit(model, c, &unit)
}

fn native_from_unit(model: &Model, c: ComponentId, unit: &[f32]) -> Result<Vec<f32>> {
    let cfg = &model.config;
    match c {
        ComponentId::Embedding => Ok(unit.to_vec()),
        ComponentId::Head { layer, head } if layer < cfg.n_layers && head < cfg.n_heads => {
            Ok(ops::mat_vec(model.w_o(layer, head), unit))
        }
        ComponentId::Mlp { layer } if layer < cfg.n_layers => Ok(ops::mat_vec(model.layers[layer].w_out.view(), unit)),
        other => Err(Error::InvalidComponent(other)),
    }
}

/// Native targets of every component, computed once per direction.
#[derive(Debug, Clone)]
pub struct NativeTargets {
    pub unit: Vec<f32>,
    /// `[layer][head][d_head]`
    pub heads: Vec<Vec<Vec<f32>>>,
    /// `[layer][d_mlp]`
    pub mlps: Vec<Vec<f32>>,
}

impl NativeTargets {
    pub fn new(model: &Model, target: &TargetDirection) -> Result<Self> {
        let unit = target.unit()?;
        let cfg = &model.config;
        let heads = (0..cfg.n_layers)
            .map(|l| (0..cfg.n_heads).map(|h| ops::mat_vec(model.w_o(l, h), &unit)).collect())
            .collect();
        let mlps = (0..cfg.n_layers)
            .map(|l| ops::mat_vec(model.layers[l].w_out.view(), &unit))
            .collect();
        Ok(NativeTargets { unit, heads, mlps })
    }

    pub fn get(&self, c: ComponentId) -> &[f32] {
        match c {
            ComponentId::Embedding => &self.unit,
            ComponentId::Head { layer, head } => &self.heads[layer][head],
            ComponentId::Mlp { layer } => &self.mlps[layer],
            ComponentId::Logits => panic!("logits node has no native target"),
        }
    }
}

/// Direct scores of every head and MLP plus the embedding's share.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentScores {
    /// Forward order: per layer the heads, then the MLP.
    pub scores: Vec<(ComponentId, f32)>,
    pub embedding_score: f32,
}

impl ComponentScores {
    pub fn get(&self, c: ComponentId) -> Option<f32> {
        if c == ComponentId::Embedding {
            return Some(self.embedding_score);
        }
        self.scores.iter().find(|(id, _)| *id == c).map(|&(_, s)| s)
    }

    /// Sum of all scores including the embedding.
    pub fn total(&self) -> f32 {
        self.scores.iter().map(|(_, s)| s).sum::<f32>() + self.embedding_score
    }

    /// Elementwise mean over several score sets of the same model.
    pub fn mean(all: &[ComponentScores]) -> Result<Self> {
        let first = all.first().ok_or_else(|| Error::Dataset("no scores to average".into()))?;
        let n = all.len() as f64;
        let scores = first
            .scores
            .iter()
            .enumerate()
            .map(|(i, &(id, _))| (id, (all.iter().map(|s| s.scores[i].1 as f64).sum::<f64>() / n) as f32))
            .collect();
        let embedding_score = (all.iter().map(|s| s.embedding_score as f64).sum::<f64>() / n) as f32;
        Ok(ComponentScores {
            scores,
            embedding_score,
        })
    }

    /// Heads ordered by descending `|S|`, ties by (layer, head).
    pub fn top_heads(&self, n: usize) -> Vec<ComponentId> {
        let mut heads: Vec<(ComponentId, f32)> = self.scores.iter().copied().filter(|(c, _)| c.is_head()).collect();
        heads.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.sort_tuple().cmp(&b.0.sort_tuple())));
        heads.into_iter().take(n).map(|(c, _)| c).collect()
    }

    /// `{"input": s, "a0.h0": s, ..., "m{L-1}": s}` in forward order.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert(ComponentId::Embedding.to_string(), self.embedding_score.into());
        for (c, s) in &self.scores {
            map.insert(c.to_string(), (*s).into());
        }
        serde_json::Value::Object(map)
    }
}

/// Scores from two aligned caches: `S_c = ⟨Δnative_c, t̂_c⟩` at the final
/// position, and `⟨Δembed, Δr̂⟩` for the embedding.
pub fn node_scores_cached(
    model: &Model,
    clean: &ActivationCache,
    corrupt: &ActivationCache,
    targets: &NativeTargets,
) -> Result<ComponentScores> {
    if clean.seq_len() != corrupt.seq_len() {
        return Err(Error::Misaligned {
            clean: clean.seq_len(),
            corrupt: corrupt.seq_len(),
        });
    }
    let t = clean.last();
    let scores = model
        .config
        .components()
        .into_iter()
        .map(|c| {
            let delta = ops::sub(clean.native_at(c, t), corrupt.native_at(c, t));
            (c, ops::dot(&delta, targets.get(c)))
        })
        .collect();
    let d_embed = ops::sub(clean.embed_at(t), corrupt.embed_at(t));
    Ok(ComponentScores {
        scores,
        embedding_score: ops::dot(&d_embed, &targets.unit),
    })
}

pub fn node_scores(model: &Model, pair: &TokenizedPair, target: &TargetDirection) -> Result<ComponentScores> {
    let targets = NativeTargets::new(model, target)?;
    let (_, clean) = model.forward_cached(&pair.clean)?;
    let (_, corrupt) = model.forward_cached(&pair.corrupt)?;
    node_scores_cached(model, &clean, &corrupt, &targets)
}

/// Whether each pair gets its own direction or all pairs share the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    #[default]
    PerPair,
    Averaged,
}

/// One direction per pair, honouring `mode`.
pub fn dataset_targets(model: &Model, pairs: &[TokenizedPair], mode: TargetMode) -> Result<Vec<TargetDirection>> {
    let per_pair = pairs
        .iter()
        .map(|p| target_direction(model, p.a_plus, p.a_minus))
        .collect::<Result<Vec<_>>>()?;
    match mode {
        TargetMode::PerPair => Ok(per_pair),
        TargetMode::Averaged => {
            let mean = TargetDirection::mean(&per_pair)?;
            Ok(vec![mean; pairs.len()])
        }
    }
}

/// Per-position projections of one prompt's native outputs onto the
/// native targets. Rows are positions, columns heads.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityMap {
    pub tokens: Vec<u32>,
    pub components: Vec<ComponentId>,
    /// `[pos][component]`
    pub values: Vec<Vec<f32>>,
}

pub fn identity_map(model: &Model, cache: &ActivationCache, targets: &NativeTargets) -> IdentityMap {
    let components = model.config.heads();
    let values = (0..cache.seq_len())
        .map(|t| {
            components
                .iter()
                .map(|&c| ops::dot(cache.native_at(c, t), targets.get(c)))
                .collect()
        })
        .collect();
    IdentityMap {
        tokens: cache.tokens.clone(),
        components,
        values,
    }
}

impl IdentityMap {
    /// Column of a position across components.
    pub fn row(&self, pos: usize) -> &[f32] {
        &self.values[pos]
    }

    /// CSV with `position,token,<component ids...>`. Token strings come
    /// from `tok` when given.
    pub fn write_csv<W: Write>(&self, out: W, tok: Option<&Tokenizer>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["position".to_string(), "token".to_string()];
        header.extend(self.components.iter().map(|c| c.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (t, row) in self.values.iter().enumerate() {
            let token = match tok {
                Some(tok) => tok.decode(&[self.tokens[t]])?,
                None => self.tokens[t].to_string(),
            };
            let mut rec = vec![t.to_string(), token];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

/// Tokens of `"{instruction} {prompt}"`, and the two token sequences of an
/// instruction pair left-padded with BOS to a common length.
pub fn instruction_tokens(
    model: &Model,
    tok: &Tokenizer,
    prompt: &str,
    instruction_a: &str,
    instruction_b: &str,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut a = tok.encode(&format!("{instruction_a} {prompt}"));
    let mut b = tok.encode(&format!("{instruction_b} {prompt}"));
    let len = a.len().max(b.len());
    if len > model.config.max_positions {
        return Err(Error::Input(format!(
            "instruction prompts need {len} positions, model has {}",
            model.config.max_positions
        )));
    }
    let bos = model.config.bos();
    for seq in [&mut a, &mut b] {
        let pad = len - seq.len();
        seq.splice(0..0, std::iter::repeat_n(bos, pad));
    }
    Ok((a, b))
}

/// Direction between two instruction prefixes, read at the final token of
/// `"{instruction} {prompt}"`.
pub fn instruction_direction(
    model: &Model,
    tok: &Tokenizer,
    prompt: &str,
    instruction_a: &str,
    instruction_b: &str,
) -> Result<TargetDirection> {
    let (a, b) = instruction_tokens(model, tok, prompt, instruction_a, instruction_b)?;
    let (_, ca) = model.forward_cached(&a)?;
    let (_, cb) = model.forward_cached(&b)?;
    Ok(TargetDirection::from_reps(
        &AnswerRep::from_cache(&ca, ca.last()),
        &AnswerRep::from_cache(&cb, cb.last()),
    ))
}

/// Mean instruction direction over a prompt set.
pub fn instruction_direction_mean(
    model: &Model,
    tok: &Tokenizer,
    prompts: &[&str],
    instruction_a: &str,
    instruction_b: &str,
) -> Result<TargetDirection> {
    let dirs = prompts
        .iter()
        .map(|p| instruction_direction(model, tok, p, instruction_a, instruction_b))
        .collect::<Result<Vec<_>>>()?;
    TargetDirection::mean(&dirs)
}
