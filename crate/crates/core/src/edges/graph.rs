// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::shapley::{shapley_qkv, ShapleyWeights};
use super::{channel_edge_ratios, mlp_edge_ratios, ChannelRatios};
use crate::component::{Channel, ComponentId};
use crate::datasets::TokenizedPair;
use crate::error::{Error, Result};
use crate::fingerprint::{node_scores_cached, NativeTargets, TargetDirection};
use crate::model::{ActivationCache, Model};

/// How downstream totals flow back along an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alg1Mode {
    /// `T_i += T_j · mixture_ij`.
    #[default]
    SingleFactor,
    /// `T_i += T_j · E_ij` with `E_ij = T_j · mixture_ij`.
    Literal,
}

impl FromStr for Alg1Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-factor" => Ok(Alg1Mode::SingleFactor),
            "literal" => Ok(Alg1Mode::Literal),
            other => Err(Error::Config(format!("unknown accumulation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeKey {
    pub source: ComponentId,
    pub target: ComponentId,
    pub channel: Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: ComponentId,
    pub target: ComponentId,
    pub channel: Channel,
    pub value: f32,
    /// The channel's ratio denominator fell below the threshold.
    pub degenerate: bool,
}

impl Edge {
    pub fn key(&self) -> EdgeKey {
        EdgeKey {
            source: self.source,
            target: self.target,
            channel: self.channel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub id: ComponentId,
    /// Direct score `S`.
    pub direct: f32,
    /// Total importance `T`.
    pub total: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadShapley {
    pub head: ComponentId,
    #[serde(flatten)]
    pub weights: ShapleyWeights,
}

/// Scored edges plus direct and total node scores.
///
/// Edges into heads carry one entry per channel, edges into MLPs the
/// `mlp` channel, and every node has an `out` edge into `logits` whose
/// value is its direct score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeGraph {
    pub mode: Alg1Mode,
    /// Embedding first, then forward order.
    pub nodes: Vec<NodeScore>,
    pub edges: Vec<Edge>,
    pub shapley: Vec<HeadShapley>,
}

fn node_index(c: ComponentId, n_heads: usize) -> usize {
    c.order_key(n_heads)
}

struct Inflow {
    target: ComponentId,
    /// (source, channel, φ̂·R or R, degenerate)
    parts: Vec<(ComponentId, Channel, f32, bool)>,
}

fn inflow(target: ComponentId, weights: Option<&ShapleyWeights>, ratios: &[ChannelRatios]) -> Inflow {
    let mut parts = Vec::new();
    for r in ratios {
        let mix = weights.map_or(1.0, |w| w.normalized_for(r.channel));
        for (&s, &ratio) in r.sources.iter().zip(&r.ratios) {
            parts.push((s, r.channel, mix * ratio, r.degenerate));
        }
    }
    Inflow { target, parts }
}

/// Direct scores, all edges, and the backward total-importance pass.
///
/// Layers are processed from last to first; within a layer the MLP goes
/// before the heads because it reads their outputs.
pub fn total_importance(
    model: &Model,
    clean: &ActivationCache,
    corrupt: &ActivationCache,
    dir: &TargetDirection,
    mode: Alg1Mode,
) -> Result<EdgeGraph> {
    let cfg = &model.config;
    let targets = NativeTargets::new(model, dir)?;
    let scores = node_scores_cached(model, clean, corrupt, &targets)?;

    let mut nodes = vec![NodeScore {
        id: ComponentId::Embedding,
        direct: scores.embedding_score,
        total: scores.embedding_score,
    }];
    nodes.extend(scores.scores.iter().map(|&(id, s)| NodeScore {
        id,
        direct: s,
        total: s,
    }));

    let mut shapley = Vec::new();
    let mut inflows = Vec::new();
    for c in cfg.components() {
        match c {
            ComponentId::Head { .. } => {
                let w = shapley_qkv(model, c, clean, corrupt, &targets)?;
                let ratios = Channel::QKV
                    .iter()
                    .map(|&ch| channel_edge_ratios(model, clean, corrupt, c, ch, dir))
                    .collect::<Result<Vec<_>>>()?;
                inflows.push(inflow(c, Some(&w), &ratios));
                shapley.push(HeadShapley { head: c, weights: w });
            }
            _ => {
                let ratios = mlp_edge_ratios(model, clean, corrupt, c, dir)?;
                inflows.push(inflow(c, None, std::slice::from_ref(&ratios)));
            }
        }
    }

    let mut values: Vec<Vec<f32>> = inflows.iter().map(|f| vec![0.0; f.parts.len()]).collect();
    for (k, flow) in inflows.iter().enumerate().rev() {
        let t_j = nodes[node_index(flow.target, cfg.n_heads)].total;
        for (p, &(source, _, mix, _)) in flow.parts.iter().enumerate() {
            let e = t_j * mix;
            values[k][p] = e;
            let add = match mode {
                Alg1Mode::SingleFactor => e,
                Alg1Mode::Literal => t_j * e,
            };
            nodes[node_index(source, cfg.n_heads)].total += add;
        }
    }

    let mut edges = Vec::new();
    for (flow, vals) in inflows.iter().zip(&values) {
        for (&(source, channel, _, degenerate), &value) in flow.parts.iter().zip(vals) {
            edges.push(Edge {
                source,
                target: flow.target,
                channel,
                value,
                degenerate,
            });
        }
    }
    for n in &nodes {
        edges.push(Edge {
            source: n.id,
            target: ComponentId::Logits,
            channel: Channel::Out,
            value: n.direct,
            degenerate: false,
        });
    }

    Ok(EdgeGraph {
        mode,
        nodes,
        edges,
        shapley,
    })
}

pub fn total_importance_pair(
    model: &Model,
    pair: &TokenizedPair,
    dir: &TargetDirection,
    mode: Alg1Mode,
) -> Result<EdgeGraph> {
    let (_, clean) = model.forward_cached(&pair.clean)?;
    let (_, corrupt) = model.forward_cached(&pair.corrupt)?;
    total_importance(model, &clean, &corrupt, dir, mode)
}

impl EdgeGraph {
    pub fn node(&self, id: ComponentId) -> Option<&NodeScore> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn edge(&self, source: ComponentId, target: ComponentId, channel: Channel) -> Option<&Edge> {
        self.edges
            .iter()
            .find(|e| e.source == source && e.target == target && e.channel == channel)
    }

    /// Mean of graphs of the same model; an edge is degenerate in the mean
    /// only if it is degenerate in every input.
    pub fn mean(graphs: &[EdgeGraph]) -> Result<EdgeGraph> {
        let first = graphs.first().ok_or_else(|| Error::Dataset("no graphs to average".into()))?;
        let n = graphs.len() as f64;
        let avg = |f: &dyn Fn(&EdgeGraph) -> f32| (graphs.iter().map(|g| f(g) as f64).sum::<f64>() / n) as f32;
        let nodes = first
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| NodeScore {
                id: node.id,
                direct: avg(&|g| g.nodes[i].direct),
                total: avg(&|g| g.nodes[i].total),
            })
            .collect();
        let edges = first
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| Edge {
                value: avg(&|g| g.edges[i].value),
                degenerate: graphs.iter().all(|g| g.edges[i].degenerate),
                ..*e
            })
            .collect();
        let shapley = first
            .shapley
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut values = [0.0f32; 8];
                for (b, v) in values.iter_mut().enumerate() {
                    *v = avg(&|g| g.shapley[i].weights.coalition_values[b]);
                }
                HeadShapley {
                    head: s.head,
                    weights: ShapleyWeights::from_values(values),
                }
            })
            .collect();
        Ok(EdgeGraph {
            mode: first.mode,
            nodes,
            edges,
            shapley,
        })
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph circuit {\n  rankdir=BT;\n");
        for n in &self.nodes {
            let _ = writeln!(s, "  \"{}\" [label=\"{}\\nS={:.4}\\nT={:.4}\"];", n.id, n.id, n.direct, n.total);
        }
        let _ = writeln!(s, "  \"logits\" [shape=box];");
        for e in &self.edges {
            let style = if e.degenerate { ", style=dashed" } else { "" };
            let _ = writeln!(
                s,
                "  \"{}\" -> \"{}\" [label=\"{} {:.4}\"{}];",
                e.source, e.target, e.channel, e.value, style
            );
        }
        s.push_str("}\n");
        s
    }

    /// One row per head: signed φ, `|φ|` shares, direct and total score,
    /// and the sign of the total.
    pub fn write_shapley_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "head", "phi_q", "phi_k", "phi_v", "abs_q", "abs_k", "abs_v", "direct", "total", "sign",
        ])
        .map_err(crate::fingerprint::csv_err)?;
        for s in &self.shapley {
            let node = self.node(s.head).expect("every head is a node");
            let a = s.weights.abs_normalized();
            let sign = if node.total > 0.0 {
                "+"
            } else if node.total < 0.0 {
                "-"
            } else {
                "0"
            };
            w.write_record([
                s.head.to_string(),
                s.weights.phi_q.to_string(),
                s.weights.phi_k.to_string(),
                s.weights.phi_v.to_string(),
                a[0].to_string(),
                a[1].to_string(),
                a[2].to_string(),
                node.direct.to_string(),
                node.total.to_string(),
                sign.to_string(),
            ])
            .map_err(crate::fingerprint::csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// All edge keys by descending `|E|`; ties broken by source
/// (layer, head), then target (layer, head), then channel.
pub fn ranked_edges(graph: &EdgeGraph) -> Vec<EdgeKey> {
    let mut edges: Vec<&Edge> = graph.edges.iter().collect();
    edges.sort_by(|a, b| {
        b.value
            .abs()
            .total_cmp(&a.value.abs())
            .then(a.source.sort_tuple().cmp(&b.source.sort_tuple()))
            .then(a.target.sort_tuple().cmp(&b.target.sort_tuple()))
            .then(a.channel.cmp(&b.channel))
    });
    edges.into_iter().map(Edge::key).collect()
}

/// A set of kept edges and the nodes they touch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Circuit {
    pub edges: HashSet<EdgeKey>,
    pub nodes: BTreeSet<ComponentId>,
    pub n_total: usize,
}

impl Circuit {
    pub fn from_ranking(ranking: &[EdgeKey], n: usize) -> Self {
        let kept = &ranking[..n.min(ranking.len())];
        let nodes = kept
            .iter()
            .flat_map(|k| [k.source, k.target])
            .collect();
        Circuit {
            edges: kept.iter().copied().collect(),
            nodes,
            n_total: ranking.len(),
        }
    }

    pub fn full(graph: &EdgeGraph) -> Self {
        Circuit::from_ranking(&ranked_edges(graph), graph.edges.len())
    }

    pub fn empty(graph: &EdgeGraph) -> Self {
        Circuit::from_ranking(&ranked_edges(graph), 0)
    }

    pub fn contains(&self, source: ComponentId, target: ComponentId, channel: Channel) -> bool {
        self.edges.contains(&EdgeKey { source, target, channel })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Keeps the `n` edges of largest `|E|`.
pub fn prune_circuit(graph: &EdgeGraph, n: usize) -> Result<Circuit> {
    let total = graph.edges.len();
    if n == 0 || n > total {
        return Err(Error::Input(format!("n_edges {n} outside 1..={total}")));
    }
    Ok(Circuit::from_ranking(&ranked_edges(graph), n))
}
