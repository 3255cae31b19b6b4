// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::HashMap;

use circuitprint::datasets::TokenizedPair;
use circuitprint::edges::{ranked_edges, total_importance, upstream, Alg1Mode, Circuit, EdgeGraph, EdgeKey};
use circuitprint::eval::{
    ablated_final_resid, activation_patching_scores, corrupt_logit_diff, cpr_cmd, default_grid, faithfulness_curve,
    logit_diff, logit_diff_from_resid, patched_logit_diff, run_ablated,
};
use circuitprint::fingerprint::target_direction;
use circuitprint::{ActivationCache, Channel, ComponentId, Model};
use common::random_case;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graph_for(model: &Model, pair: &TokenizedPair) -> EdgeGraph {
    let (_, clean) = model.forward_cached(&pair.clean).unwrap();
    let (_, corrupt) = model.forward_cached(&pair.corrupt).unwrap();
    let dir = target_direction(model, pair.a_plus, pair.a_minus).unwrap();
    total_importance(model, &clean, &corrupt, &dir, Alg1Mode::SingleFactor).unwrap()
}

fn layer_norm(x: &[f64], w: &[f32], b: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * w[i] as f64 + b[i] as f64).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn vec_mat(x: &[f64], w: ndarray::ArrayView2<'_, f32>) -> Vec<f64> {
    (0..w.ncols()).map(|j| (0..w.nrows()).map(|i| x[i] * w[[i, j]] as f64).sum()).collect()
}

/// Rebuilds the ablated final residual by materializing every component
/// input as a sum of per-source contributions taken from the two caches.
struct BruteForce<'a> {
    model: &'a Model,
    clean: &'a ActivationCache,
    corrupt: &'a ActivationCache,
    circuit: &'a Circuit,
    out: HashMap<ComponentId, Vec<f64>>,
}

impl BruteForce<'_> {
    fn input(&self, target: ComponentId, channel: Channel, pos: usize) -> Vec<f64> {
        let t = self.clean.last();
        let mut x = vec![0.0f64; self.model.config.d_model];
        for src in upstream(&self.model.config, target) {
            let contrib: Vec<f64> = if self.circuit.contains(src, target, channel) {
                if pos == t && src != ComponentId::Embedding {
                    self.out[&src].clone()
                } else {
                    self.clean.output_at(src, pos).iter().map(|&v| v as f64).collect()
                }
            } else {
                self.corrupt.output_at(src, pos).iter().map(|&v| v as f64).collect()
            };
            for (a, b) in x.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        x
    }

    fn head(&self, layer: usize, head: usize) -> Vec<f64> {
        let lw = &self.model.layers[layer];
        let id = ComponentId::head(layer, head);
        let t = self.clean.last();
        let dh = self.model.config.d_head;
        let proj = |ch: Channel, pos: usize| {
            let x = self.input(id, ch, pos);
            let x = layer_norm(&x, lw.ln1_w.as_slice().unwrap(), lw.ln1_b.as_slice().unwrap());
            let (w, b) = match ch {
                Channel::Q => (&lw.w_q, &lw.b_q),
                Channel::K => (&lw.w_k, &lw.b_k),
                _ => (&lw.w_v, &lw.b_v),
            };
            let mut y = vec_mat(&x, w.index_axis(ndarray::Axis(0), head));
            for (j, v) in y.iter_mut().enumerate() {
                *v += b[[head, j]] as f64;
            }
            y
        };
        let q = proj(Channel::Q, t);
        let scores: Vec<f64> = (0..=t)
            .map(|s| q.iter().zip(proj(Channel::K, s)).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let total: f64 = e.iter().sum();
        let mut z = vec![0.0f64; dh];
        for (s, es) in e.iter().enumerate() {
            for (zj, vj) in z.iter_mut().zip(proj(Channel::V, s)) {
                *zj += es / total * vj;
            }
        }
        let mut out = vec_mat(&z, self.model.w_o(layer, head));
        let n = self.model.config.n_heads as f64;
        for (o, b) in out.iter_mut().zip(lw.b_o.iter()) {
            *o += *b as f64 / n;
        }
        out
    }

    fn mlp(&self, layer: usize) -> Vec<f64> {
        let lw = &self.model.layers[layer];
        let x = self.input(ComponentId::mlp(layer), Channel::Mlp, self.clean.last());
        let x = layer_norm(&x, lw.ln2_w.as_slice().unwrap(), lw.ln2_b.as_slice().unwrap());
        let mut pre = vec_mat(&x, lw.w_in.view());
        for (p, b) in pre.iter_mut().zip(lw.b_in.iter()) {
            *p = gelu(*p + *b as f64);
        }
        let mut out = vec_mat(&pre, lw.w_out.view());
        for (o, b) in out.iter_mut().zip(lw.b_out.iter()) {
            *o += *b as f64;
        }
        out
    }

    fn run(mut self) -> Vec<f64> {
        let cfg = self.model.config.clone();
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                let o = self.head(l, h);
                self.out.insert(ComponentId::head(l, h), o);
            }
            let o = self.mlp(l);
            self.out.insert(ComponentId::mlp(l), o);
        }
        self.input(ComponentId::Logits, Channel::Out, self.clean.last())
    }
}

fn brute_force(model: &Model, pair: &TokenizedPair, circuit: &Circuit) -> Vec<f64> {
    let (_, clean) = model.forward_cached(&pair.clean).unwrap();
    let (_, corrupt) = model.forward_cached(&pair.corrupt).unwrap();
    BruteForce {
        model,
        clean: &clean,
        corrupt: &corrupt,
        circuit,
        out: HashMap::new(),
    }
    .run()
}

fn library_resid(model: &Model, pair: &TokenizedPair, circuit: &Circuit) -> Vec<f32> {
    let (_, clean) = model.forward_cached(&pair.clean).unwrap();
    let (_, corrupt) = model.forward_cached(&pair.corrupt).unwrap();
    ablated_final_resid(model, &clean, &corrupt, circuit).unwrap()
}

fn rel(a: &[f32], b: &[f64]) -> f64 {
    let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
    common::rel_err(a, &b32)
}

fn random_subset(ranking: &[EdgeKey], seed: u64, n: usize) -> Circuit {
    let mut keys = ranking.to_vec();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut c = Circuit::from_ranking(&keys, n);
    c.n_total = ranking.len();
    c
}

#[test]
fn half_circuit_matches_brute_force() {
    for seed in 0..10 {
        let (model, pair) = random_case(seed);
        let graph = graph_for(&model, &pair);
        let ranking = ranked_edges(&graph);
        let half = Circuit::from_ranking(&ranking, ranking.len() / 2);
        let got = library_resid(&model, &pair, &half);
        let want = brute_force(&model, &pair, &half);
        assert!(rel(&got, &want) < 1e-4, "seed {seed}: {}", rel(&got, &want));
    }
}

#[test]
fn endpoints_reproduce_clean_and_corrupt_metrics() {
    for seed in 0..10 {
        let (model, pair) = random_case(seed);
        let graph = graph_for(&model, &pair);
        let full = run_ablated(&model, &pair, &Circuit::full(&graph)).unwrap();
        let empty = run_ablated(&model, &pair, &Circuit::empty(&graph)).unwrap();
        let clean = logit_diff(&model, &pair).unwrap();
        let corrupt = corrupt_logit_diff(&model, &pair).unwrap();
        assert!((full - clean).abs() <= 1e-4 * clean.abs().max(1.0), "{full} vs {clean}");
        assert!((empty - corrupt).abs() <= 1e-4 * corrupt.abs().max(1.0), "{empty} vs {corrupt}");
    }
}

#[test]
fn identical_answers_have_zero_metric() {
    let (model, pair) = random_case(1);
    let (_, cache) = model.forward_cached(&pair.clean).unwrap();
    assert_eq!(logit_diff_from_resid(&model, cache.final_resid_at(cache.last()), 3, 3), 0.0);
}

#[test]
fn faithfulness_curve_endpoints_and_skips() {
    let (model, _) = common::toy_fixture();
    let mut pairs = common::toy_pairs(circuitprint::datasets::Task::Ioi, 6, 2);
    let graph = EdgeGraph::mean(&pairs.iter().map(|p| graph_for(&model, p)).collect::<Vec<_>>()).unwrap();
    let ranking = ranked_edges(&graph);
    let mut same = pairs[0].clone();
    same.corrupt = same.clean.clone();
    pairs.push(same);
    let tiny = 0.1 / ranking.len() as f64;
    let curve = faithfulness_curve(&model, &pairs, &ranking, &[tiny, 0.5, 1.0]).unwrap();
    assert_eq!(curve.skipped, 1);
    assert_eq!(curve.n_pairs, 6);
    assert_eq!(curve.points[0].n_edges, 0);
    assert!(curve.points[0].f.abs() <= 1e-3);
    assert!((curve.points[2].f - 1.0).abs() <= 1e-3);
    assert_eq!(curve.points[2].n_edges, ranking.len());

    let again = faithfulness_curve(&model, &pairs, &ranking, &[tiny, 0.5, 1.0]).unwrap();
    assert_eq!(curve, again);

    let metrics = cpr_cmd(&curve).unwrap();
    assert!(metrics.cmd >= 0.0);

    let mut buf = Vec::new();
    curve.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
}

#[test]
fn rejects_bad_grids() {
    let (model, pair) = random_case(2);
    let ranking = ranked_edges(&graph_for(&model, &pair));
    let pairs = [pair];
    assert!(faithfulness_curve(&model, &pairs, &ranking, &[]).is_err());
    assert!(faithfulness_curve(&model, &pairs, &ranking, &[0.0, 1.0]).is_err());
    assert!(faithfulness_curve(&model, &pairs, &ranking, &[0.5, 0.5]).is_err());
    assert!(faithfulness_curve(&model, &pairs, &ranking, &[1.5]).is_err());
}

#[test]
fn default_grid_is_strictly_increasing() {
    let g = default_grid();
    assert_eq!(g.len(), 20);
    assert!(g.windows(2).all(|w| w[0] < w[1]));
    assert!((g[0] - 1e-3).abs() < 1e-15);
    assert_eq!(g[19], 1.0);
}

#[test]
fn patching_everything_reproduces_the_corrupt_run() {
    for seed in 0..5 {
        let (model, pair) = random_case(seed);
        let mut all = vec![ComponentId::Embedding];
        all.extend(model.config.components());
        let patched = patched_logit_diff(&model, &pair, &all).unwrap();
        let corrupt = corrupt_logit_diff(&model, &pair).unwrap();
        assert!((patched - corrupt).abs() <= 1e-3, "{patched} vs {corrupt}");
    }
}

#[test]
fn patching_a_component_with_no_differential_scores_zero() {
    let (model, mut pair) = random_case(3);
    pair.corrupt = pair.clean.clone();
    let scores = activation_patching_scores(&model, &pair, &model.config.components()).unwrap();
    assert!(scores.iter().all(|(_, s)| s.abs() <= 1e-5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_circuits_match_brute_force(seed in 0u64..10_000, frac in 0.0f64..1.0) {
        let (model, pair) = random_case(seed);
        let ranking = ranked_edges(&graph_for(&model, &pair));
        let circuit = random_subset(&ranking, seed, (frac * ranking.len() as f64) as usize);
        let got = library_resid(&model, &pair, &circuit);
        let want = brute_force(&model, &pair, &circuit);
        prop_assert!(rel(&got, &want) < 1e-4);
    }
}
