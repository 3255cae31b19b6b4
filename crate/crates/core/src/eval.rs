// SPDX-License-Identifier: MIT OR Apache-2.0

//! Faithfulness of pruned circuits and the activation-patching baseline.
//!
//! Ablation is edge-granular and acts at the final position. Each input
//! channel of a component (a head's Q, K or V read, an MLP's read, the
//! unembedding's read) is rebuilt as the corrupt residual plus, for every
//! in-circuit upstream edge, the source's value minus its corrupt output.
//! Source values at earlier positions come from the clean cache; at the
//! final position they are the recomputed outputs of the ablated run, so
//! ablations propagate along kept edges.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::{Channel, ComponentId};
use crate::datasets::TokenizedPair;
use crate::edges::{upstream, Circuit, EdgeKey};
use crate::error::{Error, Result};
use crate::model::{ActivationCache, Intervention, LogitRows, Model, Position};
use crate::ops;

/// Pairs whose clean and corrupt metrics differ by less than this are
/// excluded from faithfulness averages.
pub const MIN_METRIC_GAP: f64 = 1e-4;

/// `logit(a⁺) − logit(a⁻)` of a final residual vector.
pub fn logit_diff_from_resid(model: &Model, resid: &[f32], a_plus: u32, a_minus: u32) -> f32 {
    if a_plus == a_minus {
        return 0.0;
    }
    let l = model.logit_columns(resid, &[a_plus, a_minus]);
    l[0] - l[1]
}

fn cache_metric(model: &Model, cache: &ActivationCache, pair: &TokenizedPair) -> f32 {
    logit_diff_from_resid(model, cache.final_resid_at(cache.last()), pair.a_plus, pair.a_minus)
}

/// Logit difference at the final position of the clean prompt.
pub fn logit_diff(model: &Model, pair: &TokenizedPair) -> Result<f32> {
    let (_, cache) = model.run(&pair.clean, &[], LogitRows::Last)?;
    Ok(cache_metric(model, &cache, pair))
}

/// Logit difference at the final position of the corrupt prompt.
pub fn corrupt_logit_diff(model: &Model, pair: &TokenizedPair) -> Result<f32> {
    let (_, cache) = model.run(&pair.corrupt, &[], LogitRows::Last)?;
    Ok(cache_metric(model, &cache, pair))
}

struct Ablation<'a> {
    model: &'a Model,
    clean: &'a ActivationCache,
    corrupt: &'a ActivationCache,
    circuit: &'a Circuit,
    /// Residual-space outputs at the final position, indexed by
    /// `order_key`.
    out: Vec<Option<Output>>,
}

/// A component whose inputs all match the clean run reuses its cached
/// output, so the full circuit reproduces the clean run bit for bit.
#[derive(Clone)]
enum Output {
    Clean,
    Recomputed(Vec<f32>),
}

enum Read {
    Head(usize),
    Mlp(usize),
    Final,
}

impl<'a> Ablation<'a> {
    fn key(&self, c: ComponentId) -> usize {
        c.order_key(self.model.config.n_heads)
    }

    fn value_at(&self, c: ComponentId, pos: usize) -> &[f32] {
        if pos == self.clean.last() && c != ComponentId::Embedding {
            match self.out[self.key(c)].as_ref().expect("upstream output computed first") {
                Output::Clean => self.clean.output_at(c, pos),
                Output::Recomputed(v) => v,
            }
        } else {
            self.clean.output_at(c, pos)
        }
    }

    fn is_clean(&self, c: ComponentId) -> bool {
        c == ComponentId::Embedding || matches!(self.out[self.key(c)], Some(Output::Clean))
    }

    /// Every channel of `target` keeps all its edges from clean sources.
    fn reads_clean(&self, target: ComponentId, channels: &[Channel]) -> bool {
        channels.iter().all(|&ch| {
            upstream(&self.model.config, target)
                .into_iter()
                .all(|s| self.circuit.contains(s, target, ch) && self.is_clean(s))
        })
    }

    /// Input of one channel at `pos`, assembled from whichever base
    /// residual needs fewer correction terms.
    fn channel_input(&self, target: ComponentId, channel: Channel, read: &Read, pos: usize) -> Vec<f32> {
        let sources = upstream(&self.model.config, target);
        let kept: Vec<bool> = sources
            .iter()
            .map(|&s| self.circuit.contains(s, target, channel))
            .collect();
        let n_kept = kept.iter().filter(|&&k| k).count();
        let base = |cache: &ActivationCache| -> Vec<f32> {
            match *read {
                Read::Head(l) => cache.resid_pre_at(l, pos).to_vec(),
                Read::Mlp(l) => cache.resid_mid_at(l, pos).to_vec(),
                Read::Final => cache.final_resid_at(pos).to_vec(),
            }
        };
        if 2 * n_kept >= sources.len() {
            let mut x = base(self.clean);
            for (&s, &k) in sources.iter().zip(&kept) {
                let clean_s = self.clean.output_at(s, pos);
                if k {
                    let v = self.value_at(s, pos);
                    if !std::ptr::eq(v, clean_s) {
                        ops::add_assign(&mut x, &ops::sub(v, clean_s));
                    }
                } else {
                    ops::add_assign(&mut x, &ops::sub(self.corrupt.output_at(s, pos), clean_s));
                }
            }
            x
        } else {
            let mut x = base(self.corrupt);
            for (&s, &k) in sources.iter().zip(&kept) {
                if k {
                    ops::add_assign(&mut x, &ops::sub(self.value_at(s, pos), self.corrupt.output_at(s, pos)));
                }
            }
            x
        }
    }

    /// Whether every upstream edge of a channel is kept (`Some(true)`),
    /// none is (`Some(false)`), or the set is mixed.
    fn uniform(&self, target: ComponentId, channel: Channel) -> Option<bool> {
        let sources = upstream(&self.model.config, target);
        let n_kept = sources
            .iter()
            .filter(|&&s| self.circuit.contains(s, target, channel))
            .count();
        if n_kept == sources.len() {
            Some(true)
        } else if n_kept == 0 {
            Some(false)
        } else {
            None
        }
    }

    fn head_projection(&self, layer: usize, head: usize, channel: Channel, pos: usize) -> Vec<f32> {
        let lw = &self.model.layers[layer];
        let target = ComponentId::head(layer, head);
        let x = self.channel_input(target, channel, &Read::Head(layer), pos);
        let x = ops::layer_norm(&x, &lw.ln1_w, &lw.ln1_b, self.model.config.ln_epsilon);
        let (w, b) = match channel {
            Channel::Q => (&lw.w_q, &lw.b_q),
            Channel::K => (&lw.w_k, &lw.b_k),
            _ => (&lw.w_v, &lw.b_v),
        };
        let mut y = ops::vec_mat(&x, w.index_axis(ndarray::Axis(0), head));
        ops::add_assign(&mut y, b.row(head).as_slice().expect("contiguous"));
        y
    }

    /// Keys or values over the earlier positions: cached rows when the
    /// channel's edge set is uniform, rebuilt rows otherwise.
    fn prefix_rows(&self, layer: usize, head: usize, channel: Channel) -> Vec<Vec<f32>> {
        let t = self.clean.last();
        let target = ComponentId::head(layer, head);
        let cached = |c: &ActivationCache, s: usize| match channel {
            Channel::K => c.k_at(layer, head, s).to_vec(),
            _ => c.v_at(layer, head, s).to_vec(),
        };
        match self.uniform(target, channel) {
            Some(true) => (0..t).map(|s| cached(self.clean, s)).collect(),
            Some(false) => (0..t).map(|s| cached(self.corrupt, s)).collect(),
            None => (0..t).map(|s| self.head_projection(layer, head, channel, s)).collect(),
        }
    }

    fn head_output(&self, layer: usize, head: usize) -> Vec<f32> {
        let t = self.clean.last();
        let q = self.head_projection(layer, head, Channel::Q, t);
        let mut keys = self.prefix_rows(layer, head, Channel::K);
        keys.push(self.head_projection(layer, head, Channel::K, t));
        let mut vals = self.prefix_rows(layer, head, Channel::V);
        vals.push(self.head_projection(layer, head, Channel::V, t));
        let (_, z) = ops::attend_row(&q, t + 1, |s| &keys[s], |s| &vals[s]);
        let lw = &self.model.layers[layer];
        let mut out = ops::vec_mat(&z, self.model.w_o(layer, head));
        ops::axpy(&mut out, 1.0 / self.model.config.n_heads as f32, lw.b_o.as_slice().expect("contiguous"));
        out
    }

    fn mlp_output(&self, layer: usize) -> Vec<f32> {
        let t = self.clean.last();
        let lw = &self.model.layers[layer];
        let x = self.channel_input(ComponentId::mlp(layer), Channel::Mlp, &Read::Mlp(layer), t);
        let x = ops::layer_norm(&x, &lw.ln2_w, &lw.ln2_b, self.model.config.ln_epsilon);
        let mut pre = ops::vec_mat(&x, lw.w_in.view());
        ops::add_assign(&mut pre, lw.b_in.as_slice().expect("contiguous"));
        let hidden: Vec<f32> = pre.into_iter().map(ops::gelu).collect();
        let mut out = ops::vec_mat(&hidden, lw.w_out.view());
        ops::add_assign(&mut out, lw.b_out.as_slice().expect("contiguous"));
        out
    }

    fn run(mut self) -> Vec<f32> {
        let cfg = &self.model.config;
        self.out = vec![None; 1 + cfg.n_components()];
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                let c = ComponentId::head(l, h);
                let o = if self.reads_clean(c, &Channel::QKV) {
                    Output::Clean
                } else {
                    Output::Recomputed(self.head_output(l, h))
                };
                let k = self.key(c);
                self.out[k] = Some(o);
            }
            let c = ComponentId::mlp(l);
            let o = if self.reads_clean(c, &[Channel::Mlp]) {
                Output::Clean
            } else {
                Output::Recomputed(self.mlp_output(l))
            };
            let k = self.key(c);
            self.out[k] = Some(o);
        }
        self.channel_input(ComponentId::Logits, Channel::Out, &Read::Final, self.clean.last())
    }
}

/// Final residual of the ablated run.
pub fn ablated_final_resid(
    model: &Model,
    clean: &ActivationCache,
    corrupt: &ActivationCache,
    circuit: &Circuit,
) -> Result<Vec<f32>> {
    if clean.seq_len() != corrupt.seq_len() {
        return Err(Error::Misaligned {
            clean: clean.seq_len(),
            corrupt: corrupt.seq_len(),
        });
    }
    let ablation = Ablation {
        model,
        clean,
        corrupt,
        circuit,
        out: Vec::new(),
    };
    Ok(ablation.run())
}

/// Logit difference of the circuit run with every edge outside `circuit`
/// interchanged to its corrupt value.
pub fn run_ablated(model: &Model, pair: &TokenizedPair, circuit: &Circuit) -> Result<f32> {
    let (_, clean) = model.forward_cached(&pair.clean)?;
    let (_, corrupt) = model.forward_cached(&pair.corrupt)?;
    run_ablated_cached(model, &clean, &corrupt, pair, circuit)
}

pub fn run_ablated_cached(
    model: &Model,
    clean: &ActivationCache,
    corrupt: &ActivationCache,
    pair: &TokenizedPair,
    circuit: &Circuit,
) -> Result<f32> {
    let resid = ablated_final_resid(model, clean, corrupt, circuit)?;
    Ok(logit_diff_from_resid(model, &resid, pair.a_plus, pair.a_minus))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub n_edges: usize,
    /// Mean normalized faithfulness over the evaluated pairs.
    pub f: f64,
    pub m_clean: f64,
    pub m_corrupt: f64,
    pub m_circuit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub points: Vec<CurvePoint>,
    pub n_pairs: usize,
    /// Pairs excluded for `|m_clean − m_corrupt| < MIN_METRIC_GAP`.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitMetrics {
    pub cpr: f64,
    pub cmd: f64,
}

/// `n` fractions log-spaced from `lo` to `hi` inclusive.
pub fn log_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// The default sweep: 20 fractions from 0.1% to 100%.
pub fn default_grid() -> Vec<f64> {
    log_grid(20, 1e-3, 1.0)
}

/// Normalized faithfulness `(m_circuit − m_corrupt) / (m_clean − m_corrupt)`.
pub fn normalized(m_circuit: f64, m_clean: f64, m_corrupt: f64) -> f64 {
    (m_circuit - m_corrupt) / (m_clean - m_corrupt)
}

/// Sweeps the top-`round(fraction · total)` edges of `ranking` over the
/// dataset. A fraction that rounds to zero edges evaluates the empty
/// circuit.
pub fn faithfulness_curve(
    model: &Model,
    pairs: &[TokenizedPair],
    ranking: &[EdgeKey],
    fractions: &[f64],
) -> Result<FaithfulnessCurve> {
    if fractions.is_empty() {
        return Err(Error::Input("no fractions to evaluate".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Input(format!("fraction {f} outside (0, 1]")));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input("fractions must be strictly increasing".into()));
    }
    let total = ranking.len();
    let sizes: Vec<usize> = fractions.iter().map(|f| (f * total as f64).round() as usize).collect();
    let circuits: Vec<Circuit> = sizes.iter().map(|&n| Circuit::from_ranking(ranking, n)).collect();

    // Per-pair rows in dataset order; summed sequentially so results do not
    // depend on thread scheduling.
    let rows = pairs
        .par_iter()
        .map(|pair| -> Result<Option<Vec<[f64; 4]>>> {
            let (_, clean) = model.forward_cached(&pair.clean)?;
            let (_, corrupt) = model.forward_cached(&pair.corrupt)?;
            let m_clean = cache_metric(model, &clean, pair) as f64;
            let m_corrupt = cache_metric(model, &corrupt, pair) as f64;
            if (m_clean - m_corrupt).abs() < MIN_METRIC_GAP {
                return Ok(None);
            }
            circuits
                .iter()
                .map(|circuit| {
                    let m = run_ablated_cached(model, &clean, &corrupt, pair, circuit)? as f64;
                    Ok([normalized(m, m_clean, m_corrupt), m_clean, m_corrupt, m])
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![[0.0f64; 4]; fractions.len()];
    let (mut used, mut skipped) = (0usize, 0usize);
    for row in rows {
        let Some(row) = row else {
            skipped += 1;
            continue;
        };
        used += 1;
        for (acc, v) in sums.iter_mut().zip(row) {
            for i in 0..4 {
                acc[i] += v[i];
            }
        }
    }
    let denom = used.max(1) as f64;
    let points = fractions
        .iter()
        .zip(&sizes)
        .zip(&sums)
        .map(|((&fraction, &n_edges), acc)| CurvePoint {
            fraction,
            n_edges,
            f: if used == 0 { f64::NAN } else { acc[0] / denom },
            m_clean: acc[1] / denom,
            m_corrupt: acc[2] / denom,
            m_circuit: acc[3] / denom,
        })
        .collect();
    Ok(FaithfulnessCurve {
        points,
        n_pairs: used,
        skipped,
    })
}

fn trapezoid_mean(xs: &[f64], ys: &[f64]) -> f64 {
    let (mut area, mut width) = (0.0, 0.0);
    for (x, y) in xs.windows(2).zip(ys.windows(2)) {
        let w = x[1] - x[0];
        area += w * (y[0] + y[1]) / 2.0;
        width += w;
    }
    area / width
}

/// Trapezoidal means of `f` and `|1 − f|` over the curve's fraction axis.
pub fn cpr_cmd(curve: &FaithfulnessCurve) -> Result<CircuitMetrics> {
    if curve.points.len() < 2 {
        return Err(Error::Input("need at least two curve points".into()));
    }
    let xs: Vec<f64> = curve.points.iter().map(|p| p.fraction).collect();
    let f: Vec<f64> = curve.points.iter().map(|p| p.f).collect();
    let gap: Vec<f64> = f.iter().map(|v| (1.0 - v).abs()).collect();
    Ok(CircuitMetrics {
        cpr: trapezoid_mean(&xs, &f),
        cmd: trapezoid_mean(&xs, &gap),
    })
}

impl FaithfulnessCurve {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["fraction", "n_edges", "f", "m_clean", "m_corrupt", "m_circuit"])
            .map_err(crate::fingerprint::csv_err)?;
        for p in &self.points {
            w.write_record([
                p.fraction.to_string(),
                p.n_edges.to_string(),
                p.f.to_string(),
                p.m_clean.to_string(),
                p.m_corrupt.to_string(),
                p.m_circuit.to_string(),
            ])
            .map_err(crate::fingerprint::csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Intervention that swaps a component's clean final-position native
/// output for the corrupt one.
pub fn patch_intervention(c: ComponentId, corrupt: &ActivationCache) -> Result<Intervention> {
    let t = corrupt.last();
    Ok(match c {
        ComponentId::Embedding => Intervention::replace_residual(0, Position::Last, corrupt.embed_at(t).to_vec()),
        ComponentId::Head { layer, head } => {
            Intervention::replace_z(layer, head, Position::Last, corrupt.z_at(layer, head, t).to_vec())
        }
        ComponentId::Mlp { layer } => Intervention::replace_mlp(layer, Position::Last, corrupt.mlp_hidden_at(layer, t).to_vec()),
        ComponentId::Logits => return Err(Error::InvalidComponent(c)),
    })
}

/// Logit difference of the clean prompt with all of `components` patched
/// at once.
pub fn patched_logit_diff(model: &Model, pair: &TokenizedPair, components: &[ComponentId]) -> Result<f32> {
    let (_, corrupt) = model.forward_cached(&pair.corrupt)?;
    let ivs = components
        .iter()
        .map(|&c| patch_intervention(c, &corrupt))
        .collect::<Result<Vec<_>>>()?;
    let (_, cache) = model.run(&pair.clean, &ivs, LogitRows::Last)?;
    Ok(cache_metric(model, &cache, pair))
}

/// Drop in logit difference when each component alone is patched.
pub fn activation_patching_scores(
    model: &Model,
    pair: &TokenizedPair,
    components: &[ComponentId],
) -> Result<Vec<(ComponentId, f32)>> {
    let (_, clean) = model.run(&pair.clean, &[], LogitRows::Last)?;
    let (_, corrupt) = model.forward_cached(&pair.corrupt)?;
    let base = cache_metric(model, &clean, pair);
    components
        .iter()
        .map(|&c| {
            let iv = patch_intervention(c, &corrupt)?;
            let (_, cache) = model.run(&pair.clean, &[iv], LogitRows::Last)?;
            Ok((c, base - cache_metric(model, &cache, pair)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(f64, f64)]) -> FaithfulnessCurve {
        FaithfulnessCurve {
            points: points
                .iter()
                .map(|&(fraction, f)| CurvePoint {
                    fraction,
                    n_edges: 0,
                    f,
                    m_clean: 1.0,
                    m_corrupt: 0.0,
                    m_circuit: f,
                })
                .collect(),
            n_pairs: 1,
            skipped: 0,
        }
    }

    #[test]
    fn constant_curves() {
        let grid = default_grid();
        let ones: Vec<_> = grid.iter().map(|&x| (x, 1.0)).collect();
        let zeros: Vec<_> = grid.iter().map(|&x| (x, 0.0)).collect();
        assert_eq!(cpr_cmd(&curve(&ones)).unwrap(), CircuitMetrics { cpr: 1.0, cmd: 0.0 });
        assert_eq!(cpr_cmd(&curve(&zeros)).unwrap(), CircuitMetrics { cpr: 0.0, cmd: 1.0 });
        assert!(cpr_cmd(&curve(&[(1.0, 1.0)])).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = default_grid();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 1e-3).abs() < 1e-15);
        assert_eq!(g[19], 1.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
