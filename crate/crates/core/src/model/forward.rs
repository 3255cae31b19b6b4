// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic forward passes with full activation capture.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};

use super::cache::ActivationCache;
use super::intervention::{CoalitionSpec, Intervention, Site};
use super::weights::Model;
use crate::error::{Error, Result};
use crate::ops;

/// Which rows of the logit matrix to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    /// Only the final position (a `1 x vocab` matrix).
    Last,
}

fn ln_rows(x: &Array2<f32>, w: &Array1<f32>, b: &Array1<f32>, eps: f32) -> Array2<f32> {
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
        let y = ops::layer_norm(src.as_slice().expect("contiguous row"), w, b, eps);
        dst.assign(&ArrayView1::from(&y));
    }
    out
}

impl Model {
    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits for every position.
    pub fn forward(&self, tokens: &[u32]) -> Result<Array2<f32>> {
        Ok(self.run(tokens, &[], LogitRows::All)?.0)
    }

    pub fn forward_cached(&self, tokens: &[u32]) -> Result<(Array2<f32>, ActivationCache)> {
        self.run(tokens, &[], LogitRows::All)
    }

    pub fn forward_intervened(
        &self,
        tokens: &[u32],
        interventions: &[Intervention],
    ) -> Result<(Array2<f32>, ActivationCache)> {
        self.run(tokens, interventions, LogitRows::All)
    }

    /// Shared implementation of every forward variant.
    pub fn run(
        &self,
        tokens: &[u32],
        interventions: &[Intervention],
        rows: LogitRows,
    ) -> Result<(Array2<f32>, ActivationCache)> {
        self.check_tokens(tokens)?;
        let seq = tokens.len();
        for iv in interventions {
            iv.validate(&self.config, seq)?;
        }
        let cfg = &self.config;
        let (n_layers, n_heads, d, dh) = (cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_head);

        let mut resid = Array2::<f32>::zeros((seq, d));
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = resid.row_mut(t);
            row.assign(&self.wte.row(tok as usize));
            row += &self.wpe.row(t);
        }
        apply_residual(&mut resid, interventions, 0);
        let embed = resid.clone();

        let mut cache = ActivationCache {
            tokens: tokens.to_vec(),
            embed,
            resid_pre: Vec::with_capacity(n_layers),
            resid_mid: Vec::with_capacity(n_layers),
            resid_post: Vec::with_capacity(n_layers),
            q: Vec::with_capacity(n_layers),
            k: Vec::with_capacity(n_layers),
            v: Vec::with_capacity(n_layers),
            z: Vec::with_capacity(n_layers),
            pattern: Vec::with_capacity(n_layers),
            attn_out: Vec::with_capacity(n_layers),
            mlp_pre: Vec::with_capacity(n_layers),
            mlp_hidden: Vec::with_capacity(n_layers),
            mlp_out: Vec::with_capacity(n_layers),
        };

        let bias_share = 1.0 / n_heads as f32;
        for (l, lw) in self.layers.iter().enumerate() {
            if l > 0 {
                apply_residual(&mut resid, interventions, l);
            }
            cache.resid_pre.push(resid.clone());
            let x = ln_rows(&resid, &lw.ln1_w, &lw.ln1_b, cfg.ln_epsilon);

            let mut q3 = Array3::<f32>::zeros((n_heads, seq, dh));
            let mut k3 = Array3::<f32>::zeros((n_heads, seq, dh));
            let mut v3 = Array3::<f32>::zeros((n_heads, seq, dh));
            let mut z3 = Array3::<f32>::zeros((n_heads, seq, dh));
            let mut p3 = Array3::<f32>::zeros((n_heads, seq, seq));
            let mut o3 = Array3::<f32>::zeros((n_heads, seq, d));
            let b_o_share = &lw.b_o * bias_share;
            let mut resid_mid = resid.clone();

            for h in 0..n_heads {
                let q = x.dot(&lw.w_q.index_axis(Axis(0), h)) + lw.b_q.row(h);
                let k = x.dot(&lw.w_k.index_axis(Axis(0), h)) + lw.b_k.row(h);
                let v = x.dot(&lw.w_v.index_axis(Axis(0), h)) + lw.b_v.row(h);
                q3.index_axis_mut(Axis(0), h).assign(&q);
                k3.index_axis_mut(Axis(0), h).assign(&k);
                v3.index_axis_mut(Axis(0), h).assign(&v);
                let (kf, vf) = (k3.index_axis(Axis(0), h), v3.index_axis(Axis(0), h));
                let (kf, vf) = (kf.as_slice().expect("contiguous"), vf.as_slice().expect("contiguous"));
                let mut z = Array2::<f32>::zeros((seq, dh));
                for t in 0..seq {
                    let qt = q.row(t);
                    let (pattern, mut zt) = ops::attend_row(
                        qt.as_slice().expect("contiguous"),
                        t + 1,
                        |s| &kf[s * dh..(s + 1) * dh],
                        |s| &vf[s * dh..(s + 1) * dh],
                    );
                    for iv in interventions {
                        if iv.site == (Site::Head { layer: l, head: h }) && iv.position.matches(t, seq) {
                            iv.apply(&mut zt);
                        }
                    }
                    z.row_mut(t).assign(&ArrayView1::from(&zt));
                    p3.slice_mut(ndarray::s![h, t, ..=t]).assign(&ArrayView1::from(&pattern));
                }
                let out = z.dot(&lw.w_o.index_axis(Axis(0), h)) + &b_o_share;
                resid_mid += &out;
                z3.index_axis_mut(Axis(0), h).assign(&z);
                o3.index_axis_mut(Axis(0), h).assign(&out);
            }

            let x2 = ln_rows(&resid_mid, &lw.ln2_w, &lw.ln2_b, cfg.ln_epsilon);
            let pre = x2.dot(&lw.w_in) + &lw.b_in;
            let mut hidden = pre.mapv(ops::gelu);
            for iv in interventions {
                if iv.site == (Site::Mlp { layer: l }) {
                    for t in 0..seq {
                        if iv.position.matches(t, seq) {
                            let mut row = hidden.row_mut(t);
                            iv.apply(row.as_slice_mut().expect("contiguous"));
                        }
                    }
                }
            }
            let mlp_out = hidden.dot(&lw.w_out) + &lw.b_out;
            let resid_post = &resid_mid + &mlp_out;

            cache.q.push(q3);
            cache.k.push(k3);
            cache.v.push(v3);
            cache.z.push(z3);
            cache.pattern.push(p3);
            cache.attn_out.push(o3);
            cache.resid_mid.push(resid_mid);
            cache.mlp_pre.push(pre);
            cache.mlp_hidden.push(hidden);
            cache.mlp_out.push(mlp_out);
            resid = resid_post.clone();
            cache.resid_post.push(resid_post);
        }

        if interventions
            .iter()
            .any(|iv| iv.site == (Site::Residual { layer: n_layers }))
        {
            apply_residual(&mut resid, interventions, n_layers);
            *cache.resid_post.last_mut().expect("at least one layer") = resid.clone();
        }

        let logits = match rows {
            LogitRows::All => {
                let normed = ln_rows(&resid, &self.ln_f_w, &self.ln_f_b, cfg.ln_epsilon);
                normed.dot(&self.unembed_view())
            }
            LogitRows::Last => {
                let last = self.logits_from_resid(cache.final_resid_at(seq - 1));
                Array2::from_shape_vec((1, last.len()), last).expect("row")
            }
        };
        Ok((logits, cache))
    }

    /// Final LayerNorm + unembedding of one residual vector.
    pub fn logits_from_resid(&self, resid: &[f32]) -> Vec<f32> {
        let normed = ops::layer_norm(resid, &self.ln_f_w, &self.ln_f_b, self.config.ln_epsilon);
        ops::vec_mat(&normed, self.unembed_view())
    }

    /// Logits of selected vocabulary entries for one residual vector.
    pub fn logit_columns(&self, resid: &[f32], ids: &[u32]) -> Vec<f32> {
        let normed = ops::layer_norm(resid, &self.ln_f_w, &self.ln_f_b, self.config.ln_epsilon);
        let u = self.unembed_view();
        ids.iter()
            .map(|&id| {
                let col = u.column(id as usize);
                normed.iter().zip(col.iter()).fold(0.0f32, |acc, (a, b)| acc + a * b)
            })
            .collect()
    }

    /// Recomputes one head's `z` at `position`, taking the query from the
    /// Q-source run and keys/values over all earlier positions from the
    /// K- and V-source runs named by `coalition` (clean when the channel
    /// is in the coalition, corrupt otherwise).
    pub fn head_coalition_output(
        &self,
        layer: usize,
        head: usize,
        clean: &ActivationCache,
        corrupt: &ActivationCache,
        coalition: CoalitionSpec,
        position: usize,
    ) -> Result<Vec<f32>> {
        if clean.seq_len() != corrupt.seq_len() {
            return Err(Error::Misaligned {
                clean: clean.seq_len(),
                corrupt: corrupt.seq_len(),
            });
        }
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(Error::InvalidComponent(crate::ComponentId::head(layer, head)));
        }
        if position >= clean.seq_len() {
            return Err(Error::Input(format!("position {position} out of range")));
        }
        let pick = |clean_side: bool| if clean_side { clean } else { corrupt };
        let (qs, ks, vs) = (pick(coalition.q), pick(coalition.k), pick(coalition.v));
        let (_, z) = ops::attend_row(
            qs.q_at(layer, head, position),
            position + 1,
            |s| ks.k_at(layer, head, s),
            |s| vs.v_at(layer, head, s),
        );
        Ok(z)
    }
}

fn apply_residual(resid: &mut Array2<f32>, interventions: &[Intervention], layer: usize) {
    let seq = resid.nrows();
    for iv in interventions {
        if iv.site == (Site::Residual { layer }) {
            for t in 0..seq {
                if iv.position.matches(t, seq) {
                    let mut row = resid.row_mut(t);
                    iv.apply(row.as_slice_mut().expect("contiguous"));
                }
            }
        }
    }
}
