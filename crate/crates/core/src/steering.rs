// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering along answer-token directions.
//!
//! Answer representations read at a site (a head's `z`, or the residual
//! stream after a block) span a low-dimensional subspace. Source and target
//! prototypes are projected into it, and the site's activation at the final
//! position is shifted from the source direction toward the target.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::TokenizedPair;
use crate::error::{Error, Result};
use crate::fingerprint::{answer_representation, AnswerRep};
use crate::model::{Intervention, InterventionKind, LogitRows, Model, Position, Site};
use crate::ops;

/// Fraction of centred variance the basis must explain.
pub const VARIANCE_KEPT: f64 = 0.99;

/// Default number of steered heads.
pub const DEFAULT_HEADS: usize = 25;

/// 11 strengths from 0 to 1.
pub fn default_alphas() -> Vec<f32> {
    (0..=10).map(|i| i as f32 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringBasis {
    pub mean: Vec<f32>,
    /// Orthonormal rows.
    pub basis: Vec<Vec<f32>>,
}

/// Mean-centred SVD of `reps`, keeping the leading right singular vectors
/// that explain at least 99% of the variance, at most `k − 1` of them.
pub fn build_basis(reps: &[Vec<f32>]) -> Result<SteeringBasis> {
    let k = reps.len();
    if k < 2 {
        return Err(Error::DegenerateBasis(format!("need at least 2 representations, got {k}")));
    }
    let d = reps[0].len();
    if reps.iter().any(|r| r.len() != d) {
        return Err(Error::Input("representations differ in length".into()));
    }
    let mut mean = vec![0.0f64; d];
    for r in reps {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64 / k as f64;
        }
    }
    let centred = DMatrix::from_fn(k, d, |i, j| reps[i][j] as f64 - mean[j]);
    let scale = reps.iter().map(|r| ops::norm(r) as f64).fold(1.0f64, f64::max);
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    if sv.first().copied().unwrap_or(0.0) <= 1e-6 * scale {
        return Err(Error::DegenerateBasis("representations are identical".into()));
    }
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut kept = 0;
    let mut acc = 0.0;
    while kept < sv.len() && kept < k - 1 && acc < VARIANCE_KEPT * total {
        acc += sv[kept] * sv[kept];
        kept += 1;
    }
    let basis = order[..kept]
        .iter()
        .map(|&i| v_t.row(i).iter().map(|&x| x as f32).collect())
        .collect();
    Ok(SteeringBasis {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        basis,
    })
}

/// `Σ_i ⟨rep − mean, u_i⟩ u_i`.
pub fn project_prototype(basis: &SteeringBasis, rep: &[f32]) -> Vec<f32> {
    let centred = ops::sub(rep, &basis.mean);
    let mut out = vec![0.0f32; rep.len()];
    for u in &basis.basis {
        ops::axpy(&mut out, ops::dot(&centred, u), u);
    }
    out
}

fn unit(v: &[f32]) -> Result<Vec<f32>> {
    let n = ops::norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroDirection);
    }
    Ok(ops::scale(v, 1.0 / n))
}

/// Shift added by a known-target intervention:
/// `α ‖d_s − d_t‖ (d̂_t − d̂_s)`.
pub fn known_target_shift(d_s: &[f32], d_t: &[f32], alpha: f32) -> Result<Vec<f32>> {
    let (us, ut) = (unit(d_s)?, unit(d_t)?);
    let m = alpha * ops::norm(&ops::sub(d_s, d_t));
    Ok(ops::sub(&ut, &us).into_iter().map(|v| v * m).collect())
}

/// `x − α‖d_s − d_t‖ d̂_s + α‖d_s − d_t‖ d̂_t`; returns `x` unchanged when
/// `α = 0` or `d_s = d_t`.
pub fn steer_known_target(x: &[f32], d_s: &[f32], d_t: &[f32], alpha: f32) -> Result<Vec<f32>> {
    let (us, ut) = (unit(d_s)?, unit(d_t)?);
    if alpha == 0.0 || d_s == d_t {
        return Ok(x.to_vec());
    }
    let m = alpha * ops::norm(&ops::sub(d_s, d_t));
    Ok(x.iter()
        .zip(us.iter().zip(&ut))
        .map(|(v, (s, t))| v - m * s + m * t)
        .collect())
}

/// Shift added by a style intervention: `−‖d_s‖ (d̂_s − d̂_t)`.
pub fn style_shift(d_s: &[f32], d_t: &[f32]) -> Result<Vec<f32>> {
    let (us, ut) = (unit(d_s)?, unit(d_t)?);
    let m = ops::norm(d_s);
    Ok(ops::sub(&us, &ut).into_iter().map(|v| -m * v).collect())
}

/// `x − ‖d_s‖ (d̂_s − d̂_t)`.
pub fn steer_style(x: &[f32], d_s: &[f32], d_t: &[f32]) -> Result<Vec<f32>> {
    let (us, ut) = (unit(d_s)?, unit(d_t)?);
    if us == ut {
        return Ok(x.to_vec());
    }
    let m = ops::norm(d_s);
    Ok(x.iter()
        .zip(us.iter().zip(&ut))
        .map(|(v, (s, t))| v - m * (s - t))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteerMode {
    #[default]
    KnownTarget,
    Style,
}

/// Space the intervention acts in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteerSpace {
    /// A head's `z`.
    #[default]
    Head,
    /// The residual stream after the head's block.
    Residual,
}

/// Where a representation is read and written for a steered head.
pub fn site_for(head: crate::ComponentId, space: SteerSpace) -> Result<Site> {
    match (head, space) {
        (crate::ComponentId::Head { layer, head }, SteerSpace::Head) => Ok(Site::Head { layer, head }),
        (crate::ComponentId::Head { layer, .. }, SteerSpace::Residual) => Ok(Site::Residual { layer: layer + 1 }),
        (other, _) => Err(Error::InvalidComponent(other)),
    }
}

/// A representation's vector at a site.
pub fn readout(rep: &AnswerRep, site: Site) -> Result<Vec<f32>> {
    match site {
        Site::Head { layer, head } => Ok(rep.z[layer][head].clone()),
        Site::Residual { layer } if layer >= 1 => Ok(rep.resid[layer - 1].clone()),
        other => Err(Error::Intervention {
            site: other.to_string(),
            reason: "not a steering site".into(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSteer {
    pub site: Site,
    pub d_s: Vec<f32>,
    pub d_t: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub mode: SteerMode,
    pub alpha: f32,
    pub sites: Vec<SiteSteer>,
}

impl SteeringSpec {
    /// Known-target spec: per site, a basis over `prototypes` and the
    /// projected means of the `source` and `target` sets.
    pub fn known_target(
        sites: &[Site],
        prototypes: &[&AnswerRep],
        source: &[&AnswerRep],
        target: &[&AnswerRep],
        alpha: f32,
    ) -> Result<Self> {
        let mean_readout = |set: &[&AnswerRep], site: Site| -> Result<Vec<f32>> {
            let vs = set.iter().map(|r| readout(r, site)).collect::<Result<Vec<_>>>()?;
            let first = vs.first().ok_or_else(|| Error::Input("empty prototype set".into()))?;
            let mut m = vec![0.0f32; first.len()];
            for v in &vs {
                ops::axpy(&mut m, 1.0 / vs.len() as f32, v);
            }
            Ok(m)
        };
        let sites = sites
            .iter()
            .map(|&site| {
                let reps = prototypes.iter().map(|r| readout(r, site)).collect::<Result<Vec<_>>>()?;
                let basis = build_basis(&reps)?;
                Ok(SiteSteer {
                    site,
                    d_s: project_prototype(&basis, &mean_readout(source, site)?),
                    d_t: project_prototype(&basis, &mean_readout(target, site)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SteeringSpec {
            mode: SteerMode::KnownTarget,
            alpha,
            sites,
        })
    }

    /// Style spec from raw source/target readouts.
    pub fn style(sites: &[Site], source: &AnswerRep, target: &AnswerRep) -> Result<Self> {
        let sites = sites
            .iter()
            .map(|&site| {
                Ok(SiteSteer {
                    site,
                    d_s: readout(source, site)?,
                    d_t: readout(target, site)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SteeringSpec {
            mode: SteerMode::Style,
            alpha: 1.0,
            sites,
        })
    }

    pub fn with_alpha(&self, alpha: f32) -> Self {
        SteeringSpec { alpha, ..self.clone() }
    }

    /// Additive interventions at the final position. Fixed points
    /// (`α = 0`, or equal source and target) emit nothing.
    pub fn interventions(&self) -> Result<Vec<Intervention>> {
        let mut out = Vec::new();
        for s in &self.sites {
            let shift = match self.mode {
                SteerMode::KnownTarget => {
                    if self.alpha == 0.0 || s.d_s == s.d_t {
                        unit(&s.d_s)?;
                        unit(&s.d_t)?;
                        continue;
                    }
                    known_target_shift(&s.d_s, &s.d_t, self.alpha)?
                }
                SteerMode::Style => {
                    if self.alpha == 0.0 {
                        continue;
                    }
                    let shift = style_shift(&s.d_s, &s.d_t)?;
                    if shift.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    ops::scale(&shift, self.alpha)
                }
            };
            out.push(add_at(s.site, shift));
        }
        Ok(out)
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode,
            "alpha": self.alpha,
            "sites": self.sites.iter().map(|s| s.site.to_string()).collect::<Vec<_>>(),
        })
    }
}

fn add_at(site: Site, shift: Vec<f32>) -> Intervention {
    let kind = match site {
        Site::Residual { .. } => InterventionKind::AddToResidual,
        _ => InterventionKind::AddToZ,
    };
    Intervention {
        site,
        position: Position::Last,
        kind,
        payload: shift,
        scale: 1.0,
    }
}

/// Replacement by `(1 − α) clean + α corrupt` at each site.
pub fn patching_interventions(
    sites: &[Site],
    clean: &crate::ActivationCache,
    corrupt: &crate::ActivationCache,
    alpha: f32,
) -> Result<Vec<Intervention>> {
    let t = clean.last();
    sites
        .iter()
        .map(|&site| {
            let (c, k, kind) = match site {
                Site::Head { layer, head } => (
                    clean.z_at(layer, head, t),
                    corrupt.z_at(layer, head, t),
                    InterventionKind::ReplaceZ,
                ),
                Site::Residual { layer } if layer >= 1 => (
                    clean.resid_post_at(layer - 1, t),
                    corrupt.resid_post_at(layer - 1, t),
                    InterventionKind::ReplaceResidual,
                ),
                other => {
                    return Err(Error::Intervention {
                        site: other.to_string(),
                        reason: "not a patching site".into(),
                    })
                }
            };
            let payload = c.iter().zip(k).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect();
            Ok(Intervention {
                site,
                position: Position::Last,
                kind,
                payload,
                scale: 1.0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Steering,
    Patching,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub alpha: f32,
    pub p_correct_mean: f64,
    pub p_correct_sd: f64,
    pub logit_diff_mean: f64,
    pub logit_diff_sd: f64,
}

/// `(P(a⁺), logit(a⁺) − logit(a⁻))` at the final position.
pub fn outcome(model: &Model, tokens: &[u32], ivs: &[Intervention], a_plus: u32, a_minus: u32) -> Result<(f64, f64)> {
    let (logits, _) = model.run(tokens, ivs, LogitRows::Last)?;
    let row = logits.row(0);
    let row = row.as_slice().expect("contiguous");
    let p = ops::softmax(row)[a_plus as usize] as f64;
    Ok((p, (row[a_plus as usize] - row[a_minus as usize]) as f64))
}

/// Representations of every distinct answer token of a dataset.
pub fn answer_reps(model: &Model, pairs: &[TokenizedPair]) -> Result<BTreeMap<u32, AnswerRep>> {
    let mut ids: Vec<u32> = pairs.iter().flat_map(|p| [p.a_plus, p.a_minus]).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| Ok((id, answer_representation(model, id)?)))
        .collect()
}

/// Steering from `a⁺` toward `a⁻` at `sites`, swept over `alphas`, with
/// the interpolated-patching baseline at the same sites. The basis at each
/// site spans all answer tokens of the dataset.
pub fn steering_sweep(model: &Model, pairs: &[TokenizedPair], sites: &[Site], alphas: &[f32]) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::Input("no alphas".into()));
    }
    if alphas.windows(2).any(|w| w[1] < w[0]) || alphas.iter().any(|a| a.is_nan() || *a < 0.0) {
        return Err(Error::Input("alphas must be non-negative and ascending".into()));
    }
    let reps = answer_reps(model, pairs)?;
    let prototypes: Vec<&AnswerRep> = reps.values().collect();
    let per_pair: Vec<Vec<[(f64, f64); 2]>> = pairs
        .par_iter()
        .map(|pair| -> Result<Vec<[(f64, f64); 2]>> {
            let base = SteeringSpec::known_target(sites, &prototypes, &[&reps[&pair.a_plus]], &[&reps[&pair.a_minus]], 0.0)?;
            let (_, clean) = model.forward_cached(&pair.clean)?;
            let (_, corrupt) = model.forward_cached(&pair.corrupt)?;
            alphas
                .iter()
                .map(|&alpha| {
                    let steer = base.with_alpha(alpha).interventions()?;
                    let patch = patching_interventions(sites, &clean, &corrupt, alpha)?;
                    Ok([
                        outcome(model, &pair.clean, &steer, pair.a_plus, pair.a_minus)?,
                        outcome(model, &pair.clean, &patch, pair.a_plus, pair.a_minus)?,
                    ])
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (m, method) in [Method::Steering, Method::Patching].into_iter().enumerate() {
        for (i, &alpha) in alphas.iter().enumerate() {
            let p: Vec<f64> = per_pair.iter().map(|r| r[i][m].0).collect();
            let ld: Vec<f64> = per_pair.iter().map(|r| r[i][m].1).collect();
            let (pm, ps) = ops::mean_sd(&p);
            let (lm, ls) = ops::mean_sd(&ld);
            rows.push(SweepRow {
                method,
                alpha,
                p_correct_mean: pm,
                p_correct_sd: ps,
                logit_diff_mean: lm,
                logit_diff_sd: ls,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "alpha", "p_correct_mean", "p_correct_sd", "logit_diff_mean", "logit_diff_sd"])
        .map_err(crate::fingerprint::csv_err)?;
    for r in rows {
        let method = match r.method {
            Method::Steering => "steering",
            Method::Patching => "patching",
        };
        w.write_record([
            method.to_string(),
            r.alpha.to_string(),
            r.p_correct_mean.to_string(),
            r.p_correct_sd.to_string(),
            r.logit_diff_mean.to_string(),
            r.logit_diff_sd.to_string(),
        ])
        .map_err(crate::fingerprint::csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Greedy decoding with `spec` applied at the final position of every
/// step. Stops early at the model's context length.
pub fn generate_steered(model: &Model, prompt: &[u32], spec: &SteeringSpec, max_new_tokens: usize) -> Result<Vec<u32>> {
    if max_new_tokens == 0 {
        return Err(Error::Input("max_new_tokens must be at least 1".into()));
    }
    let ivs = spec.interventions()?;
    let mut tokens = prompt.to_vec();
    for _ in 0..max_new_tokens {
        if tokens.len() >= model.config.max_positions {
            break;
        }
        let (logits, _) = model.run(&tokens, &ivs, LogitRows::Last)?;
        let next = logits
            .row(0)
            .iter()
            .enumerate()
            .fold((0usize, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        tokens.push(next as u32);
    }
    Ok(tokens[prompt.len()..].to_vec())
}

/// One line of the generations JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: String,
    pub steered_text: String,
    pub spec: serde_json::Value,
}
