// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use circuitprint::model::{load_model, model_files, LogitRows, Position};
use circuitprint::toy::{random_model, toy_config};
use circuitprint::{ops, ComponentId, Error, Intervention, Model};
use common::{rel_err, toy_dir, toy_fixture};
use ndarray::Axis;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct LogitCase {
    text: String,
    ids: Vec<u32>,
    argmax: Vec<usize>,
    final_logits: Vec<f64>,
}

#[derive(Deserialize)]
struct LogitFile {
    cases: Vec<LogitCase>,
}

#[test]
fn toy_logits_match_reference_implementation() {
    let (model, tok) = toy_fixture();
    let raw = std::fs::read_to_string(common::fixture_dir().join("toy_logits.json")).unwrap();
    let file: LogitFile = serde_json::from_str(&raw).unwrap();
    assert_eq!(file.cases.len(), 4);
    for case in &file.cases {
        let mut ids = vec![model.config.bos()];
        ids.extend(tok.encode(&case.text));
        assert_eq!(ids, case.ids, "{}", case.text);
        let logits = model.forward(&ids).unwrap();
        let argmax: Vec<usize> = logits
            .outer_iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                row.iter().position(|&x| x == m).unwrap()
            })
            .collect();
        assert_eq!(argmax, case.argmax, "{}", case.text);
        let last = logits.row(ids.len() - 1);
        let max_err = last
            .iter()
            .zip(&case.final_logits)
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-3, "{}: max abs err {max_err}", case.text);
    }
}

#[test]
fn save_and_reload_is_tensor_identical() {
    let model = random_model(&toy_config(), 3);
    let dir = tempfile::tempdir().unwrap();
    let manifest = model.save(dir.path(), "test").unwrap();
    assert_eq!(manifest.source, "test");
    let (config, weights) = model_files(dir.path());
    let back = load_model(&config, &weights).unwrap();
    assert_eq!(back.wte, model.wte);
    assert_eq!(back.wpe, model.wpe);
    for (a, b) in back.layers.iter().zip(&model.layers) {
        assert_eq!(a.w_q, b.w_q);
        assert_eq!(a.w_o, b.w_o);
        assert_eq!(a.w_in, b.w_in);
        assert_eq!(a.b_out, b.b_out);
    }
    assert_eq!(back.ln_f_w, model.ln_f_w);
    assert_eq!(back.forward(&[1, 2, 3]).unwrap(), model.forward(&[1, 2, 3]).unwrap());
}

#[test]
fn fixture_manifest_hash_matches_weights() {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(toy_dir().join("manifest.json")).unwrap()).unwrap();
    let hash = circuitprint::model::file_hash(&toy_dir().join("model.safetensors")).unwrap();
    assert_eq!(manifest["content_hash"], hash);
}

#[test]
fn missing_directory_names_the_path() {
    let err = Model::from_dir(std::path::Path::new("/definitely/not/here")).unwrap_err();
    assert!(err.to_string().contains("/definitely/not/here"), "{err}");
}

#[test]
fn truncated_weights_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    random_model(&toy_config(), 1).save(dir.path(), "t").unwrap();
    let path = dir.path().join("model.safetensors");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(Model::from_dir(dir.path()).is_err());
}

#[test]
fn rejects_out_of_range_tokens_and_long_inputs() {
    let model = random_model(&toy_config(), 1);
    assert!(matches!(model.forward(&[0, 256]), Err(Error::TokenOutOfRange { id: 256, .. })));
    assert!(model.forward(&[]).is_err());
    assert!(model.forward(&vec![1; 65]).is_err());
}

/// Plain-loop attention for one head, independent of the library's kernels.
fn naive_z(model: &Model, resid_pre: &ndarray::Array2<f32>, layer: usize, head: usize) -> Vec<Vec<f32>> {
    let lw = &model.layers[layer];
    let (seq, d, dh) = (resid_pre.nrows(), model.config.d_model, model.config.d_head);
    let ln: Vec<Vec<f32>> = (0..seq)
        .map(|t| {
            let x: Vec<f64> = resid_pre.row(t).iter().map(|&v| v as f64).collect();
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d)
                .map(|i| ((x[i] - mean) / (var + 1e-5).sqrt() * lw.ln1_w[i] as f64 + lw.ln1_b[i] as f64) as f32)
                .collect()
        })
        .collect();
    let proj = |w: &ndarray::Array3<f32>, b: &ndarray::Array2<f32>, x: &[f32]| -> Vec<f64> {
        (0..dh)
            .map(|j| (0..d).map(|i| x[i] as f64 * w[[head, i, j]] as f64).sum::<f64>() + b[[head, j]] as f64)
            .collect()
    };
    (0..seq)
        .map(|t| {
            let q = proj(&lw.w_q, &lw.b_q, &ln[t]);
            let scores: Vec<f64> = (0..=t)
                .map(|s| {
                    let k = proj(&lw.w_k, &lw.b_k, &ln[s]);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            let mut z = vec![0.0f64; dh];
            for s in 0..=t {
                let v = proj(&lw.w_v, &lw.b_v, &ln[s]);
                for j in 0..dh {
                    z[j] += e[s] / total * v[j];
                }
            }
            z.into_iter().map(|x| x as f32).collect()
        })
        .collect()
}

#[test]
fn attention_matches_naive_loops() {
    let model = random_model(&toy_config(), 21);
    let tokens = [5, 17, 200, 3, 99, 42];
    let (_, cache) = model.forward_cached(&tokens).unwrap();
    for layer in 0..2 {
        let resid = ndarray::Array2::from_shape_fn((tokens.len(), 32), |(t, i)| cache.resid_pre_at(layer, t)[i]);
        for head in 0..4 {
            let z = naive_z(&model, &resid, layer, head);
            for (t, zt) in z.iter().enumerate() {
                assert!(rel_err(cache.z_at(layer, head, t), zt) < 1e-5);
            }
        }
    }
}

#[test]
fn per_head_outputs_use_their_w_o_block() {
    let model = random_model(&toy_config(), 22);
    let (_, cache) = model.forward_cached(&[1, 2, 3, 4]).unwrap();
    let lw = &model.layers[1];
    for h in 0..4 {
        let z = cache.z_at(1, h, 3);
        let w = lw.w_o.index_axis(Axis(0), h);
        let expect: Vec<f32> = (0..32)
            .map(|j| (0..8).map(|i| z[i] * w[[i, j]]).sum::<f32>() + lw.b_o[j] / 4.0)
            .collect();
        assert!(rel_err(cache.attn_out_at(1, h, 3), &expect) < 1e-5);
    }
}

#[test]
fn interventions_change_only_their_site() {
    let model = random_model(&toy_config(), 23);
    let tokens = [9, 8, 7, 6];
    let (clean_logits, clean) = model.forward_cached(&tokens).unwrap();
    let iv = Intervention::replace_z(1, 2, Position::Last, vec![0.0; 8]);
    let (logits, cache) = model.forward_intervened(&tokens, &[iv]).unwrap();
    assert_eq!(cache.z_at(1, 2, 3), &[0.0; 8]);
    assert_eq!(cache.z_at(1, 2, 2), clean.z_at(1, 2, 2));
    assert_eq!(cache.z_at(1, 1, 3), clean.z_at(1, 1, 3));
    assert_eq!(logits.row(2), clean_logits.row(2));
    assert_ne!(logits.row(3), clean_logits.row(3));

    let bad = Intervention::replace_z(1, 2, Position::Last, vec![0.0; 3]);
    assert!(model.forward_intervened(&tokens, &[bad]).is_err());
}

#[test]
fn last_row_logits_equal_full_logits() {
    let model = random_model(&toy_config(), 24);
    let tokens = [1, 50, 60, 70];
    let all = model.forward(&tokens).unwrap();
    let (last, _) = model.run(&tokens, &[], LogitRows::Last).unwrap();
    assert!(rel_err(&last.row(0).to_vec(), &all.row(3).to_vec()) < 1e-6);
}

#[test]
fn output_at_reconstructs_every_position() {
    let model = random_model(&toy_config(), 25);
    let (_, cache) = model.forward_cached(&[4, 5, 6, 7, 8]).unwrap();
    for t in 0..5 {
        let mut sum = cache.output_at(ComponentId::Embedding, t).to_vec();
        for c in model.config.components() {
            ops::add_assign(&mut sum, cache.output_at(c, t));
        }
        assert!(rel_err(&sum, cache.final_resid_at(t)) < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn final_residual_is_embedding_plus_component_outputs(
        seed in any::<u64>(),
        tokens in prop::collection::vec(0u32..256, 1..20),
    ) {
        let model = random_model(&toy_config(), seed);
        let (_, cache) = model.forward_cached(&tokens).unwrap();
        let t = cache.last();
        let mut sum = cache.embed_at(t).to_vec();
        for c in model.config.components() {
            ops::add_assign(&mut sum, cache.output_at(c, t));
        }
        prop_assert!(rel_err(&sum, cache.final_resid_at(t)) < 1e-4);
    }

    #[test]
    fn causal_prefix_logits_are_unchanged_by_suffix(
        seed in 0u64..1000,
        tokens in prop::collection::vec(0u32..256, 2..16),
        extra in 0u32..256,
    ) {
        let model = random_model(&toy_config(), seed);
        let a = model.forward(&tokens).unwrap();
        let mut longer = tokens.clone();
        longer.push(extra);
        let b = model.forward(&longer).unwrap();
        for t in 0..tokens.len() {
            let row_a: Vec<f32> = a.row(t).to_vec();
            let row_b: Vec<f32> = b.row(t).to_vec();
            prop_assert!(rel_err(&row_b, &row_a) < 1e-5);
        }
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, tokens in prop::collection::vec(0u32..256, 1..12)) {
        let model = random_model(&toy_config(), seed);
        let (_, cache) = model.forward_cached(&tokens).unwrap();
        for l in 0..2 {
            for h in 0..4 {
                for t in 0..tokens.len() {
                    let row = cache.pattern_row(l, h, t);
                    prop_assert_eq!(row.len(), tokens.len());
                    prop_assert!(row[t + 1..].iter().all(|&p| p == 0.0));
                    let s: f32 = row.iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-5);
                    prop_assert!(row.iter().all(|&p| p >= 0.0));
                }
            }
        }
    }
}
