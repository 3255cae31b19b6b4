// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random models for tests and fixtures.

use ndarray::{Array, Dimension, IntoDimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{LayerWeights, Model, ModelConfig};

/// 2 layers, 4 heads, d_model 32, d_mlp 128, vocab 256.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_head: 8,
        d_mlp: 128,
        vocab_size: 256,
        max_positions: 64,
        ln_epsilon: 1e-5,
        bos_token_id: None,
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<D: Dimension>(&mut self, shape: impl IntoDimension<Dim = D>, mean: f32, sd: f32) -> Array<f32, D> {
        let dist = Normal::new(mean, sd).expect("finite sd");
        let dim = shape.into_dimension();
        let n = dim.size();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Array::from_shape_vec(dim, data).expect("sized")
    }
}

/// Random weights with unit-scale activations, so attention patterns and
/// MLP nonlinearities are far from trivial.
pub fn random_model(config: &ModelConfig, seed: u64) -> Model {
    config.validate().expect("valid toy config");
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let (d, h, dh, dm) = (config.d_model, config.n_heads, config.d_head, config.d_mlp);
    let proj = 1.0 / (d as f32).sqrt();
    let wte = init.normal((config.vocab_size, d), 0.0, 1.0);
    let wpe = init.normal((config.max_positions, d), 0.0, 0.3);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_w: init.normal(d, 1.0, 0.1),
            ln1_b: init.normal(d, 0.0, 0.05),
            w_q: init.normal((h, d, dh), 0.0, 2.0 * proj),
            w_k: init.normal((h, d, dh), 0.0, 2.0 * proj),
            w_v: init.normal((h, d, dh), 0.0, proj),
            b_q: init.normal((h, dh), 0.0, 0.05),
            b_k: init.normal((h, dh), 0.0, 0.05),
            b_v: init.normal((h, dh), 0.0, 0.05),
            w_o: init.normal((h, dh, d), 0.0, 1.0 / (dh as f32).sqrt()),
            b_o: init.normal(d, 0.0, 0.05),
            ln2_w: init.normal(d, 1.0, 0.1),
            ln2_b: init.normal(d, 0.0, 0.05),
            w_in: init.normal((d, dm), 0.0, proj),
            b_in: init.normal(dm, 0.0, 0.05),
            w_out: init.normal((dm, d), 0.0, 1.0 / (dm as f32).sqrt()),
            b_out: init.normal(d, 0.0, 0.05),
        })
        .collect();
    Model {
        config: config.clone(),
        wte,
        wpe,
        layers,
        ln_f_w: init.normal(d, 1.0, 0.1),
        ln_f_b: init.normal(d, 0.0, 0.05),
        unembed: None,
    }
}
