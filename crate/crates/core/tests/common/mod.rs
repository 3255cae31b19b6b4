// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use circuitprint::datasets::{self, Task, TokenizedPair};
use circuitprint::toy::{random_model, toy_config};
use circuitprint::{Model, Tokenizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn toy_dir() -> PathBuf {
    fixture_dir().join("toy")
}

pub fn toy_fixture() -> (Model, Tokenizer) {
    let model = Model::from_dir(&toy_dir()).expect("toy fixture loads");
    let tok = Tokenizer::from_dir(&toy_dir()).expect("toy tokenizer loads");
    (model, tok)
}

pub fn toy_pairs(task: Task, n: usize, seed: u64) -> Vec<TokenizedPair> {
    let (_, tok) = toy_fixture();
    datasets::tokenize_all(&task.generate(n, seed), &tok).expect("pool words are in the toy vocabulary")
}

/// A random toy model plus a random aligned pair: the corrupt prompt
/// differs from the clean one at a few positions.
pub fn random_case(seed: u64) -> (Model, TokenizedPair) {
    let model = random_model(&toy_config(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let v = model.config.vocab_size as u32 - 1;
    let len = rng.random_range(3..12);
    let clean: Vec<u32> = (0..len).map(|_| rng.random_range(0..v)).collect();
    let mut corrupt = clean.clone();
    while corrupt == clean {
        for _ in 0..rng.random_range(1..4) {
            let i = rng.random_range(1..len);
            corrupt[i] = rng.random_range(0..v);
        }
    }
    let a_plus = rng.random_range(0..v);
    let mut a_minus = rng.random_range(0..v);
    while a_minus == a_plus {
        a_minus = rng.random_range(0..v);
    }
    (
        model,
        TokenizedPair {
            clean,
            corrupt,
            a_plus,
            a_minus,
        },
    )
}

pub fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Directory holding a converted GPT-2-small checkpoint, if configured.
pub fn gpt2_dir() -> Option<PathBuf> {
    std::env::var_os("CIRCUITPRINT_GPT2_DIR")
        .map(PathBuf::from)
        .filter(|p| p.join("model.safetensors").exists())
}
