// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model weights and the safetensors archive format.
//!
//! Native tensor names (all little-endian f32):
//!
//! | name                          | shape                         |
//! |-------------------------------|-------------------------------|
//! | `wte.weight`                  | `[vocab, d_model]`            |
//! | `wpe.weight`                  | `[max_positions, d_model]`    |
//! | `blocks.{l}.ln1.weight/bias`  | `[d_model]`                   |
//! | `blocks.{l}.attn.W_Q/W_K/W_V` | `[n_heads, d_model, d_head]`  |
//! | `blocks.{l}.attn.b_Q/b_K/b_V` | `[n_heads, d_head]`           |
//! | `blocks.{l}.attn.W_O`         | `[n_heads, d_head, d_model]`  |
//! | `blocks.{l}.attn.b_O`         | `[d_model]`                   |
//! | `blocks.{l}.ln2.weight/bias`  | `[d_model]`                   |
//! | `blocks.{l}.mlp.W_in`         | `[d_model, d_mlp]`            |
//! | `blocks.{l}.mlp.b_in`         | `[d_mlp]`                     |
//! | `blocks.{l}.mlp.W_out`        | `[d_mlp, d_model]`            |
//! | `blocks.{l}.mlp.b_out`        | `[d_model]`                   |
//! | `ln_f.weight/bias`            | `[d_model]`                   |
//! | `unembed.weight` (optional)   | `[d_model, vocab]`            |
//!
//! Without `unembed.weight` the unembedding is tied to `wte`. Hugging Face
//! GPT-2 checkpoints (`h.{l}.attn.c_attn.weight`, ...) are also accepted;
//! their fused QKV projection is split into per-head matrices on load.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Weights of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_w: Array1<f32>,
    pub ln1_b: Array1<f32>,
    /// `[n_heads, d_model, d_head]`
    pub w_q: Array3<f32>,
    pub w_k: Array3<f32>,
    pub w_v: Array3<f32>,
    /// `[n_heads, d_head]`
    pub b_q: Array2<f32>,
    pub b_k: Array2<f32>,
    pub b_v: Array2<f32>,
    /// `[n_heads, d_head, d_model]`
    pub w_o: Array3<f32>,
    pub b_o: Array1<f32>,
    pub ln2_w: Array1<f32>,
    pub ln2_b: Array1<f32>,
    /// `[d_model, d_mlp]`
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    /// `[d_mlp, d_model]`
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

/// An immutable GPT-2-style model.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub wte: Array2<f32>,
    pub wpe: Array2<f32>,
    pub layers: Vec<LayerWeights>,
    pub ln_f_w: Array1<f32>,
    pub ln_f_b: Array1<f32>,
    /// `[d_model, vocab]`; `None` means tied to `wte`.
    pub unembed: Option<Array2<f32>>,
}

/// One entry of the shape manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

/// Ordered listing of every tensor in an archive, with the config it
/// was produced for and a content hash of the archive bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeManifest {
    pub tensors: Vec<ManifestEntry>,
    pub config: ModelConfig,
    pub source: String,
    pub content_hash: String,
}

/// Names and shapes the native layout requires for `config`.
pub fn expected_tensors(config: &ModelConfig, tied: bool) -> Vec<ManifestEntry> {
    let (d, h, dh, dm) = (config.d_model, config.n_heads, config.d_head, config.d_mlp);
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        out.push(ManifestEntry {
            name,
            dtype: "F32".into(),
            shape,
        })
    };
    push("wte.weight".into(), vec![config.vocab_size, d]);
    push("wpe.weight".into(), vec![config.max_positions, d]);
    for l in 0..config.n_layers {
        let p = format!("blocks.{l}");
        push(format!("{p}.ln1.weight"), vec![d]);
        push(format!("{p}.ln1.bias"), vec![d]);
        for m in ["W_Q", "W_K", "W_V"] {
            push(format!("{p}.attn.{m}"), vec![h, d, dh]);
        }
        for b in ["b_Q", "b_K", "b_V"] {
            push(format!("{p}.attn.{b}"), vec![h, dh]);
        }
        push(format!("{p}.attn.W_O"), vec![h, dh, d]);
        push(format!("{p}.attn.b_O"), vec![d]);
        push(format!("{p}.ln2.weight"), vec![d]);
        push(format!("{p}.ln2.bias"), vec![d]);
        push(format!("{p}.mlp.W_in"), vec![d, dm]);
        push(format!("{p}.mlp.b_in"), vec![dm]);
        push(format!("{p}.mlp.W_out"), vec![dm, d]);
        push(format!("{p}.mlp.b_out"), vec![d]);
    }
    push("ln_f.weight".into(), vec![d]);
    push("ln_f.bias".into(), vec![d]);
    if !tied {
        push("unembed.weight".into(), vec![d, config.vocab_size]);
    }
    out
}

/// Name lookup over an archive, tolerant of a `transformer.` prefix.
struct Archive<'a> {
    st: SafeTensors<'a>,
    prefix: &'static str,
}

impl<'a> Archive<'a> {
    fn has(&self, name: &str) -> bool {
        self.st.tensor(&format!("{}{name}", self.prefix)).is_ok()
    }

    fn raw(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let full = format!("{}{name}", self.prefix);
        let view = self
            .st
            .tensor(&full)
            .map_err(|_| Error::MissingTensor(name.to_string()))?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::Archive(format!(
                "tensor `{name}` has dtype {:?}, only F32 is supported",
                view.dtype()
            )));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect::<Vec<_>>();
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Archive(format!(
                "tensor `{name}` has a non-finite entry at flat index {bad}"
            )));
        }
        Ok((view.shape().to_vec(), data))
    }

    fn shaped(&self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let (shape, data) = self.raw(name)?;
        if shape != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                actual: shape,
            });
        }
        Ok(data)
    }

    fn vec1(&self, name: &str, n: usize) -> Result<Array1<f32>> {
        Ok(Array1::from(self.shaped(name, &[n])?))
    }

    fn mat(&self, name: &str, r: usize, c: usize) -> Result<Array2<f32>> {
        let data = self.shaped(name, &[r, c])?;
        Ok(Array2::from_shape_vec((r, c), data).expect("shape checked"))
    }

    fn cube(&self, name: &str, a: usize, b: usize, c: usize) -> Result<Array3<f32>> {
        let data = self.shaped(name, &[a, b, c])?;
        Ok(Array3::from_shape_vec((a, b, c), data).expect("shape checked"))
    }
}

impl Model {
    /// Loads `config.json` + `model.safetensors` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "model directory not found"),
            ));
        }
        let model = load_model(&dir.join(CONFIG_FILE), &dir.join(WEIGHTS_FILE))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            let manifest: ShapeManifest = serde_json::from_str(&text)?;
            check_manifest(&manifest, &model.config, model.unembed.is_none())?;
        }
        Ok(model)
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    /// Output projection of one head, `[d_head, d_model]`.
    pub fn w_o(&self, layer: usize, head: usize) -> ArrayView2<'_, f32> {
        self.layers[layer].w_o.index_axis(Axis(0), head)
    }

    /// Unembedding as a `[d_model, vocab]` view.
    pub fn unembed_view(&self) -> ArrayView2<'_, f32> {
        match &self.unembed {
            Some(u) => u.view(),
            None => self.wte.t(),
        }
    }

    /// Writes `model.safetensors`, `config.json` and `manifest.json`.
    pub fn save(&self, dir: &Path, source: &str) -> Result<ShapeManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let entries = expected_tensors(&self.config, self.unembed.is_none());
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(entries.len());
        for entry in &entries {
            let data = self.tensor_data(&entry.name);
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((entry.name.clone(), entry.shape.clone(), bytes));
        }
        let views: Vec<(String, TensorView<'_>)> = buffers
            .iter()
            .map(|(n, shape, bytes)| {
                let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map_err(|e| Error::Archive(e.to_string()))?;
                Ok((n.clone(), view))
            })
            .collect::<Result<_>>()?;
        let bytes = safetensors::serialize(views, None).map_err(|e| Error::Archive(e.to_string()))?;
        let weights_path = dir.join(WEIGHTS_FILE);
        std::fs::write(&weights_path, &bytes).map_err(|e| Error::io(&weights_path, e))?;
        let config_path = dir.join(CONFIG_FILE);
        std::fs::write(&config_path, serde_json::to_string_pretty(&self.config)?)
            .map_err(|e| Error::io(&config_path, e))?;
        let manifest = ShapeManifest {
            tensors: entries,
            config: self.config.clone(),
            source: source.to_string(),
            content_hash: sha256_hex(&bytes),
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest)
    }

    fn tensor_data(&self, name: &str) -> Vec<f32> {
        fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> Vec<f32> {
            a.iter().copied().collect()
        }
        match name {
            "wte.weight" => return flat(&self.wte),
            "wpe.weight" => return flat(&self.wpe),
            "ln_f.weight" => return flat(&self.ln_f_w),
            "ln_f.bias" => return flat(&self.ln_f_b),
            "unembed.weight" => return flat(self.unembed.as_ref().expect("untied")),
            _ => {}
        }
        let rest = name.strip_prefix("blocks.").expect("block tensor");
        let (l, field) = rest.split_once('.').expect("block tensor");
        let lw = &self.layers[l.parse::<usize>().expect("layer index")];
        match field {
            "ln1.weight" => flat(&lw.ln1_w),
            "ln1.bias" => flat(&lw.ln1_b),
            "attn.W_Q" => flat(&lw.w_q),
            "attn.W_K" => flat(&lw.w_k),
            "attn.W_V" => flat(&lw.w_v),
            "attn.b_Q" => flat(&lw.b_q),
            "attn.b_K" => flat(&lw.b_k),
            "attn.b_V" => flat(&lw.b_v),
            "attn.W_O" => flat(&lw.w_o),
            "attn.b_O" => flat(&lw.b_o),
            "ln2.weight" => flat(&lw.ln2_w),
            "ln2.bias" => flat(&lw.ln2_b),
            "mlp.W_in" => flat(&lw.w_in),
            "mlp.b_in" => flat(&lw.b_in),
            "mlp.W_out" => flat(&lw.w_out),
            "mlp.b_out" => flat(&lw.b_out),
            other => unreachable!("unknown tensor field {other}"),
        }
    }
}

fn check_manifest(manifest: &ShapeManifest, config: &ModelConfig, tied: bool) -> Result<()> {
    if &manifest.config != config {
        return Err(Error::Config("manifest config differs from config.json".into()));
    }
    let listed: HashMap<&str, &ManifestEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    for want in expected_tensors(config, tied) {
        match listed.get(want.name.as_str()) {
            None => return Err(Error::MissingTensor(want.name)),
            Some(got) if got.shape != want.shape => {
                return Err(Error::ShapeMismatch {
                    name: want.name,
                    expected: want.shape,
                    actual: got.shape.clone(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a weights file.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Loads a model from a config file and a safetensors archive.
pub fn load_model(config_path: &Path, weights_path: &Path) -> Result<Model> {
    let config = ModelConfig::from_file(config_path)?;
    let bytes = std::fs::read(weights_path).map_err(|e| Error::io(weights_path, e))?;
    load_from_bytes(config, &bytes)
}

/// Builds a model from an in-memory safetensors archive.
pub fn load_from_bytes(config: ModelConfig, bytes: &[u8]) -> Result<Model> {
    config.validate()?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(e.to_string()))?;
    let mut archive = Archive { st, prefix: "" };
    if !archive.has("wte.weight") {
        archive.prefix = "transformer.";
    }
    let native = archive.has("blocks.0.attn.W_Q") || !archive.has("h.0.attn.c_attn.weight");
    let (d, v, p) = (config.d_model, config.vocab_size, config.max_positions);
    let wte = archive.mat("wte.weight", v, d)?;
    let wpe = archive.mat("wpe.weight", p, d)?;
    let layers = (0..config.n_layers)
        .map(|l| {
            if native {
                native_layer(&archive, &config, l)
            } else {
                fused_layer(&archive, &config, l)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let ln_f_w = archive.vec1("ln_f.weight", d)?;
    let ln_f_b = archive.vec1("ln_f.bias", d)?;
    let unembed = if archive.has("unembed.weight") {
        Some(archive.mat("unembed.weight", d, v)?)
    } else if archive.has("lm_head.weight") {
        let lm = archive.mat("lm_head.weight", v, d)?;
        if lm == wte {
            None
        } else {
            Some(lm.t().to_owned())
        }
    } else {
        None
    };
    Ok(Model {
        config,
        wte,
        wpe,
        layers,
        ln_f_w,
        ln_f_b,
        unembed,
    })
}

fn native_layer(a: &Archive<'_>, c: &ModelConfig, l: usize) -> Result<LayerWeights> {
    let (d, h, dh, dm) = (c.d_model, c.n_heads, c.d_head, c.d_mlp);
    let p = format!("blocks.{l}");
    Ok(LayerWeights {
        ln1_w: a.vec1(&format!("{p}.ln1.weight"), d)?,
        ln1_b: a.vec1(&format!("{p}.ln1.bias"), d)?,
        w_q: a.cube(&format!("{p}.attn.W_Q"), h, d, dh)?,
        w_k: a.cube(&format!("{p}.attn.W_K"), h, d, dh)?,
        w_v: a.cube(&format!("{p}.attn.W_V"), h, d, dh)?,
        b_q: a.mat(&format!("{p}.attn.b_Q"), h, dh)?,
        b_k: a.mat(&format!("{p}.attn.b_K"), h, dh)?,
        b_v: a.mat(&format!("{p}.attn.b_V"), h, dh)?,
        w_o: a.cube(&format!("{p}.attn.W_O"), h, dh, d)?,
        b_o: a.vec1(&format!("{p}.attn.b_O"), d)?,
        ln2_w: a.vec1(&format!("{p}.ln2.weight"), d)?,
        ln2_b: a.vec1(&format!("{p}.ln2.bias"), d)?,
        w_in: a.mat(&format!("{p}.mlp.W_in"), d, dm)?,
        b_in: a.vec1(&format!("{p}.mlp.b_in"), dm)?,
        w_out: a.mat(&format!("{p}.mlp.W_out"), dm, d)?,
        b_out: a.vec1(&format!("{p}.mlp.b_out"), d)?,
    })
}

/// Hugging Face GPT-2 layout: `Conv1D` weights stored `[in, out]`, with
/// Q, K and V fused along the output axis.
fn fused_layer(a: &Archive<'_>, c: &ModelConfig, l: usize) -> Result<LayerWeights> {
    let (d, h, dh, dm) = (c.d_model, c.n_heads, c.d_head, c.d_mlp);
    let p = format!("h.{l}");
    let c_attn = a.mat(&format!("{p}.attn.c_attn.weight"), d, 3 * d)?;
    let c_attn_b = a.vec1(&format!("{p}.attn.c_attn.bias"), 3 * d)?;
    let c_proj = a.mat(&format!("{p}.attn.c_proj.weight"), d, d)?;
    let split = |which: usize| -> (Array3<f32>, Array2<f32>) {
        let mut w = Array3::zeros((h, d, dh));
        let mut b = Array2::zeros((h, dh));
        for head in 0..h {
            let lo = which * d + head * dh;
            w.index_axis_mut(Axis(0), head)
                .assign(&c_attn.slice(s![.., lo..lo + dh]));
            b.row_mut(head).assign(&c_attn_b.slice(s![lo..lo + dh]));
        }
        (w, b)
    };
    let (w_q, b_q) = split(0);
    let (w_k, b_k) = split(1);
    let (w_v, b_v) = split(2);
    let mut w_o = Array3::zeros((h, dh, d));
    for head in 0..h {
        w_o.index_axis_mut(Axis(0), head)
            .assign(&c_proj.slice(s![head * dh..(head + 1) * dh, ..]));
    }
    Ok(LayerWeights {
        ln1_w: a.vec1(&format!("{p}.ln_1.weight"), d)?,
        ln1_b: a.vec1(&format!("{p}.ln_1.bias"), d)?,
        w_q,
        w_k,
        w_v,
        b_q,
        b_k,
        b_v,
        w_o,
        b_o: a.vec1(&format!("{p}.attn.c_proj.bias"), d)?,
        ln2_w: a.vec1(&format!("{p}.ln_2.weight"), d)?,
        ln2_b: a.vec1(&format!("{p}.ln_2.bias"), d)?,
        w_in: a.mat(&format!("{p}.mlp.c_fc.weight"), d, dm)?,
        b_in: a.vec1(&format!("{p}.mlp.c_fc.bias"), dm)?,
        w_out: a.mat(&format!("{p}.mlp.c_proj.weight"), dm, d)?,
        b_out: a.vec1(&format!("{p}.mlp.c_proj.bias"), d)?,
    })
}

/// Standard files of a model directory.
pub fn model_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(CONFIG_FILE), dir.join(WEIGHTS_FILE))
}
