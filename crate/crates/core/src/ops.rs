// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense-vector kernels shared by the forward pass and the analyses.
//!
//! All routines accumulate in `f32` left to right so that identical inputs
//! give bit-identical outputs no matter which caller runs them.

use ndarray::{Array1, ArrayView1, ArrayView2};

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

#[inline]
pub fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add_assign(acc: &mut [f32], x: &[f32]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

pub fn axpy(acc: &mut [f32], alpha: f32, x: &[f32]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

pub fn scale(x: &[f32], s: f32) -> Vec<f32> {
    x.iter().map(|v| v * s).collect()
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// `x · W` for a row vector `x` (len `W.nrows()`).
pub fn vec_mat(x: &[f32], w: ArrayView2<'_, f32>) -> Vec<f32> {
    let xv = ArrayView1::from(x);
    xv.dot(&w).to_vec()
}

/// `W · y` for a column vector `y` (len `W.ncols()`).
pub fn mat_vec(w: ArrayView2<'_, f32>, y: &[f32]) -> Vec<f32> {
    let yv = ArrayView1::from(y);
    w.dot(&yv).to_vec()
}

pub fn layer_norm(x: &[f32], weight: &Array1<f32>, bias: &Array1<f32>, eps: f32) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(weight.iter().zip(bias.iter()))
        .map(|(v, (w, b))| (v - mean) * inv * w + b)
        .collect()
}

/// Tanh-approximated GELU, as used by GPT-2.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Numerically stable softmax over a full row.
pub fn softmax(xs: &[f32]) -> Vec<f32> {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = xs.iter().map(|v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One causal attention row.
///
/// `key(s)` / `value(s)` return the key and value vectors at position `s`
/// for `s` in `0..len`. Returns the attention weights over those positions
/// and the weighted value sum `z`.
pub fn attend_row<'a, K, V>(query: &[f32], len: usize, key: K, value: V) -> (Vec<f32>, Vec<f32>)
where
    K: Fn(usize) -> &'a [f32],
    V: Fn(usize) -> &'a [f32],
{
    let scale = 1.0 / (query.len() as f32).sqrt();
    let scores: Vec<f32> = (0..len).map(|s| dot(query, key(s)) * scale).collect();
    let pattern = softmax(&scores);
    let mut z = vec![0.0f32; query.len()];
    for (s, p) in pattern.iter().enumerate() {
        axpy(&mut z, *p, value(s));
    }
    (pattern, z)
}

/// Mean and (population) standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
        let mut r = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, _) = mean_sd(&ra);
    let (mb, _) = mean_sd(&rb);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
