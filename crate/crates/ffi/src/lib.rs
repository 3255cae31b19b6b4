// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over the circuitprint core.
//!
//! Every function returns a [`cp_status`]. On failure a message is kept
//! per thread and read with [`cp_last_error`]. Buffers are caller-owned;
//! when one is too small the call fails with
//! `CP_STATUS_BUFFER_TOO_SMALL` and writes the required length.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use circuitprint::datasets::TokenizedPair;
use circuitprint::fingerprint::{node_scores, target_direction};
use circuitprint::model::LogitRows;
use circuitprint::{ErrorKind, Model, Tokenizer};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum cp_status {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Usage = 3,
    Data = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Model shape as seen from C.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct cp_model_config {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

/// Opaque model handle.
pub struct cp_model {
    model: Model,
    tokenizer: Tokenizer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: cp_status, msg: impl Into<String>) -> cp_status {
    set_error(msg);
    status
}

fn from_core(e: circuitprint::Error) -> cp_status {
    let status = match e.kind() {
        ErrorKind::Usage => cp_status::Usage,
        ErrorKind::Data => cp_status::Data,
        ErrorKind::Numeric => cp_status::Numeric,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into `CP_STATUS_PANIC`.
fn guard(f: impl FnOnce() -> cp_status) -> cp_status {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(cp_status::Panic, msg)
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, cp_status> {
    if p.is_null() {
        return Err(fail(cp_status::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(cp_status::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ids_arg<'a>(p: *const u32, n: usize, name: &str) -> Result<&'a [u32], cp_status> {
    if p.is_null() {
        return Err(fail(cp_status::NullArgument, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn handle<'a>(m: *const cp_model) -> Result<&'a cp_model, cp_status> {
    m.as_ref().ok_or_else(|| fail(cp_status::NullArgument, "model is null"))
}

/// Copies `src` into a caller buffer of `cap` elements and reports the
/// full length through `out_len`.
unsafe fn write_out<T: Copy>(src: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> cp_status {
    if !out_len.is_null() {
        *out_len = src.len();
    }
    if src.len() > cap {
        return fail(
            cp_status::BufferTooSmall,
            format!("buffer holds {cap}, need {}", src.len()),
        );
    }
    if !src.is_empty() {
        if out.is_null() {
            return fail(cp_status::NullArgument, "output buffer is null");
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    cp_status::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn cp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a model directory. The tokenizer comes from `vocab.json` and
/// `merges.txt` in the same directory when present, else the built-in
/// GPT-2 vocabulary.
///
/// # Safety
/// `model_dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_model_load(model_dir: *const c_char, out: *mut *mut cp_model) -> cp_status {
    guard(|| {
        if out.is_null() {
            return fail(cp_status::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let dir = Path::new(tri!(str_arg(model_dir, "model_dir")));
        let model = tri!(Model::from_dir(dir).map_err(from_core));
        let tokenizer = if dir.join("vocab.json").exists() && dir.join("merges.txt").exists() {
            tri!(Tokenizer::from_dir(dir).map_err(from_core))
        } else {
            Tokenizer::gpt2()
        };
        *out = Box::into_raw(Box::new(cp_model { model, tokenizer }));
        cp_status::Ok
    })
}

/// Frees a handle from [`cp_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cp_model_free(model: *mut cp_model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_model_get_config(model: *const cp_model, out: *mut cp_model_config) -> cp_status {
    guard(|| {
        let m = tri!(handle(model));
        if out.is_null() {
            return fail(cp_status::NullArgument, "out is null");
        }
        let c = &m.model.config;
        *out = cp_model_config {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            d_head: c.d_head,
            d_mlp: c.d_mlp,
            vocab_size: c.vocab_size,
            max_positions: c.max_positions,
        };
        cp_status::Ok
    })
}

/// Encodes `text` into `out_ids`.
///
/// # Safety
/// `text` must be NUL-terminated and `out_ids` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn cp_tokenize(
    model: *const cp_model,
    text: *const c_char,
    out_ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> cp_status {
    guard(|| {
        let m = tri!(handle(model));
        let text = tri!(str_arg(text, "text"));
        write_out(&m.tokenizer.encode(text), out_ids, cap, out_len)
    })
}

/// Logits at the final position; `out_logits` needs `vocab_size` slots.
///
/// # Safety
/// `ids` must hold `n_ids` values and `out_logits` `cap` values.
#[no_mangle]
pub unsafe extern "C" fn cp_final_logits(
    model: *const cp_model,
    ids: *const u32,
    n_ids: usize,
    out_logits: *mut f32,
    cap: usize,
) -> cp_status {
    guard(|| {
        let m = tri!(handle(model));
        let ids = tri!(ids_arg(ids, n_ids, "ids"));
        let (logits, _) = tri!(m.model.run(ids, &[], LogitRows::Last).map_err(from_core));
        let row = logits.row(0);
        write_out(row.as_slice().expect("contiguous"), out_logits, cap, ptr::null_mut())
    })
}

/// `logit(a_plus) − logit(a_minus)` at the final position.
///
/// # Safety
/// `ids` must hold `n_ids` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cp_logit_diff(
    model: *const cp_model,
    ids: *const u32,
    n_ids: usize,
    a_plus: u32,
    a_minus: u32,
    out: *mut f32,
) -> cp_status {
    guard(|| {
        let m = tri!(handle(model));
        let ids = tri!(ids_arg(ids, n_ids, "ids"));
        if out.is_null() {
            return fail(cp_status::NullArgument, "out is null");
        }
        let vocab = m.model.config.vocab_size as u32;
        if a_plus >= vocab || a_minus >= vocab {
            return fail(cp_status::Usage, format!("answer token outside vocabulary of {vocab}"));
        }
        let (logits, _) = tri!(m.model.run(ids, &[], LogitRows::Last).map_err(from_core));
        *out = logits[[0, a_plus as usize]] - logits[[0, a_minus as usize]];
        cp_status::Ok
    })
}

/// Number of scored components: per layer, its heads then its MLP.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cp_component_count(model: *const cp_model) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.components().len())
}

/// Label of component `index`, such as `a3.h7` or `m2`, as a
/// NUL-terminated string. `out_len` receives the length without the NUL.
///
/// # Safety
/// `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn cp_component_label(
    model: *const cp_model,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> cp_status {
    guard(|| {
        let m = tri!(handle(model));
        let comps = m.model.config.components();
        let Some(c) = comps.get(index) else {
            return fail(cp_status::Usage, format!("component index {index} out of range"));
        };
        let mut bytes = c.to_string().into_bytes();
        if !out_len.is_null() {
            *out_len = bytes.len();
        }
        bytes.push(0);
        write_out(&bytes.iter().map(|&b| b as c_char).collect::<Vec<_>>(), buf, cap, ptr::null_mut())
    })
}

/// Node scores of a clean/corrupt prompt pair, in [`cp_component_label`]
/// order. `out_embedding` may be null.
///
/// # Safety
/// `clean` and `corrupt` must hold `n_ids` values, `out_scores` `cap`.
#[no_mangle]
pub unsafe extern "C" fn cp_node_scores(
    model: *const cp_model,
    clean: *const u32,
    corrupt: *const u32,
    n_ids: usize,
    a_plus: u32,
    a_minus: u32,
    out_scores: *mut f32,
    cap: usize,
    out_embedding: *mut f32,
) -> cp_status {
    guard(|| {
        let m = tri!(handle(model));
        let pair = TokenizedPair {
            clean: tri!(ids_arg(clean, n_ids, "clean")).to_vec(),
            corrupt: tri!(ids_arg(corrupt, n_ids, "corrupt")).to_vec(),
            a_plus,
            a_minus,
        };
        let dir = tri!(target_direction(&m.model, a_plus, a_minus).map_err(from_core));
        let scores = tri!(node_scores(&m.model, &pair, &dir).map_err(from_core));
        let values: Vec<f32> = scores.scores.iter().map(|(_, s)| *s).collect();
        let status = write_out(&values, out_scores, cap, ptr::null_mut());
        if status == cp_status::Ok && !out_embedding.is_null() {
            *out_embedding = scores.embedding_score;
        }
        status
    })
}
