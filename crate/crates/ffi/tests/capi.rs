// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use circuitprint::datasets::{self, Task};
use circuitprint::fingerprint::{node_scores, target_direction};
use circuitprint::{Model, Tokenizer};
use circuitprint_ffi::*;

fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy")
}

fn load() -> *mut cp_model {
    let dir = CString::new(toy_dir().to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cp_model_load(dir.as_ptr(), &mut m) }, cp_status::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = cp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_reports_config_and_frees() {
    let m = load();
    let mut cfg = cp_model_config::default();
    assert_eq!(unsafe { cp_model_get_config(m, &mut cfg) }, cp_status::Ok);
    assert_eq!((cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.vocab_size), (2, 4, 32, 1053));
    assert_eq!(unsafe { cp_component_count(m) }, 10);
    unsafe { cp_model_free(m) };
    unsafe { cp_model_free(ptr::null_mut()) };
}

#[test]
fn missing_directory_names_the_path() {
    let dir = CString::new("/definitely/not/here").unwrap();
    let mut m = ptr::null_mut();
    let status = unsafe { cp_model_load(dir.as_ptr(), &mut m) };
    assert_eq!(status, cp_status::Usage);
    assert!(m.is_null());
    assert!(last_error().contains("/definitely/not/here"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cp_model_load(ptr::null(), &mut m) }, cp_status::NullArgument);
    assert_eq!(unsafe { cp_model_get_config(ptr::null(), ptr::null_mut()) }, cp_status::NullArgument);
    assert!(last_error().contains("model"));
    assert_eq!(unsafe { cp_component_count(ptr::null()) }, 0);
}

#[test]
fn tokenize_matches_core_and_reports_short_buffers() {
    let m = load();
    let text = CString::new("When Mary and John went to the store").unwrap();
    let expect = Tokenizer::from_dir(&toy_dir()).unwrap().encode(text.to_str().unwrap());
    let mut len = 0usize;
    let mut small = [0u32; 2];
    let s = unsafe { cp_tokenize(m, text.as_ptr(), small.as_mut_ptr(), small.len(), &mut len) };
    assert_eq!(s, cp_status::BufferTooSmall);
    assert_eq!(len, expect.len());
    let mut ids = vec![0u32; len];
    assert_eq!(unsafe { cp_tokenize(m, text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len) }, cp_status::Ok);
    assert_eq!(ids, expect);
    unsafe { cp_model_free(m) };
}

#[test]
fn logits_and_scores_match_core() {
    let m = load();
    let model = Model::from_dir(&toy_dir()).unwrap();
    let tok = Tokenizer::from_dir(&toy_dir()).unwrap();
    let pair = &datasets::tokenize_all(&Task::Ioi.generate(1, 0), &tok).unwrap()[0];

    let mut logits = vec![0f32; 1053];
    let s = unsafe { cp_final_logits(m, pair.clean.as_ptr(), pair.clean.len(), logits.as_mut_ptr(), logits.len()) };
    assert_eq!(s, cp_status::Ok);
    let full = model.forward(&pair.clean).unwrap();
    let last = full.row(pair.clean.len() - 1);
    for (a, b) in logits.iter().zip(last.iter()) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
    }
    let mut short = vec![0f32; 10];
    let s = unsafe { cp_final_logits(m, pair.clean.as_ptr(), pair.clean.len(), short.as_mut_ptr(), short.len()) };
    assert_eq!(s, cp_status::BufferTooSmall);

    let mut ld = 0f32;
    let s = unsafe { cp_logit_diff(m, pair.clean.as_ptr(), pair.clean.len(), pair.a_plus, pair.a_minus, &mut ld) };
    assert_eq!(s, cp_status::Ok);
    assert_eq!(ld, logits[pair.a_plus as usize] - logits[pair.a_minus as usize]);
    let s = unsafe { cp_logit_diff(m, pair.clean.as_ptr(), pair.clean.len(), 99_999, 0, &mut ld) };
    assert_eq!(s, cp_status::Usage);

    let dir = target_direction(&model, pair.a_plus, pair.a_minus).unwrap();
    let want = node_scores(&model, pair, &dir).unwrap();
    let mut scores = vec![0f32; 10];
    let mut embed = f32::NAN;
    let s = unsafe {
        cp_node_scores(
            m,
            pair.clean.as_ptr(),
            pair.corrupt.as_ptr(),
            pair.clean.len(),
            pair.a_plus,
            pair.a_minus,
            scores.as_mut_ptr(),
            scores.len(),
            &mut embed,
        )
    };
    assert_eq!(s, cp_status::Ok);
    assert_eq!(scores, want.scores.iter().map(|(_, v)| *v).collect::<Vec<_>>());
    assert_eq!(embed, want.embedding_score);

    let mut label = [0 as std::ffi::c_char; 16];
    let mut len = 0usize;
    assert_eq!(unsafe { cp_component_label(m, 4, label.as_mut_ptr(), label.len(), &mut len) }, cp_status::Ok);
    assert_eq!(unsafe { CStr::from_ptr(label.as_ptr()) }.to_str().unwrap(), "m0");
    assert_eq!(len, 2);
    assert_eq!(unsafe { cp_component_label(m, 10, label.as_mut_ptr(), label.len(), &mut len) }, cp_status::Usage);
    unsafe { cp_model_free(m) };
}

#[test]
fn degenerate_target_is_a_numeric_error() {
    let m = load();
    let ids = [1u32, 2, 3];
    let mut out = [0f32; 10];
    let s = unsafe { cp_node_scores(m, ids.as_ptr(), ids.as_ptr(), 3, 7, 7, out.as_mut_ptr(), 10, ptr::null_mut()) };
    assert_eq!(s, cp_status::Numeric);
    unsafe { cp_model_free(m) };
}

#[test]
fn out_of_vocabulary_ids_are_a_usage_error_not_a_panic() {
    let m = load();
    let ids = [5000u32];
    let mut out = vec![0f32; 1053];
    let s = unsafe { cp_final_logits(m, ids.as_ptr(), 1, out.as_mut_ptr(), out.len()) };
    assert_ne!(s, cp_status::Ok);
    assert_ne!(s, cp_status::Panic);
    unsafe { cp_model_free(m) };
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(cp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/circuitprint.h")).unwrap();
    for name in [
        "cp_version",
        "cp_last_error",
        "cp_model_load",
        "cp_model_free",
        "cp_model_get_config",
        "cp_tokenize",
        "cp_final_logits",
        "cp_logit_diff",
        "cp_component_count",
        "cp_component_label",
        "cp_node_scores",
        "typedef struct cp_model cp_model",
        "CP_STATUS_BUFFER_TOO_SMALL = 6",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

/// Compiles a small C program against the header and the shared library.
#[test]
fn c_program_links_and_runs() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    if !lib_dir.join("libcircuitprint_ffi.so").exists() {
        eprintln!("shared library not found in {}; skipping", lib_dir.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "circuitprint.h"
int main(int argc, char **argv) {
    cp_model *m = NULL;
    if (cp_model_load(argv[1], &m) != CP_STATUS_OK) { fprintf(stderr, "%s\n", cp_last_error()); return 2; }
    cp_model_config cfg;
    cp_model_get_config(m, &cfg);
    uint32_t ids[64];
    size_t n = 0;
    if (cp_tokenize(m, "The capital of France is", ids, 64, &n) != CP_STATUS_OK) return 3;
    float ld = 0;
    if (cp_logit_diff(m, ids, n, 1, 2, &ld) != CP_STATUS_OK) return 4;
    printf("%zu %zu %zu\n", cfg.n_layers, cfg.n_heads, n);
    cp_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("main");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lcircuitprint_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe)
        .arg(toy_dir())
        .env("LD_LIBRARY_PATH", &lib_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("2 4 "), "{text}");
}
