use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use pmp_ffi::*;

const SYNTH: &str = r#"{"nodes": 200, "attach": 3, "fraud_fraction": 0.1, "dim": 4,
    "mu_benign": 1.0, "mu_fraud": 5.0, "sigma": 1.0, "relations": 2,
    "train": 0.4, "val": 0.2, "test": 0.4, "plant_fraud_links": 0, "seed": 3}"#;

const RUN: &str =
    r#"{"hidden_dim": 8, "train": {"max_epochs": 40, "batch_size": 64, "learning_rate": 0.02}}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pmp_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn synth() -> *mut PmpBundle {
    let cfg = CString::new(SYNTH).unwrap();
    let mut b = ptr::null_mut();
    assert_eq!(
        unsafe { pmp_bundle_synth(cfg.as_ptr(), &mut b) },
        PMP_OK,
        "{}",
        last_error()
    );
    b
}

#[test]
fn train_predict_evaluate_roundtrip() {
    unsafe {
        let b = synth();
        let (mut n, mut r, mut d) = (0usize, 0usize, 0usize);
        assert_eq!(pmp_bundle_info(b, &mut n, &mut r, &mut d), PMP_OK);
        assert_eq!((n, r, d), (200, 2, 4));

        let cfg = CString::new(RUN).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(
            pmp_model_train(b, cfg.as_ptr(), &mut m),
            PMP_OK,
            "{}",
            last_error()
        );
        assert!(last_error().is_empty());

        let nodes: Vec<usize> = (0..n).collect();
        let mut scores = vec![0.0; n];
        assert_eq!(
            pmp_model_predict(m, b, nodes.as_ptr(), n, scores.as_mut_ptr()),
            PMP_OK
        );
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));

        let mut labels = vec![0u8; n];
        assert_eq!(pmp_bundle_labels(b, labels.as_mut_ptr(), n), PMP_OK);
        let mut auc = 0.0;
        assert_eq!(
            pmp_auc(scores.as_ptr(), labels.as_ptr(), n, &mut auc),
            PMP_OK
        );
        assert!(auc > 0.95, "auc {auc}");

        let mut metrics = PmpMetrics::default();
        assert_eq!(
            pmp_model_evaluate(m, b, PMP_SPLIT_TEST, &mut metrics),
            PMP_OK
        );
        assert_eq!(metrics.tp + metrics.fp + metrics.tn + metrics.fn_, 80);

        // save / load gives identical predictions
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(pmp_model_save(m, path.as_ptr()), PMP_OK, "{}", last_error());
        let mut m2 = ptr::null_mut();
        assert_eq!(
            pmp_model_load(path.as_ptr(), &mut m2),
            PMP_OK,
            "{}",
            last_error()
        );
        let mut again = vec![0.0; n];
        assert_eq!(
            pmp_model_predict(m2, b, nodes.as_ptr(), n, again.as_mut_ptr()),
            PMP_OK
        );
        assert_eq!(scores, again);

        let mut h = 0.0;
        assert_eq!(pmp_bundle_homophily(b, -1, &mut h), PMP_OK);
        assert!((0.0..=1.0).contains(&h));

        pmp_model_free(m);
        pmp_model_free(m2);
        pmp_bundle_free(b);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(pmp_bundle_load(ptr::null(), &mut b), PMP_ERR_NULL_ARGUMENT);
        assert!(b.is_null());

        let missing = CString::new("/nonexistent/bundle").unwrap();
        assert_eq!(
            pmp_bundle_load(missing.as_ptr(), &mut b),
            PMP_ERR_VALIDATION
        );
        assert!(!last_error().is_empty());

        let bad = CString::new(r#"{"nodes": 10}"#).unwrap();
        assert_eq!(pmp_bundle_synth(bad.as_ptr(), &mut b), PMP_ERR_VALIDATION);

        let bundle = synth();
        let mut out = 0.0;
        assert_eq!(
            pmp_bundle_homophily(bundle, 7, &mut out),
            PMP_ERR_VALIDATION
        );
        assert!(last_error().contains('7'), "{}", last_error());

        let cfg = CString::new(r#"{"num_layers": 0}"#).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(
            pmp_model_train(bundle, cfg.as_ptr(), &mut m),
            PMP_ERR_VALIDATION
        );
        assert!(m.is_null());

        let scores = [0.1, 0.2];
        let labels = [0u8, 0];
        assert_eq!(
            pmp_auc(scores.as_ptr(), labels.as_ptr(), 2, &mut out),
            PMP_ERR_VALIDATION
        );

        let mut small = [0u8; 3];
        assert_eq!(
            pmp_bundle_labels(bundle, small.as_mut_ptr(), 3),
            PMP_ERR_VALIDATION
        );

        pmp_bundle_free(bundle);
        pmp_bundle_free(ptr::null_mut());
        pmp_model_free(ptr::null_mut());
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "pmp.h"

int main(void) {
    double scores[4] = {0.1, 0.4, 0.35, 0.8};
    unsigned char labels[4] = {0, 0, 1, 1};
    double auc = -1.0;
    if (pmp_auc(scores, labels, 4, &auc) != PMP_OK) return 1;
    PmpBundle *b = NULL;
    if (pmp_bundle_load(NULL, &b) != PMP_ERR_NULL_ARGUMENT) return 2;
    printf("%.4f %s\n", auc, pmp_version());
    return 0;
}
"#;

/// Compiles and links a C program against the static library and the
/// generated header. Skipped when no C compiler or archive is available.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|p| p.parent()).unwrap();
    let archive = profile_dir.join("libpmp_ffi.a");
    if !archive.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C toolchain or {} missing", archive.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    // pairs (fraud, benign): (.35,.1) (.35,.4)x (.8,.1) (.8,.4) -> 3/4
    assert!(text.starts_with("0.7500 "), "{text}");
}
