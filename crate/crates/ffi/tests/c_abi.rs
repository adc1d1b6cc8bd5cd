use std::ffi::{c_char, CStr};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use fstoch_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    let n = unsafe { fstoch_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn model(noise: &CStr) -> *mut FstochModel {
    let mut m = ptr::null_mut();
    let st = unsafe { fstoch_model_new(0.5, 0.05, 5.0, -0.1, 0.2, noise.as_ptr(), &mut m) };
    assert_eq!(st, FstochStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn anchors_through_the_handle() {
    let m = model(c"B");
    let mut a = FstochAnchors::default();
    assert_eq!(unsafe { fstoch_model_anchors(m, &mut a) }, FstochStatus::Ok);
    assert!((a.z - 2.5612322).abs() < 1e-6);
    assert!((a.t_r - 4.26322633).abs() < 1e-6);
    assert!((a.x_r[2] + 4.7699147).abs() < 1e-6);
    unsafe { fstoch_model_free(m) };
}

#[test]
fn errors_carry_status_and_message() {
    let mut m = ptr::null_mut();
    let st = unsafe { fstoch_model_new(0.5, 0.05, 5.0, 0.1, 0.2, ptr::null(), &mut m) };
    assert_eq!(st, FstochStatus::InvalidInput);
    assert!(m.is_null());
    assert!(last_error().contains("deltaMinus"));

    let st = unsafe { fstoch_model_new(0.5, 0.05, 5.0, -0.1, 0.2, c"matrix:1,2".as_ptr(), &mut m) };
    assert_eq!(st, FstochStatus::InvalidInput);

    assert_eq!(unsafe { fstoch_model_anchors(ptr::null(), ptr::null_mut()) }, FstochStatus::NullPointer);
    let mut p = 0.0;
    assert_eq!(unsafe { fstoch_escape_pdf(-1.0, 0.0, &mut p) }, FstochStatus::InvalidInput);
    unsafe { fstoch_model_free(ptr::null_mut()) };
}

#[test]
fn passages_fill_caller_buffers_reproducibly() {
    let m = model(c"e1");
    let n = 16;
    let (mut t1, mut l1) = (vec![0.0; n], vec![0.0; 3 * n]);
    let (mut t2, mut l2) = (vec![0.0; n], vec![0.0; 3 * n]);
    let run = |t: &mut [f64], l: &mut [f64]| unsafe {
        fstoch_sample_passages(m, FstochPhase::Escape as u32, 1e-4, 1e-5, 11, n, t.as_mut_ptr(), l.as_mut_ptr())
    };
    assert_eq!(run(&mut t1, &mut l1), FstochStatus::Ok);
    assert_eq!(run(&mut t2, &mut l2), FstochStatus::Ok);
    assert_eq!(t1, t2);
    assert_eq!(l1, l2);
    assert!(l1.chunks(3).all(|x| (x[1] - 0.2).abs() < 1e-2));
    let st = unsafe { fstoch_sample_passages(m, 7, 1e-4, 1e-5, 11, n, t1.as_mut_ptr(), l1.as_mut_ptr()) };
    assert_eq!(st, FstochStatus::InvalidInput);
    unsafe { fstoch_model_free(m) };
}

#[test]
fn oscillation_buffer_too_small_reports_counts() {
    let m = model(c"B");
    let (mut osc, mut half) = (vec![0.0; 2], vec![0.0; 2]);
    let (mut no, mut nh) = (0usize, 0usize);
    let st = unsafe {
        fstoch_oscillation_times(m, 1e-4, 1e-4, 3, 5, osc.as_mut_ptr(), half.as_mut_ptr(), 2, &mut no, &mut nh)
    };
    assert_eq!(st, FstochStatus::BufferTooSmall);
    assert_eq!((no, nh), (5, 10));
    unsafe { fstoch_model_free(m) };
}

#[test]
fn prediction_exposes_nine_terms() {
    let m = model(c"B");
    let mut p = FstochPrediction::default();
    assert_eq!(unsafe { fstoch_predict(m, 1e-4, 50, 2, &mut p) }, FstochStatus::Ok);
    assert_eq!(p.diff_osc, 2.0 * p.diff_half);
    assert!(p.var_terms.iter().all(|v| *v >= 0.0));
    assert!((p.varrho + 0.68).abs() < 0.05);
    unsafe { fstoch_model_free(m) };
}

/// Compiles a C caller against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|p| p.parent()).unwrap();
    let lib = profile_dir.join("libfstoch_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "fstoch.h"
int main(void) {
    FstochModel *m = NULL;
    if (fstoch_model_new(0.5, 0.05, 5.0, -0.1, 0.2, "B", &m) != FstochStatus_Ok) return 1;
    FstochAnchors a;
    if (fstoch_model_anchors(m, &a) != FstochStatus_Ok) return 2;
    printf("%.7f %.8f\n", a.z, a.t_s);
    fstoch_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "2.5612322 1.03263073");
}
