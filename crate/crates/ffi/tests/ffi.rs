use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use viewfree_ffi::*;

const TINY: &str = r#"
[model]
branches = 2
level_points = [16, 8, 4]
level_widths = [8, 8, 16]
neighbors = [4, 4, 4]
heads = 2
pos_hidden = 4
fusion_width = 16
decoder_width = 8
decoder_heads = 2
decoder_layers = 1
n_miss = 8
n_out = 24
"#;

fn last_error() -> String {
    let p = vf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cloud(points: &[[f64; 3]]) -> *mut VfCloud {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { vf_cloud_new(flat.as_ptr(), points.len(), &mut out) },
        VfStatus::Ok
    );
    out
}

fn grid(n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            let t = i as f64 * 0.37;
            [t.sin(), (1.3 * t).cos(), (0.7 * t).sin() * 0.5]
        })
        .collect()
}

#[test]
fn cloud_round_trip_and_metrics() {
    let pts = grid(10);
    let c = cloud(&pts);
    assert_eq!(unsafe { vf_cloud_len(c) }, 10);
    let mut buf = vec![0.0; 30];
    assert_eq!(unsafe { vf_cloud_copy_points(c, buf.as_mut_ptr(), 30) }, VfStatus::Ok);
    assert_eq!(buf, pts.iter().flatten().copied().collect::<Vec<_>>());
    assert_eq!(
        unsafe { vf_cloud_copy_points(c, buf.as_mut_ptr(), 29) },
        VfStatus::BufferTooSmall
    );
    assert!(last_error().contains("30"));

    let (mut cd, mut f) = (f64::NAN, f64::NAN);
    assert_eq!(unsafe { vf_chamfer_distance(c, c, &mut cd) }, VfStatus::Ok);
    assert_eq!(unsafe { vf_f_score(c, c, 0.01, &mut f) }, VfStatus::Ok);
    assert_eq!((cd, f), (0.0, 1.0));
    let shifted = cloud(&pts.iter().map(|p| [p[0] + 0.1, p[1], p[2]]).collect::<Vec<_>>());
    assert_eq!(unsafe { vf_chamfer_distance(c, shifted, &mut cd) }, VfStatus::Ok);
    assert!(cd > 0.0 && cd <= 2.0 * 0.01 + 1e-12);
    unsafe {
        vf_cloud_free(c);
        vf_cloud_free(shifted);
    }
}

#[test]
fn files_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("c.pcf").to_str().unwrap()).unwrap();
    let c = cloud(&grid(5));
    assert_eq!(unsafe { vf_cloud_write(c, path.as_ptr()) }, VfStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { vf_cloud_read(path.as_ptr(), &mut back) }, VfStatus::Ok);
    assert_eq!(unsafe { vf_cloud_len(back) }, 5);

    let missing = CString::new(dir.path().join("nope.pcf").to_str().unwrap()).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { vf_cloud_read(missing.as_ptr(), &mut out) }, VfStatus::Data);
    assert!(last_error().contains("nope.pcf"));
    assert!(out.is_null());
    assert_eq!(unsafe { vf_cloud_read(ptr::null(), &mut out) }, VfStatus::NullPointer);
    let nan = [f64::NAN, 0.0, 0.0];
    assert_eq!(unsafe { vf_cloud_new(nan.as_ptr(), 1, &mut out) }, VfStatus::Config);
    vf_clear_error();
    assert!(vf_last_error_message().is_null());
    unsafe {
        vf_cloud_free(c);
        vf_cloud_free(back);
        vf_cloud_free(ptr::null_mut());
    }
}

#[test]
fn model_completion_contract() {
    let cfg = CString::new(TINY).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { vf_model_new(cfg.as_ptr(), 3, &mut model) }, VfStatus::Ok);
    assert!(unsafe { vf_model_param_count(model) } > 0);
    assert_eq!(unsafe { vf_model_output_points(model) }, 24);
    let n = unsafe { vf_model_min_input_points(model) };
    let pts = grid(n);
    let partial = cloud(&pts);
    let mut done = ptr::null_mut();
    assert_eq!(unsafe { vf_model_complete(model, partial, &mut done) }, VfStatus::Ok);
    assert_eq!(unsafe { vf_cloud_len(done) }, 24);

    let small = cloud(&pts[..n - 1]);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { vf_model_complete(model, small, &mut out) }, VfStatus::Config);
    assert!(last_error().contains("at least"));

    let bad = CString::new("[model]\nbranches = 9\n").unwrap();
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { vf_model_new(bad.as_ptr(), 0, &mut m2) }, VfStatus::Config);
    assert!(m2.is_null());
    unsafe {
        vf_cloud_free(partial);
        vf_cloud_free(small);
        vf_cloud_free(done);
        vf_model_free(model);
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(crate_dir().join("include/viewfree.h")).unwrap();
    let src = std::fs::read_to_string(crate_dir().join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

/// Compile a C program against the header, link it to the shared library
/// and run it.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let target = exe.parent().unwrap().parent().unwrap();
    let lib = target.join(format!(
        "{}viewfree_ffi{}",
        std::env::consts::DLL_PREFIX,
        std::env::consts::DLL_SUFFIX
    ));
    assert!(lib.exists(), "shared library not built at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "viewfree.h"

int main(void) {
    double xyz[6] = {0, 0, 0, 1, 0, 0};
    VfCloud *a = NULL;
    if (vf_cloud_new(xyz, 2, &a) != VF_STATUS_OK) return 1;
    double cd = -1;
    if (vf_chamfer_distance(a, a, &cd) != VF_STATUS_OK || cd != 0.0) return 2;
    VfCloud *b = NULL;
    if (vf_cloud_read("/nonexistent/file.pcf", &b) != VF_STATUS_DATA) return 3;
    if (strstr(vf_last_error_message(), "nonexistent") == NULL) return 4;
    VfModel *m = NULL;
    if (vf_model_new(NULL, 0, &m) != VF_STATUS_OK) return 5;
    if (vf_model_output_points(m) == 0) return 6;
    vf_model_free(m);
    vf_cloud_free(a);
    printf("ok %s\n", vf_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&src)
        .arg(&lib)
        .arg("-o")
        .arg(&bin)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success());
    let out = Command::new(&bin).env("LD_LIBRARY_PATH", target).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok 0.1.0"));
}
