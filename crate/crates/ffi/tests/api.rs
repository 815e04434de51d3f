use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fedsim_ffi::*;

const TINY: &str = r#"{
  "name": "ffi",
  "dataset": {"kind": "synthetic", "generator": "GaussianBlobs", "classes": 4, "samples": 80, "image_size": 4, "sigma": 0.3},
  "split": {"kind": "iid", "clients": 2},
  "model": {"family": "MLP", "norm_kind": "BatchNorm", "depth": 1, "width": 6},
  "aggregator": {"kind": "FedAVG"},
  "rounds": 2,
  "seeds": [0, 1]
}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(fedsim_last_error_message()) }.to_string_lossy().into_owned()
}

fn parse(json: &str) -> *mut FedsimConfig {
    let text = CString::new(json).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { fedsim_config_parse(text.as_ptr(), &mut cfg) }, FedsimStatus::Ok, "{}", last_error());
    cfg
}

#[test]
fn run_and_inspect_results() {
    unsafe {
        let cfg = parse(TINY);
        let set = CString::new("rounds=3").unwrap();
        assert_eq!(fedsim_config_set(cfg, set.as_ptr()), FedsimStatus::Ok);
        let mut json = ptr::null_mut();
        assert_eq!(fedsim_config_to_json(cfg, &mut json), FedsimStatus::Ok);
        assert!(CStr::from_ptr(json).to_str().unwrap().contains("\"rounds\": 3"));
        fedsim_string_free(json);

        let mut result = ptr::null_mut();
        assert_eq!(fedsim_run(cfg, false, &mut result), FedsimStatus::Ok, "{}", last_error());
        let (mut seeds, mut rounds) = (0usize, 0usize);
        assert_eq!(fedsim_result_num_seeds(result, &mut seeds), FedsimStatus::Ok);
        assert_eq!(fedsim_result_num_rounds(result, &mut rounds), FedsimStatus::Ok);
        assert_eq!((seeds, rounds), (2, 3));
        let mut acc = -1.0;
        assert_eq!(fedsim_result_accuracy(result, 1, 3, &mut acc), FedsimStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(fedsim_result_accuracy(result, 0, 0, &mut acc), FedsimStatus::OutOfRange);
        assert_eq!(fedsim_result_accuracy(result, 2, 1, &mut acc), FedsimStatus::OutOfRange);
        assert!(last_error().contains("out of range"));
        let (mut mean, mut std) = (0.0, 0.0);
        assert_eq!(fedsim_result_final_accuracy(result, &mut mean, &mut std), FedsimStatus::Ok);
        assert!(std >= 0.0 && (0.0..=1.0).contains(&mean));

        let tmp = tempfile::tempdir().unwrap();
        let dir = CString::new(tmp.path().to_str().unwrap()).unwrap();
        assert_eq!(fedsim_result_write(result, dir.as_ptr()), FedsimStatus::Ok);
        assert!(tmp.path().join("rounds.csv").exists());

        let mut params = ptr::null_mut();
        assert_eq!(fedsim_result_params(result, 0, &mut params), FedsimStatus::Ok);
        let file = CString::new(tmp.path().join("p.bin").to_str().unwrap()).unwrap();
        assert_eq!(fedsim_params_save(params, file.as_ptr()), FedsimStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(fedsim_params_load(file.as_ptr(), &mut loaded), FedsimStatus::Ok);
        let (mut len, mut numel) = (0usize, 0usize);
        assert_eq!(fedsim_params_len(loaded, &mut len), FedsimStatus::Ok);
        assert_eq!(fedsim_params_numel(loaded, &mut numel), FedsimStatus::Ok);
        // fc0 weight+bias, norm gamma/beta/running mean/var, head weight+bias
        assert_eq!(len, 8);
        assert_eq!(numel, 16 * 6 + 6 + 4 * 6 + 6 * 4 + 4);
        let mut div = -1.0;
        assert_eq!(fedsim_weight_divergence(params, loaded, &mut div), FedsimStatus::Ok);
        assert_eq!(div, 0.0);

        fedsim_params_free(params);
        fedsim_params_free(loaded);
        fedsim_result_free(result);
        fedsim_config_free(cfg);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let bad = CString::new(TINY.replace("\"rounds\": 2", "\"rounds\": 0")).unwrap();
        assert_eq!(fedsim_config_parse(bad.as_ptr(), &mut cfg), FedsimStatus::Config);
        assert!(cfg.is_null());
        assert!(last_error().contains("rounds"), "{}", last_error());
        assert_eq!(fedsim_config_parse(ptr::null(), &mut cfg), FedsimStatus::NullPointer);
        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(fedsim_config_parse(invalid.as_ptr().cast(), &mut cfg), FedsimStatus::InvalidUtf8);
        let missing = CString::new("/nonexistent/cfg.json").unwrap();
        assert_eq!(fedsim_config_load(missing.as_ptr(), &mut cfg), FedsimStatus::Runtime);
        let mut n = 0usize;
        assert_eq!(fedsim_result_num_seeds(ptr::null(), &mut n), FedsimStatus::NullPointer);

        let good = parse(TINY);
        let nonsense = CString::new("rounds").unwrap();
        assert_eq!(fedsim_config_set(good, nonsense.as_ptr()), FedsimStatus::Config);
        fedsim_config_free(good);
        fedsim_config_free(ptr::null_mut());
        assert_eq!(FedsimStatus::Config as i32, 2);
        assert_eq!(FedsimStatus::Runtime as i32, 3);
    }
}

#[test]
fn ks_through_raw_pointers() {
    let (p, q) = ([0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]);
    let mut out = -1.0;
    assert_eq!(unsafe { fedsim_ks_statistic(p.as_ptr(), q.as_ptr(), 4, &mut out) }, FedsimStatus::Ok);
    assert_eq!(out, 1.0);
    assert_eq!(unsafe { fedsim_ks_statistic(p.as_ptr(), ptr::null(), 4, &mut out) }, FedsimStatus::NullPointer);
    let zero = [0.0; 4];
    assert_eq!(unsafe { fedsim_ks_statistic(p.as_ptr(), zero.as_ptr(), 4, &mut out) }, FedsimStatus::Runtime);
    let version = unsafe { CStr::from_ptr(fedsim_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fedsim.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    let source = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() > 20);
    for f in exports {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    for variant in ["FEDSIM_STATUS_OK = 0", "FEDSIM_STATUS_CONFIG = 2", "FEDSIM_STATUS_RUNTIME = 3"] {
        assert!(text.contains(variant), "{variant}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "fedsim.h"

int main(int argc, char **argv) {
    (void)argc;
    FedsimConfig *cfg = NULL;
    if (fedsim_config_load(argv[1], &cfg) != FEDSIM_STATUS_OK) {
        fprintf(stderr, "%s\n", fedsim_last_error_message());
        return 1;
    }
    FedsimResult *res = NULL;
    if (fedsim_run(cfg, false, &res) != FEDSIM_STATUS_OK) {
        fprintf(stderr, "%s\n", fedsim_last_error_message());
        return 1;
    }
    double mean = 0, sd = 0;
    fedsim_result_final_accuracy(res, &mean, &sd);
    size_t seeds = 0;
    fedsim_result_num_seeds(res, &seeds);
    printf("%zu %.17g\n", seeds, mean);
    fedsim_result_free(res);
    fedsim_config_free(cfg);
    FedsimConfig *bad = NULL;
    return fedsim_config_parse("{", &bad) == FEDSIM_STATUS_CONFIG && bad == NULL ? 0 : 2;
}
"#;

/// Compiles and links a C client against the static library, when a C
/// compiler and the archive are available.
#[test]
fn c_client_links_and_runs() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok()) else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    // Test binaries live in `deps/`, next to the archive built with them.
    let exe = std::env::current_exe().unwrap();
    let archive = exe.parent().unwrap().join("libfedsim_ffi.a");
    if !archive.exists() {
        eprintln!("{} not built; skipping", archive.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("client.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let client = tmp.path().join("client");
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&client)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = Command::new(&client).arg(&cfg).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    let (seeds, mean) = stdout.trim().split_once(' ').unwrap();
    assert_eq!(seeds, "2");

    let mut result = ptr::null_mut();
    let c = parse(TINY);
    unsafe {
        assert_eq!(fedsim_run(c, false, &mut result), FedsimStatus::Ok);
        let (mut m, mut s) = (0.0, 0.0);
        fedsim_result_final_accuracy(result, &mut m, &mut s);
        assert_eq!(mean.parse::<f64>().unwrap(), m, "C and Rust runs disagree");
        fedsim_result_free(result);
        fedsim_config_free(c);
    }
}
