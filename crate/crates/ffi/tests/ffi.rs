use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use lsic::synthetic::{generate, WorldConfig};
use lsic_ffi::*;

fn last_error() -> String {
    let p = lsic_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn config(pairs: &[(&str, String)]) -> *mut LsicConfig {
    let mut cfg = ptr::null_mut();
    assert_eq!(lsic_config_new(&mut cfg), LsicStatus::Ok);
    for (k, v) in pairs {
        assert_eq!(lsic_config_set(cfg, c(k).as_ptr(), c(v).as_ptr()), LsicStatus::Ok, "{k}: {}", last_error());
    }
    cfg
}

#[test]
fn metrics_match_hand_values() {
    let rel = [true, false, true, false, false];
    let mut out = 0.0;
    unsafe {
        assert_eq!(lsic_precision_at_n(rel.as_ptr(), 5, 5, &mut out), LsicStatus::Ok);
        assert!((out - 0.4).abs() < 1e-15);
        assert_eq!(lsic_ndcg_at_n(rel.as_ptr(), 5, 2, 3, &mut out), LsicStatus::Ok);
        let ideal = 1.0 + 1.0 / 3f64.log2();
        assert!((out - (1.0 + 0.5) / ideal).abs() < 1e-15);
        assert_eq!(lsic_average_precision(rel.as_ptr(), 5, 4, &mut out), LsicStatus::Ok);
        assert!((out - (1.0 + 2.0 / 3.0) / 4.0).abs() < 1e-15);
        assert_eq!(lsic_reciprocal_rank(rel[1..].as_ptr(), 4, &mut out), LsicStatus::Ok);
        assert!((out - 0.5).abs() < 1e-15);
        assert_eq!(lsic_reciprocal_rank(ptr::null(), 0, &mut out), LsicStatus::Ok);
        assert_eq!(out, 0.0);
    }
}

#[test]
fn metric_errors_are_reported() {
    let rel = [true, true];
    let mut out = 0.0;
    unsafe {
        assert_eq!(lsic_precision_at_n(rel.as_ptr(), 2, 0, &mut out), LsicStatus::InvalidArgument);
        assert!(last_error().contains("cutoff"));
        assert_eq!(lsic_ndcg_at_n(rel.as_ptr(), 2, 1, 2, &mut out), LsicStatus::InvalidArgument);
        assert_eq!(lsic_precision_at_n(ptr::null(), 3, 1, &mut out), LsicStatus::NullPointer);
        assert_eq!(lsic_precision_at_n(rel.as_ptr(), 2, 1, ptr::null_mut()), LsicStatus::NullPointer);
        assert_eq!(lsic_precision_at_n(rel.as_ptr(), 2, 1, &mut out), LsicStatus::Ok);
        assert!(lsic_last_error().is_null());
    }
}

#[test]
fn normalize_rewards_in_place() {
    let mut r = [1.0, 2.0, 3.0, 4.0];
    unsafe {
        assert_eq!(lsic_normalize_rewards(r.as_ptr(), 4, r.as_mut_ptr()), LsicStatus::Ok);
    }
    let mean: f64 = r.iter().sum::<f64>() / 4.0;
    let var: f64 = r.iter().map(|x| x * x).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    let bad = [1.0, f64::NAN];
    let mut out = [0.0; 2];
    unsafe {
        assert_eq!(lsic_normalize_rewards(bad.as_ptr(), 2, out.as_mut_ptr()), LsicStatus::InvalidArgument);
    }
}

#[test]
fn config_errors_keep_the_previous_state() {
    unsafe {
        let cfg = config(&[]);
        assert_eq!(lsic_config_set(cfg, c("nope").as_ptr(), c("1").as_ptr()), LsicStatus::Config);
        assert!(last_error().contains("nope"));
        assert_eq!(lsic_config_set(cfg, c("batch_size").as_ptr(), c("0").as_ptr()), LsicStatus::Config);
        let mut data = ptr::null_mut();
        assert_eq!(lsic_data_load(cfg, &mut data), LsicStatus::Io);
        assert!(data.is_null());
        lsic_config_free(cfg);
        lsic_config_free(ptr::null_mut());
        let mut loaded = ptr::null_mut();
        assert_eq!(lsic_config_load(c("/nonexistent.cfg").as_ptr(), &mut loaded), LsicStatus::Io);
        assert_eq!(lsic_config_new(ptr::null_mut()), LsicStatus::NullPointer);
    }
}

#[test]
fn train_load_and_recommend() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate(&WorldConfig::default()).unwrap();
    let data_path = dir.path().join("u.data");
    w.dataset.write_movielens(&data_path).unwrap();
    let out_dir = dir.path().join("out");
    unsafe {
        let cfg = config(&[
            ("data_path", data_path.display().to_string()),
            ("train_end", w.train_end.to_string()),
            ("test_end", w.test_end.to_string()),
            ("out_dir", out_dir.display().to_string()),
            ("mixture", "v1".into()),
            ("g_pretrain_epochs", "1".into()),
            ("d_pretrain_epochs", "1".into()),
            ("pretrain_batches", "2".into()),
            ("adversarial_epochs", "1".into()),
            ("batch_size", "8".into()),
            ("samples", "4".into()),
        ]);
        let mut data = ptr::null_mut();
        assert_eq!(lsic_data_load(cfg, &mut data), LsicStatus::Ok, "{}", last_error());
        let (mut users, mut movies, mut ratings) = (0, 0, 0);
        assert_eq!(lsic_data_counts(data, &mut users, &mut movies, &mut ratings), LsicStatus::Ok);
        assert_eq!((users, movies, ratings), (w.dataset.num_users, w.dataset.num_movies, w.dataset.len()));

        let mut model = ptr::null_mut();
        assert_eq!(lsic_model_train(cfg, data, &mut model), LsicStatus::Ok, "{}", last_error());
        let ck = c(out_dir.join("checkpoint.lsic").to_str().unwrap());
        let mut reloaded = ptr::null_mut();
        assert_eq!(lsic_model_load(cfg, data, ck.as_ptr(), &mut reloaded), LsicStatus::Ok, "{}", last_error());

        let (mut ids, mut scores, mut n) = ([0i64; 5], [0.0; 5], 0usize);
        assert_eq!(lsic_recommend(model, data, 1, 5, ids.as_mut_ptr(), scores.as_mut_ptr(), &mut n), LsicStatus::Ok);
        assert_eq!(n, 5);
        assert!(scores.windows(2).all(|p| p[0] >= p[1]));
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let (mut ids2, mut scores2, mut n2) = ([0i64; 5], [0.0; 5], 0usize);
        assert_eq!(lsic_recommend(reloaded, data, 1, 5, ids2.as_mut_ptr(), scores2.as_mut_ptr(), &mut n2), LsicStatus::Ok);
        assert_eq!((ids, scores, n), (ids2, scores2, n2));

        assert_eq!(lsic_recommend(model, data, 999, 5, ids.as_mut_ptr(), scores.as_mut_ptr(), &mut n), LsicStatus::InvalidArgument);
        assert!(last_error().contains("unknown user 999"));
        assert_eq!(n, 0);
        assert_eq!(lsic_recommend(model, data, 1, 5, ptr::null_mut(), scores.as_mut_ptr(), &mut n), LsicStatus::NullPointer);

        let mut missing = ptr::null_mut();
        assert_eq!(lsic_model_load(cfg, data, c("/nonexistent.lsic").as_ptr(), &mut missing), LsicStatus::Io);
        assert!(missing.is_null());

        lsic_model_free(model);
        lsic_model_free(reloaded);
        lsic_data_free(data);
        lsic_config_free(cfg);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lsic.h")).unwrap();
    for f in [
        "lsic_last_error", "lsic_config_new", "lsic_config_load", "lsic_config_set", "lsic_config_free",
        "lsic_data_load", "lsic_data_counts", "lsic_data_free", "lsic_model_train", "lsic_model_load",
        "lsic_model_free", "lsic_recommend", "lsic_precision_at_n", "lsic_ndcg_at_n", "lsic_average_precision",
        "lsic_reciprocal_rank", "lsic_normalize_rewards",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct LsicModel LsicModel;"));
}

fn static_lib() -> Option<PathBuf> {
    let deps = std::env::current_exe().ok()?.parent()?.to_path_buf();
    let lib = deps.parent()?.join("liblsic_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_the_static_library() {
    let Some(lib) = static_lib() else {
        eprintln!("skipping: static library not built");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    let msg = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "exit {:?}: {msg}", out.status.code());
    assert_eq!(msg.trim(), "ok");
}
