use std::ffi::{CStr, CString};
use std::ptr;

use heatcast::ga::{fit_ga, GaOptions};
use heatcast::linalg::SampleMatrix;
use heatcast::nnet::{save_checkpoint, CheckpointModel};
use heatcast::rng;
use heatcast_ffi::*;
use rand::Rng as _;

fn last_error() -> String {
    let p = hc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn problem(n: usize, n_lat: usize, n_lon: usize) -> (Vec<f64>, Vec<f64>) {
    let d = 2 * n_lat * n_lon;
    let mut r = rng::stream(3, &[]);
    let x: Vec<f64> = (0..n * d).map(|_| r.random::<f64>() - 0.5).collect();
    let y: Vec<f64> = x
        .chunks(d)
        .map(|row| row[0] - 0.5 * row[d - 1] + 0.1 * (r.random::<f64>() - 0.5))
        .collect();
    (x, y)
}

#[test]
fn ga_fit_predict_matches_core() {
    let (n_lat, n_lon, n) = (4, 6, 200);
    let (x, y) = problem(n, n_lat, n_lon);
    let mut model = ptr::null_mut();
    let st = unsafe { hc_ga_fit(x.as_ptr(), n, y.as_ptr(), n_lat, n_lon, 2, 0.5, &mut model) };
    assert_eq!(st, HcStatus::Ok);
    let d = unsafe { hc_ga_dim(model) };
    assert_eq!(d, 48);

    let reference = fit_ga(
        &SampleMatrix::new(n, d, x.clone()).unwrap(),
        &y,
        0.5,
        GaOptions::new(n_lat, n_lon, 2),
    )
    .unwrap();
    let mut pattern = vec![0.0; d];
    let mut sigma = 0.0;
    assert_eq!(
        unsafe { hc_ga_pattern(model, pattern.as_mut_ptr(), d, &mut sigma) },
        HcStatus::Ok
    );
    assert_eq!(pattern, reference.pattern);
    assert_eq!(sigma, reference.sigma);

    let (mut mu, mut sd) = (vec![0.0; 3], vec![0.0; 3]);
    assert_eq!(
        unsafe { hc_ga_predict(model, x.as_ptr(), 3, mu.as_mut_ptr(), sd.as_mut_ptr()) },
        HcStatus::Ok
    );
    for k in 0..3 {
        let expect: f64 = x[k * d..(k + 1) * d].iter().zip(&pattern).map(|(a, b)| a * b).sum();
        assert!((mu[k] - expect).abs() < 1e-12);
        assert_eq!(sd[k], sigma);
    }
    assert_eq!(
        unsafe { hc_ga_pattern(model, pattern.as_mut_ptr(), d - 1, ptr::null_mut()) },
        HcStatus::ShapeMismatch
    );
    assert!(last_error().contains("shape"));
    unsafe { hc_ga_free(model) };
}

#[test]
fn null_and_bad_arguments_report_errors() {
    let mut model = ptr::null_mut();
    let y = [0.0; 2];
    let st = unsafe { hc_ga_fit(ptr::null(), 2, y.as_ptr(), 2, 2, 2, 0.0, &mut model) };
    assert_eq!(st, HcStatus::NullPointer);
    assert!(last_error().contains("x"));
    assert!(model.is_null());
    let st = unsafe { hc_ga_fit(ptr::null(), 0, ptr::null(), 0, 2, 2, 0.0, &mut model) };
    assert_eq!(st, HcStatus::InvalidArgument);
    let mut out = 0.0;
    assert_eq!(
        unsafe { hc_crps_gaussian(0.0, -1.0, 0.0, &mut out) },
        HcStatus::InvalidArgument
    );
    // success clears the previous message
    assert_eq!(unsafe { hc_crps_gaussian(0.0, 1.0, 0.0, &mut out) }, HcStatus::Ok);
    assert!(hc_last_error().is_null());
    unsafe {
        hc_ga_free(ptr::null_mut());
        hc_model_free(ptr::null_mut());
        hc_filter_bank_free(ptr::null_mut());
    }
    let bad = CString::new("/nonexistent/checkpoint").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { hc_model_load(bad.as_ptr(), &mut m) }, HcStatus::Io);
}

#[test]
fn metrics_match_closed_forms() {
    let mut out = 0.0;
    // CRPS of N(0, 1) at its mean: 2 phi(0) - 1 / sqrt(pi) = (sqrt 2 - 1) / sqrt(pi)
    assert_eq!(unsafe { hc_crps_gaussian(0.0, 1.0, 0.0, &mut out) }, HcStatus::Ok);
    assert!((out - (2f64.sqrt() - 1.0) / std::f64::consts::PI.sqrt()).abs() < 1e-14);
    // NLL of N(1, 2) at 3: z = 1
    assert_eq!(unsafe { hc_nll_gaussian(1.0, 2.0, 3.0, &mut out) }, HcStatus::Ok);
    let expect = 0.5 + 2f64.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((out - expect).abs() < 1e-14);
    // threshold at the mean: probability one half either way
    assert_eq!(unsafe { hc_bce_gaussian(0.0, 1.0, 5.0, 0.0, &mut out) }, HcStatus::Ok);
    assert!((out - 2f64.ln()).abs() < 1e-14);
}

#[test]
fn filter_bank_shapes_and_errors() {
    let mut bank = ptr::null_mut();
    assert_eq!(unsafe { hc_filter_bank_new(2, 4, 16, 32, &mut bank) }, HcStatus::Ok);
    let (mut h, mut w, mut c) = (0, 0, 0);
    assert_eq!(
        unsafe { hc_filter_bank_output_shape(bank, 1, &mut h, &mut w, &mut c) },
        HcStatus::Ok
    );
    assert_eq!((h, w, c), (4, 8, 1 + 2 * 4));
    let x: Vec<f64> = (0..16 * 32).map(|k| ((k * 7919) % 13) as f64).collect();
    let mut out = vec![0.0; h * w * c];
    assert_eq!(
        unsafe { hc_filter_bank_scatter(bank, x.as_ptr(), 1, out.as_mut_ptr(), out.len()) },
        HcStatus::Ok
    );
    assert!(out.iter().all(|v| v.is_finite()));
    assert!(out.iter().skip(1).step_by(c).any(|&v| v > 0.0));
    assert_eq!(
        unsafe { hc_filter_bank_scatter(bank, x.as_ptr(), 1, out.as_mut_ptr(), 3) },
        HcStatus::ShapeMismatch
    );
    unsafe { hc_filter_bank_free(bank) };
    let mut bad = ptr::null_mut();
    assert_eq!(
        unsafe { hc_filter_bank_new(3, 4, 12, 32, &mut bad) },
        HcStatus::InvalidArgument
    );
    assert!(last_error().contains("pad-required"));
}

#[test]
fn checkpoint_inference() {
    let (n_lat, n_lon, n) = (4, 4, 100);
    let (x, y) = problem(n, n_lat, n_lon);
    let d = 2 * n_lat * n_lon;
    let ga = fit_ga(
        &SampleMatrix::new(n, d, x.clone()).unwrap(),
        &y,
        1.0,
        GaOptions::new(n_lat, n_lon, 2),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &CheckpointModel::Ga(ga.clone()), serde_json::Value::Null).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { hc_model_load(path.as_ptr(), &mut model) }, HcStatus::Ok);
    assert_eq!(unsafe { hc_model_input_dim(model) }, d);
    let (mut mu, mut sd) = ([0.0; 2], [0.0; 2]);
    assert_eq!(
        unsafe { hc_model_predict(model, x.as_ptr(), 2, mu.as_mut_ptr(), sd.as_mut_ptr()) },
        HcStatus::Ok
    );
    assert_eq!(mu[1], ga.index(&x[d..2 * d]));
    assert_eq!(sd, [ga.sigma; 2]);
    unsafe { hc_model_free(model) };
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/heatcast.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("HC_STATUS_NULL_POINTER = 1"));
    let version = unsafe { CStr::from_ptr(hc_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
