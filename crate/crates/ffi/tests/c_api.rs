use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use wellcast::data::{fit_normalizer, make_windows, Channel};
use wellcast::model::{build_model, forward, ModelConfig};
use wellcast::rng::{substream, Stream};
use wellcast::sim::{simulate_well, WellScenario};
use wellcast_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { wc_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        lstm_layers: 1,
        lstm_units: 6,
        dense_units: 4,
        window: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn model_round_trip_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let weights = build_model(&cfg, &mut substream(1, Stream::Init)).unwrap();
    let path = dir.path().join("w.json");
    weights.save(&path).unwrap();

    let truth = simulate_well(&WellScenario::short(10, 1)).unwrap();
    let norm = fit_normalizer(&truth.series).unwrap();
    let series = norm.normalize(&truth.series).unwrap();
    let window = make_windows(&series, cfg.window).unwrap().get(40);
    let expected = forward(&window, &weights).unwrap();

    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(wc_model_load(cstr(&path).as_ptr(), &mut model), WcStatus::Ok);
        let mut width = 0usize;
        assert_eq!(wc_model_window(model, &mut width), WcStatus::Ok);
        assert_eq!(width, cfg.window);
        let theta: Vec<f64> = window.theta_hist.iter().flatten().copied().collect();
        let mut y = 0.0;
        let status = wc_model_forward(
            model,
            window.q_hist.as_ptr(),
            theta.as_ptr(),
            window.u_hist.as_ptr(),
            width,
            &mut y,
        );
        assert_eq!(status, WcStatus::Ok);
        assert_eq!(y, expected);

        let mut b = 0.0;
        assert_eq!(wc_model_get_bias(model, &mut b), WcStatus::Ok);
        assert_eq!(b, weights.bias());
        assert_eq!(wc_model_set_bias(model, b + 1.0), WcStatus::Ok);
        let mut shifted = 0.0;
        wc_model_forward(model, window.q_hist.as_ptr(), theta.as_ptr(), window.u_hist.as_ptr(), width, &mut shifted);
        assert!(shifted > y);
        assert_eq!(wc_model_set_bias(model, f64::NAN), WcStatus::InvalidArgument);

        let status = wc_model_forward(model, window.q_hist.as_ptr(), theta.as_ptr(), window.u_hist.as_ptr(), width - 1, &mut y);
        assert_eq!(status, WcStatus::Shape);
        assert!(last_error().contains("window"));
        wc_model_free(model);
    }
}

#[test]
fn errors_and_null_handling() {
    unsafe {
        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/w.json").unwrap();
        assert_eq!(wc_model_load(missing.as_ptr(), &mut model), WcStatus::Io);
        assert!(model.is_null());
        assert!(last_error().contains("/nonexistent/w.json"));
        assert_eq!(wc_model_load(ptr::null(), &mut model), WcStatus::NullPointer);
        assert_eq!(wc_model_window(ptr::null(), ptr::null_mut()), WcStatus::NullPointer);
        wc_model_free(ptr::null_mut());
        wc_normalizer_free(ptr::null_mut());

        let needed = wc_last_error_message(ptr::null_mut(), 0);
        let mut tiny = [1 as c_char; 4];
        assert_eq!(wc_last_error_message(tiny.as_mut_ptr(), tiny.len()), needed);
        assert_eq!(tiny[3], 0);
        assert!(!CStr::from_ptr(wc_version()).to_bytes().is_empty());
    }
}

#[test]
fn numerics() {
    unsafe {
        let mut j = 0.0;
        assert_eq!(wc_jeffreys_j(0.5, 0.003, 0.52, 0.003, &mut j), WcStatus::Ok);
        assert!((j - 0.02f64.powi(2) / 0.003f64.powi(2)).abs() < 1e-9);
        let mut kl = 0.0;
        assert_eq!(wc_gaussian_kl(0.0, 1.0, 1.0, 1.0, &mut kl), WcStatus::Ok);
        assert_eq!(kl, 0.5);
        assert_eq!(wc_gaussian_kl(0.0, -1.0, 1.0, 1.0, &mut kl), WcStatus::InvalidArgument);

        let p = [0.04, 0.01, 0.01, 0.2];
        let m = [1.0, 0.0];
        let mut k = [0.0; 2];
        assert_eq!(wc_kalman_gain(p.as_ptr(), m.as_ptr(), 0.0, k.as_mut_ptr()), WcStatus::Ok);
        assert_eq!(k, [1.0, 0.25]);
        let zero = [0.0; 4];
        assert_eq!(wc_kalman_gain(zero.as_ptr(), m.as_ptr(), 0.0, k.as_mut_ptr()), WcStatus::Numeric);

        let xs = [1.0, 2.0, 4.0];
        let (mut w, mut pv) = (0.0, 0.0);
        assert_eq!(wc_shapiro_wilk(xs.as_ptr(), 3, &mut w, &mut pv), WcStatus::Ok);
        assert!((w - 0.9642857142857142).abs() < 1e-6);
        assert_eq!(wc_shapiro_wilk(xs.as_ptr(), 2, &mut w, &mut pv), WcStatus::InvalidArgument);
    }
}

#[test]
fn normalizer_and_assimilation() {
    let dir = tempfile::tempdir().unwrap();
    let truth = simulate_well(&WellScenario::short(10, 2)).unwrap();
    let raw = truth.series.slice(0..80).unwrap();
    let norm = fit_normalizer(&truth.series).unwrap();
    let cfg = small_config();
    let weights = build_model(&cfg, &mut substream(2, Stream::Init)).unwrap();
    let data = dir.path().join("data.csv");
    let npath = dir.path().join("n.json");
    let wpath = dir.path().join("w.json");
    let out = dir.path().join("trace.csv");
    raw.save(&data).unwrap();
    norm.save(&npath).unwrap();
    weights.save(&wpath).unwrap();

    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(wc_normalizer_load(cstr(&npath).as_ptr(), &mut h), WcStatus::Ok);
        let x = raw.value(Channel::FlowRate, 3);
        let (mut y, mut back) = (0.0, 0.0);
        assert_eq!(wc_normalizer_normalize(h, 0, x, &mut y), WcStatus::Ok);
        assert_eq!(y, norm.normalize_value(Channel::FlowRate, x));
        assert_eq!(wc_normalizer_denormalize(h, 0, y, &mut back), WcStatus::Ok);
        assert!((back - x).abs() < 1e-12);
        assert_eq!(wc_normalizer_normalize(h, 6, x, &mut y), WcStatus::InvalidArgument);
        wc_normalizer_free(h);

        let status = wc_assimilate_csv(
            cstr(&data).as_ptr(),
            cstr(&wpath).as_ptr(),
            cstr(&npath).as_ptr(),
            32,
            7,
            cstr(&out).as_ptr(),
        );
        assert_eq!(status, WcStatus::Ok);
    }
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().count() > 60);
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let src = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/smoke.c");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include, src])
        .status()
        .unwrap();
    assert!(status.success());
}
