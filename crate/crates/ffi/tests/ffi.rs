use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use sticker_rank::config::{Config, ModelConfig};
use sticker_rank::data::synthetic::SyntheticSpec;
use sticker_rank::eval::{evaluate, EvalOptions};
use sticker_rank::model::Model;
use sticker_rank::pipeline;
use sticker_rank_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    data: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = SyntheticSpec { n_samples: 8, ..SyntheticSpec::tiny() };
    pipeline::generate_data(&spec, 4, &data).unwrap();
    let mc = pipeline::fit_model_to_data(&ModelConfig::tiny(), &data).unwrap();
    let ds = pipeline::load_data(&mc, &data).unwrap();
    let mut cfg = Config::default();
    cfg.train.max_epochs = 1;
    let out = dir.path().join("run");
    pipeline::train(&cfg, &mc, &ds.samples, None, Some(&out), 1).unwrap();
    let c = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    Fixture { ckpt: c(&out.join(pipeline::MODEL_FILE)), data: c(&data), _dir: dir }
}

fn last_error() -> String {
    let p = sr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn score_and_evaluate_match_the_library() {
    let fx = fixture();
    let lib_model = Model::<f64>::load(Path::new(fx.ckpt.to_str().unwrap())).unwrap();
    let lib_data = pipeline::load_data(&lib_model.config, Path::new(fx.data.to_str().unwrap())).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(sr_model_load(fx.ckpt.as_ptr(), &mut model), SrStatus::Ok);
        assert_eq!(sr_model_candidates(model), 4);
        let mut data = ptr::null_mut();
        assert_eq!(sr_dataset_load(model, fx.data.as_ptr(), &mut data), SrStatus::Ok);
        assert_eq!(sr_dataset_len(data), 8);

        for (i, s) in lib_data.samples.iter().enumerate() {
            let want = lib_model.predict(s).unwrap();
            let (mut scores, mut gates) = ([0.0; 4], [0.0; 4]);
            let (mut n, mut no_hist) = (0usize, false);
            let st = sr_score(model, data, i, scores.as_mut_ptr(), gates.as_mut_ptr(), 4, &mut n, &mut no_hist);
            assert_eq!(st, SrStatus::Ok);
            assert_eq!(n, 4);
            assert_eq!(&scores[..], &want.scores[..]);
            assert_eq!(&gates[..], &want.gates[..]);
            assert_eq!(no_hist, want.no_history);
            assert_eq!(sr_dataset_truth(data, i), s.truth_index as i64);
        }
        assert_eq!(sr_dataset_truth(data, 99), -1);

        let mut m = SrMetrics::default();
        assert_eq!(sr_evaluate(model, data, 1, &mut m), SrStatus::Ok);
        let want = evaluate(&lib_model, &lib_data.samples, 4, &EvalOptions::default()).unwrap();
        assert_eq!(m.map, want.map);
        assert_eq!(m.recall_at_1, want.recall(1).unwrap());
        assert_eq!(m.recall_at_2, want.recall(2).unwrap());
        assert!(m.recall_at_5.is_nan(), "cutoff above 4 candidates");
        assert_eq!(m.n_samples, 8);

        // Small buffer reports the needed size.
        let mut small = [0.0; 2];
        let mut n = 0;
        let st = sr_score(model, data, 0, small.as_mut_ptr(), ptr::null_mut(), 2, &mut n, ptr::null_mut());
        assert_eq!(st, SrStatus::BufferTooSmall);
        assert_eq!(n, 4);
        let st = sr_score(model, data, 50, small.as_mut_ptr(), ptr::null_mut(), 2, &mut n, ptr::null_mut());
        assert_eq!(st, SrStatus::Data);
        assert!(last_error().contains("sample 50"));

        sr_dataset_free(data);
        sr_model_free(model);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(sr_model_load(ptr::null(), &mut model), SrStatus::NullArgument);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(sr_model_load(missing.as_ptr(), &mut model), SrStatus::Io);
        assert!(last_error().contains("/nonexistent/model.ckpt"));
        assert!(model.is_null());

        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("bogus.ckpt");
        std::fs::write(&bogus, b"not a checkpoint").unwrap();
        let bogus = CString::new(bogus.to_str().unwrap()).unwrap();
        assert_eq!(sr_model_load(bogus.as_ptr(), &mut model), SrStatus::Checkpoint);

        let mut m = SrMetrics::default();
        assert_eq!(sr_evaluate(ptr::null(), ptr::null(), 0, &mut m), SrStatus::NullArgument);
        assert_eq!(sr_model_candidates(ptr::null()), 0);
        assert_eq!(sr_dataset_len(ptr::null()), 0);
        sr_model_free(ptr::null_mut());
        sr_dataset_free(ptr::null_mut());
    }
}

#[test]
fn ssim_through_the_interface() {
    let (h, w) = (12, 14);
    let a: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let b: Vec<f64> = a.iter().map(|v| (v * 0.8 + 0.1).min(1.0)).collect();
    let mut s = 0.0;
    unsafe {
        assert_eq!(sr_ssim(a.as_ptr(), a.as_ptr(), h, w, &mut s), SrStatus::Ok);
        assert_eq!(s, 1.0);
        assert_eq!(sr_ssim(a.as_ptr(), b.as_ptr(), h, w, &mut s), SrStatus::Ok);
        assert_eq!(s, sticker_rank::eval::ssim_planes(&a, &b, h, w).unwrap());
        assert_eq!(sr_ssim(a.as_ptr(), b.as_ptr(), 4, 4, &mut s), SrStatus::Shape);
        assert_eq!(sr_ssim(ptr::null(), b.as_ptr(), h, w, &mut s), SrStatus::NullArgument);
    }
}

#[test]
fn header_declares_the_interface() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sticker_rank.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "sr_last_error",
        "sr_model_load",
        "sr_model_candidates",
        "sr_model_free",
        "sr_dataset_load",
        "sr_dataset_len",
        "sr_dataset_truth",
        "sr_dataset_free",
        "sr_score",
        "sr_evaluate",
        "sr_ssim",
        "SR_STATUS_OK",
        "SR_STATUS_BUFFER_TOO_SMALL",
        "typedef struct SrModel SrModel",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // Compile the header on its own when a C compiler is available.
    if let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
