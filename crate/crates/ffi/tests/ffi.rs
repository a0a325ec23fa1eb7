use std::ffi::{CStr, CString};
use std::ptr;

use memfuse_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mf_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

const SMALL: &str = "d_model = 8\nd_enc = 8\nn_heads = 1\nn_enc_heads = 1\nn_layers = 1\nn_enc_layers = 1\nt_max = 256\nt_gen = 4\nsteps = 2\nbatch_size = 2\n";

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(mf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let status = unsafe { mf_model_new(ptr::null(), ptr::null_mut()) };
    assert_eq!(status, MfStatus::NullArgument);
    assert!(last_error().contains("out"));
    let status = unsafe { mf_model_save(ptr::null(), cstr("/tmp/x").as_ptr()) };
    assert_eq!(status, MfStatus::NullArgument);
    unsafe {
        mf_model_free(ptr::null_mut());
        mf_report_free(ptr::null_mut());
        mf_string_free(ptr::null_mut());
    }
    assert_eq!(unsafe { mf_model_num_parameters(ptr::null()) }, 0);
}

#[test]
fn bad_config_maps_to_config_status() {
    let mut m = ptr::null_mut();
    let status = unsafe { mf_model_new(cstr("no_such_field = 1").as_ptr(), &mut m) };
    assert_ne!(status, MfStatus::Ok);
    assert!(m.is_null());
    assert!(!last_error().is_empty());
    let status = unsafe { mf_model_new(cstr("d_model = 7\nn_heads = 2").as_ptr(), &mut m) };
    assert_eq!(status, MfStatus::Config);
}

#[test]
fn numeric_helpers() {
    let mut out = [0.0f64; 3];
    let s = [1.0, 2.0, 3.0];
    assert_eq!(unsafe { mf_softmax(s.as_ptr(), 3, 1.0, out.as_mut_ptr()) }, MfStatus::Ok);
    assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(out[2] > out[1] && out[1] > out[0]);
    assert_eq!(unsafe { mf_softmax(s.as_ptr(), 3, 0.0, out.as_mut_ptr()) }, MfStatus::Parameter);
    assert_eq!(unsafe { mf_softmax(s.as_ptr(), 0, 1.0, out.as_mut_ptr()) }, MfStatus::Dimension);

    let mut c = 0.0;
    let a = [1.0, 0.0];
    let b = [0.0, 2.0];
    assert_eq!(unsafe { mf_cosine_similarity(a.as_ptr(), b.as_ptr(), 2, &mut c) }, MfStatus::Ok);
    assert_eq!(c, 0.0);
    assert_eq!(unsafe { mf_cosine_similarity(a.as_ptr(), a.as_ptr(), 2, &mut c) }, MfStatus::Ok);
    assert!((c - 1.0).abs() < 1e-12);
    let z = [0.0, 0.0];
    assert_eq!(unsafe { mf_cosine_similarity(a.as_ptr(), z.as_ptr(), 2, &mut c) }, MfStatus::DegenerateInput);
}

#[test]
fn default_config_round_trips() {
    let text = mf_default_config();
    assert!(!text.is_null());
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mf_model_new(text, &mut m) }, MfStatus::Ok, "{}", last_error());
    assert!(unsafe { mf_model_num_parameters(m) } > 0);
    unsafe {
        mf_model_free(m);
        mf_string_free(text);
    }
}

#[test]
fn model_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let data = cstr(dir.path().to_str().unwrap());
    let gen = cstr("n_train = 8\nn_val = 4\nn_test = 6\nn_entities = 40\n");
    assert_eq!(unsafe { mf_generate_corpus(gen.as_ptr(), data.as_ptr()) }, MfStatus::Ok, "{}", last_error());
    let train_path = cstr(dir.path().join("train.jsonl").to_str().unwrap());
    let test_path = cstr(dir.path().join("test.jsonl").to_str().unwrap());

    let mut m = ptr::null_mut();
    let cfg = cstr(SMALL);
    assert_eq!(unsafe { mf_model_train(cfg.as_ptr(), train_path.as_ptr(), &mut m) }, MfStatus::Ok, "{}", last_error());
    assert!(!m.is_null());

    let ckpt = cstr(dir.path().join("m.ckpt").to_str().unwrap());
    assert_eq!(unsafe { mf_model_save(m, ckpt.as_ptr()) }, MfStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { mf_model_load(ckpt.as_ptr(), &mut loaded) }, MfStatus::Ok);
    assert_eq!(unsafe { mf_model_num_parameters(m) }, unsafe { mf_model_num_parameters(loaded) });

    let mut reports = [ptr::null_mut(); 2];
    for (h, r) in [m, loaded].into_iter().zip(reports.iter_mut()) {
        assert_eq!(unsafe { mf_model_evaluate(h, test_path.as_ptr(), r) }, MfStatus::Ok, "{}", last_error());
    }
    let mut metrics = [MfMetrics::default(); 2];
    for (r, out) in reports.iter().zip(metrics.iter_mut()) {
        assert_eq!(unsafe { mf_report_metrics(*r, out) }, MfStatus::Ok);
    }
    assert_eq!(metrics[0], metrics[1]);
    assert_eq!(metrics[0].samples, 6);
    assert!((0.0..=1.0).contains(&metrics[0].accuracy));

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { mf_report_json(reports[0], &mut json) }, MfStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert!(text.contains("\"records\""));
    unsafe { mf_string_free(json) };

    let query = cstr("What is the fee of Bako?");
    let docs = [cstr("Bako fee: ab12."), cstr("Lumi code: zz9q.")];
    let ptrs: Vec<_> = docs.iter().map(|d| d.as_ptr()).collect();
    let mut out = ptr::null_mut();
    let mut rejected = false;
    let status = unsafe { mf_model_answer(m, query.as_ptr(), ptrs.as_ptr(), ptrs.len(), &mut out, &mut rejected) };
    assert_eq!(status, MfStatus::Ok, "{}", last_error());
    assert!(!out.is_null());
    unsafe { mf_string_free(out) };

    let bad = cstr("caf\u{e9}?");
    let status = unsafe { mf_model_answer(m, bad.as_ptr(), ptrs.as_ptr(), ptrs.len(), &mut out, &mut rejected) };
    assert_eq!(status, MfStatus::Vocabulary);

    unsafe {
        for r in reports {
            mf_report_free(r);
        }
        mf_model_free(m);
        mf_model_free(loaded);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ptr::null_mut();
    let cfg = cstr(SMALL);
    assert_eq!(unsafe { mf_model_new(cfg.as_ptr(), &mut m) }, MfStatus::Ok);
    let path = dir.path().join("m.ckpt");
    let p = cstr(path.to_str().unwrap());
    assert_eq!(unsafe { mf_model_save(m, p.as_ptr()) }, MfStatus::Ok);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    std::fs::write(&path, &bytes).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { mf_model_load(p.as_ptr(), &mut out) }, MfStatus::Checksum);
    assert!(out.is_null());
    std::fs::write(&path, &bytes[..10]).unwrap();
    assert_eq!(unsafe { mf_model_load(p.as_ptr(), &mut out) }, MfStatus::Truncated);
    let missing = cstr(dir.path().join("none.ckpt").to_str().unwrap());
    assert_eq!(unsafe { mf_model_load(missing.as_ptr(), &mut out) }, MfStatus::Io);
    unsafe { mf_model_free(m) };
}
