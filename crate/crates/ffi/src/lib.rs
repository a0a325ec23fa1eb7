//! C interface to `memfuse`.
//!
//! Every fallible function returns an [`MfStatus`]; on failure the message is
//! available from [`mf_last_error`] on the same thread until the next call.
//! Objects cross the boundary as opaque pointers that must be released with
//! their matching `*_free` function. Strings returned by the library are
//! released with [`mf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use memfuse::datagen::{generate_corpus, GeneratorConfig};
use memfuse::harness::{self, EvalReport, FileConfig, Model, ModelConfig};
use memfuse::numerics::{self, Real, Tensor};
use memfuse::text::{read_dataset, write_dataset, Sample};
use memfuse::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Parameter = 4,
    DegenerateInput = 5,
    Vocabulary = 6,
    Validation = 7,
    Parse = 8,
    Capacity = 9,
    Tape = 10,
    Version = 11,
    Truncated = 12,
    Checksum = 13,
    Shape = 14,
    Divergence = 15,
    Config = 16,
    Io = 17,
    Panic = 18,
}

/// Opaque model handle.
pub struct MfModel {
    inner: Model,
}

/// Opaque evaluation report handle.
pub struct MfReport {
    inner: EvalReport,
}

/// Aggregate metrics of a report. `rr` is meaningful only when `rr_defined` is true.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MfMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub rr: f64,
    pub rr_defined: bool,
    pub krs: f64,
    pub samples: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MfStatus {
    match e {
        Error::Dimension(_) => MfStatus::Dimension,
        Error::Parameter(_) => MfStatus::Parameter,
        Error::DegenerateInput(_) => MfStatus::DegenerateInput,
        Error::Vocabulary { .. } | Error::TokenId { .. } => MfStatus::Vocabulary,
        Error::Validation(_) => MfStatus::Validation,
        Error::Parse { .. } => MfStatus::Parse,
        Error::Capacity { .. } => MfStatus::Capacity,
        Error::Tape(_) => MfStatus::Tape,
        Error::Version { .. } => MfStatus::Version,
        Error::Truncated(_) => MfStatus::Truncated,
        Error::Checksum => MfStatus::Checksum,
        Error::Shape { .. } => MfStatus::Shape,
        Error::Divergence { .. } => MfStatus::Divergence,
        Error::Config(_) => MfStatus::Config,
        Error::Io(_) => MfStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MfStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer passed as `{what}`"));
            MfStatus::NullArgument
        }
        Ok(Err(Fail::Utf8(what))) => {
            set_error(&format!("`{what}` is not valid UTF-8"));
            MfStatus::InvalidUtf8
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            MfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &'static str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// A non-null, caller-provided location for one result.
struct Out<T>(*mut T);

impl<T> Out<T> {
    fn set(self, v: T) {
        // SAFETY: non-null, and callers promise the location is writable.
        unsafe { self.0.write(v) }
    }
}

fn out_arg<T>(p: *mut T, what: &'static str) -> Result<Out<T>, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(Out(p))
}

fn model_config(toml_text: Option<&str>) -> Result<FileConfig, Fail> {
    Ok(match toml_text {
        Some(t) => FileConfig::parse(t)?,
        None => FileConfig::default(),
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on this thread, empty after a success.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a freshly initialized model. `config_toml` may be null for the defaults.
///
/// # Safety
/// `config_toml` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_new(config_toml: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = model_config(opt_str_arg(config_toml, "config_toml")?)?;
        out.set(Box::into_raw(Box::new(MfModel { inner: Model::new(cfg.model)? })));
        Ok(())
    })
}

/// Trains a model on a JSONL dataset.
///
/// # Safety
/// String arguments are null (config only) or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_train(config_toml: *const c_char, dataset_path: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = model_config(opt_str_arg(config_toml, "config_toml")?)?;
        let data = read_dataset(Path::new(str_arg(dataset_path, "dataset_path")?))?;
        let (model, _) = harness::train(&cfg.model, &data, |_, _| Ok(()))?;
        out.set(Box::into_raw(Box::new(MfModel { inner: model })));
        Ok(())
    })
}

/// Loads a checkpoint. `*out` is untouched on failure.
///
/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_load(path: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = harness::load_checkpoint(Path::new(str_arg(path, "path")?))?;
        out.set(Box::into_raw(Box::new(MfModel { inner: model })));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mf_model_save(model: *const MfModel, path: *const c_char) -> MfStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        harness::save_checkpoint(&m.inner, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` comes from this library and has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mf_model_free(model: *mut MfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters, 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mf_model_num_parameters(model: *const MfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.params().num_scalars())
}

/// Answers `query` over `n_docs` documents. `*out_text` receives a string to
/// release with [`mf_string_free`]; `*out_rejected` is set when the output
/// opens with the refusal token.
///
/// # Safety
/// `model` is live; `query` and each of `docs[0..n_docs]` are NUL-terminated;
/// out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_answer(
    model: *const MfModel,
    query: *const c_char,
    docs: *const *const c_char,
    n_docs: usize,
    out_text: *mut *mut c_char,
    out_rejected: *mut bool,
) -> MfStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let out_text = out_arg(out_text, "out_text")?;
        let out_rejected = out_arg(out_rejected, "out_rejected")?;
        let documents = slice_arg(docs, n_docs, "docs")?
            .iter()
            .map(|&d| str_arg(d, "docs").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let sample = Sample {
            id: "ffi".into(),
            query: str_arg(query, "query")?.into(),
            documents,
            positive_index: 0,
            answer: "?".into(),
            y_safe: 0,
            turns: Vec::new(),
        };
        sample.validate()?;
        let p = m.inner.answer(&sample)?;
        out_text.set(CString::new(p.text).map_err(|e| Error::Validation(e.to_string()))?.into_raw());
        out_rejected.set(p.rejected);
        Ok(())
    })
}

/// Evaluates a model on a JSONL dataset.
///
/// # Safety
/// `model` is live; `dataset_path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_evaluate(model: *const MfModel, dataset_path: *const c_char, out: *mut *mut MfReport) -> MfStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let out = out_arg(out, "out")?;
        let data = read_dataset(Path::new(str_arg(dataset_path, "dataset_path")?))?;
        let report = harness::evaluate(&m.inner, &data)?;
        out.set(Box::into_raw(Box::new(MfReport { inner: report })));
        Ok(())
    })
}

/// # Safety
/// `report` is live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mf_report_metrics(report: *const MfReport, out: *mut MfMetrics) -> MfStatus {
    guard(|| {
        let r = &report.as_ref().ok_or(Fail::Null("report"))?.inner;
        out_arg(out, "out")?.set(MfMetrics {
            accuracy: r.accuracy as f64,
            f1: r.f1 as f64,
            rr: r.rr.unwrap_or(0.0) as f64,
            rr_defined: r.rr.is_some(),
            krs: r.krs as f64,
            samples: r.records.len(),
        });
        Ok(())
    })
}

/// Full report as JSON; release with [`mf_string_free`].
///
/// # Safety
/// `report` is live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mf_report_json(report: *const MfReport, out: *mut *mut c_char) -> MfStatus {
    guard(|| {
        let r = &report.as_ref().ok_or(Fail::Null("report"))?.inner;
        let s = serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?;
        out_arg(out, "out")?.set(CString::new(s).map_err(|e| Error::Validation(e.to_string()))?.into_raw());
        Ok(())
    })
}

/// # Safety
/// `report` comes from this library and has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mf_report_free(report: *mut MfReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` under `out_dir`.
/// `generator_toml` may be null for the defaults.
///
/// # Safety
/// String arguments are null (generator only) or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mf_generate_corpus(generator_toml: *const c_char, out_dir: *const c_char) -> MfStatus {
    guard(|| {
        let gen: GeneratorConfig = match opt_str_arg(generator_toml, "generator_toml")? {
            Some(t) => toml_generator(t)?,
            None => GeneratorConfig::default(),
        };
        let dir = Path::new(str_arg(out_dir, "out_dir")?);
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        let c = generate_corpus(&gen)?;
        write_dataset(&c.train, &dir.join("train.jsonl"))?;
        write_dataset(&c.val, &dir.join("val.jsonl"))?;
        write_dataset(&c.test, &dir.join("test.jsonl"))?;
        Ok(())
    })
}

fn toml_generator(text: &str) -> Result<GeneratorConfig, Error> {
    let wrapped = FileConfig::parse(&format!("[generator]\n{text}"))?;
    Ok(wrapped.generator.unwrap_or_default())
}

/// Temperature softmax of `n` scores into `out`.
///
/// # Safety
/// `scores` and `out` hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn mf_softmax(scores: *const f64, n: usize, tau: f64, out: *mut f64) -> MfStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        if n == 0 {
            return Err(Error::Dimension("softmax of an empty vector".into()).into());
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let t = Tensor::vector(s.iter().map(|&v| v as Real).collect());
        let p = numerics::softmax_with_temperature(&t, tau as Real)?;
        let dst = std::slice::from_raw_parts_mut(out, n);
        for (d, &v) in dst.iter_mut().zip(p.data()) {
            *d = v as f64;
        }
        Ok(())
    })
}

/// Cosine similarity of two `n`-vectors.
///
/// # Safety
/// `a` and `b` hold `n` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mf_cosine_similarity(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> MfStatus {
    guard(|| {
        let (a, b) = (slice_arg(a, n, "a")?, slice_arg(b, n, "b")?);
        if n == 0 {
            return Err(Error::Dimension("cosine similarity of empty vectors".into()).into());
        }
        let conv = |x: &[f64]| Tensor::vector(x.iter().map(|&v| v as Real).collect());
        out_arg(out, "out")?.set(numerics::cosine_similarity(&conv(a), &conv(b))?);
        Ok(())
    })
}

/// Default model configuration as TOML; release with [`mf_string_free`].
#[no_mangle]
pub extern "C" fn mf_default_config() -> *mut c_char {
    let text = FileConfig { model: ModelConfig::default(), generator: Some(GeneratorConfig::default()) }.to_toml();
    CString::new(text).map_or(ptr::null_mut(), CString::into_raw)
}
