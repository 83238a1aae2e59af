//! C interface to the sticker ranking library.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible call returns an [`SrStatus`];
//! on failure, [`sr_last_error`] describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use sticker_rank::data::Dataset;
use sticker_rank::eval::{evaluate, ssim_planes, EvalOptions};
use sticker_rank::model::Model;
use sticker_rank::pipeline;
use sticker_rank::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Checkpoint = 5,
    Io = 6,
    Shape = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A loaded model.
pub struct SrModel {
    model: Model<f64>,
}

/// Samples read with a model's data layout.
pub struct SrDataset {
    data: Dataset,
}

/// Ranking metrics. Recall at a cutoff above the candidate count is NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SrMetrics {
    pub map: f64,
    pub recall_at_1: f64,
    pub recall_at_2: f64,
    pub recall_at_5: f64,
    pub n_samples: usize,
    pub abstained: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SrStatus {
    match e {
        Error::Config(_) => SrStatus::Config,
        Error::Data { .. } | Error::Json(_) | Error::Image { .. } => SrStatus::Data,
        Error::Numeric(_) => SrStatus::Numeric,
        Error::Checkpoint(_) => SrStatus::Checkpoint,
        Error::Io { .. } => SrStatus::Io,
        Error::Shape { .. } => SrStatus::Shape,
    }
}

fn fail(status: SrStatus, msg: impl Into<String>) -> SrStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), SrStatus>) -> SrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SrStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            fail(SrStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn lib<T>(r: sticker_rank::Result<T>) -> Result<T, SrStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, SrStatus> {
    if p.is_null() {
        return Err(fail(SrStatus::NullArgument, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| fail(SrStatus::Config, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn nonnull<'a, T>(p: *const T, what: &str) -> Result<&'a T, SrStatus> {
    p.as_ref().ok_or_else(|| fail(SrStatus::NullArgument, format!("{what} is null")))
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn sr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by training.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_model_load(path: *const c_char, out: *mut *mut SrModel) -> SrStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(fail(SrStatus::NullArgument, "out is null"));
        }
        let model = lib(Model::<f64>::load(&path))?;
        *out = Box::into_raw(Box::new(SrModel { model }));
        Ok(())
    })
}

/// Number of candidates per sample the model ranks.
///
/// # Safety
/// `model` must be null or a handle from [`sr_model_load`].
#[no_mangle]
pub unsafe extern "C" fn sr_model_candidates(model: *const SrModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.n_candidates)
}

/// # Safety
/// `model` must be null or a handle from [`sr_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sr_model_free(model: *mut SrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reads every record of the dataset directory `dir` using the model's
/// data layout.
///
/// # Safety
/// `model` must be a live handle, `dir` a NUL-terminated string and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_load(model: *const SrModel, dir: *const c_char, out: *mut *mut SrDataset) -> SrStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let dir = path_arg(dir, "dir")?;
        if out.is_null() {
            return Err(fail(SrStatus::NullArgument, "out is null"));
        }
        let data = lib(pipeline::load_data(&m.model.config, &dir))?;
        *out = Box::into_raw(Box::new(SrDataset { data }));
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a live handle from [`sr_dataset_load`].
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_len(data: *const SrDataset) -> usize {
    data.as_ref().map_or(0, |d| d.data.len())
}

/// Index of the true candidate of sample `index`, or -1 when out of range.
///
/// # Safety
/// `data` must be null or a live handle from [`sr_dataset_load`].
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_truth(data: *const SrDataset, index: usize) -> i64 {
    data.as_ref().and_then(|d| d.data.samples.get(index)).map_or(-1, |s| s.truth_index as i64)
}

/// # Safety
/// `data` must be null or a handle from [`sr_dataset_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_free(data: *mut SrDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Scores the candidates of sample `index`. `scores` and `gates` (the
/// latter may be null) receive one value per candidate; `capacity` is their
/// length. `written` receives the candidate count, also when the buffers
/// are too small. `no_history` (may be null) is set when the sample has no
/// history.
///
/// # Safety
/// Handles must be live; buffers must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn sr_score(
    model: *const SrModel,
    data: *const SrDataset,
    index: usize,
    scores: *mut f64,
    gates: *mut f64,
    capacity: usize,
    written: *mut usize,
    no_history: *mut bool,
) -> SrStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let d = nonnull(data, "data")?;
        if scores.is_null() || written.is_null() {
            return Err(fail(SrStatus::NullArgument, "scores or written is null"));
        }
        let sample =
            d.data.samples.get(index).ok_or_else(|| fail(SrStatus::Data, format!("sample {index} of {}", d.data.len())))?;
        let p = lib(m.model.predict(sample))?;
        *written = p.scores.len();
        if capacity < p.scores.len() {
            return Err(fail(SrStatus::BufferTooSmall, format!("{} candidates, capacity {capacity}", p.scores.len())));
        }
        std::ptr::copy_nonoverlapping(p.scores.as_ptr(), scores, p.scores.len());
        if !gates.is_null() {
            std::ptr::copy_nonoverlapping(p.gates.as_ptr(), gates, p.gates.len());
        }
        if !no_history.is_null() {
            *no_history = p.no_history;
        }
        Ok(())
    })
}

/// MAP and recall over the whole dataset. `threads == 0` uses every core.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sr_evaluate(
    model: *const SrModel,
    data: *const SrDataset,
    threads: usize,
    out: *mut SrMetrics,
) -> SrStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let d = nonnull(data, "data")?;
        if out.is_null() {
            return Err(fail(SrStatus::NullArgument, "out is null"));
        }
        let opts = EvalOptions { threads, ..Default::default() };
        let r = lib(evaluate(&m.model, &d.data.samples, m.model.config.n_candidates, &opts))?;
        let at = |k| r.recall(k).unwrap_or(f64::NAN);
        *out = SrMetrics {
            map: r.map,
            recall_at_1: at(1),
            recall_at_2: at(2),
            recall_at_5: at(5),
            n_samples: r.n_samples,
            abstained: r.abstained,
        };
        Ok(())
    })
}

/// Structural similarity of two `height x width` planes with values in
/// [0, 1], row-major.
///
/// # Safety
/// `a` and `b` must each hold `height * width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sr_ssim(a: *const f64, b: *const f64, height: usize, width: usize, out: *mut f64) -> SrStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(fail(SrStatus::NullArgument, "a, b or out is null"));
        }
        let n = height.checked_mul(width).ok_or_else(|| fail(SrStatus::Shape, "plane size overflows"))?;
        let (a, b) = (std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n));
        *out = lib(ssim_planes(a, b, height, width))?;
        Ok(())
    })
}
