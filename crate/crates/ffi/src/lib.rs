//! C interface to trained checkpoints and the standalone numeric routines.
//!
//! Every fallible function returns an [`SfStatus`]. On failure the message
//! is kept per thread and read with [`sf_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sepsis_core::model::{AblationMode, MultimodalModel};
use sepsis_core::mpts::PatientMatrix;
use sepsis_core::notes::{self, StopWords};
use sepsis_core::ptsm;
use sepsis_core::tensor::Tensor;
use sepsis_core::train::{self, CheckpointMeta};
use sepsis_core::{metrics, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Shape = 6,
    Data = 7,
    Panic = 8,
}

/// Opaque handle to a loaded checkpoint.
pub struct SfModel {
    model: MultimodalModel,
    meta: CheckpointMeta,
    stopwords: StopWords,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> SfStatus {
    match e {
        Error::Shape { .. } => SfStatus::Shape,
        Error::Config(_) => SfStatus::InvalidArgument,
        Error::Data(_) | Error::NonFiniteLoss { .. } => SfStatus::Data,
        Error::Parse { .. } | Error::Json { .. } => SfStatus::Parse,
        Error::Io { .. } => SfStatus::Io,
        Error::Checkpoint(_) => SfStatus::Checkpoint,
    }
}

/// Runs `f`, recording its error or panic.
fn guard(f: impl FnOnce() -> Result<(), (SfStatus, String)>) -> SfStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SfStatus::Panic
        }
    }
}

fn core<T>(r: sepsis_core::Result<T>) -> Result<T, (SfStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (SfStatus, String) {
    (SfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (SfStatus, String) {
    (SfStatus::InvalidArgument, msg)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(
    p: *const T,
    n: usize,
    what: &str,
) -> Result<&'a [T], (SfStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Loads a checkpoint written by `sepsis train`. On success `*out` owns a
/// handle that must be released with [`sf_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_model_load(path: *const c_char, out: *mut *mut SfModel) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let (model, meta) = core(train::load_checkpoint(Path::new(path)))?;
        *out = Box::into_raw(Box::new(SfModel {
            model,
            meta,
            stopwords: StopWords::default(),
        }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`sf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sf_model_free(model: *mut SfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Horizon (rows), feature count (columns) and token budget of a model.
///
/// # Safety
/// `model` must be a live handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_model_dims(
    model: *const SfModel,
    horizon: *mut usize,
    features: *mut usize,
    max_len: *mut usize,
) -> SfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if horizon.is_null() || features.is_null() || max_len.is_null() {
            return Err(null("output pointer"));
        }
        *horizon = m.meta.horizon;
        *features = m.meta.features.len();
        *max_len = m.meta.model.cnm.max_len;
        Ok(())
    })
}

/// Positive-class probability for one patient.
///
/// `matrix` is the imputed, unstandardized `rows × cols` hourly matrix in
/// row-major order; it is standardized with the checkpoint's training
/// statistics. `text` holds the raw notes and goes through leakage removal
/// and cleaning with the built-in stop-word list; it may be null when the
/// checkpoint mode ignores notes.
///
/// # Safety
/// `matrix` must point to `rows * cols` doubles; `text`, if not null, must be
/// NUL-terminated; `out_prob` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_model_predict(
    model: *const SfModel,
    matrix: *const f64,
    rows: usize,
    cols: usize,
    text: *const c_char,
    out_prob: *mut f64,
) -> SfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_prob.is_null() {
            return Err(null("out_prob"));
        }
        let (t, f) = (m.meta.horizon, m.meta.features.len());
        if rows != t || cols != f {
            return Err((
                SfStatus::Shape,
                format!("matrix is {rows}x{cols}, model expects {t}x{f}"),
            ));
        }
        let data = slice_arg(matrix, rows * cols, "matrix")?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err((SfStatus::Data, "matrix contains a non-finite value".into()));
        }
        let raw = if text.is_null() {
            if m.meta.mode.uses_notes() {
                return Err(null("text"));
            }
            ""
        } else {
            str_arg(text, "text")?
        };
        let cleaned = notes::clean_text(&notes::drop_leakage_sentences(raw), &m.stopwords);
        let pm = PatientMatrix {
            patient_id: String::new(),
            rows,
            cols,
            data: data.to_vec(),
        };
        let sample = core(train::make_sample(
            "",
            &pm,
            &cleaned,
            0,
            &m.meta.standardizer,
            &m.meta.vocab,
            m.meta.model.cnm.max_len,
        ))?;
        let probs = core(m.model.predict(std::slice::from_ref(&sample), m.meta.mode))?;
        *out_prob = probs[0];
        Ok(())
    })
}

/// Ablation mode of a model as a static NUL-terminated string, or null for
/// a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sf_model_mode(model: *const SfModel) -> *const c_char {
    let Some(m) = model.as_ref() else {
        return ptr::null();
    };
    let s: &'static CStr = match m.meta.mode {
        AblationMode::MptsOnly => c"MPTS_ONLY",
        AblationMode::NotesOnly => c"NOTES_ONLY",
        AblationMode::Hour1MptsPlusNotes => c"HOUR1_MPTS_PLUS_NOTES",
        AblationMode::Full => c"FULL",
    };
    s.as_ptr()
}

/// Area under the ROC curve with ties counted as one half.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sf_auroc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = slice_arg(scores, n, "scores")?;
        let l = slice_arg(labels, n, "labels")?;
        if let Some(bad) = l.iter().find(|&&y| y > 1) {
            return Err(invalid(format!("label {bad} is not 0 or 1")));
        }
        *out = core(metrics::auroc(s, l))?;
        Ok(())
    })
}

/// Dense interpolation of `len × dim` row-major rows into `coeff × dim`
/// values written to `out`.
///
/// # Safety
/// `rows` must point to `len * dim` doubles and `out` to room for
/// `coeff * dim`.
#[no_mangle]
pub unsafe extern "C" fn sf_dense_interpolate(
    rows: *const f64,
    len: usize,
    dim: usize,
    coeff: usize,
    out: *mut f64,
) -> SfStatus {
    guard(|| {
        if len == 0 || dim == 0 || coeff == 0 {
            return Err(invalid(format!(
                "len {len}, dim {dim} and coeff {coeff} must be positive"
            )));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let e = core(Tensor::new(
            vec![len, dim],
            slice_arg(rows, len * dim, "rows")?.to_vec(),
        ))?;
        let z = core(ptsm::dense_interpolate(&e, coeff))?;
        std::slice::from_raw_parts_mut(out, z.len()).copy_from_slice(&z);
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    static VERSION: &CStr =
        match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
            Ok(v) => v,
            Err(_) => panic!("version string"),
        };
    VERSION.as_ptr()
}
