//! C ABI over the core ranking library: opaque model and cache handles,
//! integer status codes, and a thread-local error message.
//!
//! Conventions:
//! - Every fallible call returns [`GesrStatus`]; `GESR_STATUS_OK` is zero.
//! - On failure, `gesr_last_error()` holds a message until the calling
//!   thread's next failing call.
//! - Requests and corpora cross the boundary as UTF-8 JSON, matching the
//!   CLI's dataset rows, so the C surface stays stable while the feature
//!   schema evolves.
//! - Handles from `*_new`/`*_load`/`*_build` must be released with the
//!   matching `*_free`; freeing null is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gesr_core::error::GesrError;
use gesr_core::features::{Candidate, RankingRequest};
use gesr_core::model::{checkpoint, GesrModel, ModelConfig, ModelVariant};
use gesr_core::numerics::DenseMatrix;
use gesr_core::serving::{self, precompute_item_cache, score_request_cached, ServingIndex};

/// Result code for every fallible entry point.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GesrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidInput = 4,
    InvalidConfig = 5,
    CacheMiss = 6,
    StaleCache = 7,
    IoError = 8,
    FormatError = 9,
    BufferTooSmall = 10,
    VerifyFailed = 11,
    Internal = 12,
}

/// Opaque handle to a scoring model.
pub struct GesrModelHandle {
    inner: GesrModel,
}

/// Opaque handle to a precomputed item cache.
pub struct GesrIndexHandle {
    inner: ServingIndex,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = Some(CString::new(text).expect("nul stripped"));
    });
}

fn status_of(err: &GesrError) -> GesrStatus {
    match err {
        GesrError::Input(_) | GesrError::Usage(_) => GesrStatus::InvalidInput,
        GesrError::Config(_) => GesrStatus::InvalidConfig,
        GesrError::Json(_) => GesrStatus::ParseError,
        GesrError::Io(_) => GesrStatus::IoError,
        GesrError::Format { .. } => GesrStatus::FormatError,
        GesrError::CacheMiss { .. } => GesrStatus::CacheMiss,
        GesrError::StaleCache { .. } => GesrStatus::StaleCache,
        _ => GesrStatus::Internal,
    }
}

fn fail(err: &GesrError) -> GesrStatus {
    set_error(err.to_string());
    status_of(err)
}

fn guard(f: impl FnOnce() -> GesrStatus) -> GesrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic crossed the FFI boundary");
            GesrStatus::Internal
        }
    }
}

/// # Safety
/// `ptr` must be null or a nul-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, GesrStatus> {
    if ptr.is_null() {
        set_error(format!("{what} is null"));
        return Err(GesrStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        GesrStatus::InvalidUtf8
    })
}

unsafe fn deref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, GesrStatus> {
    ptr.as_ref().ok_or_else(|| {
        set_error(format!("{what} is null"));
        GesrStatus::NullArgument
    })
}

fn parse_variant(name: &str) -> Result<ModelVariant, GesrStatus> {
    ModelVariant::ALL
        .iter()
        .copied()
        .find(|v| v.name() == name)
        .ok_or_else(|| {
            let known: Vec<&str> = ModelVariant::ALL.iter().map(|v| v.name()).collect();
            set_error(format!(
                "unknown variant {name:?}; expected one of {}",
                known.join(", ")
            ));
            GesrStatus::InvalidConfig
        })
}

/// Copies logits (candidates x tasks, row-major) into the caller's buffer.
/// Shape goes out through `out_rows`/`out_cols` even when the buffer is
/// too small, so the caller can size a retry.
unsafe fn write_logits(
    logits: &DenseMatrix,
    out: *mut f64,
    capacity: usize,
    out_rows: *mut usize,
    out_cols: *mut usize,
) -> GesrStatus {
    if out_rows.is_null() || out_cols.is_null() {
        set_error("out_rows/out_cols is null");
        return GesrStatus::NullArgument;
    }
    *out_rows = logits.rows();
    *out_cols = logits.cols();
    let needed = logits.rows() * logits.cols();
    if needed > capacity {
        set_error(format!("buffer holds {capacity} doubles, scores need {needed}"));
        return GesrStatus::BufferTooSmall;
    }
    if out.is_null() {
        set_error("output buffer is null");
        return GesrStatus::NullArgument;
    }
    std::ptr::copy_nonoverlapping(logits.data().as_ptr(), out, needed);
    GesrStatus::Ok
}

/// Library version as a static string; never null, do not free.
#[no_mangle]
pub extern "C" fn gesr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the calling thread's most recent failure, or null. Valid
/// until the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn gesr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |msg| msg.as_ptr())
    })
}

/// Builds a freshly initialized desk-scale model. `variant` is one of
/// two_tower_baseline, gesr_basic, gesr_basic_minus_hma,
/// gesr_basic_minus_target_awareness, gesr_advanced.
///
/// # Safety
/// `variant` must be nul-terminated; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn gesr_model_new(
    variant: *const c_char,
    seed: u64,
    out: *mut *mut GesrModelHandle,
) -> GesrStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return GesrStatus::NullArgument;
        }
        let name = match read_str(variant, "variant") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let v = match parse_variant(name) {
            Ok(v) => v,
            Err(status) => return status,
        };
        let cfg = v.configure(&ModelConfig::desk_default());
        match GesrModel::new(cfg, seed) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(GesrModelHandle { inner: model }));
                GesrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Loads a model from a checkpoint file written by `gesr_model_save` or
/// the CLI trainer.
///
/// # Safety
/// `path` must be nul-terminated; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn gesr_model_load(
    path: *const c_char,
    out: *mut *mut GesrModelHandle,
) -> GesrStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return GesrStatus::NullArgument;
        }
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match checkpoint::load(Path::new(path)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(GesrModelHandle { inner: model }));
                GesrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes the model to a checkpoint file; loading it back reproduces
/// bit-identical scores.
///
/// # Safety
/// `model` must be a live handle; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn gesr_model_save(
    model: *const GesrModelHandle,
    path: *const c_char,
) -> GesrStatus {
    guard(|| {
        let handle = match deref(model, "model") {
            Ok(h) => h,
            Err(status) => return status,
        };
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match checkpoint::save(&handle.inner, Path::new(path)) {
            Ok(_) => GesrStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn gesr_model_free(model: *mut GesrModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of prediction tasks; scores have this many columns.
///
/// # Safety
/// `model` must be a live handle; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn gesr_model_tasks(
    model: *const GesrModelHandle,
    out: *mut u32,
) -> GesrStatus {
    guard(|| {
        let handle = match deref(model, "model") {
            Ok(h) => h,
            Err(status) => return status,
        };
        if out.is_null() {
            set_error("out is null");
            return GesrStatus::NullArgument;
        }
        *out = handle.inner.config().tasks as u32;
        GesrStatus::Ok
    })
}

/// Copies the model's checkpoint version (64 hex chars) into `buf` as a
/// nul-terminated string. `capacity` counts bytes including the nul.
///
/// # Safety
/// `model` must be a live handle; `buf` must hold `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn gesr_model_version(
    model: *const GesrModelHandle,
    buf: *mut c_char,
    capacity: usize,
) -> GesrStatus {
    guard(|| {
        let handle = match deref(model, "model") {
            Ok(h) => h,
            Err(status) => return status,
        };
        let version = match handle.inner.version() {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        if capacity < version.len() + 1 {
            set_error(format!(
                "version needs {} bytes, buffer holds {capacity}",
                version.len() + 1
            ));
            return GesrStatus::BufferTooSmall;
        }
        if buf.is_null() {
            set_error("buf is null");
            return GesrStatus::NullArgument;
        }
        std::ptr::copy_nonoverlapping(version.as_ptr() as *const c_char, buf, version.len());
        *buf.add(version.len()) = 0;
        GesrStatus::Ok
    })
}

/// Scores one ranking request given as JSON (the CLI's dataset row
/// format). Writes candidates x tasks logits row-major into `out`.
///
/// # Safety
/// `model` must be a live handle, `request_json` nul-terminated, `out`
/// sized for `capacity` doubles, and the two shape pointers writable.
#[no_mangle]
pub unsafe extern "C" fn gesr_model_score_json(
    model: *const GesrModelHandle,
    request_json: *const c_char,
    out: *mut f64,
    capacity: usize,
    out_rows: *mut usize,
    out_cols: *mut usize,
) -> GesrStatus {
    guard(|| {
        let handle = match deref(model, "model") {
            Ok(h) => h,
            Err(status) => return status,
        };
        let json = match read_str(request_json, "request_json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let request: RankingRequest = match serde_json::from_str(json) {
            Ok(r) => r,
            Err(e) => return fail(&GesrError::Json(e)),
        };
        match handle.inner.model_forward(&request) {
            Ok(logits) => write_logits(&logits, out, capacity, out_rows, out_cols),
            Err(e) => fail(&e),
        }
    })
}

/// Precomputes the item-side cache for a corpus given as a JSON array of
/// candidates. The index is tied to the model's checkpoint version.
///
/// # Safety
/// `model` must be a live handle, `corpus_json` nul-terminated, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gesr_index_build_json(
    model: *const GesrModelHandle,
    corpus_json: *const c_char,
    out: *mut *mut GesrIndexHandle,
) -> GesrStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return GesrStatus::NullArgument;
        }
        let handle = match deref(model, "model") {
            Ok(h) => h,
            Err(status) => return status,
        };
        let json = match read_str(corpus_json, "corpus_json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let corpus: Vec<Candidate> = match serde_json::from_str(json) {
            Ok(c) => c,
            Err(e) => return fail(&GesrError::Json(e)),
        };
        match precompute_item_cache(&corpus, &handle.inner) {
            Ok(index) => {
                *out = Box::into_raw(Box::new(GesrIndexHandle { inner: index }));
                GesrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes the index to a cache file.
///
/// # Safety
/// `index` must be a live handle; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn gesr_index_save(
    index: *const GesrIndexHandle,
    path: *const c_char,
) -> GesrStatus {
    guard(|| {
        let handle = match deref(index, "index") {
            Ok(h) => h,
            Err(status) => return status,
        };
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match serving::save_cache(&handle.inner, Path::new(path)) {
            Ok(()) => GesrStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Loads an index from a cache file.
///
/// # Safety
/// `path` must be nul-terminated; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn gesr_index_load(
    path: *const c_char,
    out: *mut *mut GesrIndexHandle,
) -> GesrStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return GesrStatus::NullArgument;
        }
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match serving::load_cache(Path::new(path)) {
            Ok(index) => {
                *out = Box::into_raw(Box::new(GesrIndexHandle { inner: index }));
                GesrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of cached items.
///
/// # Safety
/// `index` must be a live handle; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn gesr_index_len(
    index: *const GesrIndexHandle,
    out: *mut usize,
) -> GesrStatus {
    guard(|| {
        let handle = match deref(index, "index") {
            Ok(h) => h,
            Err(status) => return status,
        };
        if out.is_null() {
            set_error("out is null");
            return GesrStatus::NullArgument;
        }
        *out = handle.inner.len();
        GesrStatus::Ok
    })
}

/// Releases an index handle. Null is ignored.
///
/// # Safety
/// `index` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn gesr_index_free(index: *mut GesrIndexHandle) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Scores a request through the item cache. Bit-identical to
/// `gesr_model_score_json` when the cache is fresh; returns
/// `GESR_STATUS_STALE_CACHE` if the index was built for a different
/// checkpoint and `GESR_STATUS_CACHE_MISS` if a candidate is not cached.
///
/// # Safety
/// Same as `gesr_model_score_json`, plus `index` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gesr_score_cached_json(
    model: *const GesrModelHandle,
    index: *const GesrIndexHandle,
    request_json: *const c_char,
    out: *mut f64,
    capacity: usize,
    out_rows: *mut usize,
    out_cols: *mut usize,
) -> GesrStatus {
    guard(|| {
        let model = match deref(model, "model") {
            Ok(h) => h,
            Err(status) => return status,
        };
        let index = match deref(index, "index") {
            Ok(h) => h,
            Err(status) => return status,
        };
        let json = match read_str(request_json, "request_json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let request: RankingRequest = match serde_json::from_str(json) {
            Ok(r) => r,
            Err(e) => return fail(&GesrError::Json(e)),
        };
        match score_request_cached(&model.inner, &index.inner, &request) {
            Ok(logits) => write_logits(&logits, out, capacity, out_rows, out_cols),
            Err(e) => fail(&e),
        }
    })
}

/// Runs the library's invariant suite (masks, matching oracle, gradient
/// checks, serving equivalence, metric cases). Returns
/// `GESR_STATUS_VERIFY_FAILED` with the report in `gesr_last_error` on
/// any violation.
#[no_mangle]
pub extern "C" fn gesr_verify(seed: u64) -> GesrStatus {
    guard(|| {
        let report = gesr_core::verify::run_all(seed);
        if report.all_passed() {
            GesrStatus::Ok
        } else {
            set_error(report.render());
            GesrStatus::VerifyFailed
        }
    })
}
