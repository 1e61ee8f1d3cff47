//! C ABI over the objtx inference surface.
//!
//! The interface is handle-based: a corpus file loads into an opaque
//! `ObjtxDataset`, a checkpoint loads into an opaque `ObjtxModel` (scalar
//! precision is read from the checkpoint header), and queries copy results
//! into caller-owned buffers. Every fallible call returns an `ObjtxStatus`;
//! on failure a human-readable message is stored per thread and stays valid
//! until the next objtx call on that thread.
//!
//! Ownership: handles returned through out-parameters belong to the caller
//! and must be released with the matching `_free` function exactly once.
//! Freeing a null pointer is a no-op. Handles are never mutated after
//! creation, so sharing one across threads behind the caller's own
//! synchronization is sound; the error message alone is thread-local.
//!
//! Panics never unwind across the boundary; they are caught and reported as
//! `OBJTX_STATUS_PANIC`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use objtx::data::{Dataset, Video};
use objtx::error::Error;
use objtx::finetune::{predict_video, video_span};
use objtx::io;
use objtx::model::embed::embed_tokens;
use objtx::model::encoder::encode;
use objtx::model::params::ModelParams;
use objtx::numerics::graph::Graph;
use objtx::numerics::ops::Mode;
use objtx::numerics::scalar::Scalar;
use objtx::rng::substream;
use objtx::synth::{generate_corpus, GenConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjtxStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An output buffer is smaller than the result; the error message names
    /// the required capacity.
    BufferTooSmall = 3,
    Io = 4,
    /// A file failed to parse; the message carries path and line.
    Parse = 5,
    Config = 6,
    Usage = 7,
    Data = 8,
    Capacity = 9,
    Shape = 10,
    /// An internal panic was caught at the boundary.
    Panic = 11,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_message(msg: &str) {
    // NUL bytes cannot appear in our own error strings; replace defensively.
    let owned = CString::new(msg.replace('\0', "?"))
        .unwrap_or_else(|_| CString::new("invalid error message").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(status: ObjtxStatus, msg: &str) -> ObjtxStatus {
    set_message(msg);
    status
}

fn fail_error(e: &Error) -> ObjtxStatus {
    let status = match e {
        Error::Shape(_) => ObjtxStatus::Shape,
        Error::Config(_) => ObjtxStatus::Config,
        Error::Usage(_) => ObjtxStatus::Usage,
        Error::Data(_) => ObjtxStatus::Data,
        Error::Capacity(_) => ObjtxStatus::Capacity,
        Error::Load { .. } => ObjtxStatus::Parse,
        Error::Io(_) => ObjtxStatus::Io,
    };
    fail(status, &e.to_string())
}

/// Run a body that may touch caller pointers, converting panics into a
/// status instead of unwinding into C.
fn guarded(f: impl FnOnce() -> ObjtxStatus) -> ObjtxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(ObjtxStatus::Panic, &format!("internal panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, ObjtxStatus> {
    if ptr.is_null() {
        return Err(fail(
            ObjtxStatus::NullArgument,
            &format!("{what} must not be null"),
        ));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| fail(ObjtxStatus::InvalidUtf8, &format!("{what} is not UTF-8")))
}

fn non_null<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, ObjtxStatus> {
    unsafe { ptr.as_ref() }.ok_or_else(|| {
        fail(
            ObjtxStatus::NullArgument,
            &format!("{what} must not be null"),
        )
    })
}

/// A loaded corpus. Opaque to C.
pub struct ObjtxDataset(Dataset);

/// A loaded model. Opaque to C; the scalar precision is fixed at load.
pub struct ObjtxModel(ModelKind);

enum ModelKind {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

/// Crate version as a static NUL-terminated string. Never null, never freed.
#[no_mangle]
pub extern "C" fn objtx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on the calling thread. Never null;
/// empty before the first failure. The pointer is invalidated by the next
/// objtx call on this thread, so copy it out before calling anything else.
#[no_mangle]
pub extern "C" fn objtx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a line-delimited corpus file into a new dataset handle.
///
/// # Safety
/// `path` must be a readable NUL-terminated string; `out` must be valid for
/// a single pointer write.
#[no_mangle]
pub unsafe extern "C" fn objtx_dataset_load(
    path: *const c_char,
    out: *mut *mut ObjtxDataset,
) -> ObjtxStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ObjtxStatus::NullArgument, "out must not be null");
        }
        let path = match unsafe { utf8_arg(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match io::load_corpus(Path::new(path)) {
            Ok(ds) => {
                unsafe { *out = Box::into_raw(Box::new(ObjtxDataset(ds))) };
                ObjtxStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Generate a synthetic corpus from generator config text (`key = value`
/// lines, the same keys the CLI's gen-synth accepts) into a new handle.
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out` must be valid for a
/// single pointer write.
#[no_mangle]
pub unsafe extern "C" fn objtx_dataset_generate(
    config_text: *const c_char,
    out: *mut *mut ObjtxDataset,
) -> ObjtxStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ObjtxStatus::NullArgument, "out must not be null");
        }
        let text = match unsafe { utf8_arg(config_text, "config_text") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        let built = io::kv_from_str(text, "<config_text>")
            .and_then(|kv| GenConfig::from_kv(&kv))
            .and_then(|cfg| generate_corpus(&cfg));
        match built {
            Ok(corpus) => {
                unsafe { *out = Box::into_raw(Box::new(ObjtxDataset(corpus.dataset))) };
                ObjtxStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Write a dataset back out in the canonical corpus format.
///
/// # Safety
/// `dataset` must be a live handle from this library; `path` must be a
/// NUL-terminated string naming a writable location.
#[no_mangle]
pub unsafe extern "C" fn objtx_dataset_save(
    dataset: *const ObjtxDataset,
    path: *const c_char,
) -> ObjtxStatus {
    guarded(|| {
        let ds = match non_null(dataset, "dataset") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let path = match unsafe { utf8_arg(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match io::save_corpus(Path::new(path), &ds.0) {
            Ok(()) => ObjtxStatus::Ok,
            Err(e) => fail_error(&e),
        }
    })
}

/// Release a dataset handle. Null is a no-op.
///
/// # Safety
/// `dataset` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn objtx_dataset_free(dataset: *mut ObjtxDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Number of videos in the dataset.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn objtx_dataset_video_count(
    dataset: *const ObjtxDataset,
    out: *mut usize,
) -> ObjtxStatus {
    guarded(|| {
        let ds = match non_null(dataset, "dataset") {
            Ok(d) => d,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(ObjtxStatus::NullArgument, "out must not be null");
        }
        unsafe { *out = ds.0.videos.len() };
        ObjtxStatus::Ok
    })
}

fn video_at(ds: &ObjtxDataset, index: usize) -> Result<&Video, ObjtxStatus> {
    ds.0.videos.get(index).ok_or_else(|| {
        fail(
            ObjtxStatus::Usage,
            &format!(
                "video index {index} out of range ({} videos)",
                ds.0.videos.len()
            ),
        )
    })
}

/// Copy the id of video `index` into `buf` as a NUL-terminated string.
/// `needed` (optional) receives the required capacity including the NUL,
/// whether or not the copy happened.
///
/// # Safety
/// `dataset` must be a live handle; `buf` must be valid for `buf_len` bytes;
/// `needed` must be null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn objtx_dataset_video_id(
    dataset: *const ObjtxDataset,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> ObjtxStatus {
    guarded(|| {
        let ds = match non_null(dataset, "dataset") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let video = match video_at(ds, index) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let id = video.video_id.as_bytes();
        if !needed.is_null() {
            unsafe { *needed = id.len() + 1 };
        }
        if buf.is_null() {
            return fail(ObjtxStatus::NullArgument, "buf must not be null");
        }
        if buf_len < id.len() + 1 {
            return fail(
                ObjtxStatus::BufferTooSmall,
                &format!("video id needs {} bytes, buffer holds {buf_len}", id.len() + 1),
            );
        }
        unsafe {
            std::ptr::copy_nonoverlapping(id.as_ptr(), buf as *mut u8, id.len());
            *buf.add(id.len()) = 0;
        }
        ObjtxStatus::Ok
    })
}

/// Load a checkpoint into a new model handle, dispatching on the precision
/// recorded in its header.
///
/// # Safety
/// `path` must be a readable NUL-terminated string; `out` must be valid for
/// a single pointer write.
#[no_mangle]
pub unsafe extern "C" fn objtx_model_load(
    path: *const c_char,
    out: *mut *mut ObjtxModel,
) -> ObjtxStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ObjtxStatus::NullArgument, "out must not be null");
        }
        let path = match unsafe { utf8_arg(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let path = Path::new(path);
        let loaded = std::fs::read(path)
            .map_err(Error::from)
            .and_then(|bytes| {
                Ok(match io::checkpoint_precision(&bytes)?.as_str() {
                    "f32" => ModelKind::F32(io::checkpoint_from_bytes(&bytes)?),
                    _ => ModelKind::F64(io::checkpoint_from_bytes(&bytes)?),
                })
            });
        match loaded {
            Ok(kind) => {
                unsafe { *out = Box::into_raw(Box::new(ObjtxModel(kind))) };
                ObjtxStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn objtx_model_free(model: *mut ObjtxModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Width of the video embedding this model produces.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn objtx_model_embedding_dim(
    model: *const ObjtxModel,
    out: *mut usize,
) -> ObjtxStatus {
    guarded(|| {
        let m = match non_null(model, "model") {
            Ok(m) => m,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(ObjtxStatus::NullArgument, "out must not be null");
        }
        let hidden = match &m.0 {
            ModelKind::F32(p) => p.config.hidden,
            ModelKind::F64(p) => p.config.hidden,
        };
        unsafe { *out = hidden };
        ObjtxStatus::Ok
    })
}

/// Number of task-head outputs, 0 when the checkpoint carries no head.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn objtx_model_task_outputs(
    model: *const ObjtxModel,
    out: *mut usize,
) -> ObjtxStatus {
    guarded(|| {
        let m = match non_null(model, "model") {
            Ok(m) => m,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(ObjtxStatus::NullArgument, "out must not be null");
        }
        let n = match &m.0 {
            ModelKind::F32(p) => p.task_head.as_ref().map_or(0, |h| h.n_out),
            ModelKind::F64(p) => p.task_head.as_ref().map_or(0, |h| h.n_out),
        };
        unsafe { *out = n };
        ObjtxStatus::Ok
    })
}

/// Deterministic whole-video [CLS] embedding, truncated to the model's
/// token cap.
fn embed_one<S: Scalar>(params: &ModelParams<S>, video: &Video) -> objtx::Result<Vec<f64>> {
    let span = video_span(video, params.config.token_cap)?;
    let mut g = Graph::new();
    let mut rng = substream(0, "eval");
    let seq = embed_tokens(&mut g, &span, params, &BTreeMap::new(), Mode::Eval, &mut rng)?;
    let enc = encode(&mut g, seq.node, &seq.mask, params, Mode::Eval, &mut rng)?;
    let cls = g.gather_rows(enc, &[0])?;
    let row = g.value(cls);
    Ok(row.data().iter().map(|s| s.to_f64()).collect())
}

fn write_result(values: &[f64], buf: *mut f64, buf_len: usize, what: &str) -> ObjtxStatus {
    if buf.is_null() {
        return fail(ObjtxStatus::NullArgument, "buf must not be null");
    }
    if buf_len < values.len() {
        return fail(
            ObjtxStatus::BufferTooSmall,
            &format!("{what} needs {} doubles, buffer holds {buf_len}", values.len()),
        );
    }
    unsafe { std::ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len()) };
    ObjtxStatus::Ok
}

/// Embed video `index` of the dataset; writes `embedding_dim` doubles.
///
/// # Safety
/// `model` and `dataset` must be live handles; `buf` must be valid for
/// `buf_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn objtx_video_embedding(
    model: *const ObjtxModel,
    dataset: *const ObjtxDataset,
    index: usize,
    buf: *mut f64,
    buf_len: usize,
) -> ObjtxStatus {
    guarded(|| {
        let m = match non_null(model, "model") {
            Ok(m) => m,
            Err(s) => return s,
        };
        let ds = match non_null(dataset, "dataset") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let video = match video_at(ds, index) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let embedded = match &m.0 {
            ModelKind::F32(p) => embed_one(p, video),
            ModelKind::F64(p) => embed_one(p, video),
        };
        match embedded {
            Ok(v) => write_result(&v, buf, buf_len, "embedding"),
            Err(e) => fail_error(&e),
        }
    })
}

/// Task-head scores for video `index`; writes `task_outputs` doubles.
/// Fails with `OBJTX_STATUS_USAGE` when the model has no task head.
///
/// # Safety
/// `model` and `dataset` must be live handles; `buf` must be valid for
/// `buf_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn objtx_video_task_scores(
    model: *const ObjtxModel,
    dataset: *const ObjtxDataset,
    index: usize,
    buf: *mut f64,
    buf_len: usize,
) -> ObjtxStatus {
    guarded(|| {
        let m = match non_null(model, "model") {
            Ok(m) => m,
            Err(s) => return s,
        };
        let ds = match non_null(dataset, "dataset") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let video = match video_at(ds, index) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let scored = match &m.0 {
            ModelKind::F32(p) => {
                video_span(video, p.config.token_cap).and_then(|s| predict_video(p, &s))
            }
            ModelKind::F64(p) => {
                video_span(video, p.config.token_cap).and_then(|s| predict_video(p, &s))
            }
        };
        match scored {
            Ok(v) => write_result(&v, buf, buf_len, "task scores"),
            Err(e) => fail_error(&e),
        }
    })
}
