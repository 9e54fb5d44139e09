//! C interface to a trained recommender checkpoint.
//!
//! Handles are opaque; every call returns a [`KgrecStatus`]. Strings handed
//! out by the library must be released with [`kgrec_string_free`]. The text
//! of the most recent failure on the calling thread is available through
//! [`kgrec_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kgrec::checkpoint;
use kgrec::corpus::{Speaker, Utterance};
use kgrec::service::{handle_chat, ChatRequest, RecommendedItem, ServiceError, Snapshot};
use kgrec::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgrecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BadRequest = 3,
    Io = 4,
    Data = 5,
    Numeric = 6,
    Internal = 7,
    Panic = 8,
}

/// A loaded checkpoint with precomputed entity representations.
pub struct KgrecModel {
    snapshot: Snapshot,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: KgrecStatus, msg: impl Into<String>) -> KgrecStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> KgrecStatus {
    let status = match &e {
        Error::Io { .. } => KgrecStatus::Io,
        Error::Numeric(_) => KgrecStatus::Numeric,
        Error::Validation(_) | Error::Config(_) => KgrecStatus::BadRequest,
        Error::Parse { .. } | Error::Data(_) | Error::Json(_) => KgrecStatus::Data,
    };
    fail(status, e.to_string())
}

fn from_service(e: ServiceError) -> KgrecStatus {
    let status = match &e {
        ServiceError::BadRequest(_) => KgrecStatus::BadRequest,
        ServiceError::Unavailable | ServiceError::Internal(_) => KgrecStatus::Internal,
    };
    fail(status, e.to_string())
}

fn guarded(f: impl FnOnce() -> KgrecStatus) -> KgrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(KgrecStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, KgrecStatus> {
    if p.is_null() {
        return Err(fail(KgrecStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KgrecStatus::InvalidUtf8, "argument is not valid UTF-8"))
}

unsafe fn hand_out(s: String, out: *mut *mut c_char) -> KgrecStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            KgrecStatus::Ok
        }
        Err(_) => fail(KgrecStatus::Internal, "output contains a NUL byte"),
    }
}

/// Loads a checkpoint directory. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgrec_model_load(path: *const c_char, out: *mut *mut KgrecModel) -> KgrecStatus {
    guarded(|| {
        if out.is_null() {
            return fail(KgrecStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let path = match read_str(path) {
            Ok(p) => Path::new(p),
            Err(s) => return s,
        };
        let loaded = checkpoint::load(path)
            .and_then(|model| Snapshot::new(model, checkpoint::checkpoint_hash(path)?));
        match loaded {
            Ok(snapshot) => {
                *out = Box::into_raw(Box::new(KgrecModel { snapshot }));
                KgrecStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`kgrec_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kgrec_model_free(model: *mut KgrecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs one chat turn. `request_json` is a chat request object
/// (`{"history": [...], "top_k": 5, "decode": "greedy"}`); `*out` receives
/// the response object as JSON.
///
/// # Safety
/// `model` must be a live handle, `request_json` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kgrec_chat_json(
    model: *const KgrecModel,
    request_json: *const c_char,
    out: *mut *mut c_char,
) -> KgrecStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(KgrecStatus::NullPointer, "null handle or output pointer");
        }
        *out = ptr::null_mut();
        let text = match read_str(request_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let req: ChatRequest = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => return fail(KgrecStatus::BadRequest, e.to_string()),
        };
        match handle_chat(Some(&(*model).snapshot), &req) {
            Ok(resp) => match serde_json::to_string(&resp) {
                Ok(s) => hand_out(s, out),
                Err(e) => fail(KgrecStatus::Internal, e.to_string()),
            },
            Err(e) => from_service(e),
        }
    })
}

/// Top-`k` items for a single seeker utterance, as a JSON array of
/// `{entity_id, name, year, score}`.
///
/// # Safety
/// `model` must be a live handle, `utterance` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kgrec_recommend(
    model: *const KgrecModel,
    utterance: *const c_char,
    k: usize,
    out: *mut *mut c_char,
) -> KgrecStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(KgrecStatus::NullPointer, "null handle or output pointer");
        }
        *out = ptr::null_mut();
        let text = match read_str(utterance) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let snap = &(*model).snapshot;
        let context = [Utterance::new(Speaker::Seeker, text)];
        let result = snap
            .model
            .encode_context(&context)
            .and_then(|rep| snap.model.recommend_with(&rep, &snap.entities, k));
        let result = match result {
            Ok(r) => r,
            Err(e) => return from_error(e),
        };
        let items: Vec<RecommendedItem> = result
            .top_k
            .iter()
            .filter_map(|(id, p)| {
                snap.model.kg().node(id).map(|n| RecommendedItem {
                    entity_id: id.clone(),
                    name: n.name.clone(),
                    year: n.release_year,
                    score: *p,
                })
            })
            .collect();
        match serde_json::to_string(&items) {
            Ok(s) => hand_out(s, out),
            Err(e) => fail(KgrecStatus::Internal, e.to_string()),
        }
    })
}

/// Checkpoint hash of a loaded model; free with [`kgrec_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kgrec_checkpoint_hash(model: *const KgrecModel, out: *mut *mut c_char) -> KgrecStatus {
    if model.is_null() || out.is_null() {
        return fail(KgrecStatus::NullPointer, "null handle or output pointer");
    }
    hand_out((*model).snapshot.checkpoint_hash.clone(), out)
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn kgrec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn kgrec_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn kgrec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
