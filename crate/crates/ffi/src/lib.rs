//! C ABI over the trained-model inference surface: load a checkpoint and
//! a dataset, predict action rewards, and rank candidate actions. All
//! functions are panic-safe; failures set a thread-local error message
//! and return an error code (or null for constructors).

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use crn_core::domain::{build_client_tuple, Dataset};
use crn_core::io::{load_checkpoint, read_dataset, AnyModel};
use crn_core::recommend::recommend_top_k;

/// Operation succeeded.
pub const CRN_OK: c_int = 0;
/// A required pointer argument was null.
pub const CRN_ERR_NULL: c_int = 1;
/// A string argument was not valid UTF-8.
pub const CRN_ERR_UTF8: c_int = 2;
/// File could not be read or parsed.
pub const CRN_ERR_IO: c_int = 3;
/// Index, step or action out of range.
pub const CRN_ERR_RANGE: c_int = 4;
/// Any other failure; see crn_last_error.
pub const CRN_ERR_INTERNAL: c_int = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn crn_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn crn_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Opaque trained model (checkpoint).
pub struct CrnModel {
    inner: AnyModel,
}

/// Opaque client dataset.
pub struct CrnDataset {
    inner: Dataset,
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, c_int> {
    if ptr.is_null() {
        set_error("path is null");
        return Err(CRN_ERR_NULL);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(CRN_ERR_UTF8)
        }
    }
}

/// Loads a checkpoint file. Returns null on failure (see
/// crn_last_error); free with crn_model_free.
///
/// # Safety
/// `path` must point to a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn crn_model_load(path: *const c_char) -> *mut CrnModel {
    let result = catch_unwind(AssertUnwindSafe(|| {
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(_) => return std::ptr::null_mut(),
        };
        match load_checkpoint(path) {
            Ok((model, _)) => Box::into_raw(Box::new(CrnModel { inner: model })),
            Err(e) => {
                set_error(&e.to_string());
                std::ptr::null_mut()
            }
        }
    }));
    result.unwrap_or_else(|_| {
        set_error("panic in crn_model_load");
        std::ptr::null_mut()
    })
}

/// # Safety
/// `model` must be a pointer from crn_model_load, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn crn_model_free(model: *mut CrnModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Loads a JSONL dataset. Returns null on failure; free with
/// crn_dataset_free.
///
/// # Safety
/// `path` must point to a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn crn_dataset_load(path: *const c_char) -> *mut CrnDataset {
    let result = catch_unwind(AssertUnwindSafe(|| {
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(_) => return std::ptr::null_mut(),
        };
        match read_dataset(path) {
            Ok(dataset) => Box::into_raw(Box::new(CrnDataset { inner: dataset })),
            Err(e) => {
                set_error(&e.to_string());
                std::ptr::null_mut()
            }
        }
    }));
    result.unwrap_or_else(|_| {
        set_error("panic in crn_dataset_load");
        std::ptr::null_mut()
    })
}

/// # Safety
/// `dataset` must be a pointer from crn_dataset_load, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn crn_dataset_free(dataset: *mut CrnDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Number of client records in the dataset; 0 if `dataset` is null.
///
/// # Safety
/// `dataset` must be a live pointer from crn_dataset_load or null.
#[no_mangle]
pub unsafe extern "C" fn crn_dataset_len(dataset: *const CrnDataset) -> usize {
    if dataset.is_null() {
        return 0;
    }
    unsafe { &*dataset }.inner.records.len()
}

/// Sequence length (number of steps) of one client record.
///
/// # Safety
/// `dataset` must be a live pointer from crn_dataset_load.
#[no_mangle]
pub unsafe extern "C" fn crn_record_len(dataset: *const CrnDataset, client_index: usize) -> usize {
    if dataset.is_null() {
        return 0;
    }
    let ds = unsafe { &*dataset };
    ds.inner.records.get(client_index).map(|r| r.steps.len()).unwrap_or(0)
}

/// Predicted reward of taking `action` for the client at 1-based step
/// `step`. Writes into `out_reward`.
///
/// # Safety
/// `model` and `dataset` must be live pointers from their loaders;
/// `out_reward` must point to writable memory for one f64.
#[no_mangle]
pub unsafe extern "C" fn crn_predict_reward(
    model: *const CrnModel,
    dataset: *const CrnDataset,
    client_index: usize,
    step: usize,
    action: usize,
    out_reward: *mut f64,
) -> c_int {
    let result = catch_unwind(AssertUnwindSafe(|| {
        if model.is_null() || dataset.is_null() || out_reward.is_null() {
            set_error("null argument");
            return CRN_ERR_NULL;
        }
        let model = unsafe { &*model };
        let ds = unsafe { &*dataset };
        let record = match ds.inner.records.get(client_index) {
            Some(r) => r,
            None => {
                set_error("client index out of range");
                return CRN_ERR_RANGE;
            }
        };
        let tuple = match build_client_tuple(record, step) {
            Ok(t) => t,
            Err(e) => {
                set_error(&e.to_string());
                return CRN_ERR_RANGE;
            }
        };
        match model.inner.predict(&tuple, action) {
            Ok(reward) => {
                unsafe { *out_reward = reward };
                CRN_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                CRN_ERR_RANGE
            }
        }
    }));
    result.unwrap_or_else(|_| {
        set_error("panic in crn_predict_reward");
        CRN_ERR_INTERNAL
    })
}

/// Ranks the candidate actions of the client's final step and writes up
/// to `capacity` (action id, predicted reward) pairs. `out_len` receives
/// the number written.
///
/// # Safety
/// `model` and `dataset` must be live pointers from their loaders;
/// `out_actions` and `out_scores` must have room for `capacity` items;
/// `out_len` must point to writable memory for one usize.
#[no_mangle]
pub unsafe extern "C" fn crn_recommend(
    model: *const CrnModel,
    dataset: *const CrnDataset,
    client_index: usize,
    k: usize,
    out_actions: *mut usize,
    out_scores: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> c_int {
    let result = catch_unwind(AssertUnwindSafe(|| {
        if model.is_null()
            || dataset.is_null()
            || out_actions.is_null()
            || out_scores.is_null()
            || out_len.is_null()
        {
            set_error("null argument");
            return CRN_ERR_NULL;
        }
        let model = unsafe { &*model };
        let ds = unsafe { &*dataset };
        let record = match ds.inner.records.get(client_index) {
            Some(r) => r,
            None => {
                set_error("client index out of range");
                return CRN_ERR_RANGE;
            }
        };
        let t = record.steps.len();
        let tuple = match build_client_tuple(record, t) {
            Ok(tp) => tp,
            Err(e) => {
                set_error(&e.to_string());
                return CRN_ERR_RANGE;
            }
        };
        let candidates = &record.steps[t - 1].candidates;
        let ranked = match &model.inner {
            AnyModel::Crn(m) => recommend_top_k(m.as_ref(), &tuple, candidates, k),
            AnyModel::Markov(m) => recommend_top_k(m.as_ref(), &tuple, candidates, k),
            AnyModel::Gru(m) => recommend_top_k(m.as_ref(), &tuple, candidates, k),
        };
        match ranked {
            Ok(rec) => {
                let n = rec.ranked.len().min(capacity);
                for (i, (action, score)) in rec.ranked.iter().take(n).enumerate() {
                    unsafe {
                        *out_actions.add(i) = *action;
                        *out_scores.add(i) = *score;
                    }
                }
                unsafe { *out_len = n };
                CRN_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                CRN_ERR_RANGE
            }
        }
    }));
    result.unwrap_or_else(|_| {
        set_error("panic in crn_recommend");
        CRN_ERR_INTERNAL
    })
}
