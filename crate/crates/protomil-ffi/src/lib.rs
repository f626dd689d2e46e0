//! C ABI surface: opaque handles over the model and bag datasets, integer
//! error codes, and a thread-local last-error message. The matching header
//! lives at `include/protomil.h`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::path::Path;
use std::ptr;

use protomil::checkpoint;
use protomil::data::load_bag_dataset;
use protomil::error::Error;
use protomil::eval::compute_metrics;
use protomil::mil::types::{Bag, Label};
use protomil::mil::{forward_bag, positive_probability, Model};

pub const PROTOMIL_OK: c_int = 0;
pub const PROTOMIL_ERR_INVALID_ARGUMENT: c_int = 1;
pub const PROTOMIL_ERR_IO: c_int = 2;
pub const PROTOMIL_ERR_SCHEMA: c_int = 3;
pub const PROTOMIL_ERR_NUMERIC: c_int = 4;
pub const PROTOMIL_ERR_UNDEFINED_METRIC: c_int = 5;

/// Opaque handle over a loaded model.
pub struct ProtomilModel(Model);
/// Opaque handle over a loaded bag dataset.
pub struct ProtomilDataset(Vec<Bag>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(err: &Error) -> c_int {
    let message = CString::new(err.to_string().replace('\0', " "))
        .unwrap_or_else(|_| CString::new("invalid error message").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message);
    match err {
        Error::InvalidInput(_) | Error::Config(_) | Error::ShapeMismatch(_) => {
            PROTOMIL_ERR_INVALID_ARGUMENT
        }
        Error::Io { .. } | Error::MissingFile(_) => PROTOMIL_ERR_IO,
        Error::Schema(_) | Error::DimensionMismatch(_) => PROTOMIL_ERR_SCHEMA,
        Error::NumericalAbort { .. } => PROTOMIL_ERR_NUMERIC,
        Error::AucUndefined => PROTOMIL_ERR_UNDEFINED_METRIC,
        Error::InvariantViolation(_) => PROTOMIL_ERR_INVALID_ARGUMENT,
    }
}

fn set_last_error_msg(message: &str) -> c_int {
    set_last_error(&Error::InvalidInput(message.to_string()))
}

fn path_from_c(path: *const c_char) -> Result<&'static Path, c_int> {
    if path.is_null() {
        return Err(set_last_error_msg("path is null"));
    }
    // Safety: caller guarantees a NUL-terminated string (header contract).
    let bytes = unsafe { CStr::from_ptr(path) }.to_bytes();
    match std::str::from_utf8(bytes) {
        Ok(s) => Ok(Path::new(unsafe { &*(s as *const str) })),
        Err(_) => Err(set_last_error_msg("path is not valid UTF-8")),
    }
}

/// Message describing the most recent error on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn protomil_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a checkpoint directory. Returns null on failure (see
/// `protomil_last_error`).
#[no_mangle]
pub extern "C" fn protomil_model_load(path: *const c_char) -> *mut ProtomilModel {
    let path = match path_from_c(path) {
        Ok(p) => p,
        Err(_) => return ptr::null_mut(),
    };
    match checkpoint::load(path) {
        Ok(model) => Box::into_raw(Box::new(ProtomilModel(model))),
        Err(err) => {
            set_last_error(&err);
            ptr::null_mut()
        }
    }
}

/// Free a model handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn protomil_model_free(model: *mut ProtomilModel) {
    if !model.is_null() {
        // Safety: pointer came from protomil_model_load and is freed once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Load a bag-dataset manifest (file or directory). Returns null on failure.
#[no_mangle]
pub extern "C" fn protomil_dataset_load(path: *const c_char) -> *mut ProtomilDataset {
    let path = match path_from_c(path) {
        Ok(p) => p,
        Err(_) => return ptr::null_mut(),
    };
    match load_bag_dataset(path) {
        Ok(bags) => Box::into_raw(Box::new(ProtomilDataset(bags))),
        Err(err) => {
            set_last_error(&err);
            ptr::null_mut()
        }
    }
}

/// Free a dataset handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn protomil_dataset_free(dataset: *mut ProtomilDataset) {
    if !dataset.is_null() {
        // Safety: pointer came from protomil_dataset_load and is freed once.
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Number of bags in the dataset; -1 if the handle is null.
#[no_mangle]
pub extern "C" fn protomil_dataset_len(dataset: *const ProtomilDataset) -> isize {
    if dataset.is_null() {
        set_last_error_msg("dataset is null");
        return -1;
    }
    unsafe { &*dataset }.0.len() as isize
}

/// Score one bag: writes the positive-class probability and the predicted
/// label (0 negative, 1 positive) through the out pointers.
#[no_mangle]
pub extern "C" fn protomil_predict_bag(
    model: *const ProtomilModel,
    dataset: *const ProtomilDataset,
    bag_index: usize,
    out_probability: *mut f64,
    out_label: *mut c_int,
) -> c_int {
    if model.is_null() || dataset.is_null() || out_probability.is_null() || out_label.is_null() {
        return set_last_error_msg("null argument");
    }
    let model = unsafe { &*model };
    let bags = &unsafe { &*dataset }.0;
    let Some(bag) = bags.get(bag_index) else {
        return set_last_error_msg("bag index out of range");
    };
    match forward_bag(&model.0, bag) {
        Ok((trace, _)) => {
            let p = positive_probability(&trace.logits);
            unsafe {
                *out_probability = p;
                *out_label = if p > 0.5 { 1 } else { 0 };
            }
            PROTOMIL_OK
        }
        Err(err) => set_last_error(&err),
    }
}

/// Evaluate the model over every bag in the dataset. `out_auc` receives NaN
/// when the AUC is undefined (single-class dataset); the call still succeeds.
#[no_mangle]
pub extern "C" fn protomil_evaluate(
    model: *const ProtomilModel,
    dataset: *const ProtomilDataset,
    out_accuracy: *mut f64,
    out_auc: *mut f64,
    out_f_score: *mut f64,
) -> c_int {
    if model.is_null()
        || dataset.is_null()
        || out_accuracy.is_null()
        || out_auc.is_null()
        || out_f_score.is_null()
    {
        return set_last_error_msg("null argument");
    }
    let model = unsafe { &*model };
    let bags = &unsafe { &*dataset }.0;
    let mut scored = Vec::with_capacity(bags.len());
    for bag in bags {
        match forward_bag(&model.0, bag) {
            Ok((trace, _)) => scored.push((positive_probability(&trace.logits), bag.label)),
            Err(err) => return set_last_error(&err),
        }
    }
    match compute_metrics(&scored) {
        Ok(metrics) => {
            unsafe {
                *out_accuracy = metrics.accuracy;
                *out_auc = metrics.auc.unwrap_or(f64::NAN);
                *out_f_score = metrics.f_score;
            }
            PROTOMIL_OK
        }
        Err(err) => set_last_error(&err),
    }
}

/// True label of a bag (0 negative, 1 positive); -1 on bad handle/index.
#[no_mangle]
pub extern "C" fn protomil_bag_label(
    dataset: *const ProtomilDataset,
    bag_index: usize,
) -> c_int {
    if dataset.is_null() {
        set_last_error_msg("dataset is null");
        return -1;
    }
    match unsafe { &*dataset }.0.get(bag_index) {
        Some(bag) => match bag.label {
            Label::Negative => 0,
            Label::Positive => 1,
        },
        None => {
            set_last_error_msg("bag index out of range");
            -1
        }
    }
}
