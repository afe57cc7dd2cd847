//! C interface to the purification laboratory. Handles are opaque pointers
//! created and destroyed here; every call reports its outcome through a
//! status code, with a human-readable message available per thread via
//! [`purify_last_error`]. Matrices cross the boundary as row-major `double`
//! buffers with explicit dimensions.
//!
//! All handle types are read-only after creation, so one handle may be used
//! from several threads at once; the error message and status are
//! thread-local.

use purify_core::config::ExperimentConfig;
use purify_core::nn::persist::load_network;
use purify_core::nn::{Matrix, Network};
use purify_core::pipeline::run_pipeline;
use purify_core::purifier::{load_bundle, purify, PurifierBundle};
use purify_core::target::{ModelOracle, Oracle};
use purify_core::PurifyError;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Outcome of a library call. Every function stores the status of its most
/// recent invocation per thread, readable via [`purify_last_status`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PurifyStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A configuration value is out of range or inconsistent.
    ConfigError = 3,
    /// Buffer or matrix dimensions do not line up.
    ShapeError = 4,
    /// A dataset violates a structural requirement.
    DataError = 5,
    /// Reading or writing a file failed.
    IoError = 6,
    /// A persisted artifact could not be parsed.
    ParseError = 7,
    /// Training diverged or produced non-finite values.
    NumericError = 8,
    /// A pipeline stage failed.
    StageError = 9,
    /// The call panicked inside the library; state may be inconsistent.
    Panic = 10,
}

/// A trained classifier loaded from a saved network file.
pub struct PurifyModel {
    net: Network,
}

/// A trained purifier loaded from its bundle directory.
pub struct PurifyPurifier {
    bundle: PurifierBundle,
}

thread_local! {
    static LAST: RefCell<(PurifyStatus, Option<CString>)> =
        const { RefCell::new((PurifyStatus::Ok, None)) };
}

enum FfiError {
    Null(&'static str),
    Utf8(&'static str),
    Overflow(&'static str),
    Core(PurifyError),
}

impl FfiError {
    fn status(&self) -> PurifyStatus {
        match self {
            FfiError::Null(_) => PurifyStatus::NullArgument,
            FfiError::Utf8(_) => PurifyStatus::InvalidUtf8,
            FfiError::Overflow(_) => PurifyStatus::ShapeError,
            FfiError::Core(err) => match err {
                PurifyError::Config(_) => PurifyStatus::ConfigError,
                PurifyError::Shape(_) => PurifyStatus::ShapeError,
                PurifyError::Data(_) => PurifyStatus::DataError,
                PurifyError::Io { .. } => PurifyStatus::IoError,
                PurifyError::Parse { .. } => PurifyStatus::ParseError,
                PurifyError::Numeric(_) => PurifyStatus::NumericError,
                PurifyError::Stage { .. } => PurifyStatus::StageError,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            FfiError::Null(name) => format!("argument `{name}` is null"),
            FfiError::Utf8(name) => format!("argument `{name}` is not valid UTF-8"),
            FfiError::Overflow(name) => format!("`{name}` dimensions overflow"),
            FfiError::Core(err) => err.to_string(),
        }
    }
}

fn record(status: PurifyStatus, message: Option<String>) {
    let message = message
        .map(|m| CString::new(m.replace('\0', " ")).expect("interior NULs stripped"));
    LAST.with(|last| *last.borrow_mut() = (status, message));
}

fn guard<T>(fallback: T, call: impl FnOnce() -> Result<T, FfiError>) -> T {
    match catch_unwind(AssertUnwindSafe(call)) {
        Ok(Ok(value)) => {
            record(PurifyStatus::Ok, None);
            value
        }
        Ok(Err(err)) => {
            record(err.status(), Some(err.message()));
            fallback
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic inside library call".to_string());
            record(PurifyStatus::Panic, Some(message));
            fallback
        }
    }
}

unsafe fn arg_str<'a>(ptr: *const c_char, name: &'static str) -> Result<&'a str, FfiError> {
    if ptr.is_null() {
        return Err(FfiError::Null(name));
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| FfiError::Utf8(name))
}

unsafe fn arg_matrix(
    ptr: *const f64,
    rows: usize,
    cols: usize,
    name: &'static str,
) -> Result<Matrix, FfiError> {
    if ptr.is_null() {
        return Err(FfiError::Null(name));
    }
    let len = rows.checked_mul(cols).ok_or(FfiError::Overflow(name))?;
    let source = unsafe { std::slice::from_raw_parts(ptr, len) };
    let mut m = Matrix::zeros(rows, cols);
    m.data_mut().copy_from_slice(source);
    Ok(m)
}

unsafe fn write_out(m: &Matrix, out: *mut f64, name: &'static str) -> Result<(), FfiError> {
    if out.is_null() {
        return Err(FfiError::Null(name));
    }
    let dest = unsafe { std::slice::from_raw_parts_mut(out, m.data().len()) };
    dest.copy_from_slice(m.data());
    Ok(())
}

unsafe fn model_ref<'a>(model: *const PurifyModel) -> Result<&'a PurifyModel, FfiError> {
    unsafe { model.as_ref() }.ok_or(FfiError::Null("model"))
}

unsafe fn purifier_ref<'a>(
    purifier: *const PurifyPurifier,
) -> Result<&'a PurifyPurifier, FfiError> {
    unsafe { purifier.as_ref() }.ok_or(FfiError::Null("purifier"))
}

fn expect_width(cols: usize, expected: usize, what: &str) -> Result<(), FfiError> {
    if cols != expected {
        return Err(FfiError::Core(PurifyError::Shape(format!(
            "{what} expects {expected} columns, got {cols}"
        ))));
    }
    Ok(())
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn purify_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the status of the current thread's most recent library call.
#[no_mangle]
pub extern "C" fn purify_last_status() -> PurifyStatus {
    LAST.with(|last| last.borrow().0)
}

/// Returns the error message of the current thread's most recent failed
/// call, or null if that call succeeded. The pointer stays valid until this
/// thread's next library call.
#[no_mangle]
pub extern "C" fn purify_last_error() -> *const c_char {
    LAST.with(|last| {
        last.borrow().1.as_ref().map_or(std::ptr::null(), |message| message.as_ptr())
    })
}

/// Loads a trained classifier from a network file saved by the `purify`
/// tool. Returns null on failure; destroy the handle with
/// [`purify_model_free`].
///
/// # Safety
/// `path` must be null or point to a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn purify_model_load(path: *const c_char) -> *mut PurifyModel {
    guard(std::ptr::null_mut(), || {
        let path = unsafe { arg_str(path, "path") }?;
        let net = load_network(Path::new(path)).map_err(FfiError::Core)?;
        Ok(Box::into_raw(Box::new(PurifyModel { net })))
    })
}

/// Destroys a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a pointer returned by [`purify_model_load`] that
/// has not been freed; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn purify_model_free(model: *mut PurifyModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Returns the number of input features the model consumes, or 0 if the
/// handle is null.
///
/// # Safety
/// `model` must be null or a live pointer from [`purify_model_load`].
#[no_mangle]
pub unsafe extern "C" fn purify_model_input_dim(model: *const PurifyModel) -> usize {
    guard(0, || Ok(unsafe { model_ref(model) }?.net.input_dim()))
}

/// Returns the number of classes the model predicts, or 0 if the handle is
/// null.
///
/// # Safety
/// `model` must be null or a live pointer from [`purify_model_load`].
#[no_mangle]
pub unsafe extern "C" fn purify_model_num_classes(model: *const PurifyModel) -> usize {
    guard(0, || Ok(unsafe { model_ref(model) }?.net.output_dim()))
}

/// Predicts confidence vectors for `rows` samples of `cols` features each,
/// row-major in `features`. Writes `rows * num_classes` values to `out`.
///
/// # Safety
/// `model` must be a live pointer from [`purify_model_load`]; `features`
/// must point to `rows * cols` doubles; `out` must have room for
/// `rows * purify_model_num_classes(model)` doubles.
#[no_mangle]
pub unsafe extern "C" fn purify_model_predict(
    model: *const PurifyModel,
    features: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> PurifyStatus {
    guard((), || {
        let model = unsafe { model_ref(model) }?;
        expect_width(cols, model.net.input_dim(), "the model")?;
        let x = unsafe { arg_matrix(features, rows, cols, "features") }?;
        let conf = ModelOracle::new(&model.net).predict(&x);
        unsafe { write_out(&conf, out, "out") }
    });
    purify_last_status()
}

/// Loads a trained purifier from the bundle directory written by
/// `purify train-purifier`. Returns null on failure; destroy the handle
/// with [`purify_purifier_free`].
///
/// # Safety
/// `dir` must be null or point to a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn purify_purifier_load(dir: *const c_char) -> *mut PurifyPurifier {
    guard(std::ptr::null_mut(), || {
        let dir = unsafe { arg_str(dir, "dir") }?;
        let bundle = load_bundle(Path::new(dir)).map_err(FfiError::Core)?;
        Ok(Box::into_raw(Box::new(PurifyPurifier { bundle })))
    })
}

/// Destroys a purifier handle. Null is ignored.
///
/// # Safety
/// `purifier` must be null or a pointer returned by
/// [`purify_purifier_load`] that has not been freed; it must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn purify_purifier_free(purifier: *mut PurifyPurifier) {
    if !purifier.is_null() {
        drop(unsafe { Box::from_raw(purifier) });
    }
}

/// Returns the confidence-vector width the purifier was trained for, or 0
/// if the handle is null.
///
/// # Safety
/// `purifier` must be null or a live pointer from [`purify_purifier_load`].
#[no_mangle]
pub unsafe extern "C" fn purify_purifier_num_classes(purifier: *const PurifyPurifier) -> usize {
    guard(0, || Ok(unsafe { purifier_ref(purifier) }?.bundle.g.input_dim()))
}

/// Purifies `rows` confidence vectors of width `cols`, row-major in `conf`.
/// Writes the purified vectors, same shape, to `out`.
///
/// # Safety
/// `purifier` must be a live pointer from [`purify_purifier_load`]; `conf`
/// must point to `rows * cols` doubles; `out` must have room for the same
/// count.
#[no_mangle]
pub unsafe extern "C" fn purify_purifier_apply(
    purifier: *const PurifyPurifier,
    conf: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> PurifyStatus {
    guard((), || {
        let purifier = unsafe { purifier_ref(purifier) }?;
        expect_width(cols, purifier.bundle.g.input_dim(), "the purifier")?;
        let c = unsafe { arg_matrix(conf, rows, cols, "conf") }?;
        let purified = purify(&purifier.bundle, &c).map_err(FfiError::Core)?;
        unsafe { write_out(&purified, out, "out") }
    });
    purify_last_status()
}

/// Predicts confidence vectors and purifies them in one call: the defended
/// oracle an attacker would face. Writes `rows * num_classes` values to
/// `out`.
///
/// # Safety
/// `model` and `purifier` must be live pointers from their load functions;
/// `features` must point to `rows * cols` doubles; `out` must have room for
/// `rows * purify_model_num_classes(model)` doubles.
#[no_mangle]
pub unsafe extern "C" fn purify_model_predict_defended(
    model: *const PurifyModel,
    purifier: *const PurifyPurifier,
    features: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> PurifyStatus {
    guard((), || {
        let model = unsafe { model_ref(model) }?;
        let purifier = unsafe { purifier_ref(purifier) }?;
        expect_width(cols, model.net.input_dim(), "the model")?;
        expect_width(
            purifier.bundle.g.input_dim(),
            model.net.output_dim(),
            "the purifier",
        )?;
        let x = unsafe { arg_matrix(features, rows, cols, "features") }?;
        let conf = ModelOracle::new(&model.net).predict(&x);
        let purified = purify(&purifier.bundle, &conf).map_err(FfiError::Core)?;
        unsafe { write_out(&purified, out, "out") }
    });
    purify_last_status()
}

/// Runs the full experiment a config file describes, writing every artifact
/// under the config's output directory.
///
/// # Safety
/// `config_path` must be null or point to a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn purify_run_experiment(config_path: *const c_char) -> PurifyStatus {
    guard((), || {
        let path = unsafe { arg_str(config_path, "config_path") }?;
        let cfg = ExperimentConfig::load(Path::new(path)).map_err(FfiError::Core)?;
        run_pipeline(&cfg).map_err(FfiError::Core)?;
        Ok(())
    });
    purify_last_status()
}
