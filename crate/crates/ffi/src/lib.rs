//! C ABI for the distillation pipeline.
//!
//! Conventions:
//! - every fallible call returns a [`KdStatus`]; `KdStatus::Ok` is zero
//! - on failure, a message is stored per thread and readable through
//!   [`kdkit_last_error`] until the next failing call on that thread
//! - configs are opaque handles created by [`kdkit_config_parse`] and
//!   released with [`kdkit_config_free`]
//! - strings returned through out-parameters are owned by the caller and
//!   must be released with [`kdkit_string_free`]
//!
//! The generated header lives at `include/kdkit.h`.

use std::any::Any;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kdkit::config::{parse_run_config, RunConfig};
use kdkit::encoder::EncoderConfig;
use kdkit::pipeline::run_pipeline;
use kdkit::sps::{count_parameters, ParamStore};
use kdkit::KdError;

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration failed to parse or validate.
    Config = 3,
    /// A pipeline stage failed (I/O, data, training, or a caught panic).
    Runtime = 4,
}

/// Opaque parsed run configuration.
pub struct KdConfig {
    inner: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg)
        .unwrap_or_else(|_| CString::new("error message contained a nul byte").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn fail(status: KdStatus, msg: impl Into<String>) -> KdStatus {
    set_error(msg.into());
    status
}

fn fail_err(err: &KdError) -> KdStatus {
    set_error(err.to_string());
    match err {
        KdError::Config(_) => KdStatus::Config,
        _ => KdStatus::Runtime,
    }
}

fn panic_text(payload: &(dyn Any + Send)) -> &str {
    payload
        .downcast_ref::<&str>()
        .copied()
        .or_else(|| payload.downcast_ref::<String>().map(String::as_str))
        .unwrap_or("unknown panic")
}

/// Run `body`, converting a panic into a `Runtime` status instead of
/// unwinding across the C boundary.
fn guarded(body: impl FnOnce() -> KdStatus) -> KdStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => fail(KdStatus::Runtime, format!("panic: {}", panic_text(&*payload))),
    }
}

unsafe fn cstr_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, KdStatus> {
    if p.is_null() {
        return Err(fail(KdStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KdStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn dim_arg(value: u64, name: &str) -> Result<usize, KdStatus> {
    usize::try_from(value)
        .map_err(|_| fail(KdStatus::Config, format!("{name} {value} does not fit in usize")))
}

/// Library version as a static nul-terminated string; never null, never freed.
#[no_mangle]
pub extern "C" fn kdkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message from the most recent failing call on this thread, or null if no
/// call has failed yet. The pointer is invalidated by the next failing call
/// on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn kdkit_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr())
    })
}

/// Parse a TOML run configuration.
///
/// On success writes a new handle to `out` and returns `Ok`; on failure
/// writes null and returns `Config` (or an argument status).
///
/// # Safety
/// `toml_text` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kdkit_config_parse(
    toml_text: *const c_char,
    out: *mut *mut KdConfig,
) -> KdStatus {
    guarded(|| {
        if out.is_null() {
            return fail(KdStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let text = match cstr_arg(toml_text, "toml_text") {
            Ok(t) => t,
            Err(status) => return status,
        };
        match parse_run_config(text) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(KdConfig { inner: cfg }));
                KdStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Override the run seed, as the CLI `--seed` flag would.
///
/// # Safety
/// `cfg` must be a live handle from [`kdkit_config_parse`].
#[no_mangle]
pub unsafe extern "C" fn kdkit_config_set_seed(cfg: *mut KdConfig, seed: u64) -> KdStatus {
    guarded(|| match cfg.as_mut() {
        Some(handle) => {
            handle.inner.seed = seed;
            KdStatus::Ok
        }
        None => fail(KdStatus::NullArgument, "cfg is null"),
    })
}

/// Release a config handle. Null is ignored.
///
/// # Safety
/// `cfg` must be null or a handle from [`kdkit_config_parse`] that has not
/// already been freed.
#[no_mangle]
pub unsafe extern "C" fn kdkit_config_free(cfg: *mut KdConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Execute the full pipeline: task data, teacher, optional
/// teacher-prediction pretraining, distillation, evaluation. Artifacts land
/// under `out_dir` (falling back to the config's `out_dir` key when the
/// argument is null). If `summary_json` is non-null it receives the run
/// summary as a JSON string owned by the caller.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` null or nul-terminated;
/// `summary_json` null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kdkit_run(
    cfg: *const KdConfig,
    out_dir: *const c_char,
    summary_json: *mut *mut c_char,
) -> KdStatus {
    guarded(|| {
        let Some(handle) = cfg.as_ref() else {
            return fail(KdStatus::NullArgument, "cfg is null");
        };
        if !summary_json.is_null() {
            *summary_json = ptr::null_mut();
        }
        let dir: PathBuf = if out_dir.is_null() {
            match &handle.inner.out_dir {
                Some(d) => d.clone(),
                None => {
                    return fail(
                        KdStatus::Config,
                        "no output directory: pass out_dir or set out_dir in the config",
                    )
                }
            }
        } else {
            match cstr_arg(out_dir, "out_dir") {
                Ok(s) => PathBuf::from(s),
                Err(status) => return status,
            }
        };
        let outcome = match run_pipeline(&handle.inner, &dir) {
            Ok(o) => o,
            Err(e) => return fail_err(&e),
        };
        if !summary_json.is_null() {
            let text = match outcome.summary.to_json() {
                Ok(t) => t,
                Err(e) => return fail_err(&e),
            };
            match CString::new(text) {
                Ok(c) => *summary_json = c.into_raw(),
                Err(_) => {
                    return fail(KdStatus::Runtime, "summary JSON contained a nul byte")
                }
            }
        }
        KdStatus::Ok
    })
}

/// Number of stored parameters for an encoder of the given geometry with
/// `num_param_sets` stored layer sets. With `include_embeddings` false only
/// the shared layer stacks are counted, which is how model sizes are
/// usually quoted.
///
/// # Safety
/// `out_count` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kdkit_parameter_count(
    vocab_size: u64,
    max_seq_len: u64,
    hidden_dim: u64,
    num_heads: u64,
    ff_dim: u64,
    num_classes: u64,
    num_param_sets: u64,
    include_embeddings: bool,
    out_count: *mut u64,
) -> KdStatus {
    guarded(|| {
        if out_count.is_null() {
            return fail(KdStatus::NullArgument, "out_count is null");
        }
        *out_count = 0;
        let sets = match dim_arg(num_param_sets, "num_param_sets") {
            Ok(v) => v,
            Err(status) => return status,
        };
        let config = EncoderConfig {
            vocab_size: match dim_arg(vocab_size, "vocab_size") {
                Ok(v) => v,
                Err(status) => return status,
            },
            max_seq_len: match dim_arg(max_seq_len, "max_seq_len") {
                Ok(v) => v,
                Err(status) => return status,
            },
            hidden_dim: match dim_arg(hidden_dim, "hidden_dim") {
                Ok(v) => v,
                Err(status) => return status,
            },
            num_heads: match dim_arg(num_heads, "num_heads") {
                Ok(v) => v,
                Err(status) => return status,
            },
            ff_dim: match dim_arg(ff_dim, "ff_dim") {
                Ok(v) => v,
                Err(status) => return status,
            },
            num_classes: match dim_arg(num_classes, "num_classes") {
                Ok(v) => v,
                Err(status) => return status,
            },
            // irrelevant to the count; any depth the sets can serve
            num_physical_layers: sets.max(1),
        };
        match ParamStore::zeros_init(config, sets) {
            Ok(store) => {
                *out_count = count_parameters(&store, include_embeddings) as u64;
                KdStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Release a string returned through an out-parameter. Null is ignored.
///
/// # Safety
/// `s` must be null or a string produced by this library that has not
/// already been freed.
#[no_mangle]
pub unsafe extern "C" fn kdkit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
