//! C ABI over `protomoe`.
//!
//! Every fallible function returns a [`PmoeStatus`]. On failure the message is
//! kept per thread and read back with [`pmoe_last_error`]. Handles are opaque
//! and must be released with their `_free` function. Strings returned through
//! `char **` out-parameters are released with [`pmoe_string_free`].

#![allow(clippy::missing_safety_doc)]

mod handles;

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use protomoe::cluster_sim::routing_op_count;
use protomoe::routing::{capacity, coefficient_of_variation, CapacityConfig, CapacityMode, RoutingStrategy};
use protomoe::Error;

pub use handles::*;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Invalid strategy, capacity factor or other configuration value.
    Config = 3,
    /// Config text rejected; the message carries line and key.
    Parse = 4,
    /// Malformed data such as a bad probability matrix or plan dump.
    Input = 5,
    Dimension = 6,
    /// A computation produced NaN or infinity.
    Numeric = 7,
    Io = 8,
    /// The quantity has no value for these inputs (c_v of an all-zero load).
    Undefined = 9,
    OutOfRange = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PmoeCapacityMode {
    /// `ceil(k*T/N*factor)`.
    Standard = 0,
    /// Slot count of the top-1 baseline at the same factor.
    Limited = 1,
}

impl From<PmoeCapacityMode> for CapacityMode {
    fn from(m: PmoeCapacityMode) -> Self {
        match m {
            PmoeCapacityMode::Standard => CapacityMode::Standard,
            PmoeCapacityMode::Limited => CapacityMode::Limited,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

pub(crate) struct Failure(PmoeStatus, String);

impl Failure {
    pub(crate) fn new(status: PmoeStatus, message: impl Into<String>) -> Self {
        Failure(status, message.into())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. } => PmoeStatus::Dimension,
            Error::Input(_) => PmoeStatus::Input,
            Error::Config(_) => PmoeStatus::Config,
            Error::NonFinite(_) | Error::Evaluation(_) => PmoeStatus::Numeric,
            Error::Parse { .. } => PmoeStatus::Parse,
            Error::Io(_) | Error::Json(_) => PmoeStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

pub(crate) type FfiResult<T> = Result<T, Failure>;

/// Runs `f`, converting errors and panics into a status plus last-error text.
pub(crate) fn guard(f: impl FnOnce() -> FfiResult<()>) -> PmoeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PmoeStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal panic: {msg}"));
            PmoeStatus::Panic
        }
    }
}

pub(crate) unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::new(PmoeStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(PmoeStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

pub(crate) unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Failure::new(PmoeStatus::NullPointer, format!("{what} is null")))
}

pub(crate) unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(PmoeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

pub(crate) fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

pub(crate) unsafe fn strategy_arg(strategy: *const c_char, num_experts: usize) -> FfiResult<RoutingStrategy> {
    Ok(RoutingStrategy::parse(str_arg(strategy, "strategy")?, num_experts)?)
}

/// Message of the last failed call on this thread, or null after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pmoe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pmoe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Expert capacity for `tokens` tokens under `strategy` (`top<k>` or
/// `<Z>top1`) over `num_experts` experts.
#[no_mangle]
pub unsafe extern "C" fn pmoe_capacity(
    strategy: *const c_char,
    num_experts: usize,
    tokens: usize,
    capacity_factor: f64,
    mode: PmoeCapacityMode,
    out_capacity: *mut usize,
) -> PmoeStatus {
    guard(|| {
        let s = strategy_arg(strategy, num_experts)?;
        let cfg = CapacityConfig {
            tokens,
            factor: capacity_factor,
            mode: mode.into(),
        };
        let c = capacity(&cfg, &s)?;
        *out_arg(out_capacity, "out_capacity")? = c;
        Ok(())
    })
}

/// Coefficient of variation (population std / mean) of per-expert loads.
/// Returns `PMOE_STATUS_UNDEFINED` when the mean is zero.
#[no_mangle]
pub unsafe extern "C" fn pmoe_coefficient_of_variation(counts: *const f64, len: usize, out_cv: *mut f64) -> PmoeStatus {
    guard(|| {
        let counts = slice_arg(counts, len, "counts")?;
        let out = out_arg(out_cv, "out_cv")?;
        match coefficient_of_variation(counts)? {
            Some(cv) => {
                *out = cv;
                Ok(())
            }
            None => Err(Failure::new(PmoeStatus::Undefined, "c_v is undefined for a zero mean load")),
        }
    })
}

/// Comparison counts of expert selection for `tokens` tokens.
#[no_mangle]
pub unsafe extern "C" fn pmoe_routing_op_count(
    strategy: *const c_char,
    num_experts: usize,
    tokens: usize,
    out_total: *mut u64,
    out_critical_path: *mut u64,
) -> PmoeStatus {
    guard(|| {
        let s = strategy_arg(strategy, num_experts)?;
        let total = out_arg(out_total, "out_total")?;
        let critical = out_arg(out_critical_path, "out_critical_path")?;
        let count = routing_op_count(&s, tokens);
        *total = count.total;
        *critical = count.critical_path;
        Ok(())
    })
}
