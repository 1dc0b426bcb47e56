//! C ABI for the homogenization toolkit.
//!
//! Every fallible function returns an `int32_t` status: `HM_OK` or one of the
//! `HM_ERR_*` codes. The message of the most recent failure on the calling
//! thread is available from [`hm_last_error`]. Handles are opaque and must be
//! released with their matching `*_free` function. Strings returned by the
//! library are released with [`hm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use homogenize::harness::suite::builtin;
use homogenize::harness::{execute, run_scenario, with_workers, RunManifest, ScenarioConfig};
use homogenize::meanval::{mean_value, AveragingPlan};
use homogenize::Error;

pub const HM_OK: i32 = 0;
pub const HM_ERR_PARAMETER: i32 = 1;
pub const HM_ERR_SHAPE: i32 = 2;
pub const HM_ERR_OVERFLOW: i32 = 3;
pub const HM_ERR_ELLIPTICITY: i32 = 4;
pub const HM_ERR_MONOTONICITY: i32 = 5;
pub const HM_ERR_SOLVER: i32 = 6;
pub const HM_ERR_STATISTICS: i32 = 7;
pub const HM_ERR_RESOLUTION: i32 = 8;
pub const HM_ERR_INVARIANT: i32 = 9;
pub const HM_ERR_UNSUPPORTED: i32 = 10;
pub const HM_ERR_CONFIG: i32 = 11;
pub const HM_ERR_IO: i32 = 12;
pub const HM_ERR_FORMAT: i32 = 13;
/// A required pointer argument was null.
pub const HM_ERR_NULL: i32 = -1;
/// A string argument was not valid UTF-8.
pub const HM_ERR_UTF8: i32 = -2;
/// The library panicked; the handle involved should be considered poisoned.
pub const HM_ERR_PANIC: i32 = -3;
/// An output buffer was too small; the required size was still written.
pub const HM_ERR_BUFFER: i32 = -4;

/// A scenario configuration.
pub struct HmScenario {
    config: ScenarioConfig,
}

/// The manifest of a finished run.
pub struct HmRun {
    manifest: RunManifest,
}

type HmScalarFn = extern "C" fn(y: *const f64, dim: usize, user: *mut c_void) -> f64;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.code(), e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|l| *l.borrow_mut() = Some(c));
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HM_OK,
        Ok(Err(Failure(code, msg))) => {
            set_last_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            HM_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(HM_ERR_NULL, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(HM_ERR_UTF8, format!("{what}: {e}")))
}

unsafe fn scenario<'a>(s: *const HmScenario) -> Result<&'a HmScenario, Failure> {
    s.as_ref().ok_or_else(|| null("scenario"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn hm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn hm_last_error() -> *const c_char {
    LAST_ERROR.with(|l| l.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a TOML scenario.
///
/// # Safety
/// `toml` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hm_scenario_from_toml(
    toml: *const c_char,
    out: *mut *mut HmScenario,
) -> i32 {
    guard(|| {
        let config = ScenarioConfig::from_toml(text(toml, "toml")?)?;
        put(out, HmScenario { config })
    })
}

/// One of the built-in scenarios (see `homogenize list`).
///
/// # Safety
/// `name` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hm_scenario_builtin(
    name: *const c_char,
    seed: u64,
    out: *mut *mut HmScenario,
) -> i32 {
    guard(|| {
        let config = builtin(text(name, "name")?, seed)?;
        put(out, HmScenario { config })
    })
}

/// Replaces the scenario seed.
///
/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn hm_scenario_set_seed(s: *mut HmScenario, seed: u64) -> i32 {
    guard(|| {
        s.as_mut().ok_or_else(|| null("scenario"))?.config.seed = seed;
        Ok(())
    })
}

/// Sets the artifact directory; null disables persistence.
///
/// # Safety
/// `s` must be a live scenario handle; `dir` null or nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn hm_scenario_set_output(s: *mut HmScenario, dir: *const c_char) -> i32 {
    guard(|| {
        let s = s.as_mut().ok_or_else(|| null("scenario"))?;
        s.config.output = if dir.is_null() {
            None
        } else {
            Some(PathBuf::from(text(dir, "dir")?))
        };
        Ok(())
    })
}

/// Canonical SHA-256 of the scenario, as a string to free with [`hm_string_free`].
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hm_scenario_hash(s: *const HmScenario, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let h = scenario(s)?.config.hash();
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = CString::new(h).expect("hex has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hm_scenario_free(s: *mut HmScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Runs the scenario on `workers` threads (0 = all cores). A run whose
/// verdicts fail still returns `HM_OK`; check [`hm_run_pass`].
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hm_scenario_run(
    s: *const HmScenario,
    workers: usize,
    out: *mut *mut HmRun,
) -> i32 {
    guard(|| {
        let c = &scenario(s)?.config;
        let manifest = with_workers(workers, || run_scenario(c))??;
        put(out, HmRun { manifest })
    })
}

/// Effective tensor of the cell stage, row-major into `buf` (`capacity` doubles).
/// `dim` receives the dimension; if `dim²` exceeds `capacity` the call returns
/// `HM_ERR_BUFFER` without writing `buf`.
///
/// # Safety
/// `s` must be a live scenario handle; `buf` must hold `capacity` doubles;
/// `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hm_effective_tensor(
    s: *const HmScenario,
    workers: usize,
    buf: *mut f64,
    capacity: usize,
    dim: *mut usize,
) -> i32 {
    guard(|| {
        let mut c = scenario(s)?.config.clone();
        if dim.is_null() {
            return Err(null("dim"));
        }
        c.eps2.clear();
        c.eps1 = None;
        let r = with_workers(workers, || execute(&c, &[]))??;
        let e = r.summary.effective.ok_or_else(|| {
            Failure(
                HM_ERR_UNSUPPORTED,
                format!("scenario {:?} has no effective tensor", c.name),
            )
        })?;
        let n = e.len();
        *dim = n;
        if n * n > capacity {
            return Err(Failure(
                HM_ERR_BUFFER,
                format!("need {} doubles, have {capacity}", n * n),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        for (i, row) in e.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                *buf.add(i * n + j) = *v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `r` must be a live run handle.
#[no_mangle]
pub unsafe extern "C" fn hm_run_pass(r: *const HmRun) -> bool {
    r.as_ref().is_some_and(|r| r.manifest.pass)
}

/// The run manifest as JSON, to free with [`hm_string_free`].
///
/// # Safety
/// `r` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hm_run_manifest_json(r: *const HmRun, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let json = serde_json::to_string(&r.manifest).expect("manifest serializes");
        *out = CString::new(json).expect("json has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hm_run_free(r: *mut HmRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

struct Callback {
    f: HmScalarFn,
    user: *mut c_void,
}

// The callback is only ever invoked from the single worker of a one-thread pool.
unsafe impl Sync for Callback {}
unsafe impl Send for Callback {}

impl Callback {
    fn call(&self, y: &[f64]) -> f64 {
        (self.f)(y.as_ptr(), y.len(), self.user)
    }
}

/// Mean value of `f(y, dim, user)` over growing balls in `dim` dimensions, with
/// an error indicator. `f` is called from one library thread, never concurrently.
///
/// # Safety
/// `f` must be a valid function pointer; `value` and `error` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hm_mean_value(
    f: Option<extern "C" fn(y: *const f64, dim: usize, user: *mut c_void) -> f64>,
    user: *mut c_void,
    dim: usize,
    value: *mut f64,
    error: *mut f64,
) -> i32 {
    guard(|| {
        let f = f.ok_or_else(|| null("callback"))?;
        if value.is_null() || error.is_null() {
            return Err(null("output pointer"));
        }
        if !(1..=3).contains(&dim) {
            return Err(Failure(
                HM_ERR_PARAMETER,
                format!("dimension {dim} not in 1..=3"),
            ));
        }
        let cb = Callback { f, user };
        let plan = AveragingPlan::for_dim(dim);
        let m = with_workers(1, || mean_value(|y| cb.call(y), dim, &plan))??;
        *value = m.value;
        *error = m.error_indicator;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_codes_match_core() {
        assert_eq!(Error::Config(String::new()).code(), HM_ERR_CONFIG);
        assert_eq!(Error::Format(String::new()).code(), HM_ERR_FORMAT);
        assert_eq!(Error::Statistics(1).code(), HM_ERR_STATISTICS);
    }

    #[test]
    fn panics_are_contained() {
        let code = guard(|| panic!("boom"));
        assert_eq!(code, HM_ERR_PANIC);
        let msg = unsafe { CStr::from_ptr(hm_last_error()) }.to_str().unwrap();
        assert!(msg.contains("boom"));
    }
}
