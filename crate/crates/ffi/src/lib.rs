//! C interface to augsearch policies.
//!
//! A policy file is loaded into an opaque [`FaugPolicy`] handle, which can be
//! queried for its dimensions and depth distribution and used to augment
//! single `C x H x W` images with values in `[0, 1]`. Every function returns
//! one of the `FAUG_*` status codes; on failure the thread-local message from
//! [`faug_last_error_message`] describes what went wrong.
//!
//! The header `include/augsearch.h` is regenerated by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use augsearch::policy::{self, EvalSettings, PolicyNoise, PolicyParams};
use augsearch::relaxations::Temperature;
use augsearch::rng;
use augsearch::transforms::{self, Dims};

pub const FAUG_OK: c_int = 0;
/// A required pointer argument was null.
pub const FAUG_ERR_NULL: c_int = 1;
/// An argument was out of range or a buffer was too small.
pub const FAUG_ERR_INVALID_ARGUMENT: c_int = 2;
/// The policy file could not be read.
pub const FAUG_ERR_IO: c_int = 3;
/// The policy document was malformed.
pub const FAUG_ERR_PARSE: c_int = 4;
/// Augmentation failed inside the library.
pub const FAUG_ERR_INTERNAL: c_int = 5;
/// A Rust panic was caught at the boundary.
pub const FAUG_ERR_PANIC: c_int = 6;

/// Opaque handle to a loaded policy.
pub struct FaugPolicy {
    params: PolicyParams,
    eval: EvalSettings,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(c_int, String);

impl From<augsearch::Error> for Failure {
    fn from(e: augsearch::Error) -> Self {
        let code = match e {
            augsearch::Error::Io(_) => FAUG_ERR_IO,
            augsearch::Error::Parse { .. } => FAUG_ERR_PARSE,
            augsearch::Error::Parameter(_) | augsearch::Error::Config(_) | augsearch::Error::Domain(_) => {
                FAUG_ERR_INVALID_ARGUMENT
            }
            _ => FAUG_ERR_INTERNAL,
        };
        Failure(code, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(FAUG_ERR_NULL, format!("`{name}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FAUG_ERR_INVALID_ARGUMENT, msg.into())
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FAUG_OK
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FAUG_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn handle<'a>(p: *const FaugPolicy) -> Result<&'a FaugPolicy, Failure> {
    p.as_ref().ok_or_else(|| null("policy"))
}

unsafe fn store(out: *mut *mut FaugPolicy, params: PolicyParams, eval: EvalSettings) {
    *out = Box::into_raw(Box::new(FaugPolicy { params, eval }));
}

/// Load a policy JSON file. On success `*out` owns a handle that must be
/// released with [`faug_policy_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn faug_policy_load(path: *const c_char, out: *mut *mut FaugPolicy) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let text = std::fs::read_to_string(path).map_err(|e| Failure(FAUG_ERR_IO, format!("{path}: {e}")))?;
        let (params, eval) = policy::deserialize_policy(&text)?;
        store(out, params, eval);
        Ok(())
    })
}

/// Parse a policy from an in-memory JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn faug_policy_from_json(json: *const c_char, out: *mut *mut FaugPolicy) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let (params, eval) = policy::deserialize_policy(str_arg(json, "json")?)?;
        store(out, params, eval);
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `policy` must come from a load function and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn faug_policy_free(policy: *mut FaugPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of transform types and maximum depth of the policy.
///
/// # Safety
/// `policy` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn faug_policy_dims(
    policy: *const FaugPolicy,
    num_types: *mut usize,
    max_depth: *mut usize,
) -> c_int {
    guard(|| {
        let p = handle(policy)?;
        if num_types.is_null() {
            return Err(null("num_types"));
        }
        if max_depth.is_null() {
            return Err(null("max_depth"));
        }
        *num_types = p.params.num_types;
        *max_depth = p.params.max_depth;
        Ok(())
    })
}

/// Write the depth distribution (`max_depth + 1` probabilities) into `out`.
///
/// # Safety
/// `out` must point to at least `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn faug_policy_depth_probs(policy: *const FaugPolicy, out: *mut f64, len: usize) -> c_int {
    guard(|| {
        let p = handle(policy)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let probs = p.params.depth_probs();
        if len < probs.len() {
            return Err(invalid(format!("buffer holds {len} values, need {}", probs.len())));
        }
        ptr::copy_nonoverlapping(probs.as_ptr(), out, probs.len());
        Ok(())
    })
}

/// Name of transform `index` in the fixed search-space order, or null when
/// out of range. The string is static.
#[no_mangle]
pub extern "C" fn faug_transform_name(index: usize) -> *const c_char {
    static NAMES: std::sync::OnceLock<Vec<CString>> = std::sync::OnceLock::new();
    let names = NAMES.get_or_init(|| transforms::registry().iter().map(|s| CString::new(s.name).unwrap()).collect());
    names.get(index).map_or(ptr::null(), |s| s.as_ptr())
}

/// Draw one hard policy at the stored evaluation temperature and apply it to
/// an image of `c * h * w` doubles. The draw is a pure function of `seed`.
/// On success `*depth_out` (if non-null) receives the number of applied
/// transforms. `input` and `output` may alias.
///
/// # Safety
/// `input` and `output` must each point to `c * h * w` doubles.
#[no_mangle]
pub unsafe extern "C" fn faug_augment_image(
    policy: *const FaugPolicy,
    input: *const f64,
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
    output: *mut f64,
    depth_out: *mut usize,
) -> c_int {
    guard(|| {
        let p = handle(policy)?;
        if input.is_null() {
            return Err(null("input"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        if c != 3 || h == 0 || w == 0 {
            return Err(invalid(format!("expected a 3 x H x W image, got {c} x {h} x {w}")));
        }
        let dims = Dims::new(c, h, w);
        let image = std::slice::from_raw_parts(input, dims.numel()).to_vec();
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("pixel values must lie in [0, 1]"));
        }
        let mut rng = rng::stream(seed, "ffi-augment", &[]);
        let noise = PolicyNoise::draw(&p.params, &mut rng);
        let t = Temperature::new(p.eval.temperature_eval)?;
        let hard = policy::sample_hard(&p.params, t, p.eval.sinkhorn_iters, &noise)?;
        let out = policy::apply_hard(&image, dims, &hard)?;
        ptr::copy_nonoverlapping(out.as_ptr(), output, out.len());
        if !depth_out.is_null() {
            *depth_out = hard.ops.len();
        }
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn faug_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}
