//! C ABI over the trqam library. Handles are opaque pointers, every call
//! returns a status code, and the last error message is kept per thread.
//!
//! Ownership rules: `*_new`/`*_parse`/`*_load` outputs are owned by the
//! caller and must be released with the matching `*_free`; strings returned
//! through out-parameters must be released with `trqam_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand_chacha::ChaCha12Rng;
use trqam::config::RunConfig;
use trqam::envs::EnvKind;
use trqam::error::Error;
use trqam::flow::{sample_memoryless_sde, FlowSchedule, MlpVelocity};
use trqam::numerics::io::load_params;
use trqam::numerics::ParamVector;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrqamStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    IoError = 4,
    DomainError = 5,
    ShapeError = 6,
    DivergenceError = 7,
    VerificationFailed = 8,
    InternalError = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> TrqamStatus {
    match err {
        Error::Config(_) => TrqamStatus::ConfigError,
        Error::Io(_) | Error::CorruptFile { .. } | Error::Json(_) => TrqamStatus::IoError,
        Error::Shape(_) | Error::InvalidArchitecture(_) => TrqamStatus::ShapeError,
        Error::Domain(_) | Error::TrustRegion(_) | Error::UnsupportedOp(_) => {
            TrqamStatus::DomainError
        }
        Error::NumericalDivergence { .. }
        | Error::AdjointDivergence { .. }
        | Error::NonFiniteGradient { .. } => TrqamStatus::DivergenceError,
    }
}

fn fail(err: Error) -> TrqamStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

/// Run a fallible body, translating errors and panics into status codes.
fn guarded(body: impl FnOnce() -> Result<TrqamStatus, Error>) -> TrqamStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(status)) => status,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("internal panic");
            TrqamStatus::InternalError
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, TrqamStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(TrqamStatus::NullArgument);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        TrqamStatus::InvalidUtf8
    })
}

/// Opaque run configuration.
pub struct TrqamConfig {
    inner: RunConfig,
}

/// Opaque sampling policy: a loaded velocity field plus its grid.
pub struct TrqamPolicy {
    params: ParamVector,
    state_dim: usize,
    action_dim: usize,
    schedule: FlowSchedule,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn trqam_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message describing the most recent error on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn trqam_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Release a string returned through an out-parameter.
///
/// # Safety
/// `ptr` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn trqam_string_free(ptr: *mut c_char) {
    if !ptr.is_null() {
        drop(unsafe { CString::from_raw(ptr) });
    }
}

/// Parse a TOML run configuration. On success writes an owned handle.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trqam_config_parse(
    text: *const c_char,
    out: *mut *mut TrqamConfig,
) -> TrqamStatus {
    if out.is_null() {
        set_error("null output pointer");
        return TrqamStatus::NullArgument;
    }
    let text = match unsafe { cstr_arg(text) } {
        Ok(t) => t,
        Err(s) => return s,
    };
    guarded(|| {
        let inner = RunConfig::parse(text)?;
        unsafe { *out = Box::into_raw(Box::new(TrqamConfig { inner })) };
        Ok(TrqamStatus::Ok)
    })
}

/// Default configuration handle.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trqam_config_default(out: *mut *mut TrqamConfig) -> TrqamStatus {
    if out.is_null() {
        set_error("null output pointer");
        return TrqamStatus::NullArgument;
    }
    guarded(|| {
        let inner = RunConfig::parse("")?;
        unsafe { *out = Box::into_raw(Box::new(TrqamConfig { inner })) };
        Ok(TrqamStatus::Ok)
    })
}

/// Override the configured seed.
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn trqam_config_set_seed(cfg: *mut TrqamConfig, seed: u64) -> TrqamStatus {
    match unsafe { cfg.as_mut() } {
        Some(c) => {
            c.inner.seed = seed;
            TrqamStatus::Ok
        }
        None => {
            set_error("null config handle");
            TrqamStatus::NullArgument
        }
    }
}

/// Release a configuration handle.
///
/// # Safety
/// `cfg` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn trqam_config_free(cfg: *mut TrqamConfig) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

unsafe fn config_and_dir<'a>(
    cfg: *const TrqamConfig,
    out_dir: *const c_char,
) -> Result<(&'a RunConfig, &'a str), TrqamStatus> {
    let cfg = match unsafe { cfg.as_ref() } {
        Some(c) => &c.inner,
        None => {
            set_error("null config handle");
            return Err(TrqamStatus::NullArgument);
        }
    };
    let dir = unsafe { cstr_arg(out_dir) }?;
    Ok((cfg, dir))
}

/// Generate the behavior dataset into `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn trqam_gen_data(
    cfg: *const TrqamConfig,
    out_dir: *const c_char,
) -> TrqamStatus {
    let (cfg, dir) = match unsafe { config_and_dir(cfg, out_dir) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    guarded(|| {
        trqam::cli::cmd_gen_data(cfg, Path::new(dir))?;
        Ok(TrqamStatus::Ok)
    })
}

/// Pretrain the base velocity field from the dataset in `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn trqam_pretrain(
    cfg: *const TrqamConfig,
    out_dir: *const c_char,
) -> TrqamStatus {
    let (cfg, dir) = match unsafe { config_and_dir(cfg, out_dir) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    guarded(|| {
        trqam::cli::cmd_pretrain(cfg, Path::new(dir))?;
        Ok(TrqamStatus::Ok)
    })
}

/// Run offline-to-online fine-tuning; checkpoints and metrics land in
/// `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn trqam_train(
    cfg: *const TrqamConfig,
    out_dir: *const c_char,
) -> TrqamStatus {
    let (cfg, dir) = match unsafe { config_and_dir(cfg, out_dir) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    guarded(|| {
        trqam::cli::cmd_train(cfg, Path::new(dir))?;
        Ok(TrqamStatus::Ok)
    })
}

/// Evaluate a checkpoint; writes the mean return and success rate through
/// the out-parameters.
///
/// # Safety
/// Pointer arguments must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn trqam_eval(
    cfg: *const TrqamConfig,
    checkpoint: *const c_char,
    out_dir: *const c_char,
    mean_return: *mut f64,
    success_rate: *mut f64,
) -> TrqamStatus {
    let (cfg, dir) = match unsafe { config_and_dir(cfg, out_dir) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    let ckpt = match unsafe { cstr_arg(checkpoint) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    if mean_return.is_null() || success_rate.is_null() {
        set_error("null output pointer");
        return TrqamStatus::NullArgument;
    }
    guarded(|| {
        let report = trqam::cli::cmd_eval(cfg, Path::new(ckpt), Path::new(dir))?;
        unsafe {
            *mean_return = report.mean_return;
            *success_rate = report.success_rate;
        }
        Ok(TrqamStatus::Ok)
    })
}

/// Run the oracle suite; writes a JSON report string the caller must free
/// with `trqam_string_free`. Returns `VerificationFailed` when any check
/// fails (the report is still written).
///
/// # Safety
/// Pointer arguments must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn trqam_verify(
    cfg: *const TrqamConfig,
    out_dir: *const c_char,
    report_json: *mut *mut c_char,
) -> TrqamStatus {
    let (cfg, dir) = match unsafe { config_and_dir(cfg, out_dir) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    guarded(|| {
        let report = trqam::cli::cmd_verify(cfg, Path::new(dir))?;
        if !report_json.is_null() {
            let json = serde_json::to_string(&report)?;
            let json: String = json.chars().filter(|&c| c != '\0').collect();
            unsafe { *report_json = CString::new(json).unwrap().into_raw() };
        }
        Ok(if report.pass {
            TrqamStatus::Ok
        } else {
            set_error("one or more verification checks failed");
            TrqamStatus::VerificationFailed
        })
    })
}

/// Load a checkpoint as a sampling policy for the named environment
/// (`"bandit"` or `"pointmass"`).
///
/// # Safety
/// Pointer arguments must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn trqam_policy_load(
    checkpoint: *const c_char,
    env: *const c_char,
    activation: *const c_char,
    num_flow_steps: usize,
    out: *mut *mut TrqamPolicy,
) -> TrqamStatus {
    if out.is_null() {
        set_error("null output pointer");
        return TrqamStatus::NullArgument;
    }
    let ckpt = match unsafe { cstr_arg(checkpoint) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    let env = match unsafe { cstr_arg(env) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    let act = match unsafe { cstr_arg(activation) } {
        Ok(v) => v,
        Err(s) => return s,
    };
    guarded(|| {
        let kind = EnvKind::parse(env)?;
        let (state_dim, action_dim) = trqam::cli::env_dims(kind);
        let activation = match act {
            "gelu" => trqam::numerics::Activation::Gelu,
            "tanh" => trqam::numerics::Activation::Tanh,
            "relu" => trqam::numerics::Activation::Relu,
            other => {
                return Err(Error::Config(format!("unknown activation '{other}'")));
            }
        };
        let params = load_params(Path::new(ckpt), activation)?;
        let schedule = FlowSchedule::new(num_flow_steps)?;
        // Validate dimensions eagerly.
        MlpVelocity::new(&params, state_dim, action_dim)?;
        let policy = TrqamPolicy {
            params,
            state_dim,
            action_dim,
            schedule,
        };
        unsafe { *out = Box::into_raw(Box::new(policy)) };
        Ok(TrqamStatus::Ok)
    })
}

/// Sample one action from the stochastic policy, conditioned on `state`,
/// deterministic given `seed`.
///
/// # Safety
/// `policy` must be a live handle; `state` and `action_out` must point to
/// buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn trqam_policy_sample(
    policy: *const TrqamPolicy,
    state: *const f64,
    state_len: usize,
    seed: u64,
    action_out: *mut f64,
    action_len: usize,
) -> TrqamStatus {
    let policy = match unsafe { policy.as_ref() } {
        Some(p) => p,
        None => {
            set_error("null policy handle");
            return TrqamStatus::NullArgument;
        }
    };
    if state.is_null() || action_out.is_null() {
        set_error("null buffer pointer");
        return TrqamStatus::NullArgument;
    }
    if state_len != policy.state_dim || action_len != policy.action_dim {
        set_error("state or action buffer length mismatch");
        return TrqamStatus::ShapeError;
    }
    let state = unsafe { std::slice::from_raw_parts(state, state_len) };
    guarded(|| {
        use rand::SeedableRng;
        let v = MlpVelocity::new(&policy.params, policy.state_dim, policy.action_dim)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let traj = sample_memoryless_sde(&v, state, &policy.schedule, 1.0, &mut rng)?;
        let terminal = traj.terminal();
        unsafe {
            std::ptr::copy_nonoverlapping(terminal.as_ptr(), action_out, action_len);
        }
        Ok(TrqamStatus::Ok)
    })
}

/// State dimension expected by a policy handle.
///
/// # Safety
/// `policy` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn trqam_policy_state_dim(policy: *const TrqamPolicy) -> usize {
    unsafe { policy.as_ref() }.map_or(0, |p| p.state_dim)
}

/// Action dimension produced by a policy handle.
///
/// # Safety
/// `policy` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn trqam_policy_action_dim(policy: *const TrqamPolicy) -> usize {
    unsafe { policy.as_ref() }.map_or(0, |p| p.action_dim)
}

/// Release a policy handle.
///
/// # Safety
/// `policy` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn trqam_policy_free(policy: *mut TrqamPolicy) {
    if !policy.is_null() {
        drop(unsafe { Box::from_raw(policy) });
    }
}
