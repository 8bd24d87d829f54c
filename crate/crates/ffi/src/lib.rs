//! C ABI over the `advlab` core.
//!
//! Objects cross the boundary as opaque handles created by `*_load` /
//! `*_from_*` functions and released by the matching `*_free`. Every
//! fallible call returns an [`AdvlabStatus`]; on failure a description is
//! available from [`advlab_last_error`] on the same thread until the next
//! failing call. Strings returned by the library are freed with
//! [`advlab_string_free`]. Panics are caught and reported as
//! `ADVLAB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use advlab::attacks::iterative_attack;
use advlab::error::Error;
use advlab::evalkit::{self, AttackSpec, ExperimentConfig};
use advlab::nn::{load_network, save_network, Mode, Network};
use advlab::tensor::Tensor;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Parse = 5,
    Io = 6,
    Numerical = 7,
    MissingArtifact = 8,
    FormatVersion = 9,
    /// Output buffer too small; nothing was written.
    BufferTooSmall = 10,
    Panic = 11,
}

/// Opaque experiment config.
pub struct AdvlabConfig(ExperimentConfig);

/// Opaque classifier.
pub struct AdvlabNetwork(Network);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> AdvlabStatus {
    match e {
        Error::LayerShape { .. } | Error::Shape(_) => AdvlabStatus::Shape,
        Error::InvalidArgument(_) => AdvlabStatus::InvalidArgument,
        Error::Numerical(_) => AdvlabStatus::Numerical,
        Error::Parse { .. } | Error::Json(_) => AdvlabStatus::Parse,
        Error::Config { .. } => AdvlabStatus::Config,
        Error::MissingArtifact { .. } => AdvlabStatus::MissingArtifact,
        Error::Stage { source, .. } => status_of(source),
        Error::FormatVersion { .. } => AdvlabStatus::FormatVersion,
        Error::Io { .. } => AdvlabStatus::Io,
    }
}

/// Failure inside a guarded call.
struct Fail(AdvlabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: AdvlabStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AdvlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdvlabStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AdvlabStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(AdvlabStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(AdvlabStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(AdvlabStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(fail(AdvlabStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| fail(AdvlabStatus::NullPointer, format!("{name} is null")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message of the last failing call on this thread, or null. Owned by the
/// library and valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn advlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn advlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn advlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads and validates a TOML experiment config.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_config_load(path: *const c_char, out: *mut *mut AdvlabConfig) -> AdvlabStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let cfg = ExperimentConfig::load(&path)?;
        cfg.validate()?;
        *out = Box::into_raw(Box::new(AdvlabConfig(cfg)));
        Ok(())
    })
}

/// Parses and validates a config from TOML text.
///
/// # Safety
/// `text` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_config_from_toml(text: *const c_char, out: *mut *mut AdvlabConfig) -> AdvlabStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        let cfg = ExperimentConfig::from_toml(text)?;
        cfg.validate()?;
        *out = Box::into_raw(Box::new(AdvlabConfig(cfg)));
        Ok(())
    })
}

/// Writes the 64-character hex config hash and a terminating NUL into
/// `buf`, which must hold at least 65 bytes.
///
/// # Safety
/// `cfg` is a live handle; `buf` points to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn advlab_config_hash(cfg: *const AdvlabConfig, buf: *mut c_char, len: usize) -> AdvlabStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        if buf.is_null() {
            return Err(fail(AdvlabStatus::NullPointer, "buf is null"));
        }
        let hash = cfg.0.hash();
        if len < hash.len() + 1 {
            return Err(fail(AdvlabStatus::BufferTooSmall, format!("hash needs {} bytes, got {len}", hash.len() + 1)));
        }
        ptr::copy_nonoverlapping(hash.as_ptr().cast::<c_char>(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// Sets the top-level seed.
///
/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn advlab_config_set_seed(cfg: *mut AdvlabConfig, seed: u64) -> AdvlabStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` is null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn advlab_config_free(cfg: *mut AdvlabConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the white-box experiment of `cfg` and returns the report as JSON
/// (free with [`advlab_string_free`]).
///
/// # Safety
/// `cfg` is a live handle; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_run_experiment(cfg: *const AdvlabConfig, out_json: *mut *mut c_char) -> AdvlabStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = out_arg(out_json, "out_json")?;
        let run = evalkit::run_experiment(&cfg.0)?;
        *out = into_c_string(run.report.to_json());
        Ok(())
    })
}

/// Loads a classifier saved as JSON.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_network_load(path: *const c_char, out: *mut *mut AdvlabNetwork) -> AdvlabStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(AdvlabNetwork(load_network(&path)?)));
        Ok(())
    })
}

/// Trains the classifier of `cfg` on its Train split.
///
/// # Safety
/// `cfg` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_network_train(cfg: *const AdvlabConfig, out: *mut *mut AdvlabNetwork) -> AdvlabStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = out_arg(out, "out")?;
        let prep = evalkit::prepare(&cfg.0, None)?;
        *out = Box::into_raw(Box::new(AdvlabNetwork(prep.network)));
        Ok(())
    })
}

/// # Safety
/// `net` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn advlab_network_save(net: *const AdvlabNetwork, path: *const c_char) -> AdvlabStatus {
    guard(|| {
        let net = ref_arg(net, "net")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_network(&net.0, &path)?;
        Ok(())
    })
}

/// # Safety
/// `net` is null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn advlab_network_free(net: *mut AdvlabNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of input values (product of the input shape); 0 for null.
///
/// # Safety
/// `net` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn advlab_network_input_len(net: *const AdvlabNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.input_shape().iter().product())
}

/// Number of classes; 0 for null.
///
/// # Safety
/// `net` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn advlab_network_num_classes(net: *const AdvlabNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.num_classes())
}

fn input_tensor(net: &Network, x: &[f64]) -> Result<Tensor, Fail> {
    let shape = net.input_shape().to_vec();
    let want: usize = shape.iter().product();
    if x.len() != want {
        return Err(fail(AdvlabStatus::Shape, format!("input has {} values, network expects {want}", x.len())));
    }
    Ok(Tensor::new(shape, x.to_vec())?)
}

/// Class probabilities of one input (row-major, input shape of the
/// network) into `probs` (`probs_len >= num_classes`), and the predicted
/// class into `out_class` when non-null.
///
/// # Safety
/// `x` holds `len` values; `probs` holds `probs_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn advlab_network_predict(
    net: *const AdvlabNetwork,
    x: *const f64,
    len: usize,
    probs: *mut f64,
    probs_len: usize,
    out_class: *mut usize,
) -> AdvlabStatus {
    guard(|| {
        let net = ref_arg(net, "net")?;
        let x = input_tensor(&net.0, slice_arg(x, len, "x")?)?;
        if probs.is_null() {
            return Err(fail(AdvlabStatus::NullPointer, "probs is null"));
        }
        let k = net.0.num_classes();
        if probs_len < k {
            return Err(fail(AdvlabStatus::BufferTooSmall, format!("{k} probabilities, buffer holds {probs_len}")));
        }
        let trace = net.0.forward(&x, Mode::Eval, 0)?;
        std::slice::from_raw_parts_mut(probs, k).copy_from_slice(&trace.probs);
        if !out_class.is_null() {
            *out_class = trace.predicted();
        }
        Ok(())
    })
}

/// Targeted L∞ attack on one input. `kind` is `fgsm`, `bim`, `pgd`, `mim`,
/// `tim` or `cw` (CW with margin cap 0). `alpha <= 0` and
/// `iterations == 0` select the defaults for `epsilon`. The AE is written
/// to `out_x` (`len` values) and `out_success` tells whether it reaches
/// `target`.
///
/// # Safety
/// `x` and `out_x` hold `len` values; `kind` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn advlab_attack(
    net: *const AdvlabNetwork,
    kind: *const c_char,
    x: *const f64,
    len: usize,
    target: usize,
    epsilon: f64,
    alpha: f64,
    iterations: usize,
    seed: u64,
    out_x: *mut f64,
    out_success: *mut bool,
) -> AdvlabStatus {
    guard(|| {
        let net = ref_arg(net, "net")?;
        let kind = str_arg(kind, "kind")?;
        let x = input_tensor(&net.0, slice_arg(x, len, "x")?)?;
        if out_x.is_null() {
            return Err(fail(AdvlabStatus::NullPointer, "out_x is null"));
        }
        let mut spec = AttackSpec::new(kind, epsilon);
        spec.alpha = (alpha > 0.0).then_some(alpha);
        spec.iterations = (iterations > 0).then_some(iterations);
        let attack = spec.attack_kind("kind")?;
        let r = iterative_attack(attack, &net.0, &x, target, &spec.budget(seed), &[], false)?;
        std::slice::from_raw_parts_mut(out_x, len).copy_from_slice(r.x_adv.data());
        if !out_success.is_null() {
            *out_success = r.success;
        }
        Ok(())
    })
}

/// ROC AUC of positive versus negative scores (ties count one half).
///
/// # Safety
/// `pos` holds `npos` values and `neg` holds `nneg`; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_auc(
    pos: *const f64,
    npos: usize,
    neg: *const f64,
    nneg: usize,
    out: *mut f64,
) -> AdvlabStatus {
    guard(|| {
        let p = slice_arg(pos, npos, "pos")?;
        let n = slice_arg(neg, nneg, "neg")?;
        let out = out_arg(out, "out")?;
        *out = evalkit::auc(p, n)?;
        Ok(())
    })
}
