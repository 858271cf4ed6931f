//! C ABI over `ldct-core`.
//!
//! Every function returns an [`LdctStatus`]; on failure the message is
//! available from [`ldct_last_error`] on the same thread. Objects are opaque
//! handles created by `*_new`/`*_load`/producing calls and released with the
//! matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ldct_core::config::PipelineConfig;
use ldct_core::noise::noise_prior;
use ldct_core::pipeline::{run_pipeline, simulate, Models, RunResult, Simulation};
use ldct_core::recon::{shepp_logan_kernel, SliceImage};
use ldct_core::Error;
use ndarray::Array2;

/// Result codes. Config, stage and numeric failures use the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LdctStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    Stage = 3,
    Numeric = 4,
    /// Internal panic; the library state is still usable.
    Internal = 5,
}

/// Volumes held by a run.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LdctVolume {
    Noisy = 0,
    Refined = 1,
    /// Noise-free reconstruction through the same chain.
    Reference = 2,
}

/// Resolved pipeline configuration.
pub struct LdctConfig(PipelineConfig);

/// Simulated acquisition (clean, full-dose and low-dose streams).
pub struct LdctSimulation(Simulation);

/// Output of one pipeline run.
pub struct LdctRun(RunResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LdctStatus {
    match e {
        Error::Config(_) | Error::Json(_) => LdctStatus::Config,
        Error::Numeric(_) => LdctStatus::Numeric,
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::IndexOutOfRange { .. } | Error::Geometry(_) => {
            LdctStatus::InvalidArgument
        }
        _ => LdctStatus::Stage,
    }
}

fn fail(e: Error) -> LdctStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn invalid(msg: &str) -> LdctStatus {
    set_error(msg.into());
    LdctStatus::InvalidArgument
}

fn guard(f: impl FnOnce() -> LdctStatus) -> LdctStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            LdctStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, LdctStatus> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ldct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next library call on the same thread.
#[no_mangle]
pub extern "C" fn ldct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ldct_config_default(out: *mut *mut LdctConfig) -> LdctStatus {
    guard(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        *out = Box::into_raw(Box::new(LdctConfig(PipelineConfig::default())));
        LdctStatus::Ok
    })
}

/// Loads a TOML configuration and applies `n_overrides` `key=value` strings.
///
/// # Safety
/// `path` must be a NUL-terminated string, `overrides` an array of
/// `n_overrides` such strings (may be null when zero) and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ldct_config_load(
    path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut LdctConfig,
) -> LdctStatus {
    guard(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        if n_overrides > 0 && overrides.is_null() {
            return invalid("overrides is null");
        }
        let mut sets = Vec::with_capacity(n_overrides);
        for k in 0..n_overrides {
            match str_arg(*overrides.add(k), "override") {
                Ok(s) => sets.push(s.to_string()),
                Err(s) => return s,
            }
        }
        match PipelineConfig::load(Path::new(path), &sets) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(LdctConfig(c)));
                LdctStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `cfg` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ldct_config_free(cfg: *mut LdctConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Writes the 64-character configuration digest plus NUL into `buf`
/// (`len >= 65`).
///
/// # Safety
/// `cfg` must be a live handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ldct_config_hash(cfg: *const LdctConfig, buf: *mut c_char, len: usize) -> LdctStatus {
    guard(|| {
        if cfg.is_null() || buf.is_null() {
            return invalid("null argument");
        }
        let h = (*cfg).0.hash();
        if len < h.len() + 1 {
            return invalid(&format!("buffer of {len} bytes is too small, need {}", h.len() + 1));
        }
        ptr::copy_nonoverlapping(h.as_ptr().cast(), buf, h.len());
        *buf.add(h.len()) = 0;
        LdctStatus::Ok
    })
}

/// Projects the configured phantom and simulates the configured dose.
///
/// # Safety
/// `cfg` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ldct_simulate(cfg: *const LdctConfig, out: *mut *mut LdctSimulation) -> LdctStatus {
    guard(|| {
        if cfg.is_null() || out.is_null() {
            return invalid("null argument");
        }
        match simulate(&(*cfg).0) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(LdctSimulation(s)));
                LdctStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of projection views in the simulation (0 for null).
///
/// # Safety
/// `sim` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ldct_simulation_views(sim: *const LdctSimulation) -> usize {
    if sim.is_null() {
        0
    } else {
        (*sim).0.low.len()
    }
}

/// # Safety
/// `sim` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ldct_simulation_free(sim: *mut LdctSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs rebinning, denoising, reconstruction and refinement. Checkpoints
/// named by the configuration are loaded for the learned modes.
///
/// # Safety
/// `cfg` and `sim` must be live handles and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ldct_run(cfg: *const LdctConfig, sim: *const LdctSimulation, out: *mut *mut LdctRun) -> LdctStatus {
    guard(|| {
        if cfg.is_null() || sim.is_null() || out.is_null() {
            return invalid("null argument");
        }
        let cfg = &(*cfg).0;
        let result = Models::load(cfg).and_then(|m| run_pipeline(cfg, &(*sim).0, &m, false));
        match result {
            Ok(r) => {
                *out = Box::into_raw(Box::new(LdctRun(r)));
                LdctStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

fn volume(run: &LdctRun, which: LdctVolume) -> &[SliceImage] {
    match which {
        LdctVolume::Noisy => &run.0.noisy,
        LdctVolume::Refined => &run.0.refined,
        LdctVolume::Reference => &run.0.reference,
    }
}

/// Number of target slices (0 for null).
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ldct_run_slices(run: *const LdctRun) -> usize {
    if run.is_null() {
        0
    } else {
        (*run).0.refined.len()
    }
}

/// Image side length in pixels (0 for null).
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ldct_run_image_size(run: *const LdctRun) -> usize {
    if run.is_null() {
        0
    } else {
        (*run).0.refined.first().map_or(0, |s| s.size())
    }
}

/// Copies a volume (slice-major, row-major HU) into `buf`, which must hold
/// `slices * size * size` floats.
///
/// # Safety
/// `run` must be a live handle and `buf` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ldct_run_copy_volume(run: *const LdctRun, which: LdctVolume, buf: *mut f32, len: usize) -> LdctStatus {
    guard(|| {
        if run.is_null() || buf.is_null() {
            return invalid("null argument");
        }
        let slices = volume(&*run, which);
        let need: usize = slices.iter().map(|s| s.data.len()).sum();
        if len < need {
            return invalid(&format!("buffer holds {len} floats, need {need}"));
        }
        let out = std::slice::from_raw_parts_mut(buf, need);
        for (o, v) in out.iter_mut().zip(slices.iter().flat_map(|s| s.data.iter())) {
            *o = *v as f32;
        }
        LdctStatus::Ok
    })
}

/// # Safety
/// `run` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ldct_run_free(run: *mut LdctRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Shepp-Logan ramp taps for an odd `length` and sample spacing (mm).
///
/// # Safety
/// `out` must be writable for `length` doubles.
#[no_mangle]
pub unsafe extern "C" fn ldct_shepp_logan_kernel(length: usize, spacing_mm: f64, out: *mut f64) -> LdctStatus {
    guard(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        match shepp_logan_kernel(length, spacing_mm) {
            Ok(k) => {
                ptr::copy_nonoverlapping(k.taps.as_ptr(), out, k.taps.len());
                LdctStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Per-element noise prior Φ for `n` detector elements.
///
/// # Safety
/// All arrays must hold `n` doubles; `phi` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ldct_noise_prior(p_low: *const f64, n_low: *const f64, n_full: *const f64, n: usize, phi: *mut f64) -> LdctStatus {
    guard(|| {
        if p_low.is_null() || n_low.is_null() || n_full.is_null() || phi.is_null() {
            return invalid("null argument");
        }
        let row = |p: *const f64| Array2::from_shape_vec((1, n), std::slice::from_raw_parts(p, n).to_vec()).expect("1×n");
        match noise_prior(&row(p_low), &row(n_low), &row(n_full)) {
            Ok(m) => {
                ptr::copy_nonoverlapping(m.phi.as_ptr(), phi, n);
                LdctStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
