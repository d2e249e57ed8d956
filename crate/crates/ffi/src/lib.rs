//! C ABI over the bayesdiff engine.
//!
//! Objects cross the boundary as opaque handles created by a `*_new` or
//! `*_load` function and released by the matching `*_free`. Every fallible
//! call returns a `BdStatus`; on failure the message of the last error on
//! the calling thread is available from `bd_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bayesdiff::moments::{initial_latent, run_bayesdiff, BayesDiffConfig, SamplerKind, SkipSchedule};
use bayesdiff::{Error, GammaMode, LaplacePosterior, LastLayerPredictor, NoiseSchedule, PixelField, ScoreNet};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    Numerical = 6,
    Panic = 7,
}

/// Sampler selector for `bd_run_bayesdiff`. Analytic-DPM is not offered
/// here since it needs a Gamma table estimated from the training data.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdSampler {
    EulerSde = 0,
    Ddpm = 1,
    Ddim = 2,
    DpmSolver2 = 3,
}

impl From<BdSampler> for SamplerKind {
    fn from(s: BdSampler) -> Self {
        match s {
            BdSampler::EulerSde => SamplerKind::EulerSde,
            BdSampler::Ddpm => SamplerKind::Ddpm,
            BdSampler::Ddim => SamplerKind::Ddim,
            BdSampler::DpmSolver2 => SamplerKind::DpmSolver2,
        }
    }
}

/// A discrete VP noise schedule.
pub struct BdSchedule {
    inner: NoiseSchedule,
}

/// A trained network with its last-layer posterior.
pub struct BdModel {
    net: ScoreNet,
    posterior: LaplacePosterior,
}

/// Outputs of one generation, written by `bd_run_bayesdiff`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BdRunStats {
    pub image_uncertainty: f64,
    pub nfe_count: usize,
    pub clamp_count: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BdStatus {
    match e {
        Error::ShapeMismatch { .. } => BdStatus::ShapeMismatch,
        Error::Io(_) | Error::MissingInput(_) => BdStatus::Io,
        Error::Format(_) | Error::Json(_) => BdStatus::Format,
        Error::NonFinite(_) | Error::Divergence { .. } | Error::MidpointInversion(_) => BdStatus::Numerical,
        _ => BdStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into a status and the thread's last
/// error message.
fn guard(f: impl FnOnce() -> Result<(), (BdStatus, String)>) -> BdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BdStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside bayesdiff".into());
            BdStatus::Panic
        }
    }
}

fn lift(e: Error) -> (BdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (BdStatus, String) {
    (BdStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, (BdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| (BdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Linear-beta VP schedule with `steps` grid points.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn bd_schedule_new_linear(
    beta_start: f64,
    beta_end: f64,
    steps: usize,
    out: *mut *mut BdSchedule,
) -> BdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = NoiseSchedule::linear(beta_start, beta_end, steps).map_err(lift)?;
        *out = Box::into_raw(Box::new(BdSchedule { inner }));
        Ok(())
    })
}

/// The 1000-step linear schedule resampled on `steps` grid points.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn bd_schedule_new_linear_rescaled(steps: usize, out: *mut *mut BdSchedule) -> BdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = NoiseSchedule::linear_rescaled(steps).map_err(lift)?;
        *out = Box::into_raw(Box::new(BdSchedule { inner }));
        Ok(())
    })
}

/// Number of steps `T`, or 0 for a NULL handle.
///
/// # Safety
/// `schedule` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bd_schedule_steps(schedule: *const BdSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.inner.num_steps())
}

/// `alpha_bar_t` for `0 <= t <= T`.
///
/// # Safety
/// `schedule` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bd_schedule_alpha_bar(schedule: *const BdSchedule, t: usize, out: *mut f64) -> BdStatus {
    guard(|| {
        let s = schedule.as_ref().ok_or_else(|| null("schedule"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if t > s.inner.num_steps() {
            return Err(lift(Error::StepOutOfRange { t, min: 0, max: s.inner.num_steps() }));
        }
        *out = s.inner.alpha_bar(t);
        Ok(())
    })
}

/// # Safety
/// `schedule` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bd_schedule_free(schedule: *mut BdSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Loads a network checkpoint and its posterior, as written by
/// `bayesdiff train`.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bd_model_load(
    checkpoint_path: *const c_char,
    posterior_path: *const c_char,
    out: *mut *mut BdModel,
) -> BdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let net = ScoreNet::load(path_arg(checkpoint_path, "checkpoint_path")?).map_err(lift)?;
        let posterior = LaplacePosterior::load(path_arg(posterior_path, "posterior_path")?).map_err(lift)?;
        posterior.check_compatible(&net).map_err(lift)?;
        *out = Box::into_raw(Box::new(BdModel { net, posterior }));
        Ok(())
    })
}

/// Pixels per image.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bd_model_dim(model: *const BdModel, out: *mut usize) -> BdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.net.dim();
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bd_model_free(model: *mut BdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// One BayesDiff generation with the closed-form last-layer variance.
///
/// `skip_interval` 0 runs every step with uncertainty, otherwise every
/// `skip_interval`-th step from `T` down. `x_t` may be NULL to start from
/// the standard-normal latent of `seed`. All arrays hold `dim` values, where
/// `dim` must equal `bd_model_dim`. `out_mean0` and `out_stats` may be
/// NULL.
///
/// # Safety
/// Handles must be live; non-NULL arrays must hold `dim` doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn bd_run_bayesdiff(
    model: *const BdModel,
    schedule: *const BdSchedule,
    sampler: BdSampler,
    mc_samples: usize,
    skip_interval: usize,
    seed: u64,
    x_t: *const f64,
    dim: usize,
    out_x0: *mut f64,
    out_mean0: *mut f64,
    out_var0: *mut f64,
    out_stats: *mut BdRunStats,
) -> BdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = schedule.as_ref().ok_or_else(|| null("schedule"))?;
        if out_x0.is_null() {
            return Err(null("out_x0"));
        }
        if out_var0.is_null() {
            return Err(null("out_var0"));
        }
        let shape = m.net.shape();
        if dim != shape.len() {
            return Err(lift(Error::ShapeMismatch { expected: shape.len(), got: dim }));
        }
        let start = if x_t.is_null() {
            initial_latent(shape, seed)
        } else {
            PixelField::new(shape, std::slice::from_raw_parts(x_t, dim).to_vec()).map_err(lift)?
        };
        let steps = s.inner.num_steps();
        let cfg = BayesDiffConfig::new(sampler.into(), mc_samples, seed)
            .with_skip(SkipSchedule::interval(skip_interval, steps).map_err(lift)?);
        let pred = LastLayerPredictor::new(&m.net, &m.posterior, GammaMode::Exact).map_err(lift)?;
        let (res, _) = run_bayesdiff(&start, &pred, &s.inner, &cfg).map_err(lift)?;
        std::slice::from_raw_parts_mut(out_x0, dim).copy_from_slice(res.x0.as_slice());
        std::slice::from_raw_parts_mut(out_var0, dim).copy_from_slice(res.var0.as_slice());
        if !out_mean0.is_null() {
            std::slice::from_raw_parts_mut(out_mean0, dim).copy_from_slice(res.mean0.as_slice());
        }
        if !out_stats.is_null() {
            *out_stats = BdRunStats {
                image_uncertainty: res.image_uncertainty,
                nfe_count: res.nfe_count,
                clamp_count: res.clamp_count,
            };
        }
        Ok(())
    })
}
