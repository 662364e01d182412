//! C ABI over the `advdiff` library.
//!
//! Models and schedules are opaque handles returned through an out
//! pointer by their constructors and released with the matching `*_free`. Every fallible call
//! returns an [`AdvdiffStatus`]; on failure a message describing the error
//! is kept per thread and can be copied out with
//! [`advdiff_last_error_message`]. Panics never cross the boundary.
//!
//! Arrays are row-major `double` buffers owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use advdiff::advdiff::{
    advdiff_ddim, advdiff_ddpm, attack_stream, AttackMode, AttackSpec, GuidanceConfig, NoiseGuidanceScaling,
};
use advdiff::data::{AnalyticDenoiser, QuadraticClassifier};
use advdiff::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use advdiff::models::{load_checkpoint, ClassifierParams, DenoiserParams, NoisePredictor, TargetClassifier};
use advdiff::numerics::Tensor;
use advdiff::rng::{domain, stream, StreamRng};
use advdiff::sampling::{sample_ddim, sample_ddpm};
use advdiff::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Numeric = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvdiffMode {
    Targeted = 0,
    Untargeted = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvdiffNoiseScaling {
    Auto = 0,
    SigmaBar = 1,
    Plain = 2,
}

/// Attack knobs; see [`advdiff_guidance_mnist_paper`] for defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvdiffGuidance {
    pub w: f64,
    pub s: f64,
    pub a: f64,
    pub restarts: u32,
    pub t_star: f64,
    pub mode: AdvdiffMode,
    pub noise_scaling: AdvdiffNoiseScaling,
}

/// Outcome of one attack; `x0` is written separately.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdvdiffAttackOutcome {
    pub success: bool,
    /// 0-based restart of the first success, or -1.
    pub first_success: i32,
    /// Classifier verdict on the returned sample.
    pub verdict: u32,
}

pub struct AdvdiffSchedule {
    inner: NoiseSchedule,
}

pub struct AdvdiffDenoiser {
    inner: Box<dyn NoisePredictor>,
}

pub struct AdvdiffClassifier {
    inner: Box<dyn TargetClassifier>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> AdvdiffStatus {
    match e {
        Error::Config(_) | Error::Timestep { .. } | Error::Label { .. } | Error::Empty(_) => AdvdiffStatus::Config,
        Error::Io { .. } => AdvdiffStatus::Io,
        Error::Checkpoint { .. }
        | Error::CheckpointVersion { .. }
        | Error::CheckpointKind { .. }
        | Error::Architecture(_) => AdvdiffStatus::Checkpoint,
        Error::NonFinite { .. } | Error::AttackNonFinite { .. } | Error::Diverged { .. } => AdvdiffStatus::Numeric,
        _ => AdvdiffStatus::InvalidArgument,
    }
}

struct Fail(AdvdiffStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AdvdiffStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(AdvdiffStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AdvdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            AdvdiffStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AdvdiffStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn centers(data: *const f64, classes: usize, dim: usize) -> Result<Vec<Vec<f64>>, Fail> {
    let flat = slice(data, classes * dim, "centers")?;
    Ok(flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn advdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated) and returns its full length in bytes.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn advdiff_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Linear beta schedule with `steps` timesteps.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn advdiff_schedule_linear(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut AdvdiffSchedule,
) -> AdvdiffStatus {
    guard(|| {
        let inner = make_schedule(ScheduleKind::Linear, steps, beta_start, beta_end)?;
        store(out, AdvdiffSchedule { inner })
    })
}

/// # Safety
/// `s` must come from [`advdiff_schedule_linear`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn advdiff_schedule_free(s: *mut AdvdiffSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// `alpha_bar` at timestep `t` (0 gives 1).
///
/// # Safety
/// `s` must be a live schedule handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn advdiff_schedule_alpha_bar(s: *const AdvdiffSchedule, t: usize, out: *mut f64) -> AdvdiffStatus {
    guard(|| {
        let s = deref(s, "schedule")?;
        if t > s.inner.steps() {
            return Err(invalid(format!("timestep {t} beyond T = {}", s.inner.steps())));
        }
        *out.as_mut().ok_or_else(|| null("out"))? = s.inner.alpha_bar(t);
        Ok(())
    })
}

/// Loads a denoiser checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn advdiff_denoiser_load(path_: *const c_char, out: *mut *mut AdvdiffDenoiser) -> AdvdiffStatus {
    guard(|| {
        let p = DenoiserParams::from_checkpoint(&load_checkpoint(path(path_)?)?)?;
        store(out, AdvdiffDenoiser { inner: Box::new(p) })
    })
}

/// Closed-form denoiser for the Gaussian mixture with `classes` centers
/// (row-major `classes x dim`) and spread `gamma`.
///
/// # Safety
/// `centers_` must hold `classes * dim` doubles; `schedule` must be live.
#[no_mangle]
pub unsafe extern "C" fn advdiff_denoiser_analytic(
    centers_: *const f64,
    classes: usize,
    dim: usize,
    gamma: f64,
    schedule: *const AdvdiffSchedule,
    out: *mut *mut AdvdiffDenoiser,
) -> AdvdiffStatus {
    guard(|| {
        let sched = deref(schedule, "schedule")?.inner.clone();
        let d = AnalyticDenoiser::new(centers(centers_, classes, dim)?, gamma, sched)?;
        store(out, AdvdiffDenoiser { inner: Box::new(d) })
    })
}

/// # Safety
/// `d` must come from a denoiser constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn advdiff_denoiser_free(d: *mut AdvdiffDenoiser) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Loads a classifier checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn advdiff_classifier_load(path_: *const c_char, out: *mut *mut AdvdiffClassifier) -> AdvdiffStatus {
    guard(|| {
        let p = ClassifierParams::from_checkpoint(&load_checkpoint(path(path_)?)?)?;
        store(out, AdvdiffClassifier { inner: Box::new(p) })
    })
}

/// Classifier with logits `-|x - c_k|^2 / (2 tau)`.
///
/// # Safety
/// `centers_` must hold `classes * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn advdiff_classifier_quadratic(
    centers_: *const f64,
    classes: usize,
    dim: usize,
    tau: f64,
    out: *mut *mut AdvdiffClassifier,
) -> AdvdiffStatus {
    guard(|| {
        let q = QuadraticClassifier::new(centers(centers_, classes, dim)?, tau)?;
        store(out, AdvdiffClassifier { inner: Box::new(q) })
    })
}

/// # Safety
/// `c` must come from a classifier constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn advdiff_classifier_free(c: *mut AdvdiffClassifier) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Top-1 class of each of the `rows` inputs in `x`.
///
/// # Safety
/// `x` must hold `rows * dim` doubles and `labels` room for `rows` values,
/// where `dim` is the classifier's input dimension.
#[no_mangle]
pub unsafe extern "C" fn advdiff_classifier_predict(
    c: *const AdvdiffClassifier,
    x: *const f64,
    rows: usize,
    labels: *mut u32,
) -> AdvdiffStatus {
    guard(|| {
        let c = deref(c, "classifier")?;
        let dim = c.inner.data_dim();
        let x = Tensor::matrix(rows, dim, slice(x, rows * dim, "x")?.to_vec());
        let pred = c.inner.predict(&x)?;
        for (o, p) in slice_mut(labels, rows, "labels")?.iter_mut().zip(pred) {
            *o = p as u32;
        }
        Ok(())
    })
}

/// `N = 10, s = 0.5, a = 1.0, w = 1`, guidance over the final half.
#[no_mangle]
pub extern "C" fn advdiff_guidance_mnist_paper() -> AdvdiffGuidance {
    to_c(&GuidanceConfig::mnist_paper())
}

/// `N = 5, s = 0.7, a = 0.5, w = 1`, guidance over the final fifth.
#[no_mangle]
pub extern "C" fn advdiff_guidance_imagenet_paper() -> AdvdiffGuidance {
    to_c(&GuidanceConfig::imagenet_paper())
}

fn to_c(g: &GuidanceConfig) -> AdvdiffGuidance {
    AdvdiffGuidance {
        w: g.w,
        s: g.s,
        a: g.a,
        restarts: g.restarts as u32,
        t_star: g.t_star,
        mode: match g.mode {
            AttackMode::Targeted => AdvdiffMode::Targeted,
            AttackMode::Untargeted => AdvdiffMode::Untargeted,
        },
        noise_scaling: match g.noise_scaling {
            NoiseGuidanceScaling::Auto => AdvdiffNoiseScaling::Auto,
            NoiseGuidanceScaling::SigmaBar => AdvdiffNoiseScaling::SigmaBar,
            NoiseGuidanceScaling::Plain => AdvdiffNoiseScaling::Plain,
        },
    }
}

fn from_c(g: &AdvdiffGuidance) -> GuidanceConfig {
    GuidanceConfig {
        w: g.w,
        s: g.s,
        a: g.a,
        restarts: g.restarts as usize,
        t_star: g.t_star,
        mode: match g.mode {
            AdvdiffMode::Targeted => AttackMode::Targeted,
            AdvdiffMode::Untargeted => AttackMode::Untargeted,
        },
        noise_scaling: match g.noise_scaling {
            AdvdiffNoiseScaling::Auto => NoiseGuidanceScaling::Auto,
            AdvdiffNoiseScaling::SigmaBar => NoiseGuidanceScaling::SigmaBar,
            AdvdiffNoiseScaling::Plain => NoiseGuidanceScaling::Plain,
        },
        record_trajectory: false,
    }
}

/// Runs attack `index` of the suite seeded by `seed`: generation label `y`,
/// target `target` (ignored when untargeted). `ddim_steps == 0` selects the
/// DDPM sampler. The returned sample is written to `x0` (`dim` doubles).
///
/// # Safety
/// Handles must be live; `guidance` and `outcome` must be valid pointers and
/// `x0` must have room for the denoiser's dimension.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn advdiff_attack(
    denoiser: *const AdvdiffDenoiser,
    classifier: *const AdvdiffClassifier,
    schedule: *const AdvdiffSchedule,
    guidance: *const AdvdiffGuidance,
    ddim_steps: usize,
    seed: u64,
    index: u64,
    y: u32,
    target: u32,
    x0: *mut f64,
    outcome: *mut AdvdiffAttackOutcome,
) -> AdvdiffStatus {
    guard(|| {
        let den = deref(denoiser, "denoiser")?;
        let clf = deref(classifier, "classifier")?;
        let sched = &deref(schedule, "schedule")?.inner;
        let cfg = from_c(deref(guidance, "guidance")?);
        let out_x = slice_mut(x0, den.inner.data_dim(), "x0")?;
        let outcome = outcome.as_mut().ok_or_else(|| null("outcome"))?;
        let target = match cfg.mode {
            AttackMode::Targeted => target,
            AttackMode::Untargeted => y,
        };
        let spec = AttackSpec::new(y as usize, target as usize);
        let mut rng = attack_stream(seed, index);
        let r = if ddim_steps == 0 {
            advdiff_ddpm(den.inner.as_ref(), clf.inner.as_ref(), spec, &cfg, sched, &mut rng)?
        } else {
            advdiff_ddim(den.inner.as_ref(), clf.inner.as_ref(), spec, &cfg, sched, ddim_steps, &mut rng)?
        };
        out_x.copy_from_slice(&r.x0);
        let verdict = clf.inner.predict(&Tensor::matrix(1, r.x0.len(), r.x0.clone()))?[0];
        *outcome = AdvdiffAttackOutcome {
            success: r.success,
            first_success: r.first_success.map_or(-1, |k| k as i32),
            verdict: verdict as u32,
        };
        Ok(())
    })
}

/// Benign classifier-free samples for `labels`, row `i` drawn from stream
/// `SAMPLE + i` of `seed`. `ddim_steps == 0` selects DDPM. Writes
/// `n * dim` doubles to `out`.
///
/// # Safety
/// Handles must be live, `labels` must hold `n` values and `out` room for
/// `n * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn advdiff_sample(
    denoiser: *const AdvdiffDenoiser,
    schedule: *const AdvdiffSchedule,
    labels: *const u32,
    n: usize,
    w: f64,
    ddim_steps: usize,
    seed: u64,
    out: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        let den = deref(denoiser, "denoiser")?;
        let sched = &deref(schedule, "schedule")?.inner;
        let labels: Vec<usize> = slice(labels, n, "labels")?.iter().map(|&l| l as usize).collect();
        let mut rngs: Vec<StreamRng> = (0..n as u64).map(|i| stream(seed, domain::SAMPLE + i)).collect();
        let x = if ddim_steps == 0 {
            sample_ddpm(den.inner.as_ref(), &labels, w, sched, &mut rngs)?
        } else {
            sample_ddim(den.inner.as_ref(), &labels, w, sched, ddim_steps, &mut rngs)?
        };
        slice_mut(out, x.len(), "out")?.copy_from_slice(x.data());
        Ok(())
    })
}
