//! C ABI over trained models: load a checkpoint, produce the control
//! message, decoded phases and beamformer for one channel realization,
//! decode received messages on the controller side, and score a
//! configuration with the system-model sum-rate.
//!
//! Every function returns an [`AqeStatus`]. On failure the message of the
//! most recent error on the calling thread is available through
//! [`aqe_last_error`]. Matrices are row-major with interleaved `(re, im)`
//! pairs.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use aqe_wmmse::aqe::ControlMessage;
use aqe_wmmse::linalg::CMatrix;
use aqe_wmmse::sysmodel::{achievable_rates, ChannelSample};
use aqe_wmmse::train_eval::{predict, EvalOptions, Model, Trainer};
use aqe_wmmse::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AqeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Failed = 7,
    Panic = 8,
}

/// A trained model with the parameters of its best validation epoch.
pub struct AqeModel {
    inner: Model,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AqeDims {
    /// AP antennas.
    pub m: usize,
    /// Users.
    pub k: usize,
    /// RIS elements.
    pub n: usize,
    /// Encoder features.
    pub n_c: usize,
    /// Quantization levels per feature.
    pub levels: usize,
    /// Control message length in bits.
    pub bits: usize,
    /// Wire message length in bytes.
    pub wire_bytes: usize,
    pub power_w: f64,
    pub sigma2: f64,
}

/// One channel realization with its labels. Sizes in doubles:
/// `h_au` 2KM, `h_ar` 2NM, `h_ru` 2KN, `w_opt` 2MK, `theta_opt` N.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AqeChannel {
    pub h_au: *const f64,
    pub h_ar: *const f64,
    pub h_ru: *const f64,
    pub w_opt: *const f64,
    pub theta_opt: *const f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> AqeStatus {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Dimension(_) => AqeStatus::InvalidArgument,
        Error::Io(_) => AqeStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Message(_) => AqeStatus::Format,
        Error::NonFinite(_) | Error::NotPositiveDefinite(_) | Error::Degenerate(_) => AqeStatus::Numerical,
        _ => AqeStatus::Failed,
    }
}

type FfiResult = std::result::Result<(), (AqeStatus, String)>;

fn fail(status: AqeStatus, msg: impl Into<String>) -> FfiResult {
    Err((status, msg.into()))
}

fn lift<T>(r: aqe_wmmse::Result<T>) -> std::result::Result<T, (AqeStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

/// Runs `f`, recording any error or panic for [`aqe_last_error`].
fn guard(f: impl FnOnce() -> FfiResult) -> AqeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AqeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside the library");
            AqeStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> std::result::Result<&'a [f64], (AqeStatus, String)> {
    if p.is_null() {
        return Err((AqeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn model_ref<'a>(model: *const AqeModel) -> std::result::Result<&'a Model, (AqeStatus, String)> {
    if model.is_null() {
        return Err((AqeStatus::NullPointer, "model is null".into()));
    }
    Ok(unsafe { &(*model).inner })
}

unsafe fn read_channel(model: &Model, ch: *const AqeChannel) -> std::result::Result<ChannelSample, (AqeStatus, String)> {
    if ch.is_null() {
        return Err((AqeStatus::NullPointer, "channel is null".into()));
    }
    let ch = &*ch;
    let c = &model.cfg;
    let (m, k, n) = (c.m, c.k, c.n);
    Ok(ChannelSample {
        h_au: lift(CMatrix::from_interleaved(k, m, slice(ch.h_au, 2 * k * m, "h_au")?))?,
        h_ar: lift(CMatrix::from_interleaved(n, m, slice(ch.h_ar, 2 * n * m, "h_ar")?))?,
        h_ru: lift(CMatrix::from_interleaved(k, n, slice(ch.h_ru, 2 * k * n, "h_ru")?))?,
        w_opt: lift(CMatrix::from_interleaved(m, k, slice(ch.w_opt, 2 * m * k, "w_opt")?))?,
        theta_opt: slice(ch.theta_opt, n, "theta_opt")?.to_vec(),
    })
}

fn wire_bytes(model: &Model) -> usize {
    3 + model.cfg.bits().div_ceil(8)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aqe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`) and returns the full length
/// including the terminator.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn aqe_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads a training checkpoint; the handle holds its best parameters.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be valid for
/// one write.
#[no_mangle]
pub unsafe extern "C" fn aqe_model_load(path: *const c_char, out: *mut *mut AqeModel) -> AqeStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(AqeStatus::NullPointer, "path or out is null");
        }
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(AqeStatus::InvalidArgument, "path is not UTF-8");
        };
        let model = lift(Trainer::load(Path::new(p)))?.best_model();
        *out = Box::into_raw(Box::new(AqeModel { inner: model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`aqe_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aqe_model_free(model: *mut AqeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn aqe_model_dims(model: *const AqeModel, out: *mut AqeDims) -> AqeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return fail(AqeStatus::NullPointer, "out is null");
        }
        let c = &m.cfg;
        *out = AqeDims {
            m: c.m,
            k: c.k,
            n: c.n,
            n_c: c.n_c,
            levels: c.d,
            bits: c.bits(),
            wire_bytes: wire_bytes(m),
            power_w: c.p,
            sigma2: c.sigma2,
        };
        Ok(())
    })
}

/// Access-point side for one channel: writes the decoded phases (`N`
/// doubles), the beamformer (`2MK` doubles) and the wire message
/// (`msg_len` receives its length; `AQE_STATUS_BUFFER_TOO_SMALL` when
/// `msg_cap` is short).
///
/// # Safety
/// All pointers must be valid for the sizes given by [`aqe_model_dims`].
#[no_mangle]
pub unsafe extern "C" fn aqe_model_run(
    model: *const AqeModel,
    channel: *const AqeChannel,
    theta_out: *mut f64,
    w_out: *mut f64,
    msg_out: *mut u8,
    msg_cap: usize,
    msg_len: *mut usize,
) -> AqeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if theta_out.is_null() || w_out.is_null() || msg_out.is_null() || msg_len.is_null() {
            return fail(AqeStatus::NullPointer, "output pointer is null");
        }
        let sample = read_channel(m, channel)?;
        if !sample.has_labels() {
            return fail(AqeStatus::InvalidArgument, "w_opt is all zero");
        }
        let pred = lift(predict(m.method, Some(m), std::slice::from_ref(&sample), &m.cfg, &EvalOptions::default()))?
            .pop()
            .expect("one prediction per sample");
        let bits = pred.bits.unwrap_or_default();
        let quantized = lift(aqe_wmmse::aqe::unpack_bits(&bits, m.cfg.d))?;
        let wire = lift(lift(ControlMessage::from_quantized(Vec::new(), quantized, m.cfg.d))?.to_wire(m.cfg.d))?;
        *msg_len = wire.len();
        if msg_cap < wire.len() {
            return fail(AqeStatus::BufferTooSmall, format!("message needs {} bytes", wire.len()));
        }
        ptr::copy_nonoverlapping(wire.as_ptr(), msg_out, wire.len());
        ptr::copy_nonoverlapping(pred.theta.as_ptr(), theta_out, pred.theta.len());
        let w = pred.w.to_interleaved();
        ptr::copy_nonoverlapping(w.as_ptr(), w_out, w.len());
        Ok(())
    })
}

/// Controller side: phases (`N` doubles) decoded from a wire message.
///
/// # Safety
/// `msg` must be valid for `len` bytes and `theta_out` for `N` doubles.
#[no_mangle]
pub unsafe extern "C" fn aqe_model_decode(
    model: *const AqeModel,
    msg: *const u8,
    len: usize,
    theta_out: *mut f64,
) -> AqeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if msg.is_null() || theta_out.is_null() {
            return fail(AqeStatus::NullPointer, "message or output is null");
        }
        let cm = lift(ControlMessage::from_wire(std::slice::from_raw_parts(msg, len), m.cfg.d))?;
        if cm.quantized.len() != m.cfg.n_c {
            return fail(
                AqeStatus::InvalidArgument,
                format!("message carries {} features, model expects {}", cm.quantized.len(), m.cfg.n_c),
            );
        }
        let theta = lift(m.decode_phases(&cm.quantized))?;
        ptr::copy_nonoverlapping(theta.as_ptr(), theta_out, theta.len());
        Ok(())
    })
}

/// Weighted sum-rate of beamformer `w` (2MK doubles) with RIS phases
/// `theta` (N doubles) on `channel`, in the model's scenario.
///
/// # Safety
/// Pointers must be valid for the sizes given by [`aqe_model_dims`].
#[no_mangle]
pub unsafe extern "C" fn aqe_sum_rate(
    model: *const AqeModel,
    channel: *const AqeChannel,
    theta: *const f64,
    w: *const f64,
    rate_out: *mut f64,
) -> AqeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if rate_out.is_null() {
            return fail(AqeStatus::NullPointer, "rate_out is null");
        }
        let sample = read_channel(m, channel)?;
        let c = &m.cfg;
        let w = lift(CMatrix::from_interleaved(c.m, c.k, slice(w, 2 * c.m * c.k, "w")?))?;
        let theta = slice(theta, c.n, "theta")?;
        *rate_out = lift(achievable_rates(&w, theta, &sample, c))?.weighted_sum;
        Ok(())
    })
}
