//! C ABI over `wellcast`.
//!
//! Every function returns a [`WcStatus`]; outputs go through pointer
//! arguments. On failure the message is kept per thread and can be fetched
//! with [`wc_last_error_message`]. Handles are opaque and must be released
//! with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use wellcast::data::{load_series, Channel, Normalizer, Window};
use wellcast::enkf::{kalman_gain, FilterConfig};
use wellcast::model::{forward, ModelWeights};
use wellcast::pipeline::run_assimilation;
use wellcast::stats::{gaussian_kl, jeffreys_j, shapiro_wilk, GaussianSummary};
use wellcast::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    Numeric = 6,
    Internal = 7,
}

/// Trained regressor.
pub struct WcModel {
    weights: ModelWeights,
}

/// Per-channel scaling.
pub struct WcNormalizer {
    norm: Normalizer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (WcStatus, String);

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WcStatus {
    match e {
        Error::Io { .. } => WcStatus::Io,
        Error::Parse { .. } | Error::Json { .. } | Error::Csv(_) | Error::Schema(_) => WcStatus::Parse,
        Error::Shape(_) | Error::LengthMismatch { .. } | Error::TooShort { .. } => WcStatus::Shape,
        Error::Divergence { .. }
        | Error::NonFiniteMember { .. }
        | Error::SingularInnovation(_)
        | Error::Degenerate(_) => WcStatus::Numeric,
        Error::Step { source, .. } => status_of(source),
        _ => WcStatus::InvalidArgument,
    }
}

fn lib(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WcStatus::Ok,
        Ok(Err((status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            WcStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err((WcStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (WcStatus::InvalidArgument, format!("{name} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in bytes,
/// excluding the terminator; 0 if there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn wc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a weights container written by `wellcast train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wc_model_load(path: *const c_char, out: *mut *mut WcModel) -> WcStatus {
    guard(|| {
        non_null(out, "out")?;
        let weights = ModelWeights::load(path_arg(path, "path")?).map_err(lib)?;
        *out = Box::into_raw(Box::new(WcModel { weights }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`wc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wc_model_free(model: *mut WcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wc_model_window(model: *const WcModel, out: *mut usize) -> WcStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).weights.window();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wc_model_get_bias(model: *const WcModel, out: *mut f64) -> WcStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).weights.bias();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wc_model_set_bias(model: *mut WcModel, bias: f64) -> WcStatus {
    guard(|| {
        non_null(model, "model")?;
        if !bias.is_finite() {
            return Err((WcStatus::InvalidArgument, format!("bias {bias} is not finite")));
        }
        (*model).weights.set_bias(bias);
        Ok(())
    })
}

/// One-step-ahead prediction in normalized units. Index 0 of each history is
/// the most recent entry; `theta_hist` holds `width` rows of
/// `[thp_1, thp_2, thp_3, temperature]`; `u_hist[0]` is the choke for the
/// predicted step.
///
/// # Safety
/// `q_hist` and `u_hist` must hold `width` values, `theta_hist` `4 * width`;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wc_model_forward(
    model: *const WcModel,
    q_hist: *const f64,
    theta_hist: *const f64,
    u_hist: *const f64,
    width: usize,
    out: *mut f64,
) -> WcStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let theta = slice_arg(theta_hist, 4 * width, "theta_hist")?;
        let window = Window {
            q_hist: slice_arg(q_hist, width, "q_hist")?.to_vec(),
            theta_hist: theta.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            u_hist: slice_arg(u_hist, width, "u_hist")?.to_vec(),
            target: 0.0,
        };
        *out = forward(&window, &(*model).weights).map_err(lib)?;
        Ok(())
    })
}

/// Loads a normalizer JSON written by `wellcast train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wc_normalizer_load(path: *const c_char, out: *mut *mut WcNormalizer) -> WcStatus {
    guard(|| {
        non_null(out, "out")?;
        let norm = Normalizer::load(path_arg(path, "path")?).map_err(lib)?;
        *out = Box::into_raw(Box::new(WcNormalizer { norm }));
        Ok(())
    })
}

/// # Safety
/// `norm` must come from [`wc_normalizer_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wc_normalizer_free(norm: *mut WcNormalizer) {
    if !norm.is_null() {
        drop(Box::from_raw(norm));
    }
}

fn channel(index: u32) -> Result<Channel, Failure> {
    Channel::ALL
        .get(index as usize)
        .copied()
        .ok_or((WcStatus::InvalidArgument, format!("channel index {index} out of range 0..6")))
}

/// Channel indices: 0 flow_rate, 1-3 thp_1..3, 4 temperature, 5 choke.
///
/// # Safety
/// `norm` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wc_normalizer_normalize(norm: *const WcNormalizer, channel_index: u32, x: f64, out: *mut f64) -> WcStatus {
    guard(|| {
        non_null(norm, "norm")?;
        non_null(out, "out")?;
        *out = (*norm).norm.normalize_value(channel(channel_index)?, x);
        Ok(())
    })
}

/// # Safety
/// `norm` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wc_normalizer_denormalize(norm: *const WcNormalizer, channel_index: u32, x: f64, out: *mut f64) -> WcStatus {
    guard(|| {
        non_null(norm, "norm")?;
        non_null(out, "out")?;
        *out = (*norm).norm.denormalize_value(channel(channel_index)?, x);
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wc_gaussian_kl(mu_p: f64, sigma_p: f64, mu_q: f64, sigma_q: f64, out: *mut f64) -> WcStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = gaussian_kl(&GaussianSummary::new(mu_p, sigma_p), &GaussianSummary::new(mu_q, sigma_q)).map_err(lib)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wc_jeffreys_j(mu_p: f64, sigma_p: f64, mu_q: f64, sigma_q: f64, out: *mut f64) -> WcStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = jeffreys_j(&GaussianSummary::new(mu_p, sigma_p), &GaussianSummary::new(mu_q, sigma_q)).map_err(lib)?;
        Ok(())
    })
}

/// Gain for a scalar observation of the 2-state `[q, w_bias]`; `p` is
/// row-major 2x2.
///
/// # Safety
/// `p` must hold 4 values, `m` 2; `k_out` must have room for 2.
#[no_mangle]
pub unsafe extern "C" fn wc_kalman_gain(p: *const f64, m: *const f64, r: f64, k_out: *mut f64) -> WcStatus {
    guard(|| {
        non_null(k_out, "k_out")?;
        let p = slice_arg(p, 4, "p")?;
        let m = slice_arg(m, 2, "m")?;
        let k = kalman_gain(&[[p[0], p[1]], [p[2], p[3]]], &[m[0], m[1]], r).map_err(lib)?;
        *k_out = k[0];
        *k_out.add(1) = k[1];
        Ok(())
    })
}

/// # Safety
/// `samples` must hold `n` values; `w_out` and `p_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wc_shapiro_wilk(samples: *const f64, n: usize, w_out: *mut f64, p_out: *mut f64) -> WcStatus {
    guard(|| {
        non_null(w_out, "w_out")?;
        non_null(p_out, "p_out")?;
        let res = shapiro_wilk(slice_arg(samples, n, "samples")?).map_err(lib)?;
        *w_out = res.w;
        *p_out = res.p_value;
        Ok(())
    })
}

/// Runs the filter over a raw CSV record and writes the trace CSV to
/// `out_path`; other filter settings take their defaults.
///
/// # Safety
/// All paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn wc_assimilate_csv(
    data_path: *const c_char,
    weights_path: *const c_char,
    normalizer_path: *const c_char,
    n_members: usize,
    seed: u64,
    out_path: *const c_char,
) -> WcStatus {
    guard(|| {
        let weights = ModelWeights::load(path_arg(weights_path, "weights_path")?).map_err(lib)?;
        let norm = Normalizer::load(path_arg(normalizer_path, "normalizer_path")?).map_err(lib)?;
        let raw = load_series(path_arg(data_path, "data_path")?).map_err(lib)?;
        let out = path_arg(out_path, "out_path")?;
        let series = norm.normalize(&raw).map_err(lib)?;
        let config = FilterConfig {
            n_members,
            seed,
            ..FilterConfig::default()
        };
        let (trace, _) = run_assimilation(&series, &weights, &norm, &config).map_err(lib)?;
        trace.save(out).map_err(lib)
    })
}

/// Library version, NUL-terminated, static storage.
#[no_mangle]
pub extern "C" fn wc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
