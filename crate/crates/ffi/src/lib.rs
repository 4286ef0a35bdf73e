//! C ABI over the `fedrec` core.
//!
//! Every fallible function returns a [`FedrecStatus`] and writes its result
//! through an out-pointer. On failure the message is kept per thread and can
//! be copied out with [`fedrec_last_error`]. Accountants and models are
//! opaque handles that must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use fedrec::eval::{hits_at_k, ndcg_at_k};
use fedrec::federation::Delta;
use fedrec::linalg::l2_norm;
use fedrec::model::ParamSet;
use fedrec::privacy::{calibrate_noise, clip, federated_epsilon, sensitivity_bound, PrivacyAccountant};
use fedrec::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedrecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NonFinite = 4,
    Io = 5,
    Format = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Rényi-DP accountant for federated rounds.
pub struct FedrecAccountant(PrivacyAccountant);

/// Model parameters loaded from a checkpoint.
pub struct FedrecModel(ParamSet);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> FedrecStatus {
    match err {
        Error::DimensionMismatch(_) => FedrecStatus::DimensionMismatch,
        Error::NonFinite(_) => FedrecStatus::NonFinite,
        Error::Io { .. } => FedrecStatus::Io,
        Error::Checkpoint(_) | Error::MalformedRow { .. } | Error::Json(_) => FedrecStatus::Format,
        _ => FedrecStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (FedrecStatus, String)>) -> FedrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FedrecStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FedrecStatus::Panic
        }
    }
}

fn core<T>(r: fedrec::Result<T>) -> Result<T, (FedrecStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FedrecStatus, String) {
    (FedrecStatus::NullPointer, format!("{what} is null"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (FedrecStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (FedrecStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to fit, into `buf`. Returns the full message length in bytes
/// (excluding the terminator); `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fedrec_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Clips `values` to L2 norm at most `bound`, writing `len` values to `out`.
/// `out` may alias `values`.
///
/// # Safety
/// `values` and `out` must each point to `len` valid `double`s.
#[no_mangle]
pub unsafe extern "C" fn fedrec_clip(values: *const f64, len: usize, bound: f64, out: *mut f64) -> FedrecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let delta = core(Delta::new(input(values, len, "values")?.to_vec()))?;
        let clipped = core(clip(&delta, bound))?;
        ptr::copy(clipped.values().as_ptr(), out, len);
        Ok(())
    })
}

/// L2 norm of `values`.
///
/// # Safety
/// `values` must point to `len` valid `double`s and `out` to one.
#[no_mangle]
pub unsafe extern "C" fn fedrec_l2_norm(values: *const f64, len: usize, out: *mut f64) -> FedrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = core(l2_norm(input(values, len, "values")?))?;
        Ok(())
    })
}

/// Sensitivity `2S/M` of the mean of `m` updates clipped to `bound`.
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn fedrec_sensitivity(bound: f64, m: usize, out: *mut f64) -> FedrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = core(sensitivity_bound(bound, m))?;
        Ok(())
    })
}

/// Fraction of 1-based `ranks` at most `k`.
///
/// # Safety
/// `ranks` must point to `len` valid `size_t`s and `out` to a `double`.
#[no_mangle]
pub unsafe extern "C" fn fedrec_hits_at_k(ranks: *const usize, len: usize, k: usize, out: *mut f64) -> FedrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = core(hits_at_k(input(ranks, len, "ranks")?, k))?;
        Ok(())
    })
}

/// Mean binary-relevance nDCG@k over 1-based `ranks`.
///
/// # Safety
/// `ranks` must point to `len` valid `size_t`s and `out` to a `double`.
#[no_mangle]
pub unsafe extern "C" fn fedrec_ndcg_at_k(ranks: *const usize, len: usize, k: usize, out: *mut f64) -> FedrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let ranks = input(ranks, len, "ranks")?;
        if ranks.is_empty() {
            return core(Err(Error::Empty("ranks")));
        }
        let total = ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<fedrec::Result<f64>>();
        *out = core(total)? / ranks.len() as f64;
        Ok(())
    })
}

/// ε after `rounds` rounds sampling `m` of `n` clients with noise multiplier `z`.
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn fedrec_epsilon(n: usize, m: usize, z: f64, rounds: usize, delta: f64, out: *mut f64) -> FedrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = core(federated_epsilon(n, m, z, rounds, delta))?;
        Ok(())
    })
}

/// Smallest noise multiplier whose ε after `rounds` rounds is at most `target`.
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn fedrec_calibrate_noise(
    target: f64,
    n: usize,
    m: usize,
    rounds: usize,
    delta: f64,
    out: *mut f64,
) -> FedrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = core(calibrate_noise(target, n, m, rounds, delta))?;
        Ok(())
    })
}

/// Creates an accountant for rounds sampling `m` of `n` clients.
///
/// # Safety
/// `out` must point to a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn fedrec_accountant_new(n: usize, m: usize, z: f64, out: *mut *mut FedrecAccountant) -> FedrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let acc = core(PrivacyAccountant::for_federation(n, m, z))?;
        *out = Box::into_raw(Box::new(FedrecAccountant(acc)));
        Ok(())
    })
}

/// Records `rounds` more rounds.
///
/// # Safety
/// `acc` must be a live handle from [`fedrec_accountant_new`].
#[no_mangle]
pub unsafe extern "C" fn fedrec_accountant_step(acc: *mut FedrecAccountant, rounds: usize) -> FedrecStatus {
    guard(|| {
        out_ref(acc, "accountant")?.0.steps(rounds);
        Ok(())
    })
}

/// Rounds recorded so far.
///
/// # Safety
/// `acc` must be a live handle and `out` a writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn fedrec_accountant_rounds(acc: *const FedrecAccountant, out: *mut usize) -> FedrecStatus {
    guard(|| {
        let acc = acc.as_ref().ok_or_else(|| null("accountant"))?;
        *out_ref(out, "out")? = acc.0.compositions;
        Ok(())
    })
}

/// Current ε at `delta`; infinity when `delta` is 0.
///
/// # Safety
/// `acc` must be a live handle and `out` a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn fedrec_accountant_epsilon(acc: *const FedrecAccountant, delta: f64, out: *mut f64) -> FedrecStatus {
    guard(|| {
        let acc = acc.as_ref().ok_or_else(|| null("accountant"))?;
        *out_ref(out, "out")? = core(acc.0.epsilon(delta))?;
        Ok(())
    })
}

/// Releases an accountant. Null is ignored.
///
/// # Safety
/// `acc` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fedrec_accountant_free(acc: *mut FedrecAccountant) {
    if !acc.is_null() {
        drop(Box::from_raw(acc));
    }
}

/// Loads a checkpoint written by the `fedrec` command line.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a writable handle pointer.
#[no_mangle]
pub unsafe extern "C" fn fedrec_model_load(path: *const c_char, out: *mut *mut FedrecModel) -> FedrecStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| (FedrecStatus::InvalidArgument, format!("path is not UTF-8: {e}")))?;
        let theta = core(ParamSet::read_checkpoint(Path::new(path)))?;
        *out = Box::into_raw(Box::new(FedrecModel(theta)));
        Ok(())
    })
}

/// Number of scalar parameters in the model.
///
/// # Safety
/// `model` must be a live handle and `out` a writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn fedrec_model_param_count(model: *const FedrecModel, out: *mut usize) -> FedrecStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ref(out, "out")? = model.0.len();
        Ok(())
    })
}

/// Copies the flattened parameters into `buf`, which must hold at least
/// the parameter count.
///
/// # Safety
/// `model` must be a live handle and `buf` point to `len` writable `double`s.
#[no_mangle]
pub unsafe extern "C" fn fedrec_model_params(model: *const FedrecModel, buf: *mut f64, len: usize) -> FedrecStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let values = model.0.flatten();
        if len < values.len() {
            return Err((FedrecStatus::BufferTooSmall, format!("need {} values, buffer holds {len}", values.len())));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fedrec_model_free(model: *mut FedrecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
