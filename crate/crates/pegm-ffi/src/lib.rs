//! C ABI for the pegm crate.
//!
//! Conventions: every object crossing the boundary is an opaque handle owned
//! by this library and released with its paired `_free` function; every
//! fallible call returns a `PegmStatus` and writes results through out
//! pointers only on `PEGM_STATUS_OK`; the failure message for the most recent
//! error on the calling thread is available via `pegm_last_error`. Matrices
//! travel as dense row-major `double` buffers sized by the caller. All
//! functions are panic-safe: a Rust panic is caught and surfaced as
//! `PEGM_STATUS_PANIC` instead of unwinding into C.

use libc::{c_char, c_int};
use pegm::optimize::{self, FitConfig, StepSchedule};
use pegm::sampler;
use pegm::{importance, pseudo, DataMatrix, ModelFamily, PegmError, ThetaMatrix};
use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PegmStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments broke an API contract (shapes, ranges, asymmetry).
    Contract = 2,
    /// Parameter outside the family's feasible set.
    Infeasible = 3,
    /// Value outside a mathematical domain.
    Domain = 4,
    /// Importance weights degenerated; increase the sample size.
    Degeneracy = 5,
    /// A resource guard or sampling budget was exceeded.
    Resource = 6,
    /// File or serialization failure.
    Io = 7,
    /// A fit diverged or has no finite optimum.
    Diverged = 8,
    /// Internal panic was caught; state is consistent but the call failed.
    Panic = 9,
    /// Any other failure; see pegm_last_error.
    Other = 10,
}

/// Model family selector accepted by the `family` parameters.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PegmFamily {
    /// Binary nodes in {0,1}.
    Ising = 0,
    /// Count nodes; interactions must be nonpositive.
    Poisson = 1,
    /// Real nodes; the parameter must be positive definite.
    Gaussian = 2,
}

/// Opaque symmetric parameter matrix.
pub struct PegmTheta(ThetaMatrix);

/// Opaque observation matrix.
pub struct PegmData(DataMatrix);

/// Fit summary filled by pegm_fit.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PegmFitInfo {
    pub iterations: usize,
    /// 1 when the step-size criterion was met within max_iters.
    pub converged: c_int,
    /// Effective sample size of the final diagnostic batch.
    pub ess: f64,
    /// Normalizer ratio estimate at the solution.
    pub z_ratio: f64,
}

/// Options for pegm_fit; obtain defaults from pegm_fit_options_default.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PegmFitOptions {
    /// Initial step size.
    pub gamma0: f64,
    /// Robbins-Monro decay horizon in iterations.
    pub t0: f64,
    pub max_iters: usize,
    /// Relative step norm that counts as converged.
    pub tol: f64,
    /// Monte Carlo batch size per iteration; 0 picks a size from p.
    pub mc_n: usize,
    pub seed: u64,
    /// L1 penalty; 0 disables it.
    pub lambda: f64,
    /// 1 to penalize diagonal entries as well.
    pub penalize_diagonal: c_int,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_last_error(msg: &str) {
    LAST_ERROR.with(|slot| {
        let mut bytes = msg.as_bytes().to_vec();
        bytes.push(0);
        *slot.borrow_mut() = bytes;
    });
}

fn status_of(err: &PegmError) -> PegmStatus {
    match err {
        PegmError::Contract(_) => PegmStatus::Contract,
        PegmError::Infeasible(_) => PegmStatus::Infeasible,
        PegmError::Domain(_) | PegmError::RateOverflow { .. } => PegmStatus::Domain,
        PegmError::WeightDegeneracy { .. } => PegmStatus::Degeneracy,
        PegmError::AcceptRejectExhausted { .. } | PegmError::Resource(_) => PegmStatus::Resource,
        PegmError::Io(_) | PegmError::Csv(_) | PegmError::Json(_) => PegmStatus::Io,
        PegmError::Divergence(_) | PegmError::Separation { .. } => PegmStatus::Diverged,
        PegmError::ChainStalled { .. } => PegmStatus::Other,
    }
}

fn fail(err: PegmError) -> PegmStatus {
    let status = status_of(&err);
    set_last_error(&err.to_string());
    status
}

/// Runs a closure with panic containment; the error path stores a message.
fn guarded(body: impl FnOnce() -> PegmStatus) -> PegmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            set_last_error(&format!("internal panic: {msg}"));
            PegmStatus::Panic
        }
    }
}

fn family_from(raw: c_int) -> Result<ModelFamily, PegmError> {
    match raw {
        0 => Ok(ModelFamily::Ising),
        1 => Ok(ModelFamily::PoissonGm),
        2 => Ok(ModelFamily::GaussianOracle),
        other => Err(PegmError::contract(format!(
            "unknown family code {other}; use 0 (ising), 1 (poisson), or 2 (gaussian)"
        ))),
    }
}

macro_rules! require_nonnull {
    ($ptr:expr) => {
        if $ptr.is_null() {
            set_last_error(concat!("null argument: ", stringify!($ptr)));
            return PegmStatus::NullArgument;
        }
    };
}

/// Copies the calling thread's most recent error message into `buf` as a
/// NUL-terminated string, truncating to `cap` bytes. Returns the full
/// message length in bytes excluding the NUL, so `ret >= cap` means the
/// message was truncated. A zero `cap` or null `buf` only measures.
#[no_mangle]
pub unsafe extern "C" fn pegm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let stored = slot.borrow();
        let msg: &[u8] = if stored.is_empty() { b"\0" } else { &stored };
        let len = msg.len() - 1;
        if !buf.is_null() && cap > 0 {
            let n = len.min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        len
    })
}

/// Library version as a static NUL-terminated string; never freed.
#[no_mangle]
pub extern "C" fn pegm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a p x p symmetric parameter from a dense row-major buffer of
/// p*p doubles. The buffer must be exactly symmetric.
///
/// # Safety
/// `values` must point to `p * p` readable doubles and `out` to a writable
/// pointer slot. On success `*out` owns the handle; release it with
/// `pegm_theta_free`.
#[no_mangle]
pub unsafe extern "C" fn pegm_theta_new(
    p: usize,
    values: *const f64,
    out: *mut *mut PegmTheta,
) -> PegmStatus {
    require_nonnull!(values);
    require_nonnull!(out);
    let slice = std::slice::from_raw_parts(values, p * p);
    guarded(|| {
        let array = ndarray::Array2::from_shape_vec((p, p), slice.to_vec())
            .expect("length checked by construction");
        match ThetaMatrix::new(array) {
            Ok(theta) => {
                *out = Box::into_raw(Box::new(PegmTheta(theta)));
                PegmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Creates an all-zero p x p parameter.
///
/// # Safety
/// `out` must point to a writable pointer slot. On success `*out` owns the
/// handle; release it with `pegm_theta_free`.
#[no_mangle]
pub unsafe extern "C" fn pegm_theta_zeros(p: usize, out: *mut *mut PegmTheta) -> PegmStatus {
    require_nonnull!(out);
    if p == 0 {
        set_last_error("theta must have p >= 1");
        return PegmStatus::Contract;
    }
    *out = Box::into_raw(Box::new(PegmTheta(ThetaMatrix::zeros(p))));
    PegmStatus::Ok
}

/// Node count of a parameter handle; 0 if the handle is null.
///
/// # Safety
/// `theta` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pegm_theta_dim(theta: *const PegmTheta) -> usize {
    if theta.is_null() {
        return 0;
    }
    (*theta).0.p()
}

/// Sets entry (j, k) and its mirror (k, j).
///
/// # Safety
/// `theta` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pegm_theta_set(
    theta: *mut PegmTheta,
    j: usize,
    k: usize,
    value: f64,
) -> PegmStatus {
    require_nonnull!(theta);
    let t = &mut (*theta).0;
    if j >= t.p() || k >= t.p() {
        set_last_error("index out of range");
        return PegmStatus::Contract;
    }
    if !value.is_finite() {
        set_last_error("value must be finite");
        return PegmStatus::Contract;
    }
    t.set(j, k, value);
    PegmStatus::Ok
}

/// Reads entry (j, k).
///
/// # Safety
/// `theta` must be a live handle and `out` a writable double.
#[no_mangle]
pub unsafe extern "C" fn pegm_theta_get(
    theta: *const PegmTheta,
    j: usize,
    k: usize,
    out: *mut f64,
) -> PegmStatus {
    require_nonnull!(theta);
    require_nonnull!(out);
    let t = &(*theta).0;
    if j >= t.p() || k >= t.p() {
        set_last_error("index out of range");
        return PegmStatus::Contract;
    }
    *out = t.get(j, k);
    PegmStatus::Ok
}

/// Copies the full matrix into a caller buffer of p*p doubles, row-major.
///
/// # Safety
/// `theta` must be a live handle and `out` must point to `p * p` writable
/// doubles, with p from `pegm_theta_dim`.
#[no_mangle]
pub unsafe extern "C" fn pegm_theta_copy(theta: *const PegmTheta, out: *mut f64) -> PegmStatus {
    require_nonnull!(theta);
    require_nonnull!(out);
    let t = &(*theta).0;
    let values = t.values();
    let slice = values.as_slice().expect("theta storage is standard layout");
    std::ptr::copy_nonoverlapping(slice.as_ptr(), out, slice.len());
    PegmStatus::Ok
}

/// Releases a parameter handle; a null pointer is ignored.
///
/// # Safety
/// `theta` must be null or a handle not freed before; it is dead afterwards.
#[no_mangle]
pub unsafe extern "C" fn pegm_theta_free(theta: *mut PegmTheta) {
    if !theta.is_null() {
        drop(Box::from_raw(theta));
    }
}

/// Creates an n x p observation matrix from a dense row-major buffer,
/// validating every cell against the family's support.
///
/// # Safety
/// `rows` must point to `n * p` readable doubles and `out` to a writable
/// pointer slot. On success `*out` owns the handle; release it with
/// `pegm_data_free`.
#[no_mangle]
pub unsafe extern "C" fn pegm_data_new(
    family: c_int,
    n: usize,
    p: usize,
    rows: *const f64,
    out: *mut *mut PegmData,
) -> PegmStatus {
    require_nonnull!(rows);
    require_nonnull!(out);
    let slice = std::slice::from_raw_parts(rows, n * p);
    guarded(|| {
        let family = match family_from(family) {
            Ok(f) => f,
            Err(e) => return fail(e),
        };
        let array = ndarray::Array2::from_shape_vec((n, p), slice.to_vec())
            .expect("length checked by construction");
        match DataMatrix::new(array, family) {
            Ok(data) => {
                *out = Box::into_raw(Box::new(PegmData(data)));
                PegmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Row count of a data handle; 0 if the handle is null.
///
/// # Safety
/// `data` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pegm_data_rows(data: *const PegmData) -> usize {
    if data.is_null() {
        return 0;
    }
    (*data).0.n()
}

/// Column count of a data handle; 0 if the handle is null.
///
/// # Safety
/// `data` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pegm_data_cols(data: *const PegmData) -> usize {
    if data.is_null() {
        return 0;
    }
    (*data).0.p()
}

/// Copies the observations into a caller buffer of n*p doubles, row-major.
///
/// # Safety
/// `data` must be a live handle and `out` must point to `n * p` writable
/// doubles, with n and p from `pegm_data_rows` / `pegm_data_cols`.
#[no_mangle]
pub unsafe extern "C" fn pegm_data_copy(data: *const PegmData, out: *mut f64) -> PegmStatus {
    require_nonnull!(data);
    require_nonnull!(out);
    let rows = (*data).0.rows();
    let slice = rows.as_slice().expect("data storage is standard layout");
    std::ptr::copy_nonoverlapping(slice.as_ptr(), out, slice.len());
    PegmStatus::Ok
}

/// Releases a data handle; a null pointer is ignored.
///
/// # Safety
/// `data` must be null or a handle not freed before; it is dead afterwards.
#[no_mangle]
pub unsafe extern "C" fn pegm_data_free(data: *mut PegmData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Draws n rows from the model with a Gibbs chain (systematic sweeps,
/// `burn_in` discarded sweeps, every `thin`-th sweep kept). Deterministic
/// for a fixed seed.
///
/// # Safety
/// `theta` must be a live handle and `out` a writable pointer slot. On
/// success `*out` owns the handle; release it with `pegm_data_free`.
#[no_mangle]
pub unsafe extern "C" fn pegm_gibbs_sample(
    family: c_int,
    theta: *const PegmTheta,
    n: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
    out: *mut *mut PegmData,
) -> PegmStatus {
    require_nonnull!(theta);
    require_nonnull!(out);
    let theta = &(*theta).0;
    guarded(|| {
        let family = match family_from(family) {
            Ok(f) => f,
            Err(e) => return fail(e),
        };
        match sampler::gibbs_sample(family, theta, n, burn_in, thin, seed) {
            Ok(data) => {
                *out = Box::into_raw(Box::new(PegmData(data)));
                PegmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Estimates the normalizer ratio z(theta)/z(diag theta) and, when
/// `grad_log_z` is non-null, the gradient of log z as a p*p row-major
/// matrix, from `n` importance draws. `ess` reports the effective sample
/// size of the weights; `log_z_hat` the absolute log-normalizer estimate.
/// Any of the scalar out pointers may be null to skip that output.
///
/// # Safety
/// `theta` must be a live handle; non-null out pointers must be writable
/// (`grad_log_z` with room for p*p doubles).
#[no_mangle]
pub unsafe extern "C" fn pegm_estimate(
    family: c_int,
    theta: *const PegmTheta,
    n: usize,
    seed: u64,
    z_ratio: *mut f64,
    log_z_hat: *mut f64,
    ess: *mut f64,
    grad_log_z: *mut f64,
) -> PegmStatus {
    require_nonnull!(theta);
    let theta = &(*theta).0;
    guarded(|| {
        let family = match family_from(family) {
            Ok(f) => f,
            Err(e) => return fail(e),
        };
        let batch = match sampler::sample_independence(family, theta, n, seed) {
            Ok(b) => b,
            Err(e) => return fail(e),
        };
        match importance::estimate_grad_log_z(family, theta, &batch) {
            Ok(est) => {
                if !z_ratio.is_null() {
                    *z_ratio = est.z_ratio;
                }
                if !log_z_hat.is_null() {
                    *log_z_hat = est.log_z_hat;
                }
                if !ess.is_null() {
                    *ess = est.ess;
                }
                if !grad_log_z.is_null() {
                    let slice = est
                        .grad_log_z
                        .as_slice()
                        .expect("estimates are standard layout");
                    std::ptr::copy_nonoverlapping(slice.as_ptr(), grad_log_z, slice.len());
                }
                PegmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Fills `out` with the default fit options.
///
/// # Safety
/// `out` must point to a writable PegmFitOptions.
#[no_mangle]
pub unsafe extern "C" fn pegm_fit_options_default(out: *mut PegmFitOptions) -> PegmStatus {
    require_nonnull!(out);
    let d = FitConfig::default();
    let t0 = match d.schedule {
        StepSchedule::RobbinsMonro { t0 } => t0,
        StepSchedule::Fixed => 0.0,
    };
    *out = PegmFitOptions {
        gamma0: d.gamma0,
        t0,
        max_iters: d.max_iters,
        tol: d.tol,
        mc_n: d.mc_n,
        seed: d.seed,
        lambda: d.lambda,
        penalize_diagonal: i32::from(d.penalize_diagonal),
    };
    PegmStatus::Ok
}

/// Maximum likelihood fit (L1-penalized when options.lambda > 0) by
/// stochastic proximal gradient ascent. On success `*theta_out` holds the
/// estimate and `info`, when non-null, the run summary.
///
/// # Safety
/// `data` must be a live handle, `options` readable, `theta_out` a writable
/// pointer slot, and `info` null or writable. On success `*theta_out` owns
/// the handle; release it with `pegm_theta_free`.
#[no_mangle]
pub unsafe extern "C" fn pegm_fit(
    family: c_int,
    data: *const PegmData,
    options: *const PegmFitOptions,
    theta_out: *mut *mut PegmTheta,
    info: *mut PegmFitInfo,
) -> PegmStatus {
    require_nonnull!(data);
    require_nonnull!(options);
    require_nonnull!(theta_out);
    let data = &(*data).0;
    let o = *options;
    guarded(|| {
        let family = match family_from(family) {
            Ok(f) => f,
            Err(e) => return fail(e),
        };
        let config = FitConfig {
            gamma0: o.gamma0,
            schedule: if o.t0 > 0.0 {
                StepSchedule::RobbinsMonro { t0: o.t0 }
            } else {
                StepSchedule::Fixed
            },
            max_iters: o.max_iters,
            tol: o.tol,
            mc_n: o.mc_n,
            seed: o.seed,
            lambda: o.lambda,
            penalize_diagonal: o.penalize_diagonal != 0,
        };
        let result = if o.lambda > 0.0 {
            optimize::penalized_fit(family, data, &config)
        } else {
            optimize::mle_fit(family, data, &config)
        };
        match result {
            Ok(fit) => {
                if !info.is_null() {
                    *info = PegmFitInfo {
                        iterations: fit.iterations,
                        converged: i32::from(fit.converged),
                        ess: fit.diagnostics.ess,
                        z_ratio: fit.diagnostics.z_ratio,
                    };
                }
                *theta_out = Box::into_raw(Box::new(PegmTheta(fit.theta_hat)));
                PegmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Node-wise pseudo-likelihood fit with an optional L1 penalty
/// (lambda = 0 for the plain fit). Discrete families only.
///
/// # Safety
/// `data` must be a live handle and `theta_out` a writable pointer slot. On
/// success `*theta_out` owns the handle; release it with `pegm_theta_free`.
#[no_mangle]
pub unsafe extern "C" fn pegm_mple_fit(
    family: c_int,
    data: *const PegmData,
    lambda: f64,
    theta_out: *mut *mut PegmTheta,
) -> PegmStatus {
    require_nonnull!(data);
    require_nonnull!(theta_out);
    let data = &(*data).0;
    guarded(|| {
        let family = match family_from(family) {
            Ok(f) => f,
            Err(e) => return fail(e),
        };
        match pseudo::mple_fit(family, data, lambda) {
            Ok(fit) => {
                *theta_out = Box::into_raw(Box::new(PegmTheta(fit.theta_hat)));
                PegmStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
